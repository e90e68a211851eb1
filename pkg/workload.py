"""
Workload description model: instruction set I, unroll factor u and memory accesses M.

Parses and prints the access grammar (e.g. "REG:4,L1_L:2,L2_L:1") and interleaves
the accesses into the unrolled schedule a backend executes.
"""
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum, IntEnum
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)


class EmberError(Exception):
    """Base class for every error raised by ember"""


class AccessParseError(EmberError, ValueError):
    """Access grammar could not be parsed"""

    SYNTAX = 'syntax'
    DUPLICATE = 'duplicate'
    COUNT = 'count'
    UNKNOWN = 'unknown-token'

    def __init__(self, kind: str, position: int, message: str):
        self.kind = kind
        self.position = position
        super().__init__(f"{message} (at position {position})")


class MemoryLevel(IntEnum):
    """Memory hierarchy levels, ordered from registers to main memory"""
    REG = 0
    L1 = 1
    L2 = 2
    L3 = 3
    RAM = 4


class AccessPattern(Enum):
    """Access pattern of a non-register memory target"""
    LOAD = 'L'
    STORE = 'S'
    LOAD_STORE = 'LS'
    TWO_LOAD_STORE = '2LS'
    PREFETCH = 'P'


@dataclass(frozen=True)
class Target:
    """Memory target of one instruction set: REG, or a level with an access pattern"""
    level: MemoryLevel
    pattern: Optional[AccessPattern] = None

    def __post_init__(self):
        if self.level == MemoryLevel.REG and self.pattern is not None:
            raise ValueError("REG targets carry no access pattern")
        if self.level != MemoryLevel.REG and self.pattern is None:
            raise ValueError(f"{self.level.name} targets need an access pattern")

    @property
    def is_register(self) -> bool:
        return self.level == MemoryLevel.REG

    def __str__(self) -> str:
        if self.is_register:
            return 'REG'
        return f"{self.level.name}_{self.pattern.value}"


REG = Target(MemoryLevel.REG)


def all_targets() -> List[Target]:
    """Every target the grammar accepts, REG first, then level-major order"""
    targets = [REG]
    for level in list(MemoryLevel)[1:]:
        for pattern in AccessPattern:
            targets.append(Target(level, pattern))
    return targets


def parse_target(token: str) -> Target:
    """Parse a single TARGET token such as 'REG' or 'L2_LS'"""
    return _parse_target(token.strip().upper(), 0)


@dataclass(frozen=True)
class AccessGroup:
    """A memory target together with its occurrence weight a"""
    target: Target
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"access count must be >= 1, got {self.count}")


@dataclass(frozen=True)
class AccessSet:
    """Ordered set of access groups M"""
    groups: Tuple[AccessGroup, ...]

    def __post_init__(self):
        object.__setattr__(self, 'groups', tuple(self.groups))
        if not self.groups:
            raise ValueError("an access set needs at least one group")
        seen = set()
        for group in self.groups:
            if group.target in seen:
                raise ValueError(f"duplicate target {group.target}")
            seen.add(group.target)

    @property
    def total(self) -> int:
        return sum(g.count for g in self.groups)

    @property
    def targets(self) -> List[Target]:
        return [g.target for g in self.groups]

    def __str__(self) -> str:
        return format_access_set(self)


@dataclass(frozen=True)
class InstructionSetDef:
    """One set of instructions I, the repeated unit of the stress loop"""
    id: str
    fma_per_set: int
    alu_per_set: int
    instructions_per_set: int
    bytes_per_set: int
    default_unroll: int = 1200
    description: str = ''

    def __post_init__(self):
        if self.fma_per_set < 0 or self.alu_per_set < 0:
            raise ValueError("operation counts must be non-negative")
        if self.fma_per_set + self.alu_per_set < 1:
            raise ValueError("an instruction set needs at least one operation")
        if self.instructions_per_set < self.fma_per_set + self.alu_per_set:
            raise ValueError("instructions_per_set must cover fma_per_set + alu_per_set")
        if self.default_unroll < 1:
            raise ValueError("default_unroll must be positive")


@dataclass(frozen=True)
class WorkloadConfig:
    """Workload phenotype: instruction set id, unroll factor u and accesses M"""
    instruction_set: str
    unroll: int
    accesses: AccessSet

    def __post_init__(self):
        if self.unroll < 1:
            raise ValueError(f"unroll factor must be positive, got {self.unroll}")


@dataclass(frozen=True)
class Schedule:
    """Fully unrolled loop body: one memory target per instruction set slot"""
    slots: Tuple[Target, ...]

    def __len__(self) -> int:
        return len(self.slots)

    def counts(self) -> Dict[Target, int]:
        result: Dict[Target, int] = {}
        for target in self.slots:
            result[target] = result.get(target, 0) + 1
        return result


_LEVELS = {level.name: level for level in MemoryLevel if level != MemoryLevel.REG}
_PATTERNS = {pattern.value: pattern for pattern in AccessPattern}


def _parse_target(token: str, position: int) -> Target:
    if token == 'REG':
        return REG
    if token.startswith('REG'):
        raise AccessParseError(AccessParseError.UNKNOWN, position,
                               f"REG takes no access pattern: '{token}'")
    level_token, sep, pattern_token = token.partition('_')
    if level_token not in _LEVELS:
        raise AccessParseError(AccessParseError.UNKNOWN, position,
                               f"unknown memory level '{level_token}'")
    if not sep or not pattern_token:
        raise AccessParseError(AccessParseError.SYNTAX, position + len(level_token),
                               f"expected '_<PATTERN>' after '{level_token}'")
    if pattern_token not in _PATTERNS:
        raise AccessParseError(AccessParseError.UNKNOWN, position + len(level_token) + 1,
                               f"unknown access pattern '{pattern_token}'")
    return Target(_LEVELS[level_token], _PATTERNS[pattern_token])


def parse_access_set(text: str) -> AccessSet:
    """Parse 'TARGET:COUNT,...' into an AccessSet, keeping textual order"""
    if text is None or not text.strip():
        raise AccessParseError(AccessParseError.SYNTAX, 0, "empty access set")

    groups: List[AccessGroup] = []
    seen: Dict[Target, int] = {}
    position = 0
    for item in text.split(','):
        stripped = item.strip()
        start = position + (len(item) - len(item.lstrip()))
        position += len(item) + 1

        if not stripped:
            raise AccessParseError(AccessParseError.SYNTAX, start, "empty item")
        target_text, sep, count_text = stripped.partition(':')
        if not sep:
            raise AccessParseError(AccessParseError.SYNTAX, start + len(stripped),
                                   f"expected ':' in '{stripped}'")

        target = _parse_target(target_text.strip().upper(), start)

        count_pos = start + len(target_text) + 1
        count_text = count_text.strip()
        digits = count_text[1:] if count_text.startswith(('-', '+')) else count_text
        if not digits or not digits.isdigit() or not digits.isascii():
            raise AccessParseError(AccessParseError.SYNTAX, count_pos,
                                   f"count must be a decimal integer, got '{count_text}'")
        count = int(count_text)
        if count < 1:
            raise AccessParseError(AccessParseError.COUNT, count_pos,
                                   f"count must be positive, got {count}")

        if target in seen:
            raise AccessParseError(AccessParseError.DUPLICATE, start,
                                   f"duplicate target {target} (first given as item {seen[target] + 1})")
        seen[target] = len(groups)
        groups.append(AccessGroup(target, count))

    return AccessSet(tuple(groups))


def format_access_set(access_set: AccessSet) -> str:
    """Canonical grammar text: uppercase tokens, comma separated, no whitespace"""
    return ','.join(f"{g.target}:{g.count}" for g in access_set.groups)


def min_circular_gaps(sequence: Sequence) -> Dict[object, int]:
    """Smallest circular distance between consecutive occurrences, per repeated item"""
    n = len(sequence)
    positions: Dict[object, List[int]] = {}
    for index, item in enumerate(sequence):
        positions.setdefault(item, []).append(index)

    gaps = {}
    for item, where in positions.items():
        if len(where) < 2:
            continue
        diffs = [b - a for a, b in zip(where, where[1:])]
        diffs.append(where[0] + n - where[-1])
        gaps[item] = min(diffs)
    return gaps


# node budget of one fallback search attempt
SPACING_SEARCH_NODES = 600
# up to this many slots the search runs unbudgeted; above the max it is skipped
EXHAUSTIVE_SPACING_SLOTS = 8
SPACING_SEARCH_MAX_SLOTS = 256


def spacing_deficit(sequence: Sequence) -> int:
    """Worst shortfall of a repeated item's min circular gap below floor(n/count); 0 when every bound holds"""
    n = len(sequence)
    counts = Counter(sequence)
    return max((max(0, n // counts[item] - gap) for item, gap in min_circular_gaps(sequence).items()), default=0)


def _even_spacing(counts: Sequence[int]) -> List[int]:
    # group i's k-th occurrence goes to round(k*n/a_i); collisions move forward
    n = sum(counts)
    slots: List[Optional[int]] = [None] * n
    for index in sorted(range(len(counts)), key=lambda i: (-counts[i], i)):
        a = counts[index]
        for k in range(a):
            pos = int(k * n / a + 0.5) % n
            while slots[pos] is not None:
                pos = (pos + 1) % n
            slots[pos] = index
    return slots


def _smooth_round_robin(counts: Sequence[int]) -> List[int]:
    n = sum(counts)
    credit = [0] * len(counts)
    order = []
    for _ in range(n):
        for i, a in enumerate(counts):
            credit[i] += a
        best = max(range(len(counts)), key=lambda i: (credit[i], -i))
        credit[best] -= n
        order.append(best)
    return order


class _SearchBudgetSpent(Exception):
    pass


def _spacing_search(counts: Sequence[int], slack: int = 0, budget: Optional[int] = None) -> Optional[List[int]]:
    """
    Depth-first search for an order whose gaps reach floor(n/a_i) - slack, most urgent group first.

    Returns None when no such order exists or when more than `budget` nodes were visited.
    """
    n = sum(counts)
    m = len(counts)
    gap = [max(1, n // a - slack) if a >= 2 else 1 for a in counts]
    remaining = list(counts)
    first: List[Optional[int]] = [None] * m
    last: List[Optional[int]] = [None] * m
    order: List[int] = []
    visited = 0

    def earliest(j: int, pos: int) -> int:
        return pos if last[j] is None else max(pos, last[j] + gap[j])

    def latest(j: int) -> int:
        end = n - 1
        if first[j] is not None and counts[j] >= 2:
            end = min(end, first[j] + n - gap[j])
        return end - (remaining[j] - 1) * gap[j]

    def feasible(pos: int) -> bool:
        return all(earliest(j, pos) <= latest(j) for j in range(m) if remaining[j] > 0)

    def place(pos: int) -> bool:
        nonlocal visited
        if pos == n:
            return True
        visited += 1
        if budget is not None and visited > budget:
            raise _SearchBudgetSpent
        candidates = [j for j in range(m) if remaining[j] > 0 and earliest(j, pos) == pos]
        candidates.sort(key=lambda j: (latest(j), -remaining[j], j))
        for j in candidates:
            saved = (first[j], last[j])
            if first[j] is None:
                first[j] = pos
            last[j] = pos
            remaining[j] -= 1
            order.append(j)
            if feasible(pos + 1) and place(pos + 1):
                return True
            order.pop()
            remaining[j] += 1
            first[j], last[j] = saved
        return False

    try:
        return order if place(0) else None
    except _SearchBudgetSpent:
        logger.debug("spacing search for %s (slack %d) gave up after %d nodes", counts, slack, budget)
        return None


@lru_cache(maxsize=4096)
def _interleave(counts: Tuple[int, ...]) -> Tuple[int, ...]:
    n = sum(counts)
    # min() keeps the first of equally good candidates
    best = min((_even_spacing(counts), _smooth_round_robin(counts)), key=spacing_deficit)
    deficit = spacing_deficit(best)
    if deficit and n <= SPACING_SEARCH_MAX_SLOTS:
        budget = None if n <= EXHAUSTIVE_SPACING_SLOTS else SPACING_SEARCH_NODES
        for slack in range(deficit):
            found = _spacing_search(counts, slack, budget)
            if found is not None:
                best, deficit = found, spacing_deficit(found)
                break
    if deficit:
        # some count vectors admit no order meeting every bound, e.g. 1,2,3
        logger.debug("spacing bound missed by %d slot(s) for counts %s", deficit, counts)
    return tuple(best)


def build_base_sequence(access_set: AccessSet) -> List[Target]:
    """
    Interleave the groups of M into one sequence of length sum(a_i), spread as evenly as possible.

    Every repeated group keeps a min circular gap of floor(n/a_i) whenever some order allows it.
    Otherwise the order with the smallest worst shortfall among the candidates tried is used.
    """
    targets = access_set.targets
    order = _interleave(tuple(g.count for g in access_set.groups))
    return [targets[i] for i in order]


def build_schedule(config: WorkloadConfig) -> Schedule:
    """Tile the base sequence cyclically to exactly u slots"""
    base = build_base_sequence(config.accesses)
    n = len(base)
    return Schedule(tuple(base[j % n] for j in range(config.unroll)))
