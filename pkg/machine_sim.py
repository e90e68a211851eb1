"""
Analytical machine model backend

Maps a Schedule plus a P-state to steady-state power, IPC, effective frequency and
loop iteration rate. The model is deliberately simple: linear energy accounting,
a max-outstanding stall cliff per memory level, quadratic voltage scaling and a
one-notch-at-a-time EDC throttle.
"""
import logging
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

from workload import (
    AccessPattern, EmberError, InstructionSetDef, MemoryLevel, Schedule,
    WorkloadConfig, build_schedule,
)

logger = logging.getLogger(__name__)


class MachineConfigError(EmberError, ValueError):
    """Machine config file or value is invalid"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class SimulationError(EmberError, ValueError):
    """Simulation request is invalid"""


class FetchTier(Enum):
    """Where the loop body's instructions are delivered from"""
    OPCACHE = 'opcache'
    L1I = 'l1i'
    L2 = 'l2'


# memory operations issued per slot, prefetch cheapest
PATTERN_VISIT_WEIGHTS: Dict[AccessPattern, float] = {
    AccessPattern.LOAD: 1.0,
    AccessPattern.STORE: 1.0,
    AccessPattern.LOAD_STORE: 2.0,
    AccessPattern.TWO_LOAD_STORE: 3.0,
    AccessPattern.PREFETCH: 0.5,
}

MEMORY_LEVELS = (MemoryLevel.L1, MemoryLevel.L2, MemoryLevel.L3, MemoryLevel.RAM)


@dataclass(frozen=True)
class LevelParams:
    """Per memory level model parameters"""
    access_latency_cycles: float
    max_outstanding: float
    energy_per_access_nj: float


def _reference_levels() -> Dict[MemoryLevel, LevelParams]:
    return {
        MemoryLevel.L1: LevelParams(access_latency_cycles=1.0, max_outstanding=1200.0, energy_per_access_nj=0.75),
        MemoryLevel.L2: LevelParams(access_latency_cycles=2.0, max_outstanding=240.0, energy_per_access_nj=1.1),
        MemoryLevel.L3: LevelParams(access_latency_cycles=3.0, max_outstanding=240.0, energy_per_access_nj=1.5),
        MemoryLevel.RAM: LevelParams(access_latency_cycles=4.0, max_outstanding=67.0, energy_per_access_nj=14.4),
    }


def _reference_tier_bonus() -> Dict[FetchTier, float]:
    return {FetchTier.OPCACHE: 0.0, FetchTier.L1I: 5.0, FetchTier.L2: 12.0}


@dataclass(frozen=True)
class MachineConfig:
    """Parameters of the analytical machine model; defaults are the reference machine"""
    cores: int = 64
    pstates_mhz: Tuple[int, ...] = (1500, 2200, 2500)
    decoder_width: float = 4.0
    opcache_capacity_sets: int = 900
    l1i_capacity_sets: int = 1800
    l2i_capacity_sets: int = 6000
    levels: Mapping[MemoryLevel, LevelParams] = field(default_factory=_reference_levels)
    energy_per_set_reg_nj: float = 1.35
    fetch_tier_power_bonus_w: Mapping[FetchTier, float] = field(default_factory=_reference_tier_bonus)
    static_power_w: float = 100.0
    voltage_scale: Tuple[float, ...] = (1.0, 1.1, 1.18)
    edc_limit_w: float = 700.0
    # latency of these levels is stated at the lowest P-state and is fixed in time
    uncore_levels: Tuple[MemoryLevel, ...] = (MemoryLevel.RAM,)
    l2_overflow_penalty: float = 0.25

    def __post_init__(self):
        if self.cores < 1:
            raise MachineConfigError('cores', "must be a positive integer")
        if not self.pstates_mhz:
            raise MachineConfigError('pstates_mhz', "needs at least one frequency")
        if any(f <= 0 for f in self.pstates_mhz):
            raise MachineConfigError('pstates_mhz', "frequencies must be positive")
        if any(b <= a for a, b in zip(self.pstates_mhz, self.pstates_mhz[1:])):
            raise MachineConfigError('pstates_mhz', "must be strictly increasing")
        if self.decoder_width <= 0:
            raise MachineConfigError('decoder_width', "must be positive")
        if not (0 < self.opcache_capacity_sets < self.l1i_capacity_sets < self.l2i_capacity_sets):
            raise MachineConfigError('opcache_capacity_sets',
                                     "need 0 < opcache_capacity_sets < l1i_capacity_sets < l2i_capacity_sets")
        for level in MEMORY_LEVELS:
            if level not in self.levels:
                raise MachineConfigError(f"levels.{level.name.lower()}", "missing level parameters")
            params = self.levels[level]
            suffix = level.name.lower()
            if params.access_latency_cycles < 0:
                raise MachineConfigError(f"access_latency_cycles.{suffix}", "must be >= 0")
            if params.max_outstanding < 0:
                raise MachineConfigError(f"max_outstanding.{suffix}", "must be >= 0")
            if params.energy_per_access_nj < 0:
                raise MachineConfigError(f"energy_per_access_nj.{suffix}", "must be >= 0")
        if self.energy_per_set_reg_nj < 0:
            raise MachineConfigError('energy_per_set_reg_nj', "must be >= 0")
        for tier in FetchTier:
            if self.fetch_tier_power_bonus_w.get(tier, 0.0) < 0:
                raise MachineConfigError(f"fetch_tier_power_bonus_w.{tier.value}", "must be >= 0")
        if self.static_power_w < 0:
            raise MachineConfigError('static_power_w', "must be >= 0")
        if len(self.voltage_scale) != len(self.pstates_mhz):
            raise MachineConfigError('voltage_scale', "needs one entry per P-state")
        if any(v <= 0 for v in self.voltage_scale):
            raise MachineConfigError('voltage_scale', "entries must be positive")
        if self.edc_limit_w <= self.static_power_w:
            raise MachineConfigError('edc_limit_w', "must exceed static_power_w")
        if MemoryLevel.REG in self.uncore_levels:
            raise MachineConfigError('uncore_levels', "REG is not a memory level")
        if self.l2_overflow_penalty < 0:
            raise MachineConfigError('l2_overflow_penalty', "must be >= 0")

    def latency_cycles(self, level: MemoryLevel, pstate_index: int) -> float:
        """Stall cycles per uncovered access at the given P-state"""
        latency = self.levels[level].access_latency_cycles
        if level in self.uncore_levels:
            latency *= self.pstates_mhz[pstate_index] / self.pstates_mhz[0]
        return latency


@dataclass(frozen=True)
class SimResult:
    """Steady-state prediction of the machine model"""
    power_w: float
    ipc: float
    eff_freq_mhz: int
    loop_iterations_per_s: float
    requested_freq_mhz: int = 0
    pstate_index: int = 0
    fetch_tier: FetchTier = FetchTier.L1I
    stall_cycles_per_loop: float = 0.0
    cycles_per_loop: float = 0.0

    @property
    def throttled(self) -> bool:
        return self.eff_freq_mhz < self.requested_freq_mhz


# Instruction set registry, in registration order
INSTRUCTION_SETS: Dict[str, InstructionSetDef] = {}


def register_instruction_set(iset: InstructionSetDef) -> InstructionSetDef:
    """Add an instruction set to the registry"""
    if iset.id in INSTRUCTION_SETS:
        raise ValueError(f"instruction set '{iset.id}' already registered")
    INSTRUCTION_SETS[iset.id] = iset
    return iset


def get_instruction_set(iset_id: str) -> InstructionSetDef:
    """Look up a registered instruction set by id"""
    try:
        return INSTRUCTION_SETS[iset_id]
    except KeyError:
        available = ', '.join(INSTRUCTION_SETS) or 'none'
        raise SimulationError(f"unknown instruction set '{iset_id}' (available: {available})") from None


register_instruction_set(InstructionSetDef(
    id='HSW_COREI_FMA',
    fma_per_set=2,
    alu_per_set=2,
    instructions_per_set=4,
    bytes_per_set=22,
    default_unroll=1200,
    description='2x vfmadd231pd + xor/shift ALU pair, one set per cycle on a 4-wide decoder',
))
register_instruction_set(InstructionSetDef(
    id='ZEN2_FMA',
    fma_per_set=2,
    alu_per_set=1,
    instructions_per_set=4,
    bytes_per_set=24,
    default_unroll=1200,
    description='2x vfmadd231pd + ALU op + vector move, Zen 2 decoder',
))


def classify_fetch_tier(config: WorkloadConfig, machine: MachineConfig) -> FetchTier:
    """Instruction delivery tier for the loop size u"""
    return _fetch_tier(config.unroll, machine)


def _fetch_tier(unroll: int, machine: MachineConfig) -> FetchTier:
    if unroll <= machine.opcache_capacity_sets:
        return FetchTier.OPCACHE
    if unroll <= machine.l1i_capacity_sets:
        return FetchTier.L1I
    return FetchTier.L2


def level_visits(schedule: Schedule) -> Dict[MemoryLevel, float]:
    """Pattern-weighted memory operations per loop iteration, per level"""
    visits = {level: 0.0 for level in MEMORY_LEVELS}
    for target, count in schedule.counts().items():
        if not target.is_register:
            visits[target.level] += count * PATTERN_VISIT_WEIGHTS[target.pattern]
    return visits


def stall_cycles(visits: Mapping[MemoryLevel, float], machine: MachineConfig, pstate_index: int) -> float:
    """Cycles lost per loop to accesses the out-of-order engine cannot cover"""
    total = 0.0
    for level in MEMORY_LEVELS:
        uncovered = max(0.0, visits.get(level, 0.0) - machine.levels[level].max_outstanding)
        total += uncovered * machine.latency_cycles(level, pstate_index)
    return total


def _steady_state(unroll: int, visits: Mapping[MemoryLevel, float], iset: InstructionSetDef,
                  machine: MachineConfig, tier: FetchTier, pstate_index: int) -> Tuple[float, float, float, float, float]:
    base = unroll * iset.instructions_per_set / machine.decoder_width
    if unroll > machine.l2i_capacity_sets:
        base *= 1.0 + machine.l2_overflow_penalty
    stall = stall_cycles(visits, machine, pstate_index)
    cycles = base + stall
    ipc = min(unroll * iset.instructions_per_set / cycles, machine.decoder_width)

    freq_hz = machine.pstates_mhz[pstate_index] * 1e6
    loops_per_s = freq_hz / cycles
    energy_per_loop_nj = unroll * machine.energy_per_set_reg_nj
    for level in MEMORY_LEVELS:
        energy_per_loop_nj += visits.get(level, 0.0) * machine.levels[level].energy_per_access_nj
    dynamic_per_core = machine.voltage_scale[pstate_index] ** 2 * loops_per_s * energy_per_loop_nj * 1e-9

    power = machine.static_power_w + machine.cores * dynamic_per_core \
        + machine.fetch_tier_power_bonus_w.get(tier, 0.0)
    return power, ipc, loops_per_s, stall, cycles


def simulate(schedule: Schedule, iset: InstructionSetDef, machine: MachineConfig, pstate_index: int) -> SimResult:
    """Evaluate a schedule at a P-state, stepping down one notch at a time while above the EDC limit"""
    if not 0 <= pstate_index < len(machine.pstates_mhz):
        raise SimulationError(f"invalid pstate index {pstate_index} "
                              f"(machine has {len(machine.pstates_mhz)} P-states)")
    if len(schedule) == 0:
        raise SimulationError("schedule is empty")

    unroll = len(schedule)
    tier = _fetch_tier(unroll, machine)
    visits = level_visits(schedule)

    effective = pstate_index
    power, ipc, loops_per_s, stall, cycles = _steady_state(unroll, visits, iset, machine, tier, effective)
    while power > machine.edc_limit_w and effective > 0:
        logger.debug("%.1f W above EDC limit %.1f W at %d MHz, stepping down",
                     power, machine.edc_limit_w, machine.pstates_mhz[effective])
        effective -= 1
        power, ipc, loops_per_s, stall, cycles = _steady_state(unroll, visits, iset, machine, tier, effective)

    return SimResult(
        power_w=power,
        ipc=ipc,
        eff_freq_mhz=machine.pstates_mhz[effective],
        loop_iterations_per_s=loops_per_s,
        requested_freq_mhz=machine.pstates_mhz[pstate_index],
        pstate_index=effective,
        fetch_tier=tier,
        stall_cycles_per_loop=stall,
        cycles_per_loop=cycles,
    )


def simulate_workload(config: WorkloadConfig, machine: MachineConfig, pstate_index: int,
                      iset: Optional[InstructionSetDef] = None) -> SimResult:
    """Build the schedule for a workload and simulate it"""
    iset = iset or get_instruction_set(config.instruction_set)
    return simulate(build_schedule(config), iset, machine, pstate_index)


def cross_evaluate(workloads: Mapping[str, WorkloadConfig], machine: MachineConfig,
                   iset: Optional[InstructionSetDef] = None) -> Dict[Tuple[str, int], SimResult]:
    """Run every workload at every P-state; keys are (label, pstate index)"""
    results = {}
    for label, config in workloads.items():
        schedule = build_schedule(config)
        used_iset = iset or get_instruction_set(config.instruction_set)
        for pstate_index in range(len(machine.pstates_mhz)):
            results[(label, pstate_index)] = simulate(schedule, used_iset, machine, pstate_index)
    return results


# ---------------------------------------------------------------------------
# machine config file: "key = value" lines, '#' comments
# ---------------------------------------------------------------------------

_LEVEL_SUFFIXES = {level.name.lower(): level for level in MEMORY_LEVELS}
_LEVEL_KEYS = ('access_latency_cycles', 'max_outstanding', 'energy_per_access_nj')
_SCALAR_KEYS = {
    'cores': int,
    'decoder_width': float,
    'opcache_capacity_sets': int,
    'l1i_capacity_sets': int,
    'l2i_capacity_sets': int,
    'energy_per_set_reg_nj': float,
    'static_power_w': float,
    'edc_limit_w': float,
    'l2_overflow_penalty': float,
}


def _parse_number(key: str, text: str, kind):
    try:
        value = kind(text)
    except ValueError:
        raise MachineConfigError(key, f"expected {kind.__name__}, got '{text}'") from None
    if kind is float and not math.isfinite(value):
        raise MachineConfigError(key, f"must be finite, got '{text}'")
    return value


def _parse_list(key: str, text: str, kind) -> Tuple:
    items = [item.strip() for item in text.split(',') if item.strip()]
    if not items:
        raise MachineConfigError(key, "expected a comma-separated list")
    return tuple(_parse_number(key, item, kind) for item in items)


def parse_machine_config(text: str, base: Optional[MachineConfig] = None) -> MachineConfig:
    """Apply 'key = value' overrides to a base config (default: reference machine)"""
    base = base or MachineConfig()
    overrides = {}
    levels = {level: dict(vars(params)) for level, params in base.levels.items()}
    tier_bonus = dict(base.fetch_tier_power_bonus_w)

    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise MachineConfigError(key or f"line {line_no}", "expected 'key = value'")

        name, _, suffix = key.partition('.')
        if name in _SCALAR_KEYS and not suffix:
            overrides[name] = _parse_number(key, value, _SCALAR_KEYS[name])
        elif name == 'pstates_mhz' and not suffix:
            overrides[name] = _parse_list(key, value, int)
        elif name == 'voltage_scale' and not suffix:
            overrides[name] = _parse_list(key, value, float)
        elif name == 'uncore_levels' and not suffix:
            names = [item.strip().lower() for item in value.split(',') if item.strip()]
            unknown = [n for n in names if n not in _LEVEL_SUFFIXES]
            if unknown:
                raise MachineConfigError(key, f"unknown level(s): {', '.join(unknown)}")
            overrides[name] = tuple(_LEVEL_SUFFIXES[n] for n in names)
        elif name in _LEVEL_KEYS and suffix in _LEVEL_SUFFIXES:
            levels[_LEVEL_SUFFIXES[suffix]][name] = _parse_number(key, value, float)
        elif name == 'fetch_tier_power_bonus_w' and suffix in {t.value for t in FetchTier}:
            tier_bonus[FetchTier(suffix)] = _parse_number(key, value, float)
        else:
            raise MachineConfigError(key, "unknown key")

    overrides['levels'] = {level: LevelParams(**params) for level, params in levels.items()}
    overrides['fetch_tier_power_bonus_w'] = tier_bonus
    return replace(base, **overrides)


def load_machine_config(path) -> MachineConfig:
    """Load a machine config file; unspecified keys keep the reference machine defaults"""
    config_path = Path(path)
    try:
        text = config_path.read_text(encoding='utf-8')
    except FileNotFoundError:
        raise MachineConfigError('path', f"machine config not found: {config_path}") from None
    except OSError as e:
        raise MachineConfigError('path', f"cannot read {config_path}: {e}") from None
    config = parse_machine_config(text)
    logger.debug("loaded machine config %s", config_path)
    return config


def _format_value(value) -> str:
    if isinstance(value, int):
        return str(value)
    text = f"{value:g}"
    return text if float(text) == value else repr(value)


def format_machine_config(machine: MachineConfig) -> str:
    """Render a config in the file format, every key spelled out"""
    lines = []
    for f in fields(MachineConfig):
        value = getattr(machine, f.name)
        if f.name == 'levels':
            for key in _LEVEL_KEYS:
                for level in MEMORY_LEVELS:
                    lines.append(f"{key}.{level.name.lower()} = {_format_value(getattr(value[level], key))}")
        elif f.name == 'fetch_tier_power_bonus_w':
            for tier in FetchTier:
                lines.append(f"{f.name}.{tier.value} = {_format_value(value.get(tier, 0.0))}")
        elif f.name == 'uncore_levels':
            lines.append(f"{f.name} = {','.join(level.name.lower() for level in value)}")
        elif isinstance(value, tuple):
            lines.append(f"{f.name} = {','.join(_format_value(v) for v in value)}")
        else:
            lines.append(f"{f.name} = {_format_value(value)}")
    return '\n'.join(lines) + '\n'


def list_instruction_sets(registry: Optional[Mapping[str, InstructionSetDef]] = None) -> List[str]:
    """Registered instruction set ids in registration order"""
    registry = INSTRUCTION_SETS if registry is None else registry
    return list(registry)
