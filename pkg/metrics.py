"""
Metric sources for a workload run

Built-in metrics read the machine model's steady state; the external metric reads
'<timestamp_ms> <value>' lines from a child process.
"""
import logging
import math
import os
import queue
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Union

from machine_sim import SimResult
from workload import EmberError

logger = logging.getLogger(__name__)

DURATION_ENV_VAR = 'EMBER_DURATION_MS'
EXTERNAL_GRACE_MS = 1000
MALFORMED_REPORT_RATIO = 0.10


class MetricError(EmberError, RuntimeError):
    """Metric could not be collected"""


class MetricUnavailableError(MetricError):
    """Metric produced no usable samples; the run must be treated as invalid, never as zero"""


class MetricSource(Enum):
    BACKEND_POWER = 'backend_power'
    BACKEND_IPC = 'backend_ipc'
    IPC_ESTIMATE = 'ipc_estimate'
    EXTERNAL = 'external'


@dataclass(frozen=True)
class MetricSample:
    timestamp_ms: int
    value: float


@dataclass(frozen=True)
class MetricDescriptor:
    """Registered metric: CLI name, unit and where samples come from"""
    name: str
    unit: str
    source: MetricSource
    description: str = ''


@dataclass(frozen=True)
class MetricContext:
    """Everything a collector may need for one run"""
    result: SimResult
    unroll: int
    instructions_per_set: int
    duration_ms: int
    sample_period_ms: int = 50
    start_ms: int = 0
    command: Optional[Union[str, Sequence[str]]] = None


def _check_stream_args(duration_ms: float, sample_period_ms: float):
    if duration_ms <= 0:
        raise MetricError(f"duration must be positive, got {duration_ms} ms")
    if sample_period_ms <= 0:
        raise MetricError(f"sample period must be positive, got {sample_period_ms} ms")


def _constant_stream(value: float, duration_ms: float, sample_period_ms: float, start_ms: int) -> List[MetricSample]:
    _check_stream_args(duration_ms, sample_period_ms)
    count = math.ceil(duration_ms / sample_period_ms)
    return [MetricSample(int(start_ms + k * sample_period_ms), value) for k in range(count)]


def collect_backend_power(result: SimResult, duration_ms: float, sample_period_ms: float,
                          start_ms: int = 0) -> List[MetricSample]:
    """ceil(duration/period) samples of the steady-state power, spaced by the period"""
    return _constant_stream(result.power_w, duration_ms, sample_period_ms, start_ms)


def collect_backend_ipc(result: SimResult, duration_ms: float, sample_period_ms: float,
                        start_ms: int = 0) -> List[MetricSample]:
    """ceil(duration/period) samples of the steady-state IPC, spaced by the period"""
    return _constant_stream(result.ipc, duration_ms, sample_period_ms, start_ms)


def estimate_ipc(loop_iterations: float, unroll: int, instructions_per_set: int,
                 assumed_freq_mhz: float, duration_ms: float) -> float:
    """
    IPC from counted loop iterations and an assumed constant frequency.

    Biased low by eff/assumed when the core actually ran slower than assumed.
    """
    if duration_ms <= 0:
        raise MetricError(f"duration must be positive, got {duration_ms} ms")
    if assumed_freq_mhz <= 0:
        raise MetricError(f"assumed frequency must be positive, got {assumed_freq_mhz} MHz")
    instructions = loop_iterations * unroll * instructions_per_set
    cycles = assumed_freq_mhz * 1e3 * duration_ms
    return instructions / cycles


def collect_ipc_estimate(result: SimResult, unroll: int, instructions_per_set: int, duration_ms: float,
                         sample_period_ms: float, start_ms: int = 0) -> List[MetricSample]:
    """Per-period IPC estimate assuming the requested frequency held"""
    _check_stream_args(duration_ms, sample_period_ms)
    iterations = result.loop_iterations_per_s * sample_period_ms / 1000.0
    value = estimate_ipc(iterations, unroll, instructions_per_set, result.requested_freq_mhz, sample_period_ms)
    return _constant_stream(value, duration_ms, sample_period_ms, start_ms)


def parse_metric_line(line: str) -> MetricSample:
    """Parse one '<timestamp_ms> <value>' line; raises ValueError when malformed"""
    text = line.rstrip('\n')
    parts = text.split(' ')
    if len(parts) != 2 or not parts[0] or not parts[1]:
        raise ValueError(f"expected '<timestamp_ms> <value>', got {text!r}")
    stamp, value = parts
    if not stamp.isascii() or not stamp.isdigit():
        raise ValueError(f"timestamp must be a non-negative integer, got {stamp!r}")
    number = float(value)
    if not math.isfinite(number):
        raise ValueError(f"value must be finite, got {value!r}")
    return MetricSample(int(stamp), number)


def _pump_lines(stream, lines: "queue.Queue"):
    try:
        for line in iter(stream.readline, ''):
            lines.put(line)
    finally:
        lines.put(None)


def _stop_child(process: subprocess.Popen):
    if process.poll() is None:
        process.terminate()
        try:
            process.wait(timeout=1)
        except subprocess.TimeoutExpired:
            process.kill()
            process.wait()


def collect_external(command: Union[str, Sequence[str]], duration_ms: float,
                     grace_ms: float = EXTERNAL_GRACE_MS) -> List[MetricSample]:
    """
    Run an external metric child for one measurement run.

    The child gets EMBER_DURATION_MS in its environment and prints '<timestamp_ms> <value>'
    lines on stdout. Reading stops at EOF or after duration + grace, then the child is
    terminated. Malformed and out-of-order lines are skipped and counted.

    Raises:
        MetricError: the child could not be spawned
        MetricUnavailableError: no sample was received
    """
    if duration_ms <= 0:
        raise MetricError(f"duration must be positive, got {duration_ms} ms")
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    if not argv:
        raise MetricError("external metric command is empty")

    env = dict(os.environ)
    env[DURATION_ENV_VAR] = str(int(duration_ms))
    try:
        process = subprocess.Popen(argv, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                                   stdin=subprocess.DEVNULL, env=env, text=True, bufsize=1)
    except OSError as e:
        raise MetricError(f"cannot start metric command {argv[0]!r}: {e}") from e

    lines: "queue.Queue" = queue.Queue()
    reader = threading.Thread(target=_pump_lines, args=(process.stdout, lines), daemon=True)
    reader.start()

    samples: List[MetricSample] = []
    total = malformed = 0
    deadline = time.monotonic() + (duration_ms + grace_ms) / 1000.0
    try:
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                logger.debug("metric command %r still running after grace period", argv[0])
                break
            try:
                line = lines.get(timeout=remaining)
            except queue.Empty:
                continue
            if line is None:
                break
            if not line.strip():
                continue
            total += 1
            try:
                sample = parse_metric_line(line)
            except ValueError as e:
                malformed += 1
                logger.debug("skipping metric line: %s", e)
                continue
            if samples and sample.timestamp_ms < samples[-1].timestamp_ms:
                malformed += 1
                logger.debug("skipping out-of-order timestamp %d", sample.timestamp_ms)
                continue
            samples.append(sample)
    finally:
        _stop_child(process)
        reader.join(timeout=1)
        process.stdout.close()

    if total and malformed / total > MALFORMED_REPORT_RATIO:
        logger.warning("metric command %r: %d of %d lines malformed", argv[0], malformed, total)
    if not samples:
        raise MetricUnavailableError(f"metric command {argv[0]!r} produced no samples")
    return samples


class MetricRegistry:
    """Named metrics with their collectors; names are unique"""

    def __init__(self):
        self._descriptors: Dict[str, MetricDescriptor] = {}
        self._collectors: Dict[str, Callable[[MetricContext], List[MetricSample]]] = {}

    def register(self, descriptor: MetricDescriptor,
                 collector: Callable[[MetricContext], List[MetricSample]]) -> MetricDescriptor:
        if descriptor.name in self._descriptors:
            raise MetricError(f"metric '{descriptor.name}' already registered")
        self._descriptors[descriptor.name] = descriptor
        self._collectors[descriptor.name] = collector
        return descriptor

    def get(self, name: str) -> MetricDescriptor:
        try:
            return self._descriptors[name]
        except KeyError:
            raise MetricError(f"unknown metric '{name}' (available: {', '.join(self._descriptors)})") from None

    def names(self) -> List[str]:
        return list(self._descriptors)

    def descriptors(self) -> List[MetricDescriptor]:
        return list(self._descriptors.values())

    def collect(self, name: str, context: MetricContext) -> List[MetricSample]:
        self.get(name)
        return self._collectors[name](context)

    def __contains__(self, name: str) -> bool:
        return name in self._descriptors

    def __iter__(self) -> Iterator[MetricDescriptor]:
        return iter(self.descriptors())


def _external(context: MetricContext) -> List[MetricSample]:
    if not context.command:
        raise MetricUnavailableError("metric 'external' needs --metric-command")
    return collect_external(context.command, context.duration_ms)


def default_registry() -> MetricRegistry:
    """Registry with the built-in metrics"""
    registry = MetricRegistry()
    registry.register(
        MetricDescriptor('sim-power', 'W', MetricSource.BACKEND_POWER, 'system power from the machine model'),
        lambda c: collect_backend_power(c.result, c.duration_ms, c.sample_period_ms, c.start_ms),
    )
    registry.register(
        MetricDescriptor('sim-ipc', 'instr/cycle', MetricSource.BACKEND_IPC, 'per-core IPC from the machine model'),
        lambda c: collect_backend_ipc(c.result, c.duration_ms, c.sample_period_ms, c.start_ms),
    )
    registry.register(
        MetricDescriptor('ipc-estimate', 'instr/cycle', MetricSource.IPC_ESTIMATE,
                         'IPC from loop counts at the requested frequency'),
        lambda c: collect_ipc_estimate(c.result, c.unroll, c.instructions_per_set, c.duration_ms,
                                       c.sample_period_ms, c.start_ms),
    )
    registry.register(
        MetricDescriptor('external', '', MetricSource.EXTERNAL, 'child process line protocol (--metric-command)'),
        _external,
    )
    return registry
