#!/usr/bin/env python3
"""
ember - power stress test workload tuner
Runs unrolled FMA/ALU workloads with configurable memory accesses against a machine model,
measures power and IPC, and tunes the access mix with NSGA-II
"""
import argparse
import copy
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import yaml

from machine_sim import (
    INSTRUCTION_SETS, MachineConfig, MachineConfigError, SimResult, SimulationError,
    get_instruction_set, load_machine_config, simulate,
)
from measurement import (
    MeasurementError, MeasurementWindow, SummaryRow, format_csv_summary, samples_in_window,
    window_average, write_csv_summary,
)
from metrics import MetricContext, MetricError, MetricRegistry, MetricUnavailableError, default_registry
from optimizer import (
    DEFAULT_TARGETS, EvaluationError, Genome, Individual, OptimizationResult, OptimizerError,
    OptimizerParams, decode_genome, evolve, parse_targets,
)
from workload import (
    AccessParseError, EmberError, InstructionSetDef, WorkloadConfig, build_schedule, format_access_set,
    parse_access_set,
)

logger = logging.getLogger(__name__)

MACHINE_CONFIG_ENV_VAR = 'EMBER_MACHINE_CONFIG'

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_METRIC_UNAVAILABLE = 3
EXIT_EVALUATION = 4


class ConfigError(EmberError, ValueError):
    """config.yaml is unreadable or a run plan is inconsistent"""


@dataclass
class RunPlan:
    """Everything one invocation does, resolved from flags and config.yaml"""
    mode: str = 'measure'  # avail | metrics | measure | optimize
    function: str = 'HSW_COREI_FMA'
    groups: str = 'REG:1'
    unroll: Optional[int] = None
    pstate: int = 0
    duration_s: float = 10
    preheat_s: float = 240
    start_delta_ms: int = 5000
    stop_delta_ms: int = 2000
    sample_period_ms: int = 50
    label: str = 'run'
    output_path: str = ''
    measurement_metrics: List[str] = field(default_factory=lambda: ['sim-power', 'sim-ipc'])
    optimization_metrics: List[str] = field(default_factory=lambda: ['sim-power', 'sim-ipc'])
    metric_command: Optional[str] = None
    params: OptimizerParams = field(default_factory=OptimizerParams)
    targets: str = DEFAULT_TARGETS
    log_path: str = 'ember_optimize.log'
    workers: int = 1
    progress: bool = True

    def __post_init__(self):
        if self.mode not in ('avail', 'metrics', 'measure', 'optimize'):
            raise ConfigError(f"unknown mode '{self.mode}'")
        if self.duration_s <= 0:
            raise ConfigError(f"-t must be positive, got {self.duration_s}")
        if self.preheat_s < 0:
            raise ConfigError(f"--preheat must be >= 0, got {self.preheat_s}")
        if self.sample_period_ms <= 0:
            raise ConfigError(f"--sample-period must be positive, got {self.sample_period_ms}")
        if self.unroll is not None and self.unroll < 1:
            raise ConfigError(f"--set-line-count must be positive, got {self.unroll}")
        if self.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {self.workers}")
        if self.mode == 'optimize' and not self.optimization_metrics:
            raise ConfigError("--optimization-metric needs at least one metric")
        if self.mode == 'measure' and not self.measurement_metrics:
            raise ConfigError("no measurement metrics configured")

    @property
    def duration_ms(self) -> int:
        return int(round(self.duration_s * 1000))

    def window(self) -> MeasurementWindow:
        return MeasurementWindow(self.duration_ms, self.start_delta_ms, self.stop_delta_ms)


def _split_names(value) -> List[str]:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return [str(v).strip() for v in value if str(v).strip()]
    return [v.strip() for v in str(value).split(',') if v.strip()]


def _deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class EmberRunner:
    """Loads configuration and a machine model, then measures or tunes workloads on it"""

    def __init__(self, config_path: Optional[str] = "config.yaml", machine_config: Optional[str] = None,
                 registry: Optional[MetricRegistry] = None, machine: Optional[MachineConfig] = None):
        self.config = self._load_config(config_path)
        self.registry = registry or default_registry()
        self.machine_path = self._resolve_machine_path(machine_config)
        if machine is not None:
            self.machine = machine
        elif self.machine_path:
            self.machine = load_machine_config(self.machine_path)
            print(f"✓ Machine config loaded from {self.machine_path}")
        else:
            self.machine = MachineConfig()

    def _load_config(self, config_path: Optional[str]) -> dict:
        """Load configuration from YAML file"""
        if not config_path:
            return self._default_config()
        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                loaded = yaml.safe_load(f)
        except FileNotFoundError:
            print(f"Config file not found: {config_path}")
            print("Using default configuration")
            return self._default_config()
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {config_path}: {e}") from e
        except OSError as e:
            raise ConfigError(f"cannot read {config_path}: {e}") from e
        if loaded is None:
            return self._default_config()
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path} must contain a mapping of sections")
        return _deep_merge(self._default_config(), loaded)

    def _default_config(self) -> dict:
        """Return default configuration"""
        return {
            'run': {
                'function': 'HSW_COREI_FMA',
                'groups': 'REG:1',
                'unroll': None,
                'pstate': 0,
                'duration_s': 10,
                'preheat_s': 240,
                'sample_period_ms': 50,
                'seed': 0,
            },
            'measurement': {
                'start_delta_ms': 5000,
                'stop_delta_ms': 2000,
                'label': 'run',
                'output_path': '',
            },
            'optimizer': {
                'individuals': 40,
                'generations': 20,
                'nsga2_m': 0.35,
                'max_count': 10,
                'targets': DEFAULT_TARGETS,
                'log_path': 'ember_optimize.log',
                'workers': 1,
            },
            'metrics': {
                'optimization': 'sim-power,sim-ipc',
                'measurement': 'sim-power,sim-ipc',
                'command': None,
            },
            'machine': {
                'config_path': None,
            },
        }

    def _resolve_machine_path(self, flag_value: Optional[str]) -> Optional[str]:
        """--machine-config, then $EMBER_MACHINE_CONFIG, then config.yaml, else the reference machine"""
        for candidate in (flag_value, os.environ.get(MACHINE_CONFIG_ENV_VAR),
                          self.config.get('machine', {}).get('config_path')):
            if candidate:
                return str(candidate)
        return None

    # ------------------------------------------------------------------ listing

    def list_available(self, registry: Optional[Dict[str, InstructionSetDef]] = None) -> str:
        """Instruction set ids, one per line, in registration order"""
        registry = INSTRUCTION_SETS if registry is None else registry
        return ''.join(f"{iset_id}\n" for iset_id in registry)

    def list_metrics(self) -> str:
        lines = []
        for descriptor in self.registry:
            unit = f" [{descriptor.unit}]" if descriptor.unit else ''
            lines.append(f"{descriptor.name}{unit}: {descriptor.description}")
        return ''.join(line + '\n' for line in lines)

    # ------------------------------------------------------------------ running

    def _instruction_set(self, plan: RunPlan) -> InstructionSetDef:
        return get_instruction_set(plan.function)

    def _check_pstate(self, pstate: int):
        if not 0 <= pstate < len(self.machine.pstates_mhz):
            raise SimulationError(f"--pstate {pstate} out of range, machine has P-states "
                                  f"0..{len(self.machine.pstates_mhz) - 1} "
                                  f"({', '.join(str(f) for f in self.machine.pstates_mhz)} MHz)")

    def _check_metrics(self, names: Sequence[str]):
        for name in names:
            self.registry.get(name)

    def collect(self, names: Sequence[str], result: SimResult, unroll: int, iset: InstructionSetDef,
                plan: RunPlan) -> Dict[str, list]:
        """Sample streams of each named metric over one run of plan.duration_s"""
        context = MetricContext(
            result=result,
            unroll=unroll,
            instructions_per_set=iset.instructions_per_set,
            duration_ms=plan.duration_ms,
            sample_period_ms=plan.sample_period_ms,
            command=plan.metric_command,
        )
        return {name: self.registry.collect(name, context) for name in names}

    def measure(self, plan: RunPlan) -> Tuple[SimResult, List[SummaryRow]]:
        """Run the plan's fixed workload once and window-average every measurement metric"""
        iset = self._instruction_set(plan)
        workload = WorkloadConfig(iset.id, plan.unroll or iset.default_unroll, parse_access_set(plan.groups))
        window = plan.window()
        self._check_pstate(plan.pstate)
        self._check_metrics(plan.measurement_metrics)

        result = simulate(build_schedule(workload), iset, self.machine, plan.pstate)
        streams = self.collect(plan.measurement_metrics, result, workload.unroll, iset, plan)

        rows = []
        for name, samples in streams.items():
            kept = samples_in_window(samples, window)
            rows.append(SummaryRow(plan.label, name, window_average(kept, window), len(kept)))
        rows.append(SummaryRow(plan.label, 'freq', float(result.eff_freq_mhz), 1))
        return result, rows

    def run_measure(self, plan: RunPlan) -> List[SummaryRow]:
        """Measure the plan's workload, print the summary and write the CSV if an output path is set"""
        result, rows = self.measure(plan)
        iset = self._instruction_set(plan)

        print(f"✓ {plan.function} u={plan.unroll or iset.default_unroll} "
              f"{format_access_set(parse_access_set(plan.groups))} at "
              f"{self.machine.pstates_mhz[plan.pstate]} MHz ({result.fetch_tier.value} fetch)")
        if result.throttled:
            print(f"  ⚠ Throttled to {result.eff_freq_mhz} MHz (EDC limit {self.machine.edc_limit_w:g} W)")
        print("\n" + "=" * 80)
        print("MEASUREMENT SUMMARY")
        print("=" * 80)
        print(format_csv_summary(rows), end='')

        if plan.output_path:
            written = write_csv_summary(rows, plan.output_path)
            print(f"\nResults written to: {written}")
        return rows

    def preheat(self, plan: RunPlan) -> Optional[SimResult]:
        """Run the default REG-only workload for the preheat time (simulated, returns immediately)"""
        if plan.preheat_s <= 0:
            return None
        iset = self._instruction_set(plan)
        workload = WorkloadConfig(iset.id, plan.unroll or iset.default_unroll, parse_access_set('REG:1'))
        result = simulate(build_schedule(workload), iset, self.machine, plan.pstate)
        print(f"✓ Preheat: {plan.preheat_s:g} s at {result.eff_freq_mhz} MHz, {result.power_w:.1f} W")
        return result

    def make_evaluator(self, plan: RunPlan, targets):
        """Genome -> Individual with the plan's optimization metrics as objectives"""
        iset = self._instruction_set(plan)
        unroll = plan.unroll or iset.default_unroll
        window = plan.window()
        names = list(plan.optimization_metrics)

        def evaluate(genome: Genome) -> Individual:
            workload = WorkloadConfig(iset.id, unroll, decode_genome(genome, targets))
            result = simulate(build_schedule(workload), iset, self.machine, plan.pstate)
            try:
                streams = self.collect(names, result, unroll, iset, plan)
                objectives = tuple(window_average(streams[name], window) for name in names)
            except MetricUnavailableError as e:
                logger.debug("candidate %s invalid: %s", format_access_set(workload.accesses), e)
                return Individual(genome, (math.nan,) * len(names), valid=False)
            return Individual(genome, objectives)

        return evaluate

    def run_optimize(self, plan: RunPlan) -> OptimizationResult:
        """Preheat, evolve the access mix, print the final front and write the run log"""
        targets = parse_targets(plan.targets)
        self._instruction_set(plan)
        self._check_pstate(plan.pstate)
        self._check_metrics(plan.optimization_metrics)
        plan.window()

        self.preheat(plan)
        print(f"Optimizing {len(targets)} targets ({', '.join(str(t) for t in targets)}) with NSGA2: "
              f"{plan.params.population} individuals, {plan.params.generations} generations, "
              f"m={plan.params.mutation_prob:g}")
        outcome = evolve(plan.params, targets, self.make_evaluator(plan, targets),
                         log_path=plan.log_path or None, workers=plan.workers, progress=plan.progress)

        units = [self.registry.get(name).unit for name in plan.optimization_metrics]
        print("\n" + "=" * 80)
        print(f"FINAL FRONT ({len(outcome.front)} individuals, best {plan.optimization_metrics[0]} first)")
        print("=" * 80)
        for i, individual in enumerate(outcome.front, 1):
            values = '  '.join(f"{v:.6g} {u}".rstrip() for v, u in zip(individual.objectives, units))
            print(f"{i:3d}. {values}  {format_access_set(decode_genome(individual.genome, targets))}")
        print(f"\n✓ {outcome.evaluations} evaluations")
        if plan.log_path:
            print(f"Log written to: {plan.log_path}")
        return outcome


def build_parser(config: dict) -> argparse.ArgumentParser:
    run = config['run']
    measurement = config['measurement']
    opt = config['optimizer']
    metrics = config['metrics']

    parser = argparse.ArgumentParser(
        description='ember - tune and measure power stress test workloads on a machine model',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument('-c', '--config', default='config.yaml', help='Path to configuration file')
    parser.add_argument('-a', '--avail', action='store_true', help='List available instruction sets and exit')
    parser.add_argument('--list-metrics', action='store_true', help='List available metrics and exit')
    parser.add_argument('-i', '--function', default=run['function'], help='Instruction set id')
    parser.add_argument('--run-instruction-groups', default=run['groups'],
                        help='Memory accesses, e.g. REG:4,L1_L:2,L2_L:1')
    parser.add_argument('--set-line-count', type=int, default=run['unroll'],
                        help='Unroll factor u; unset uses the instruction set default')
    parser.add_argument('-t', '--timeout', dest='duration_s', type=float, default=run['duration_s'],
                        help='Run time in seconds (per candidate when optimizing)')
    parser.add_argument('--pstate', type=int, default=run['pstate'], help='P-state index, 0 = lowest frequency')
    parser.add_argument('--sample-period', type=int, default=run['sample_period_ms'],
                        help='Backend metric sample period in ms')
    parser.add_argument('--measurement', action='store_true',
                        help='Print the CSV measurement summary (always on outside --optimize)')
    parser.add_argument('--start-delta', type=int, default=measurement['start_delta_ms'],
                        help='Milliseconds excluded at the start of each run')
    parser.add_argument('--stop-delta', type=int, default=measurement['stop_delta_ms'],
                        help='Milliseconds excluded at the end of each run')
    parser.add_argument('--label', default=measurement['label'], help='Label of the CSV rows')
    parser.add_argument('-o', '--output', default=measurement['output_path'],
                        help='CSV summary output path (empty: stdout only)')
    parser.add_argument('--optimize', nargs='?', const='NSGA2', choices=['NSGA2'], default=None,
                        help='Tune the memory accesses with the given algorithm')
    parser.add_argument('--individuals', type=int, default=opt['individuals'], help='NSGA2 population size')
    parser.add_argument('--generations', type=int, default=opt['generations'], help='NSGA2 generations')
    parser.add_argument('--nsga2-m', type=float, default=opt['nsga2_m'], help='Per-gene mutation probability')
    parser.add_argument('--max-count', type=int, default=opt['max_count'], help='Upper bound of each access count')
    parser.add_argument('--targets', default=opt['targets'], help='Access targets the optimizer may use')
    parser.add_argument('--preheat', type=float, default=run['preheat_s'], help='Preheat time in seconds')
    parser.add_argument('--optimization-metric', default=metrics['optimization'],
                        help='Comma separated objective metrics')
    parser.add_argument('--measurement-metric', default=metrics['measurement'],
                        help='Comma separated metrics of the measurement summary')
    parser.add_argument('--metric-command', default=metrics['command'],
                        help="Command of the 'external' metric")
    parser.add_argument('--log', default=opt['log_path'], help='Optimizer run log path')
    parser.add_argument('--workers', type=int, default=opt['workers'], help='Parallel candidate evaluations')
    parser.add_argument('--seed', type=int, default=run['seed'], help='Random seed of the optimizer')
    parser.add_argument('--machine-config', default=None,
                        help=f'Machine config file; unset falls back to ${MACHINE_CONFIG_ENV_VAR}, config.yaml '
                             'and the reference machine')
    parser.add_argument('-v', '--verbose', action='store_true', help='Enable debug logging')
    parser.add_argument('--quiet', action='store_true', help='Hide progress bars')
    return parser


def build_plan(args: argparse.Namespace) -> RunPlan:
    if args.avail:
        mode = 'avail'
    elif args.list_metrics:
        mode = 'metrics'
    elif args.optimize:
        mode = 'optimize'
    else:
        mode = 'measure'
    try:
        params = OptimizerParams(
            population=args.individuals,
            generations=args.generations,
            mutation_prob=args.nsga2_m,
            max_count=args.max_count,
            rng_seed=args.seed,
        )
    except OptimizerError as e:
        raise ConfigError(str(e)) from e
    return RunPlan(
        mode=mode,
        function=args.function,
        groups=args.run_instruction_groups,
        unroll=args.set_line_count,
        pstate=args.pstate,
        duration_s=args.duration_s,
        preheat_s=args.preheat,
        start_delta_ms=args.start_delta,
        stop_delta_ms=args.stop_delta,
        sample_period_ms=args.sample_period,
        label=args.label,
        output_path=args.output or '',
        measurement_metrics=_split_names(args.measurement_metric),
        optimization_metrics=_split_names(args.optimization_metric),
        metric_command=args.metric_command,
        params=params,
        targets=args.targets,
        log_path=args.log or '',
        workers=args.workers,
        progress=not args.quiet,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument('-c', '--config', default='config.yaml')
    pre.add_argument('-v', '--verbose', action='store_true')
    pre.add_argument('--machine-config', default=None)
    known, _ = pre.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if known.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')

    try:
        runner = EmberRunner(known.config, machine_config=known.machine_config)
    except (ConfigError, MachineConfigError) as e:
        print(f"✗ Error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    args = build_parser(runner.config).parse_args(argv)

    try:
        plan = build_plan(args)

        if plan.mode == 'avail':
            print(runner.list_available(), end='')
        elif plan.mode == 'metrics':
            print(runner.list_metrics(), end='')
        elif plan.mode == 'optimize':
            runner.run_optimize(plan)
        else:
            runner.run_measure(plan)
    except EvaluationError as e:
        print(f"✗ Error: {e}", file=sys.stderr)
        return EXIT_EVALUATION
    except MetricUnavailableError as e:
        print(f"✗ Metric unavailable: {e}", file=sys.stderr)
        return EXIT_METRIC_UNAVAILABLE
    except (AccessParseError, ConfigError, MachineConfigError, MeasurementError, MetricError,
            OptimizerError, SimulationError) as e:
        print(f"✗ Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
