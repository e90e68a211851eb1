#!/usr/bin/env python3
"""
Diagnostic script to check a machine model's calibration
"""
import argparse
from typing import List, Optional, Sequence, Tuple

from main import EmberRunner
from machine_sim import (
    INSTRUCTION_SETS, FetchTier, MachineConfig, SimResult, classify_fetch_tier, get_instruction_set, simulate,
)
from optimizer import Genome, Individual, decode_genome, exhaustive_search, parse_targets
from workload import InstructionSetDef, Target, WorkloadConfig, build_schedule, format_access_set, parse_access_set

# access mixes capped at one more memory level each
LADDER = (
    ('REG', 'REG'),
    ('+L1', 'REG,L1_LS'),
    ('+L2', 'REG,L1_LS,L2_L'),
    ('+L3', 'REG,L1_LS,L2_L,L3_L'),
    ('+RAM', 'REG,L1_LS,L2_L,L3_L,RAM_L'),
)


def model_evaluator(machine: MachineConfig, iset: InstructionSetDef, targets: Sequence[Target],
                    pstate: int, unroll: Optional[int] = None):
    """Genome -> Individual with (power, ipc) read straight from the machine model"""
    unroll = unroll or iset.default_unroll

    def evaluate(genome: Genome) -> Individual:
        workload = WorkloadConfig(iset.id, unroll, decode_genome(genome, targets))
        result = simulate(build_schedule(workload), iset, machine, pstate)
        return Individual(genome, (result.power_w, result.ipc))

    return evaluate


def best_power(machine: MachineConfig, iset: InstructionSetDef, targets: Sequence[Target],
               max_count: int, pstate: int = 0) -> Individual:
    """Highest-power genome of an exhaustive sweep; ties go to the first one enumerated"""
    candidates = exhaustive_search(targets, max_count, model_evaluator(machine, iset, targets, pstate))
    return max(candidates, key=lambda ind: ind.objectives[0])


def calibration_ladder(machine: MachineConfig, iset: InstructionSetDef, max_count: int = 5,
                       pstate: int = 0) -> List[Tuple[str, str, Individual]]:
    """(step, targets, best individual) for each step of LADDER"""
    ladder = []
    for step, target_text in LADDER:
        targets = parse_targets(target_text)
        best = best_power(machine, iset, targets, max_count, pstate)
        ladder.append((step, format_access_set(decode_genome(best.genome, targets)), best))
    return ladder


def throttle_report(machine: MachineConfig, iset: InstructionSetDef, groups: str,
                    unroll: Optional[int] = None) -> List[SimResult]:
    """One SimResult per requested P-state for a fixed access mix"""
    workload = WorkloadConfig(iset.id, unroll or iset.default_unroll, parse_access_set(groups))
    schedule = build_schedule(workload)
    return [simulate(schedule, iset, machine, p) for p in range(len(machine.pstates_mhz))]


def diagnose(config_path: str = "config.yaml", machine_config: Optional[str] = None, max_count: int = 5):
    print("=" * 80)
    print("ember - Machine Model Diagnostic Tool")
    print("=" * 80)
    print()

    runner = EmberRunner(config_path, machine_config=machine_config)
    machine = runner.machine

    # Check 1: Configuration
    print("1. Checking Configuration...")
    if runner.machine_path:
        print(f"   ✓ Machine config: {runner.machine_path}")
    else:
        print("   ✓ Machine config: built-in reference machine")
    print(f"   → {machine.cores} cores, P-states {', '.join(str(f) for f in machine.pstates_mhz)} MHz")
    print(f"   → EDC limit {machine.edc_limit_w:g} W, static power {machine.static_power_w:g} W")
    print()

    # Check 2: Instruction sets and fetch tiers
    print("2. Checking Instruction Sets...")
    if not INSTRUCTION_SETS:
        print("   ✗ No instruction sets registered")
        return
    for iset in INSTRUCTION_SETS.values():
        workload = WorkloadConfig(iset.id, iset.default_unroll, parse_access_set('REG:1'))
        tier = classify_fetch_tier(workload, machine)
        marker = '✓' if tier == FetchTier.L1I else '⚠'
        print(f"   {marker} {iset.id}: default u={iset.default_unroll} fetched from {tier.value}")
    print()

    iset = get_instruction_set(runner.config['run']['function'])

    # Check 3: Level ladder
    print(f"3. Checking Level Ladder (exhaustive, max count {max_count}, {machine.pstates_mhz[0]} MHz)...")
    ladder = calibration_ladder(machine, iset, max_count)
    previous = None
    for step, mix, best in ladder:
        power, ipc = best.objectives
        ok = previous is None or power > previous
        print(f"   {'✓' if ok else '✗'} {step:5s} {power:8.2f} W  IPC {ipc:.3f}  {mix}")
        previous = power
    ratio = ladder[-1][2].objectives[0] / ladder[0][2].objectives[0]
    marker = '✓' if 1.7 <= ratio <= 2.0 else '⚠'
    print(f"   {marker} all levels / REG only: {ratio:.3f}")
    print()

    # Check 4: Throttling of the all-levels optimum
    print("4. Checking EDC Throttling...")
    mix = ladder[-1][1]
    for result in throttle_report(machine, iset, mix):
        if result.throttled:
            print(f"   ⚠ {result.requested_freq_mhz} MHz → {result.eff_freq_mhz} MHz, {result.power_w:.2f} W")
        else:
            print(f"   ✓ {result.requested_freq_mhz} MHz, {result.power_w:.2f} W")

    print()
    print("=" * 80)
    print("Diagnostic Complete")
    print("=" * 80)
    print()
    print("Next Steps:")
    print("1. Measure a workload on this machine:")
    print(f"   python main.py --run-instruction-groups {mix} -t 10")
    print()
    print("2. Tune the access mix:")
    print("   python main.py --optimize=NSGA2")


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Check the calibration of a machine model')
    parser.add_argument('-c', '--config', default='config.yaml', help='Path to configuration file')
    parser.add_argument('--machine-config', default=None, help='Machine config file')
    parser.add_argument('--max-count', type=int, default=5, help='Access count bound of the ladder sweep')
    args = parser.parse_args()
    diagnose(args.config, args.machine_config, args.max_count)
