#!/usr/bin/env python3
"""
Tests for the analytical machine model
"""
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from machine_sim import (
    MEMORY_LEVELS, PATTERN_VISIT_WEIGHTS, FetchTier, LevelParams, MachineConfig, MachineConfigError,
    SimulationError, classify_fetch_tier, cross_evaluate, format_machine_config, get_instruction_set,
    level_visits, list_instruction_sets, load_machine_config, parse_machine_config, register_instruction_set,
    simulate, simulate_workload, stall_cycles,
)
from workload import (
    REG, AccessPattern, InstructionSetDef, MemoryLevel, Schedule, Target, WorkloadConfig, all_targets,
    build_schedule, parse_access_set,
)

SHIPPED_CONF = Path(__file__).parent / 'machines' / 'epyc7502_2s.conf'
RAM_L = Target(MemoryLevel.RAM, AccessPattern.LOAD)
ALL_LEVELS_MIX = "L1_LS:5,L2_L:2,L3_L:2,RAM_L:1"


@pytest.fixture
def machine():
    return MachineConfig()


@pytest.fixture
def iset():
    return get_instruction_set('HSW_COREI_FMA')


def run(groups, machine, iset, pstate=0, unroll=1200):
    return simulate(build_schedule(WorkloadConfig(iset.id, unroll, parse_access_set(groups))), iset, machine, pstate)


class TestReferenceMachine:
    def test_register_only_runs_at_decoder_width(self, machine, iset):
        result = run("REG:1", machine, iset)
        assert result.ipc == 4.0
        assert result.power_w == pytest.approx(234.6)
        assert result.eff_freq_mhz == 1500
        assert result.stall_cycles_per_loop == 0.0
        assert not result.throttled

    @pytest.mark.parametrize("groups,power", [
        ("REG:1,L1_LS:1", 306.6),
        ("REG:3,L1_LS:5,L2_L:2", 327.72),
        ("REG:1,L1_LS:5,L2_L:2,L3_L:2", 356.52),
        (ALL_LEVELS_MIX, 436.24),
    ])
    def test_level_ladder(self, machine, iset, groups, power):
        assert run(groups, machine, iset).power_w == pytest.approx(power, abs=0.01)

    def test_all_levels_mix_stalls_on_ram(self, machine, iset):
        result = run(ALL_LEVELS_MIX, machine, iset)
        assert result.stall_cycles_per_loop == pytest.approx(212.0)
        assert result.ipc == pytest.approx(4800 / 1412)
        assert result.power_w / run("REG:1", machine, iset).power_w == pytest.approx(1.8595, abs=1e-3)

    def test_edc_throttles_one_notch(self, machine, iset):
        result = run(ALL_LEVELS_MIX, machine, iset, pstate=2)
        assert result.requested_freq_mhz == 2500
        assert result.eff_freq_mhz == 2200
        assert result.pstate_index == 1
        assert result.throttled
        assert result.power_w == pytest.approx(654.35, abs=0.01)
        assert result.power_w <= machine.edc_limit_w

    def test_unthrottled_power_above_limit(self, machine, iset):
        relaxed = replace(machine, edc_limit_w=1000.0)
        result = run(ALL_LEVELS_MIX, relaxed, iset, pstate=2)
        assert result.eff_freq_mhz == 2500
        assert result.power_w == pytest.approx(803.76, abs=0.01)

    def test_register_only_never_throttles(self, machine, iset):
        for pstate, freq in enumerate(machine.pstates_mhz):
            assert run("REG:1", machine, iset, pstate).eff_freq_mhz == freq

    def test_limit_just_below_register_power_throttles(self, machine, iset):
        top = len(machine.pstates_mhz) - 1
        reg_power = run("REG:1", machine, iset, top).power_w
        tight = replace(machine, edc_limit_w=reg_power - 1.0)
        result = run("REG:1", tight, iset, top)
        assert result.eff_freq_mhz < result.requested_freq_mhz
        assert result.power_w <= tight.edc_limit_w

    def test_lowest_pstate_is_kept_above_limit(self, machine, iset):
        tight = replace(machine, edc_limit_w=150.0)
        result = run(ALL_LEVELS_MIX, tight, iset, 2)
        assert result.eff_freq_mhz == 1500
        assert result.power_w > tight.edc_limit_w

    def test_power_grows_with_pstate(self, machine, iset):
        powers = [run("REG:1", machine, iset, p).power_w for p in range(3)]
        assert powers == sorted(powers)

    def test_ram_latency_scales_with_core_clock(self, machine, iset):
        relaxed = replace(machine, edc_limit_w=1000.0)
        low = run(ALL_LEVELS_MIX, relaxed, iset, 0)
        high = run(ALL_LEVELS_MIX, relaxed, iset, 2)
        assert high.stall_cycles_per_loop == pytest.approx(low.stall_cycles_per_loop * 2500 / 1500)
        assert high.ipc < low.ipc

    def test_deterministic(self, machine, iset):
        assert run(ALL_LEVELS_MIX, machine, iset, 2) == run(ALL_LEVELS_MIX, machine, iset, 2)


class TestFetchTiers:
    @pytest.mark.parametrize("unroll,tier", [
        (1, FetchTier.OPCACHE),
        (900, FetchTier.OPCACHE),
        (901, FetchTier.L1I),
        (1800, FetchTier.L1I),
        (1801, FetchTier.L2),
        (6001, FetchTier.L2),
    ])
    def test_boundaries(self, machine, unroll, tier):
        config = WorkloadConfig('HSW_COREI_FMA', unroll, parse_access_set("REG:1"))
        assert classify_fetch_tier(config, machine) == tier

    def test_opcache_loop_draws_less_than_l1i_loop(self, machine, iset):
        opcache = run("REG:1", machine, iset, unroll=900)
        l1i = run("REG:1", machine, iset, unroll=1000)
        assert opcache.fetch_tier == FetchTier.OPCACHE
        assert l1i.fetch_tier == FetchTier.L1I
        assert opcache.power_w < l1i.power_w

    def test_l2_overflow_slows_the_loop(self, machine, iset):
        inside = run("REG:1", machine, iset, unroll=6000)
        outside = run("REG:1", machine, iset, unroll=6001)
        assert inside.ipc == 4.0
        assert outside.ipc == pytest.approx(3.2)


def discrete_stall_oracle(schedule, machine, pstate):
    """Walk the loop slot by slot, charging latency for every operation past the in-flight limit"""
    in_flight = {level: 0.0 for level in MEMORY_LEVELS}
    stall = 0.0
    for target in schedule.slots:
        if target.is_register:
            continue
        limit = machine.levels[target.level].max_outstanding
        before = in_flight[target.level]
        after = before + PATTERN_VISIT_WEIGHTS[target.pattern]
        in_flight[target.level] = after
        uncovered = max(0.0, after - limit) - max(0.0, before - limit)
        stall += uncovered * machine.latency_cycles(target.level, pstate)
    return stall


class TestStalls:
    def test_stall_is_overrun_times_listed_latency(self, machine, iset):
        schedule = build_schedule(WorkloadConfig(iset.id, 1200, parse_access_set(ALL_LEVELS_MIX)))
        visits = level_visits(schedule)
        literal = sum(max(0.0, visits[level] - machine.levels[level].max_outstanding)
                      * machine.levels[level].access_latency_cycles for level in MEMORY_LEVELS)
        # only RAM overruns: 120 visits against 67 outstanding, 4 cycles each
        assert literal == pytest.approx(53 * 4.0)
        assert stall_cycles(visits, machine, 0) == pytest.approx(literal)
        assert simulate(schedule, iset, machine, 0).stall_cycles_per_loop == pytest.approx(literal)
        for pstate, freq in enumerate(machine.pstates_mhz):
            assert stall_cycles(visits, machine, pstate) == pytest.approx(literal * freq / 1500)

    def test_core_clocked_ram_keeps_listed_latency(self, machine, iset):
        core_clocked = replace(machine, uncore_levels=())
        visits = level_visits(build_schedule(WorkloadConfig(iset.id, 1200, parse_access_set(ALL_LEVELS_MIX))))
        assert [stall_cycles(visits, core_clocked, p) for p in range(3)] == pytest.approx([212.0] * 3)

    @pytest.mark.parametrize("k", [0, 1, 5, 33])
    def test_ram_overrun_costs_latency_each(self, machine, iset, k):
        schedule = Schedule(tuple([RAM_L] * (67 + k) + [REG] * 100))
        result = simulate(schedule, iset, machine, 0)
        assert result.stall_cycles_per_loop == pytest.approx(k * 4.0)

    def test_matches_slot_by_slot_oracle(self, iset):
        small = replace(MachineConfig(), levels={
            MemoryLevel.L1: LevelParams(1.0, 40.0, 0.75),
            MemoryLevel.L2: LevelParams(2.0, 20.0, 1.1),
            MemoryLevel.L3: LevelParams(3.0, 10.0, 1.5),
            MemoryLevel.RAM: LevelParams(4.0, 5.0, 14.4),
        }, edc_limit_w=1e9)
        targets = all_targets()
        rng = np.random.default_rng(11)
        for _ in range(200):
            unroll = int(rng.integers(1, 257))
            picks = rng.integers(0, len(targets), size=unroll)
            schedule = Schedule(tuple(targets[int(i)] for i in picks))
            pstate = int(rng.integers(0, 3))
            result = simulate(schedule, iset, small, pstate)
            assert result.stall_cycles_per_loop == pytest.approx(discrete_stall_oracle(schedule, small, pstate))

    def test_extra_saturated_access_never_raises_ipc(self, machine, iset):
        base = simulate(Schedule(tuple([RAM_L] * 80 + [REG] * 40)), iset, machine, 0)
        more = simulate(Schedule(tuple([RAM_L] * 81 + [REG] * 40)), iset, machine, 0)
        assert more.ipc <= base.ipc

    def test_level_visits_use_pattern_weights(self):
        schedule = build_schedule(WorkloadConfig('HSW_COREI_FMA', 10, parse_access_set("L1_LS:2,L2_P:2,L3_2LS:1")))
        visits = level_visits(schedule)
        assert visits[MemoryLevel.L1] == 8.0
        assert visits[MemoryLevel.L2] == 2.0
        assert visits[MemoryLevel.L3] == 6.0
        assert visits[MemoryLevel.RAM] == 0.0


class TestErrors:
    def test_invalid_pstate(self, machine, iset):
        with pytest.raises(SimulationError):
            run("REG:1", machine, iset, pstate=3)

    def test_empty_schedule(self, machine, iset):
        with pytest.raises(SimulationError):
            simulate(Schedule(()), iset, machine, 0)

    def test_unknown_instruction_set(self):
        with pytest.raises(SimulationError, match="NOPE"):
            get_instruction_set('NOPE')

    def test_duplicate_registration(self, iset):
        with pytest.raises(ValueError):
            register_instruction_set(iset)

    def test_registry_order(self):
        ids = list_instruction_sets()
        assert ids[:2] == ['HSW_COREI_FMA', 'ZEN2_FMA']

    def test_simulate_workload_looks_up_instruction_set(self, machine):
        config = WorkloadConfig('ZEN2_FMA', 1200, parse_access_set("REG:1"))
        assert simulate_workload(config, machine, 0).ipc == 4.0
        with pytest.raises(SimulationError):
            simulate_workload(WorkloadConfig('NOPE', 10, parse_access_set("REG:1")), machine, 0)


class TestMachineConfigFile:
    def test_empty_file_is_reference_machine(self, tmp_path):
        path = tmp_path / 'empty.conf'
        path.write_text("# nothing here\n\n")
        assert load_machine_config(path) == MachineConfig()

    def test_shipped_config_is_reference_machine(self):
        assert load_machine_config(SHIPPED_CONF) == MachineConfig()

    def test_overrides(self):
        machine = parse_machine_config("cores = 8\nmax_outstanding.ram = 10\nfetch_tier_power_bonus_w.l2 = 3\n")
        assert machine.cores == 8
        assert machine.levels[MemoryLevel.RAM].max_outstanding == 10.0
        assert machine.levels[MemoryLevel.L1] == MachineConfig().levels[MemoryLevel.L1]
        assert machine.fetch_tier_power_bonus_w[FetchTier.L2] == 3.0

    def test_format_parses_back(self):
        machine = parse_machine_config("cores = 16\npstates_mhz = 1000,2000\nvoltage_scale = 0.9,1.05\n")
        assert parse_machine_config(format_machine_config(machine)) == machine

    def test_large_and_long_values_parse_back(self):
        machine = replace(MachineConfig(), l1i_capacity_sets=1_500_000, l2i_capacity_sets=2_000_000,
                          decoder_width=4.123456789)
        text = format_machine_config(machine)
        assert "l2i_capacity_sets = 2000000\n" in text
        assert parse_machine_config(text) == machine

    @pytest.mark.parametrize("text,key", [
        ("turbo = 1", 'turbo'),
        ("cores = many", 'cores'),
        ("pstates_mhz = 2200,1500,2500", 'pstates_mhz'),
        ("pstates_mhz = 1500,2200", 'voltage_scale'),
        ("max_outstanding.l4 = 3", 'max_outstanding.l4'),
        ("energy_per_access_nj.l2 = -1", 'energy_per_access_nj.l2'),
        ("edc_limit_w = 50", 'edc_limit_w'),
        ("uncore_levels = ram,l5", 'uncore_levels'),
        ("decoder_width = inf", 'decoder_width'),
    ])
    def test_invalid_values_name_the_key(self, text, key):
        with pytest.raises(MachineConfigError) as info:
            parse_machine_config(text)
        assert info.value.key == key
        assert key in str(info.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MachineConfigError, match="not found"):
            load_machine_config(tmp_path / 'absent.conf')


class TestCrossEvaluate:
    def test_every_workload_at_every_pstate(self, machine, iset):
        workloads = {
            'reg': WorkloadConfig(iset.id, 1200, parse_access_set("REG:1")),
            'all': WorkloadConfig(iset.id, 1200, parse_access_set(ALL_LEVELS_MIX)),
        }
        results = cross_evaluate(workloads, machine)
        assert set(results) == {(label, p) for label in workloads for p in range(3)}
        assert results[('reg', 0)].power_w == pytest.approx(234.6)
        assert results[('all', 2)].eff_freq_mhz == 2200
        assert results[('all', 0)] == run(ALL_LEVELS_MIX, machine, iset)

    def test_instruction_set_must_satisfy_invariants(self):
        with pytest.raises(ValueError):
            InstructionSetDef('BAD', fma_per_set=2, alu_per_set=2, instructions_per_set=3, bytes_per_set=10)
