#!/usr/bin/env python3
"""
Tests for the command line and the runner
"""
import sys
from pathlib import Path

import pytest

from machine_sim import MachineConfig
from main import (
    EXIT_CONFIG, EXIT_EVALUATION, EXIT_METRIC_UNAVAILABLE, EXIT_OK, MACHINE_CONFIG_ENV_VAR, ConfigError,
    EmberRunner, RunPlan, main,
)
from measurement import MeasurementError
from optimizer import OptimizerParams

CONFIG = str(Path(__file__).parent / 'config.yaml')


@pytest.fixture(autouse=True)
def no_machine_env(monkeypatch):
    monkeypatch.delenv(MACHINE_CONFIG_ENV_VAR, raising=False)


def run_cli(capsys, *args):
    code = main(['-c', CONFIG, *args])
    out, err = capsys.readouterr()
    return code, out, err


def small_optimize(log_path, *extra):
    return ('--optimize', '--individuals', '4', '--generations', '1', '--preheat', '0', '--quiet',
            '--log', str(log_path), *extra)


class TestListing:
    def test_avail_lists_registered_ids(self, capsys):
        code, out, _ = run_cli(capsys, '-a')
        assert code == EXIT_OK
        assert out.splitlines()[:2] == ['HSW_COREI_FMA', 'ZEN2_FMA']

    def test_empty_registry(self):
        assert EmberRunner(None).list_available({}) == ''

    def test_list_metrics(self, capsys):
        code, out, _ = run_cli(capsys, '--list-metrics')
        assert code == EXIT_OK
        assert out.startswith('sim-power [W]: ')
        assert 'external' in out

    def test_help_shows_defaults(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(['-c', CONFIG, '--help'])
        assert info.value.code == 0
        out = capsys.readouterr().out
        assert '--nsga2-m' in out
        assert '(default: 0.35)' in out
        assert '--run-instruction-groups' in out


class TestMeasure:
    def test_register_only_summary(self, capsys):
        code, out, _ = run_cli(capsys, '-i', 'HSW_COREI_FMA', '--run-instruction-groups', 'REG:1', '-t', '10')
        assert code == EXIT_OK
        assert '(l1i fetch)' in out
        lines = out.splitlines()
        header = lines.index('label,metric,mean,samples')
        assert lines[header + 1:header + 4] == ['run,sim-power,234.6,61', 'run,sim-ipc,4,61', 'run,freq,1500,1']

    def test_output_file(self, capsys, tmp_path):
        path = tmp_path / 'summary.csv'
        code, _, _ = run_cli(capsys, '--run-instruction-groups', 'L1_LS:5,L2_L:2,L3_L:2,RAM_L:1',
                             '--label', 'all', '-o', str(path))
        assert code == EXIT_OK
        assert path.read_bytes() == (b"label,metric,mean,samples\n"
                                     b"all,sim-power,436.241,61\n"
                                     b"all,sim-ipc,3.39943,61\n"
                                     b"all,freq,1500,1\n")

    def test_throttled_run_reports_effective_frequency(self, capsys):
        code, out, _ = run_cli(capsys, '--run-instruction-groups', 'L1_LS:5,L2_L:2,L3_L:2,RAM_L:1',
                               '--pstate', '2', '--measurement-metric', 'sim-power')
        assert code == EXIT_OK
        assert 'Throttled to 2200 MHz' in out
        assert 'run,freq,2200,1' in out

    @pytest.mark.parametrize("args", [
        ('--run-instruction-groups', 'REG:1,L4_L:2'),
        ('--run-instruction-groups', 'REG:0'),
        ('-i', 'NO_SUCH_SET'),
        ('--pstate', '7'),
        ('--measurement-metric', 'rapl'),
        ('-t', '5'),
        ('--set-line-count', '0'),
        ('--individuals', '3', '--optimize'),
    ])
    def test_bad_input_exits_2(self, capsys, args):
        code, _, err = run_cli(capsys, *args)
        assert code == EXIT_CONFIG
        assert err.startswith('✗')

    def test_silent_external_metric_exits_3(self, capsys):
        code, _, err = run_cli(capsys, '-t', '1', '--start-delta', '0', '--stop-delta', '0',
                               '--measurement-metric', 'external',
                               '--metric-command', f'{sys.executable} -c pass')
        assert code == EXIT_METRIC_UNAVAILABLE
        assert 'unavailable' in err

    def test_external_metric_summary(self, capsys):
        command = f'{sys.executable} -c "print(\'0 250\'); print(\'500 260\')"'
        code, out, _ = run_cli(capsys, '-t', '1', '--start-delta', '0', '--stop-delta', '0',
                               '--measurement-metric', 'external', '--metric-command', command)
        assert code == EXIT_OK
        assert 'run,external,255,2' in out

    def test_measure_returns_rows(self):
        runner = EmberRunner(None)
        result, rows = runner.measure(RunPlan(groups='REG:1', progress=False))
        assert result.ipc == 4.0
        assert [row.metric for row in rows] == ['sim-power', 'sim-ipc', 'freq']

    def test_window_must_fit_the_run(self):
        with pytest.raises(MeasurementError):
            EmberRunner(None).measure(RunPlan(duration_s=5))


class TestOptimize:
    def test_small_run_logs_every_evaluation(self, capsys, tmp_path):
        log = tmp_path / 'opt.log'
        code, out, _ = run_cli(capsys, *small_optimize(log))
        assert code == EXIT_OK
        assert 'FINAL FRONT' in out
        assert '✓ 8 evaluations' in out
        assert len(log.read_text().splitlines()) == 8

    def test_default_run_size(self, capsys, tmp_path):
        log = tmp_path / 'opt.log'
        code, out, _ = run_cli(capsys, '--optimize=NSGA2', '--quiet', '--log', str(log))
        assert code == EXIT_OK
        assert 'Preheat' in out
        assert len(log.read_text().splitlines()) == 840

    def test_runs_are_reproducible(self, capsys, tmp_path):
        for name in ('a.log', 'b.log'):
            assert run_cli(capsys, *small_optimize(tmp_path / name, '--generations', '3', '--seed', '5'))[0] == EXIT_OK
        assert (tmp_path / 'a.log').read_bytes() == (tmp_path / 'b.log').read_bytes()

    def test_unavailable_metric_marks_candidates_invalid(self, capsys, tmp_path):
        log = tmp_path / 'opt.log'
        code, out, _ = run_cli(capsys, *small_optimize(log), '-t', '1', '--start-delta', '0', '--stop-delta', '0',
                               '--optimization-metric', 'external', '--metric-command', f'{sys.executable} -c pass')
        assert code == EXIT_OK
        assert 'FINAL FRONT (0 individuals' in out
        assert all(line.endswith('\tnan\t0') for line in log.read_text().splitlines())

    def test_evaluator_failure_exits_4(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, *small_optimize(tmp_path / 'opt.log'), '-t', '1', '--start-delta', '0',
                               '--stop-delta', '0', '--optimization-metric', 'external',
                               '--metric-command', str(tmp_path / 'no-such-binary'))
        assert code == EXIT_EVALUATION
        assert 'generation 0, individual 0' in err

    def test_run_optimize_front(self, tmp_path):
        runner = EmberRunner(None)
        plan = RunPlan(mode='optimize', preheat_s=0, targets='REG,L1_LS,L2_L', log_path='',
                       params=OptimizerParams(population=8, generations=4, max_count=3), progress=False)
        outcome = runner.run_optimize(plan)
        assert outcome.evaluations == 40
        powers = [member.objectives[0] for member in outcome.front]
        assert powers == sorted(powers, reverse=True)


class TestConfiguration:
    def test_missing_config_uses_defaults(self, capsys, tmp_path):
        runner = EmberRunner(str(tmp_path / 'absent.yaml'))
        assert 'Config file not found' in capsys.readouterr().out
        assert runner.config == runner._default_config()
        assert runner.machine == MachineConfig()

    def test_partial_config_is_merged(self, tmp_path):
        path = tmp_path / 'config.yaml'
        path.write_text("optimizer:\n  individuals: 8\n")
        config = EmberRunner(str(path)).config
        assert config['optimizer']['individuals'] == 8
        assert config['optimizer']['generations'] == 20

    def test_broken_yaml_exits_2(self, capsys, tmp_path):
        path = tmp_path / 'config.yaml'
        path.write_text("run: [unclosed\n")
        with pytest.raises(ConfigError):
            EmberRunner(str(path))
        assert main(['-c', str(path), '-a']) == EXIT_CONFIG

    def test_machine_config_precedence(self, monkeypatch, tmp_path):
        from_yaml = tmp_path / 'yaml.conf'
        from_env = tmp_path / 'env.conf'
        from_flag = tmp_path / 'flag.conf'
        for path, watts in ((from_yaml, 10), (from_env, 20), (from_flag, 30)):
            path.write_text(f"static_power_w = {watts}\n")
        config = tmp_path / 'config.yaml'
        config.write_text(f"machine:\n  config_path: {from_yaml}\n")

        assert EmberRunner(str(config)).machine.static_power_w == 10
        monkeypatch.setenv(MACHINE_CONFIG_ENV_VAR, str(from_env))
        assert EmberRunner(str(config)).machine.static_power_w == 20
        assert EmberRunner(str(config), machine_config=str(from_flag)).machine.static_power_w == 30

    def test_bad_machine_config_exits_2(self, capsys, tmp_path):
        path = tmp_path / 'bad.conf'
        path.write_text("turbo = 1\n")
        code, _, err = run_cli(capsys, '--machine-config', str(path), '-a')
        assert code == EXIT_CONFIG
        assert 'turbo' in err

    def test_machine_config_changes_results(self, capsys, tmp_path):
        path = tmp_path / 'small.conf'
        path.write_text("cores = 32\n")
        code, out, _ = run_cli(capsys, '--machine-config', str(path), '--measurement-metric', 'sim-power')
        assert code == EXIT_OK
        # 100 W static + 32 cores * 2.025 W + 5 W fetch tier
        assert 'run,sim-power,169.8,61' in out
