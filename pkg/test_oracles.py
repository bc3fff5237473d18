"""
Tests for the brute-force verifier suite
"""

from dataclasses import replace

import pytest

from core import oracles
from core.alphabet import Vocab
from core.budget import STUDENT
from core.exceptions import ContractViolation
from core.oracles import (
    OracleConfig, OracleReport, brute_reverse_kl, check_kl_recursion_identity, check_monte_carlo_reverse_kl,
    check_pcl_fixed_point, check_soft_opt_equals_teacher, check_specdec_limits, complete_paths,
    monte_carlo_reverse_kl, recursive_reverse_kl, run_oracle_suite, shifted_value_gap,
)
from core.pcl import ORACLE, Segment, Trajectory, TrajectoryStep
from core.soft_mdp import SoftMDPConfig, reverse_kl_exact
from core.tabular_lm import Prompt, random_teacher

SEEDS = range(6)


def test_complete_paths_count():
    paths = list(complete_paths(Vocab(3, 0), 2))
    assert len(paths) == 7
    assert (0,) in paths and (1, 0) in paths and (2, 2) in paths
    assert (0, 1) not in paths


def test_brute_force_and_recursion_agree():
    vocab = Vocab(3, 0)
    teacher = random_teacher(0, 2, vocab, 1.0, 1)
    student = random_teacher(1, 1, vocab, 1.0, 1)
    brute = brute_reverse_kl(student, teacher, Prompt(0), 4)
    assert brute == pytest.approx(recursive_reverse_kl(student, teacher, Prompt(0), 4), abs=1e-12)
    assert recursive_reverse_kl(student, teacher, Prompt(0), 0) == 0.0


def test_monte_carlo_estimate_within_three_standard_errors():
    vocab = Vocab(3, 0)
    teacher = random_teacher(2, 2, vocab, 2.0, 1)
    student = random_teacher(3, 1, vocab, 2.0, 1)
    exact = reverse_kl_exact(student, teacher, Prompt(0), SoftMDPConfig(horizon=4))
    mean, se = monte_carlo_reverse_kl(student, teacher, Prompt(0), 4, 4000, seed=0)
    assert se > 0
    assert abs(mean - exact) <= 3 * se
    with pytest.raises(ContractViolation):
        monte_carlo_reverse_kl(student, teacher, Prompt(0), 4, 1)


def test_report_health():
    assert OracleReport('check', 1e-12, 1e-9).healthy
    assert not OracleReport('check', 1e-3, 1e-9).healthy
    assert OracleReport('control', 1e-3, 1e-9, negative_control=True).healthy
    assert not OracleReport('control', 0.0, 1e-9, negative_control=True).healthy


def _assert_healthy(reports):
    for report in reports:
        assert report.healthy, f"{report.name}: {report.max_residual} vs {report.tolerance}"


def test_kl_recursion_identity_and_control():
    reports = check_kl_recursion_identity(SEEDS, ((3, 4), (4, 3)))
    assert [r.negative_control for r in reports] == [False, True]
    _assert_healthy(reports)
    assert len(check_kl_recursion_identity(SEEDS, ((3, 1),))) == 1


def test_soft_optimum_and_control():
    _assert_healthy(check_soft_opt_equals_teacher(SEEDS, ((3, 4),)))


def test_pcl_fixed_point_and_control():
    reports = check_pcl_fixed_point(SEEDS, (1.0, 0.5), horizon=3)
    _assert_healthy(reports)
    assert [r.negative_control for r in reports] == [False, True, False]
    assert reports[1].max_residual == pytest.approx(0.1, abs=1e-9)
    assert reports[2].max_residual <= 1e-9


def test_shifted_value_gap_by_segment_end():
    steps = [TrajectoryStep(None, i, 1, 1, STUDENT, 0.0, i == 2, 0.0) for i in range(3)]
    traj = Trajectory(steps, 0, ORACLE, Prompt(0))
    assert shifted_value_gap(Segment(traj, 0, 2), 3, 0.1) == pytest.approx(0.0)
    assert shifted_value_gap(Segment(traj, 1, 2), 3, 0.1) == pytest.approx(-0.1)
    assert shifted_value_gap(Segment(traj, 0, 1), 3, 0.1, gamma=0.5) == pytest.approx(-0.05)


def test_gap_report_catches_a_scaled_residual(monkeypatch):
    exact = oracles.path_residual
    monkeypatch.setattr(oracles, 'path_residual', lambda *args: 2.0 * exact(*args))
    reports = check_pcl_fixed_point(range(3), (1.0,), horizon=3)
    # the fixed point and the control cannot tell a scaled residual apart
    assert reports[0].healthy and reports[1].healthy
    assert not reports[2].healthy
    assert reports[2].max_residual == pytest.approx(0.1, abs=1e-9)


def test_specdec_limits_and_control():
    _assert_healthy(check_specdec_limits(range(10), (3, 5, 10)))


def test_monte_carlo_check_and_control():
    _assert_healthy(check_monte_carlo_reverse_kl(range(3)))


def test_small_suite_is_healthy():
    config = OracleConfig(n_seeds=4, recursion_sizes=((3, 3),), soft_opt_sizes=((3, 3),), pcl_horizon=3,
                          specdec_instances=5, draft_lens=(3,), specdec_max_len=8)
    reports = run_oracle_suite(config)
    assert len(reports) == 11
    _assert_healthy(reports)


def test_suite_order_independent_of_workers():
    config = OracleConfig(n_seeds=2, recursion_sizes=((3, 2),), soft_opt_sizes=((3, 2),), pcl_horizon=2,
                          specdec_instances=2, draft_lens=(3,), specdec_max_len=4, mc_samples=500)
    serial = run_oracle_suite(replace(config, workers=1))
    threaded = run_oracle_suite(replace(config, workers=5))
    assert [r.name for r in serial] == [r.name for r in threaded]
    assert [r.max_residual for r in serial] == [r.max_residual for r in threaded]

    with pytest.raises(ContractViolation):
        run_oracle_suite(replace(config, workers=0))


def test_oracle_config_round_trip():
    config = OracleConfig(n_seeds=3, recursion_sizes=((3, 2),))
    assert OracleConfig.from_dict(config.to_dict()) == config
