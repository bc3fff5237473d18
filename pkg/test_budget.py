"""
Tests for budget specs, shaped rewards, reward statistics and the multiplier
"""

import numpy as np
import pytest

from core.budget import (
    BUDGET_SPECS, SIGMA_FLOOR, STUDENT, TEACHER, LagrangeState, RewardConfig, budget_bonus,
    budget_for_instruction, constraint_value, dual_update, excess_use, instruction_id,
    record_use, shaped_reward, task_of, update_reward_stats,
)
from core.exceptions import ConfigurationError, ContractViolation
from core.pcl import Trajectory, TrajectoryStep
from core.tabular_lm import Context


def test_instruction_layout():
    assert [s.b for s in BUDGET_SPECS] == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
    assert instruction_id(2, 3) == 15
    assert task_of(15) == 2
    assert budget_for_instruction(15) == BUDGET_SPECS[3]
    assert budget_for_instruction(6).keyword == 'no'
    with pytest.raises(ConfigurationError):
        instruction_id(0, 6)
    with pytest.raises(ConfigurationError):
        budget_for_instruction(-1)


def test_shaped_reward_terms():
    cfg = RewardConfig(mu_r=-1.0, sigma_r=0.5)
    # (-1.5 + 1) / 0.5 + 0.5 * 0.2
    assert shaped_reward(STUDENT, -1.5, 0.5, 0.2, cfg) == pytest.approx(-0.9)
    assert shaped_reward(TEACHER, -7.0, 0.5, 0.2, cfg) == pytest.approx(-0.4)
    assert shaped_reward(TEACHER, 0.0, 0.0, 0.3, cfg) == 0.0


def test_shaped_reward_is_clipped():
    cfg = RewardConfig(mu_r=0.0, sigma_r=0.1)
    assert shaped_reward(STUDENT, -5.0, 0.0, 0.0, cfg) == -2.0
    assert shaped_reward(STUDENT, 5.0, 0.0, 0.0, cfg) == 2.0
    assert shaped_reward(TEACHER, 0.0, 2.0, 0.0, cfg) == -2.0


def test_shaped_reward_rejects_bad_inputs():
    cfg = RewardConfig()
    with pytest.raises(ContractViolation):
        shaped_reward(STUDENT, -1.0, -0.1, 0.2, cfg)
    with pytest.raises(ContractViolation):
        shaped_reward(STUDENT, -1.0, 0.1, 1.5, cfg)
    with pytest.raises(ContractViolation):
        shaped_reward('nobody', -1.0, 0.1, 0.2, cfg)


def test_clip_bounds_are_fixed():
    with pytest.raises(ConfigurationError):
        RewardConfig(clip_lo=-3.0)
    with pytest.raises(ConfigurationError):
        RewardConfig(stat_window=0)
    assert RewardConfig(sigma_r=0.0).sigma_r == SIGMA_FLOOR


def test_budget_bonus():
    assert budget_bonus(STUDENT, 1.5, 0.2) == pytest.approx(0.3)
    assert budget_bonus(TEACHER, 1.5, 0.2) == pytest.approx(-1.2)


def _trajectory(origins):
    steps = [
        TrajectoryStep(Context((), 0), i, 1, 1, origin, 0.0, i == len(origins) - 1)
        for i, origin in enumerate(origins)
    ]
    return Trajectory(steps, 0)


def test_constraint_value_balances_at_budget():
    # 1 teacher token out of 5 at b = 0.25: 1 - 4 * 0.25 = 0
    traj = _trajectory([STUDENT, TEACHER, STUDENT, STUDENT, STUDENT])
    assert constraint_value(traj, 0.25) == pytest.approx(0.0)
    assert constraint_value(traj, 0.0) == pytest.approx(1.0)
    assert constraint_value(traj, 0.25, gamma=0.5) == pytest.approx(-0.25 + 0.5 - 0.0625 - 0.03125 - 0.015625)


def test_reward_stats_initialise_then_blend():
    cfg = RewardConfig(stat_window=4)
    first = update_reward_stats(cfg, [-1.0, -3.0], [-1.0, -2.0, -3.0])
    assert first.mu_r == pytest.approx(-2.0)
    assert first.student_mean == pytest.approx(-2.0)
    assert first.sigma_r == pytest.approx(np.std([-1.0, -2.0, -3.0]))
    second = update_reward_stats(first, [-6.0], [])
    assert second.mu_r == pytest.approx(-2.0 + 0.25 * (-6.0 + 2.0))
    assert second.sigma_r == first.sigma_r


def test_reward_stats_frozen_and_empty():
    cfg = RewardConfig()
    assert update_reward_stats(cfg, [], []) is cfg
    frozen = cfg.freeze()
    assert update_reward_stats(frozen, [-1.0], [-1.0]) is frozen


def test_reward_stats_floor_sigma():
    cfg = update_reward_stats(RewardConfig(), [], [-1.0, -1.0])
    assert cfg.sigma_r == SIGMA_FLOOR


def test_dual_update_step():
    state = LagrangeState(window=(0.5, 0.5))
    assert dual_update(state, 0.1).lam == pytest.approx(0.004)
    assert dual_update(LagrangeState(lam=1.999, window=(1.0,)), 0.0).lam == 2.0
    assert dual_update(LagrangeState(lam=0.001, window=(0.0,)), 0.5).lam == 0.0
    with pytest.raises(ContractViolation):
        dual_update(LagrangeState(), 0.1)


@pytest.mark.parametrize('lam', [0.0, 0.3, 1.0, 1.9, 2.0])
@pytest.mark.parametrize('eta', [1e-2, 0.5, 5.0])
def test_dual_update_is_monotone_in_excess_and_bounded(lam, eta):
    uses = np.linspace(0.0, 1.0, 21)
    updated = [dual_update(LagrangeState(lam=lam, eta=eta, window=(use,)), 0.3).lam for use in uses]
    assert all(0.0 <= u <= 2.0 for u in updated)
    assert all(a <= b for a, b in zip(updated, updated[1:]))
    unclipped = [u for use, u in zip(uses, updated) if 0.0 < lam + eta * (use - 0.3) < 2.0]
    assert all(a < b for a, b in zip(unclipped, unclipped[1:]))


def test_indicator_accounting():
    state = LagrangeState(window=(0.5,), accounting='indicator')
    assert excess_use(state, 0.2) == pytest.approx(0.5 * 1.2 - 0.2)
    with pytest.raises(ConfigurationError):
        LagrangeState(accounting='tokens')
    with pytest.raises(ContractViolation):
        LagrangeState(lam=3.0)


def test_multiplier_decays_to_zero_under_budget():
    state = LagrangeState(lam=1.0, eta=0.1)
    for _ in range(200):
        state = dual_update(record_use(state, 0.0), 0.3)
    assert state.lam == 0.0


def test_record_use_keeps_trailing_window():
    state = LagrangeState(window_len=3)
    for fraction in (0.1, 0.2, 0.3, 0.4):
        state = record_use(state, fraction)
    assert state.window == (0.2, 0.3, 0.4)
    assert state.mean_use == pytest.approx(0.3)
    assert np.isnan(LagrangeState().mean_use)
    restored = LagrangeState.from_dict(state.to_dict())
    assert restored == state
