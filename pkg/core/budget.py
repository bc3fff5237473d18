"""
Teacher-use budget: shaped rewards, reward statistics and the Lagrange multiplier

Budgets are selected per instruction. Every task owns one instruction per
budget keyword, so ``instruction_id = task * len(BUDGET_SPECS) + spec_index``.
"""

import logging
from collections import namedtuple
from dataclasses import asdict, dataclass, replace
from typing import Tuple

import numpy as np

from core.exceptions import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

STUDENT = 'student'
TEACHER = 'teacher'

SIGMA_FLOOR = 1e-6

BudgetSpec = namedtuple('BudgetSpec', ['keyword', 'b'])

BUDGET_SPECS = (
    BudgetSpec('no', 0.0),
    BudgetSpec('light', 0.1),
    BudgetSpec('moderate-light', 0.2),
    BudgetSpec('moderate', 0.3),
    BudgetSpec('high', 0.4),
    BudgetSpec('very high', 0.5),
)

ACCOUNTING_MODES = ('fraction', 'indicator')


def instruction_id(task, spec_index):
    """Instruction carrying budget keyword ``spec_index`` for ``task``"""
    if not 0 <= spec_index < len(BUDGET_SPECS):
        raise ConfigurationError(f"Unknown budget spec index {spec_index}")
    return task * len(BUDGET_SPECS) + spec_index


def task_of(instruction):
    return instruction // len(BUDGET_SPECS)


def budget_for_instruction(instruction) -> BudgetSpec:
    if instruction < 0:
        raise ConfigurationError(f"Unknown instruction_id {instruction}")
    return BUDGET_SPECS[instruction % len(BUDGET_SPECS)]


@dataclass(frozen=True)
class RewardConfig:
    """
    Clip bounds and running statistics for reward normalisation

    mu_r tracks teacher-token log-likelihoods; sigma_r tracks the spread of
    student-token log-likelihoods as scored by the teacher.
    """
    clip_lo: float = -2.0
    clip_hi: float = 2.0
    mu_r: float = 0.0
    sigma_r: float = 1.0
    stat_window: int = 100
    student_mean: float = 0.0
    student_var: float = 1.0
    mu_seen: bool = False
    sigma_seen: bool = False
    frozen: bool = False

    def __post_init__(self):
        if self.clip_lo != -2.0 or self.clip_hi != 2.0:
            raise ConfigurationError("Reward clip bounds are fixed at [-2, 2]")
        if self.stat_window < 1:
            raise ConfigurationError(f"stat_window must be >= 1, got {self.stat_window}")
        if self.sigma_r < SIGMA_FLOOR:
            object.__setattr__(self, 'sigma_r', SIGMA_FLOOR)

    def freeze(self):
        return replace(self, frozen=True)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def normalize(cfg: RewardConfig, r):
    """(r - mu_r) / sigma_r"""
    return (r - cfg.mu_r) / cfg.sigma_r


def shaped_reward(origin, teacher_logprob, lam, b, cfg: RewardConfig):
    """
    Per-token reward with the teacher-use shaping terms

    Student tokens earn their normalised teacher log-likelihood plus a bonus
    lam * b. Teacher tokens pay lam * (b - 1). The total is clipped.

    Args:
        origin: STUDENT or TEACHER
        teacher_logprob: log p of the emitted token (ignored for teacher tokens)
        lam: Lagrange multiplier, >= 0
        b: Budget fraction in [0, 1]
        cfg: Reward normalisation settings

    Returns:
        Shaped reward in [clip_lo, clip_hi]
    """
    if lam < 0:
        raise ContractViolation(f"lambda must be >= 0, got {lam}")
    if not 0.0 <= b <= 1.0:
        raise ContractViolation(f"Budget must be in [0, 1], got {b}")
    if origin == STUDENT:
        raw = normalize(cfg, teacher_logprob) + lam * b
    elif origin == TEACHER:
        raw = lam * (b - 1.0)
    else:
        raise ContractViolation(f"Unknown origin {origin!r}")
    return float(np.clip(raw, cfg.clip_lo, cfg.clip_hi))


def budget_bonus(origin, lam, b):
    """The shaping term alone (no likelihood, no clipping)"""
    return lam * b if origin == STUDENT else lam * (b - 1.0)


def constraint_value(trajectory, b, gamma=1.0):
    """
    Indicator constraint value: sum_i gamma^i * (1[teacher] - b * 1[student])

    Zero when teacher use balances the budget against the student-token count.
    """
    total = 0.0
    for i, step in enumerate(trajectory.steps):
        term = 1.0 if step.origin == TEACHER else -b
        total += gamma ** i * term
    return total


def update_reward_stats(cfg: RewardConfig, teacher_token_logprobs, student_token_teacher_logprobs):
    """
    Exponential-moving update of mu_r and sigma_r

    The first non-empty sample initialises a statistic; later samples are
    blended with weight 1 / stat_window. Frozen configs are returned as is.
    """
    teacher = np.asarray(teacher_token_logprobs, dtype=np.float64)
    student = np.asarray(student_token_teacher_logprobs, dtype=np.float64)
    if cfg.frozen or (teacher.size == 0 and student.size == 0):
        return cfg
    alpha = 1.0 / cfg.stat_window
    changes = {}

    if teacher.size:
        if cfg.mu_seen:
            changes['mu_r'] = cfg.mu_r + alpha * (teacher.mean() - cfg.mu_r)
        else:
            changes['mu_r'] = float(teacher.mean())
            changes['mu_seen'] = True

    if student.size:
        if cfg.sigma_seen:
            delta = student.mean() - cfg.student_mean
            mean = cfg.student_mean + alpha * delta
            var = (1.0 - alpha) * (cfg.student_var + alpha * delta ** 2) + alpha * student.var()
        else:
            mean, var = float(student.mean()), float(student.var())
            changes['sigma_seen'] = True
        changes['student_mean'] = float(mean)
        changes['student_var'] = float(var)
        changes['sigma_r'] = max(float(np.sqrt(var)), SIGMA_FLOOR)

    return replace(cfg, **changes)


@dataclass(frozen=True)
class LagrangeState:
    """
    Multiplier for one operating point

    Attributes:
        lam: Current multiplier, kept in [0, cap]
        eta: Dual step size
        cap: Upper clamp
        window: Trailing per-episode teacher-use fractions (most recent last)
        window_len: Maximum window length
        accounting: 'fraction' (use - b) or 'indicator' (use * (1 + b) - b)
    """
    lam: float = 0.0
    eta: float = 1e-2
    cap: float = 2.0
    window: Tuple[float, ...] = ()
    window_len: int = 50
    accounting: str = 'fraction'

    def __post_init__(self):
        if not 0.0 <= self.lam <= self.cap:
            raise ContractViolation(f"lambda {self.lam} outside [0, {self.cap}]")
        if self.window_len < 1:
            raise ConfigurationError(f"window_len must be >= 1, got {self.window_len}")
        if self.accounting not in ACCOUNTING_MODES:
            raise ConfigurationError(
                f"Unknown accounting mode {self.accounting!r}; expected one of {ACCOUNTING_MODES}"
            )

    @property
    def mean_use(self):
        return float(np.mean(self.window)) if self.window else float('nan')

    def to_dict(self):
        data = asdict(self)
        data['window'] = list(self.window)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['window'] = tuple(data.get('window', ()))
        return cls(**data)


def record_use(state: LagrangeState, fraction) -> LagrangeState:
    """Append one episode's teacher-use fraction, evicting the oldest beyond window_len"""
    window = (state.window + (float(fraction),))[-state.window_len:]
    return replace(state, window=window)


def excess_use(state: LagrangeState, b):
    fractions = np.asarray(state.window)
    if state.accounting == 'indicator':
        return float(np.mean(fractions * (1.0 + b) - b))
    return float(np.mean(fractions) - b)


def dual_update(state: LagrangeState, b) -> LagrangeState:
    """
    Projected dual step: lam' = clamp(lam + eta * excess, 0, cap)

    Raises:
        ContractViolation: if no teacher-use fractions have been recorded
    """
    if not state.window:
        raise ContractViolation("dual_update needs a non-empty teacher-use window")
    lam = float(np.clip(state.lam + state.eta * excess_use(state, b), 0.0, state.cap))
    return replace(state, lam=lam)
