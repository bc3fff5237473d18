"""
Path Consistency Learning on tabular policy and value tables

For a segment s_i, a_i, ..., s_{i+d} the consistency residual is

    C = -V(s_i) + gamma^d * V(s_{i+d}) + sum_j gamma^j * (r_{i+j} - tau * log pi(a_{i+j} | s_{i+j}))

with V(terminal) = 0. The loss is 0.5 * mean(C^2) over a batch of segments.
Gradients are analytic: the policy is a softmax table, the value a lookup table
indexed on (instruction, policy window, step).
"""

import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from core.budget import (
    BUDGET_SPECS, STUDENT, TEACHER, RewardConfig, budget_for_instruction, shaped_reward,
)
from core.exceptions import ContractViolation, NumericalGuardError
from core.soft_mdp import ValueTable
from core.tabular_lm import Context, Prompt, TabularLM
from core.tandem import DecodeState, Sampling, tandem_step

logger = logging.getLogger(__name__)

ON_POLICY = 'on_policy'
ORACLE = 'oracle'
REPLAY = 'replay'
TEACHER_ROLLOUT = 'teacher'


@dataclass(frozen=True)
class TrajectoryStep:
    """
    One decision of a trajectory

    Attributes:
        state: Policy-side context the action was taken in
        step: Position in the output sequence
        action: Policy action (a base token or <tau>)
        token: Base token that entered the output
        origin: STUDENT, or TEACHER when the action was <tau>
        reward: Reward credited to the action
        done: True only on the final step
        teacher_logprob: log p of ``token`` under the teacher
    """
    state: Context
    step: int
    action: int
    token: int
    origin: str
    reward: float
    done: bool
    teacher_logprob: float = 0.0


@dataclass
class Trajectory:
    steps: List[TrajectoryStep]
    instruction_id: int
    source: str = ON_POLICY
    prompt: Optional[Prompt] = None

    def __post_init__(self):
        for i, s in enumerate(self.steps):
            if s.done and i != len(self.steps) - 1:
                raise ContractViolation("Only the last step of a trajectory may be done")
            if not np.isfinite(s.reward):
                raise ContractViolation(f"Non-finite reward at step {i}")

    def __len__(self):
        return len(self.steps)

    @property
    def tokens(self):
        return tuple(s.token for s in self.steps)

    @property
    def teacher_calls(self):
        return sum(1 for s in self.steps if s.origin == TEACHER)

    @property
    def teacher_use(self):
        return self.teacher_calls / len(self.steps) if self.steps else 0.0

    @property
    def complete(self):
        return bool(self.steps) and self.steps[-1].done


@dataclass(frozen=True)
class PCLConfig:
    tau: float = 1.0
    gamma: float = 1.0
    window_d: int = 1
    lr_policy: float = 1e-2
    lr_value: float = 1e-3
    batch_size: int = 16
    replay_capacity: int = 256
    updates_per_batch: int = 4

    def __post_init__(self):
        if self.window_d < 1:
            raise ContractViolation(f"window_d must be >= 1, got {self.window_d}")
        if self.lr_policy <= 0 or self.lr_value <= 0:
            raise ContractViolation("PCL step sizes must be > 0")
        if self.tau < 0 or not 0.0 <= self.gamma <= 1.0:
            raise ContractViolation(f"Invalid tau/gamma: {self.tau}, {self.gamma}")
        if self.updates_per_batch < 1:
            raise ContractViolation("updates_per_batch must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class Segment:
    """Steps start..start+d-1 of a trajectory; shorter when it runs into the terminal"""
    trajectory: Trajectory
    start: int
    d: int

    @property
    def steps(self):
        return self.trajectory.steps[self.start:self.start + self.d]

    @property
    def first(self):
        return self.trajectory.steps[self.start]

    @property
    def end(self) -> Optional[TrajectoryStep]:
        """Step holding s_{i+d}, or None when s_{i+d} is terminal"""
        index = self.start + self.d
        return self.trajectory.steps[index] if index < len(self.trajectory) else None


def segments_of(trajectory: Trajectory, d: int) -> List[Segment]:
    """
    All consistency segments of a trajectory

    Segments that would run past the end are shortened; that is only valid on
    complete trajectories, so incomplete tails are dropped.
    """
    segments = []
    n = len(trajectory)
    for start in range(n):
        length = min(d, n - start)
        if start + length == n and not trajectory.complete:
            break
        segments.append(Segment(trajectory, start, length))
    return segments


def path_residual(policy, value: ValueTable, segment: Segment, cfg: PCLConfig) -> float:
    """
    Consistency residual of a single segment

    ``policy`` is anything with ``log_distribution_at(ctx, step)``: a TabularLM
    or a step-indexed soft-optimal policy.

    Raises:
        NumericalGuardError: if a taken action has probability 0 while tau > 0
    """
    residual = -value.value(segment.first.state, segment.first.step)
    for j, s in enumerate(segment.steps):
        log_pi = float(policy.log_distribution_at(s.state, s.step)[s.action])
        if cfg.tau > 0 and np.exp(log_pi) == 0.0:
            raise NumericalGuardError(
                f"Action {s.action} has probability 0 at step {s.step}; residual is infinite"
            )
        residual += cfg.gamma ** j * (s.reward - cfg.tau * log_pi)
    end = segment.end
    if end is not None:
        residual += cfg.gamma ** len(segment.steps) * value.value(end.state, end.step)
    return residual


@dataclass
class _CompiledBatch:
    start_cell: np.ndarray      # (N, 3) instruction, row, step of s_i
    end_cell: np.ndarray        # (N, 3) of s_{i+d}
    end_live: np.ndarray        # (N,) s_{i+d} non-terminal and inside the value horizon
    end_discount: np.ndarray    # (N,) gamma^d
    seg: np.ndarray             # (M,) owning segment of each action entry
    policy_cell: np.ndarray     # (M, 2) instruction, row
    action: np.ndarray          # (M,)
    reward: np.ndarray          # (M,)
    discount: np.ndarray        # (M,)


def _compile(policy: TabularLM, value: ValueTable, batch, cfg: PCLConfig) -> _CompiledBatch:
    n = len(batch)
    start_cell = np.zeros((n, 3), dtype=np.int64)
    end_cell = np.zeros((n, 3), dtype=np.int64)
    end_live = np.zeros(n, dtype=bool)
    end_discount = np.zeros(n)
    seg, cells, actions, rewards, discounts = [], [], [], [], []
    for k, segment in enumerate(batch):
        first = segment.first
        start_cell[k] = (first.state.instruction_id, value.row_index(first.state.window), first.step)
        end = segment.end
        end_discount[k] = cfg.gamma ** len(segment.steps)
        if end is not None and end.step < value.horizon:
            end_cell[k] = (end.state.instruction_id, value.row_index(end.state.window), end.step)
            end_live[k] = True
        for j, s in enumerate(segment.steps):
            seg.append(k)
            cells.append((s.state.instruction_id, policy.row_index(s.state.window)))
            actions.append(s.action)
            rewards.append(s.reward)
            discounts.append(cfg.gamma ** j)
    return _CompiledBatch(
        start_cell, end_cell, end_live, end_discount,
        np.array(seg, dtype=np.int64), np.array(cells, dtype=np.int64).reshape(-1, 2),
        np.array(actions, dtype=np.int64), np.array(rewards), np.array(discounts),
    )


def _value_at(values, cells, mask=None):
    out = np.zeros(len(cells))
    live = np.ones(len(cells), dtype=bool) if mask is None else mask
    live = live & (cells[:, 2] < values.shape[2])
    out[live] = values[cells[live, 0], cells[live, 1], cells[live, 2]]
    return out


def pcl_loss_and_gradients(policy: TabularLM, value: ValueTable, batch, cfg: PCLConfig):
    """
    Loss 0.5 * mean(C^2) and its gradients

    Returns:
        (loss, grad_logits, grad_values, residuals)
    """
    if not batch:
        raise ContractViolation("PCL batch is empty")
    c = _compile(policy, value, batch, cfg)
    n = len(batch)
    probs = policy.probs[c.policy_cell[:, 0], c.policy_cell[:, 1]]
    log_pi = policy.log_probs[c.policy_cell[:, 0], c.policy_cell[:, 1], c.action]
    taken = probs[np.arange(len(c.action)), c.action]
    if cfg.tau > 0 and np.any(taken == 0.0):
        raise NumericalGuardError("A batch action has probability 0; residual is infinite")

    residuals = -_value_at(value.values, c.start_cell)
    residuals += c.end_discount * _value_at(value.values, c.end_cell, c.end_live)
    residuals += np.bincount(c.seg, weights=c.discount * (c.reward - cfg.tau * log_pi), minlength=n)
    loss = 0.5 * float(np.mean(residuals ** 2))

    scale = residuals / n
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(c.action)), c.action] = 1.0
    per_entry = (scale[c.seg] * -cfg.tau * c.discount)[:, None] * (onehot - probs)
    grad_logits = np.zeros_like(policy.logits)
    np.add.at(grad_logits, (c.policy_cell[:, 0], c.policy_cell[:, 1]), per_entry)

    grad_values = np.zeros_like(value.values)
    inside = c.start_cell[:, 2] < value.horizon
    np.add.at(grad_values, tuple(c.start_cell[inside].T), -scale[inside])
    live = c.end_live
    np.add.at(grad_values, tuple(c.end_cell[live].T), scale[live] * c.end_discount[live])
    return loss, grad_logits, grad_values, residuals


def pcl_update(policy: TabularLM, value: ValueTable, batch, cfg: PCLConfig):
    """
    One gradient step on the PCL loss

    Returns:
        (updated policy, updated value table, pre-update loss)
    """
    loss, grad_logits, grad_values, _ = pcl_loss_and_gradients(policy, value, batch, cfg)
    policy = policy.with_logits(policy.logits - cfg.lr_policy * grad_logits)
    value = value.with_values(value.values - cfg.lr_value * grad_values)
    return policy, value, loss


class ReplayBuffer:
    """FIFO ring of trajectories with uniform sampling"""

    def __init__(self, capacity, seed=0):
        if capacity < 1:
            raise ContractViolation(f"Replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._items)

    def __contains__(self, trajectory):
        return any(t is trajectory for t in self._items)

    def push(self, trajectory: Trajectory):
        self._items.append(trajectory)

    def sample(self, n) -> List[Trajectory]:
        """``n`` draws with replacement; empty when the buffer is empty"""
        if not self._items:
            return []
        picks = self._rng.integers(0, len(self._items), size=n)
        return [self._items[i] for i in picks]


@dataclass
class DecodingEnvironment:
    """
    Teacher plus reward scheme seen by the learner

    Attributes:
        teacher: Base-alphabet teacher
        max_len: Episode cap
        reward_mode: 'kd' (r = log p) or 'budget' (shaped teacher-use reward)
        reward_cfg: Normalisation settings for the 'budget' mode
        lagrange: LagrangeState per budget spec index
    """
    teacher: TabularLM
    max_len: int
    reward_mode: str = 'kd'
    reward_cfg: object = None
    lagrange: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.reward_mode not in ('kd', 'budget'):
            raise ContractViolation(f"Unknown reward mode {self.reward_mode!r}")
        if self.reward_cfg is None:
            self.reward_cfg = RewardConfig()

    def multiplier(self, instruction):
        spec_index = instruction % len(BUDGET_SPECS)
        state = self.lagrange.get(spec_index)
        return state.lam if state is not None else 0.0

    def reward(self, origin, teacher_logprob, instruction):
        if self.reward_mode == 'kd':
            return float(teacher_logprob)
        b = budget_for_instruction(instruction).b
        return shaped_reward(origin, teacher_logprob, self.multiplier(instruction), b, self.reward_cfg)


def trajectory_from_tokens(context_model, teacher: TabularLM, prompt: Prompt, tokens,
                           max_len=None, source=ORACLE) -> Trajectory:
    """
    Trajectory of ``context_model`` taking exactly ``tokens`` as student actions

    Rewards are teacher log-likelihoods. The last step is done when it emits
    eos or reaches ``max_len``.
    """
    eos = teacher.vocab.eos_id
    steps = []
    for i, token in enumerate(tokens):
        lp = float(teacher.log_distribution(teacher.context(prompt, tokens[:i]))[token])
        last = i == len(tokens) - 1
        done = last and (token == eos or (max_len is not None and i + 1 >= max_len))
        steps.append(TrajectoryStep(
            context_model.context(prompt, tokens[:i]), i, int(token), int(token), STUDENT, lp, done, lp
        ))
    return Trajectory(steps, prompt.instruction_id, source, prompt)


def collect_episode(policy: TabularLM, env: DecodingEnvironment, prompt: Prompt, mode=ON_POLICY,
                    seed=0, greedy=False) -> Trajectory:
    """
    Roll one episode in the tandem environment

    on_policy samples from ``policy`` (seeded, or greedy on request); oracle
    replays the KL-ranked teacher-forced construction. Episodes reaching
    ``env.max_len`` are cut there with done set.
    """
    if mode == ORACLE:
        from core.training import build_oracle_trajectory
        b = budget_for_instruction(prompt.instruction_id).b
        return build_oracle_trajectory(policy, env.teacher, prompt, b, seed,
                                       max_len=env.max_len, env=env)
    if mode != ON_POLICY:
        raise ContractViolation(f"Unknown episode mode {mode!r}")

    sampling = Sampling('greedy') if greedy else Sampling('seeded', seed)
    teacher = env.teacher
    state = DecodeState(prompt)
    steps = []
    while not state.finished and state.step < env.max_len:
        ctx = policy.context(prompt, state.x_in)
        scoring_ctx = teacher.context(prompt, state.x_out)
        step = state.step
        state, token, origin = tandem_step(policy, teacher, state, sampling)
        lp = float(teacher.log_distribution(scoring_ctx)[token])
        action = policy.tau_id if origin == TEACHER else token
        done = state.finished or state.step >= env.max_len
        steps.append(TrajectoryStep(
            ctx, step, action, token, origin, env.reward(origin, lp, prompt.instruction_id), done, lp
        ))
    return Trajectory(steps, prompt.instruction_id, ON_POLICY, prompt)
