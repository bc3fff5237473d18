"""
Two-phase training of a teacher-calling student

Phase 1 clones an oracle that hands the highest-KL positions of a teacher
rollout to the teacher. Phase 2 fine-tunes with PCL on the shaped teacher-use
reward while a Lagrange multiplier per budget tracks the measured use.
Checkpoints are ranked on a validation set at the end.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import rel_entr, softmax

from core.alphabet import AugAlphabet
from core.budget import (
    BUDGET_SPECS, STUDENT, TEACHER, LagrangeState, RewardConfig, dual_update, instruction_id,
    record_use, task_of, update_reward_stats,
)
from core.exceptions import ContractViolation, DivergenceError, EnumerationBudgetExceeded
from core.pcl import (
    ON_POLICY, ORACLE, TEACHER_ROLLOUT, DecodingEnvironment, PCLConfig, ReplayBuffer,
    Trajectory, TrajectoryStep, collect_episode, pcl_loss_and_gradients, segments_of,
    trajectory_from_tokens,
)
from core.soft_mdp import SoftMDPConfig, ValueTable, reverse_kl_exact
from core.tabular_lm import Prompt, TabularLM, make_rng, random_prefix
from core.tandem import Sampling, rollout, tandem_decode

logger = logging.getLogger(__name__)

# Ranking ties are decided on KL rounded to this many decimals
KL_RANK_DECIMALS = 12


# -- configuration -------------------------------------------------------------

@dataclass(frozen=True)
class Phase1Config:
    """
    Behaviour cloning of the KL-rank oracle

    Attributes:
        batches: Gradient steps
        batch_size: Teacher rollouts per step, budgets drawn uniformly
        lr: Step size on the logit table; each row's step is its gradient
            averaged over that row's visits in the batch
        sampling: Teacher rollout mode ('seeded' or 'greedy')
        guard_as_printed: Swap the loss cases (teacher call at low-KL positions)
        log_every: Progress log cadence in batches
    """
    batches: int = 200
    batch_size: int = 16
    lr: float = 0.15
    sampling: str = 'seeded'
    guard_as_printed: bool = False
    log_every: int = 50

    def __post_init__(self):
        if self.batches < 1:
            raise ContractViolation(f"Phase 1 needs >= 1 batch, got {self.batches}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class Phase2Config:
    """
    Constrained PCL fine-tuning

    Attributes:
        batches: Episode-generation batches
        updates_per_batch: PCL steps per batch
        episodes_per_task: Budgets drawn per task per batch (one on-policy and
            one oracle episode each)
        checkpoint_every: Checkpoint cadence in batches (the last batch is always kept)
        constrained: False pins every multiplier at 0
        divergence_threshold: Abort when the mean |residual| exceeds this
        track_reverse_kl: Log exact reverse KL when enumeration is feasible
        log_every: Progress log cadence in batches
    """
    batches: int = 5000
    updates_per_batch: int = 4
    episodes_per_task: int = 1
    checkpoint_every: int = 250
    constrained: bool = True
    divergence_threshold: float = 1e3
    track_reverse_kl: bool = False
    log_every: int = 100

    def __post_init__(self):
        if self.updates_per_batch < 1:
            raise ContractViolation("updates_per_batch must be >= 1")
        if self.batches < 1 or self.episodes_per_task < 1 or self.checkpoint_every < 1:
            raise ContractViolation("Phase 2 batch, episode and checkpoint counts must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class LagrangeConfig:
    """Initial multiplier state shared by every operating point"""
    init: float = 0.0
    eta: float = 1e-2
    cap: float = 2.0
    window_len: int = 50
    accounting: str = 'fraction'

    def initial_states(self) -> Dict[int, LagrangeState]:
        return {
            k: LagrangeState(self.init, self.eta, self.cap, (), self.window_len, self.accounting)
            for k in range(len(BUDGET_SPECS))
        }

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class CheckpointSelector:
    """
    Attributes:
        delta: Allowed |measured use - b| for every budget
        validation_size: Number of validation prompts
        sampling: Decode mode used for validation
    """
    delta: float = 0.05
    validation_size: int = 512
    sampling: str = 'greedy'

    def __post_init__(self):
        if self.delta <= 0:
            raise ContractViolation(f"delta must be > 0, got {self.delta}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


# -- teacher rollouts and oracle labels ---------------------------------------

def teacher_trajectory(teacher: TabularLM, student: TabularLM, prompt: Prompt, max_len,
                       sampling: Sampling) -> Trajectory:
    """Teacher rollout seen from the student's contexts, rewards = log p"""
    tokens = rollout(teacher, prompt, max_len, sampling)
    return trajectory_from_tokens(student, teacher, prompt, tokens, max_len, TEACHER_ROLLOUT)


@dataclass
class OracleLabels:
    """
    KL-ranked teacher positions of one teacher rollout

    Attributes:
        positions: Sorted indices handed to the teacher (S_hi)
        kl: KL(p || pi renormalised over V) per position
        tokens: The annotated teacher tokens
        teacher_probs: Teacher distribution at every position, (l, |V|)
        prompt: Prompt of the rollout
    """
    positions: Tuple[int, ...]
    kl: np.ndarray
    tokens: Tuple[int, ...]
    teacher_probs: np.ndarray
    prompt: Prompt

    def __len__(self):
        return len(self.tokens)

    @property
    def position_set(self):
        return frozenset(self.positions)


def selected_count(length, b):
    """|S_hi| = ceil(l * b), guarded against float noise such as 10 * 0.3"""
    return min(length, math.ceil(length * b - 1e-9))


def kl_rank_labels(student: TabularLM, teacher: TabularLM, teacher_traj: Trajectory, b) -> OracleLabels:
    """
    Rank the positions of a teacher rollout by KL and keep the top ceil(l * b)

    Ties are broken toward the lowest position. KL is measured in the plain
    student context of the teacher prefix (``s.state``), not in the oracle input
    sequence: the shifted inputs depend on the selection being made here. The
    phase-1 loss then trains the student in the shifted contexts.
    """
    prompt = teacher_traj.prompt
    tokens = teacher_traj.tokens
    probs, kl = [], []
    for i, s in enumerate(teacher_traj.steps):
        p = teacher.distribution(teacher.context(prompt, tokens[:i]))
        q = student.base_distribution(s.state)
        probs.append(p)
        kl.append(float(rel_entr(p, q).sum()))
    kl = np.array(kl)
    order = sorted(range(len(kl)), key=lambda i: (-round(kl[i], KL_RANK_DECIMALS), i))
    positions = tuple(sorted(order[:selected_count(len(kl), b)]))
    return OracleLabels(positions, kl, tokens, np.array(probs).reshape(len(kl), -1), prompt)


def oracle_inputs(labels: OracleLabels, vocab):
    """Student input sequence of the oracle: teacher positions shifted by |V|"""
    alphabet = AugAlphabet(vocab)
    chosen = labels.position_set
    return tuple(alphabet.shift(t) if i in chosen else t for i, t in enumerate(labels.tokens))


def build_oracle_trajectory(student: TabularLM, teacher: TabularLM, prompt: Prompt, b, seed,
                            max_len=16, env: Optional[DecodingEnvironment] = None,
                            greedy=False) -> Trajectory:
    """
    Off-policy trajectory of the (unrealisable) oracle policy

    The teacher writes every token. Positions in S_hi are recorded as <tau>
    with teacher origin; the rest as student actions taking the teacher token.
    Rewards come from ``env`` when given, otherwise r = log p.
    """
    sampling = Sampling('greedy') if greedy else Sampling('seeded', seed)
    base = teacher_trajectory(teacher, student, prompt, max_len, sampling)
    labels = kl_rank_labels(student, teacher, base, b)
    x_in = oracle_inputs(labels, teacher.vocab)
    chosen = labels.position_set
    steps = []
    for i, base_step in enumerate(base.steps):
        origin = TEACHER if i in chosen else STUDENT
        lp = base_step.teacher_logprob
        reward = env.reward(origin, lp, prompt.instruction_id) if env is not None else lp
        steps.append(TrajectoryStep(
            student.context(prompt, x_in[:i]), i,
            student.tau_id if origin == TEACHER else base_step.token,
            base_step.token, origin, reward, base_step.done, lp,
        ))
    return Trajectory(steps, prompt.instruction_id, ORACLE, prompt)


# -- phase 1 -------------------------------------------------------------------

def phase1_loss_and_gradient(student: TabularLM, teacher_traj: Trajectory, labels: OracleLabels,
                             guard_as_printed=False):
    """
    Behaviour-cloning loss and its gradient on the student logits

    Positions in S_hi contribute -log pi(<tau>); the others contribute
    KL(p || pi renormalised over V). ``guard_as_printed`` swaps the two cases.
    Student contexts follow the oracle input sequence. Mean over positions.
    """
    if not student.augmented:
        raise ContractViolation("Phase 1 needs a student over the augmented alphabet")
    if len(labels) != len(teacher_traj):
        raise ContractViolation("Labels do not annotate this trajectory")
    V = student.vocab.size
    tau = student.tau_id
    x_in = oracle_inputs(labels, student.vocab)
    chosen = labels.position_set
    grad = np.zeros_like(student.logits)
    loss = 0.0
    length = len(labels)
    for i in range(length):
        ctx = student.context(labels.prompt, x_in[:i])
        instr, row = ctx.instruction_id, student.row_index(ctx.window)
        if (i in chosen) != guard_as_printed:
            loss -= student.log_probs[instr, row, tau]
            grad[instr, row] += student.probs[instr, row]
            grad[instr, row, tau] -= 1.0
        else:
            p = labels.teacher_probs[i]
            q = softmax(student.logits[instr, row, :V])
            loss += float(rel_entr(p, q).sum())
            grad[instr, row, :V] += q - p
    return loss / length, grad / length


def oracle_row_visits(student: TabularLM, labels: OracleLabels) -> np.ndarray:
    """Visits of every (instruction, row) along the oracle input sequence"""
    x_in = oracle_inputs(labels, student.vocab)
    visits = np.zeros(student.logits.shape[:2])
    for i in range(len(labels)):
        ctx = student.context(labels.prompt, x_in[:i])
        visits[ctx.instruction_id, student.row_index(ctx.window)] += 1
    return visits


def phase1_loss(student: TabularLM, teacher_traj: Trajectory, labels: OracleLabels,
                guard_as_printed=False) -> float:
    return phase1_loss_and_gradient(student, teacher_traj, labels, guard_as_printed)[0]


def phase1_train(student: TabularLM, teacher: TabularLM, cfg: Phase1Config, seed,
                 max_len=12, prefix_len=0) -> TabularLM:
    """
    Gradient descent on the phase-1 loss over teacher-forced rollouts

    Every rollout draws its task and budget uniformly. Per-position gradients
    are summed over the batch and each row moves by its mean over the visits it
    received.
    """
    n_tasks = teacher.n_instructions // len(BUDGET_SPECS)
    rng = make_rng(seed, 1)
    for batch in range(cfg.batches):
        grad = np.zeros_like(student.logits)
        visits = np.zeros(student.logits.shape[:2])
        losses = []
        for _ in range(cfg.batch_size):
            spec = int(rng.integers(len(BUDGET_SPECS)))
            task = int(rng.integers(n_tasks))
            prompt = Prompt(instruction_id(task, spec), random_prefix(rng, teacher.vocab, prefix_len))
            sampling = Sampling(cfg.sampling, int(rng.integers(2 ** 31)))
            traj = teacher_trajectory(teacher, student, prompt, max_len, sampling)
            labels = kl_rank_labels(student, teacher, traj, BUDGET_SPECS[spec].b)
            loss, g = phase1_loss_and_gradient(student, traj, labels, cfg.guard_as_printed)
            losses.append(loss)
            grad += g * len(labels)
            visits += oracle_row_visits(student, labels)
        step = grad / np.maximum(visits, 1.0)[..., None]
        student = student.with_logits(student.logits - cfg.lr * step)
        if (batch + 1) % cfg.log_every == 0 or batch == 0:
            logger.info("Phase 1 batch %d/%d: loss=%.5f", batch + 1, cfg.batches, np.mean(losses))
    return student


# -- phase 2 -------------------------------------------------------------------

@dataclass
class Checkpoint:
    """
    Snapshot taken between phase-2 batches

    Attributes:
        batch: Batches completed
        policy: Student table
        value: Value table
        lambdas: Multiplier per budget spec index
        measured_use: Trailing mean teacher use per budget spec index
    """
    batch: int
    policy: TabularLM
    value: ValueTable
    lambdas: Dict[int, float] = field(default_factory=dict)
    measured_use: Dict[int, float] = field(default_factory=dict)

    def to_dict(self):
        return {
            'batch': self.batch,
            'policy': self.policy.to_dict(),
            'value': self.value.to_dict(),
            'lambdas': {str(k): v for k, v in self.lambdas.items()},
            'measured_use': {str(k): v for k, v in self.measured_use.items()},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            batch=int(data['batch']),
            policy=TabularLM.from_dict(data['policy']),
            value=ValueTable.from_dict(data['value']),
            lambdas={int(k): float(v) for k, v in data.get('lambdas', {}).items()},
            measured_use={int(k): float(v) for k, v in data.get('measured_use', {}).items()},
        )


def log_columns():
    columns = ['batch', 'loss', 'mean_abs_residual', 'reverse_kl']
    columns += [f'use_{spec.b}' for spec in BUDGET_SPECS]
    columns += [f'lambda_{spec.b}' for spec in BUDGET_SPECS]
    return columns


def _mean_reverse_kl(policy, teacher, n_tasks, max_len):
    cfg = SoftMDPConfig(tau=1.0, gamma=1.0, horizon=max_len)
    try:
        return float(np.mean([
            reverse_kl_exact(policy, teacher, Prompt(instruction_id(task, 0)), cfg)
            for task in range(n_tasks)
        ]))
    except EnumerationBudgetExceeded:
        return float('nan')


def _mixed_batch(on_policy, oracle, replay: ReplayBuffer, d):
    """Equal thirds: fresh on-policy, fresh oracle and replayed trajectories"""
    trajectories = list(on_policy) + list(oracle) + replay.sample(len(on_policy))
    return [seg for traj in trajectories for seg in segments_of(traj, d)]


def phase2_train(student: TabularLM, teacher: TabularLM, cfg: Phase2Config,
                 lagrange: Dict[int, LagrangeState], seed, pcl: PCLConfig = PCLConfig(),
                 reward_cfg: RewardConfig = RewardConfig(), max_len=12, prefix_len=0,
                 value: Optional[ValueTable] = None):
    """
    Constrained PCL fine-tuning

    Per batch: for every task, draw ``episodes_per_task`` budgets and collect one
    on-policy and one oracle episode for each; push them to the replay buffer;
    run ``updates_per_batch`` PCL steps on the mixed batch; record on-policy
    teacher use and take a dual step for every budget.

    Returns:
        (checkpoints, training log DataFrame)

    Raises:
        DivergenceError: if the mean |residual| of an update exceeds the threshold
    """
    n_tasks = teacher.n_instructions // len(BUDGET_SPECS)
    if value is None:
        value = ValueTable.zeros(student, max_len)
    lagrange = dict(lagrange)
    if not cfg.constrained:
        lagrange = {k: LagrangeState(0.0, s.eta, s.cap, s.window, s.window_len, s.accounting)
                    for k, s in lagrange.items()}
    replay = ReplayBuffer(pcl.replay_capacity, seed=seed)
    rng = make_rng(seed, 2)
    policy = student
    rows, checkpoints = [], []

    for batch in range(cfg.batches):
        env = DecodingEnvironment(teacher, max_len, 'budget', reward_cfg, lagrange)
        fresh_on, fresh_oracle = [], []
        for task in range(n_tasks):
            for _ in range(cfg.episodes_per_task):
                spec = int(rng.integers(len(BUDGET_SPECS)))
                prompt = Prompt(instruction_id(task, spec), random_prefix(rng, teacher.vocab, prefix_len))
                episode_seed = int(rng.integers(2 ** 31))
                fresh_on.append(collect_episode(policy, env, prompt, ON_POLICY, episode_seed))
                fresh_oracle.append(collect_episode(policy, env, prompt, ORACLE, episode_seed))
        for traj in fresh_on + fresh_oracle:
            replay.push(traj)

        losses, residuals = [], []
        for _ in range(cfg.updates_per_batch):
            segments = _mixed_batch(fresh_on, fresh_oracle, replay, pcl.window_d)
            loss, grad_logits, grad_values, res = pcl_loss_and_gradients(policy, value, segments, pcl)
            policy = policy.with_logits(policy.logits - pcl.lr_policy * grad_logits)
            value = value.with_values(value.values - pcl.lr_value * grad_values)
            losses.append(loss)
            residuals.append(np.mean(np.abs(res)))
        mean_abs_residual = float(np.mean(residuals))
        if not np.isfinite(mean_abs_residual) or mean_abs_residual > cfg.divergence_threshold:
            raise DivergenceError(
                f"Phase 2 diverged at batch {batch + 1}: mean |residual| = {mean_abs_residual:.4g}",
                diagnostics={
                    'batch': batch + 1,
                    'mean_abs_residual': mean_abs_residual,
                    'loss': float(np.mean(losses)),
                    'lambdas': {k: s.lam for k, s in lagrange.items()},
                },
            )

        for traj in fresh_on:
            spec = traj.instruction_id % len(BUDGET_SPECS)
            lagrange[spec] = record_use(lagrange[spec], traj.teacher_use)
        if cfg.constrained:
            for spec, state in lagrange.items():
                if state.window:
                    lagrange[spec] = dual_update(state, BUDGET_SPECS[spec].b)
        reward_cfg = update_reward_stats(
            reward_cfg,
            [s.teacher_logprob for t in fresh_oracle for s in t.steps],
            [s.teacher_logprob for t in fresh_on for s in t.steps if s.origin == STUDENT],
        )

        row = {
            'batch': batch + 1,
            'loss': float(np.mean(losses)),
            'mean_abs_residual': mean_abs_residual,
            'reverse_kl': (_mean_reverse_kl(policy, teacher, n_tasks, max_len)
                           if cfg.track_reverse_kl else float('nan')),
        }
        for k, spec in enumerate(BUDGET_SPECS):
            row[f'use_{spec.b}'] = lagrange[k].mean_use
            row[f'lambda_{spec.b}'] = lagrange[k].lam
        rows.append(row)

        if (batch + 1) % cfg.log_every == 0:
            logger.info(
                "Phase 2 batch %d/%d: loss=%.5f |C|=%.4f use=%s lambda=%s",
                batch + 1, cfg.batches, row['loss'], mean_abs_residual,
                [round(lagrange[k].mean_use, 3) for k in range(len(BUDGET_SPECS))],
                [round(lagrange[k].lam, 3) for k in range(len(BUDGET_SPECS))],
            )
        if (batch + 1) % cfg.checkpoint_every == 0 or batch + 1 == cfg.batches:
            checkpoints.append(Checkpoint(
                batch + 1, policy, value,
                {k: s.lam for k, s in lagrange.items()},
                {k: s.mean_use for k, s in lagrange.items()},
            ))

    return checkpoints, pd.DataFrame(rows, columns=log_columns())


# -- checkpoint selection ------------------------------------------------------

@dataclass(frozen=True)
class CheckpointEvaluation:
    batch: int
    measured_use: Dict[int, float]
    quality: float

    def worst_violation(self):
        return max(abs(self.measured_use[k] - spec.b) for k, spec in enumerate(BUDGET_SPECS))


@dataclass(frozen=True)
class Selection:
    checkpoint: Checkpoint
    evaluation: CheckpointEvaluation
    flagged: bool


def evaluate_checkpoint(checkpoint: Checkpoint, teacher: TabularLM, prompts: List[Prompt],
                        max_len, sampling: Sampling = Sampling('greedy')) -> CheckpointEvaluation:
    """
    Decode every validation prompt under every budget keyword

    Teacher use per budget is total teacher calls over total emitted tokens;
    quality is the mean per-token teacher log-likelihood over all decodes.
    """
    from core.benchmark import quality_metric

    measured, scored_prompts, outputs = {}, [], []
    for k in range(len(BUDGET_SPECS)):
        calls = tokens = 0
        for p in prompts:
            prompt = Prompt(instruction_id(task_of(p.instruction_id), k), p.prefix)
            x_out, trace = tandem_decode(checkpoint.policy, teacher, prompt, max_len, sampling)
            calls += trace.teacher_calls
            tokens += trace.length
            scored_prompts.append(prompt)
            outputs.append(x_out)
        measured[k] = calls / tokens if tokens else 0.0
    quality = quality_metric(teacher, scored_prompts, outputs)
    return CheckpointEvaluation(checkpoint.batch, measured, quality)


def rank_checkpoints(evaluations: List[CheckpointEvaluation], delta) -> Tuple[int, bool]:
    """
    Index of the preferred evaluation and whether it is a fallback

    Among evaluations within ``delta`` of every budget the highest quality wins
    (earliest on ties). With no survivor, the smallest worst-case violation wins
    and the result is flagged.
    """
    if not evaluations:
        raise ContractViolation("No checkpoints to select from")
    survivors = [i for i, e in enumerate(evaluations) if e.worst_violation() <= delta + 1e-12]
    if survivors:
        return max(survivors, key=lambda i: (evaluations[i].quality, -i)), False
    return min(range(len(evaluations)), key=lambda i: (evaluations[i].worst_violation(), i)), True


def select_checkpoint(checkpoints: List[Checkpoint], prompts: List[Prompt], selector: CheckpointSelector,
                      teacher: TabularLM, max_len) -> Selection:
    """Evaluate every checkpoint on the validation prompts and rank them"""
    if not checkpoints:
        raise ContractViolation("No checkpoints to select from")
    sampling = Sampling(selector.sampling)
    evaluations = [evaluate_checkpoint(c, teacher, prompts, max_len, sampling) for c in checkpoints]
    index, flagged = rank_checkpoints(evaluations, selector.delta)
    if flagged:
        logger.warning("No checkpoint meets every budget within delta=%s; using minimal violation",
                       selector.delta)
    return Selection(checkpoints[index], evaluations[index], flagged)


# -- unconstrained distillation ------------------------------------------------

def distill_pcl(student: TabularLM, teacher: TabularLM, prompts: List[Prompt], cfg: PCLConfig,
                batches, seed, max_len, value: Optional[ValueTable] = None):
    """
    Plain PCL distillation with r = log p

    Every batch mixes one on-policy episode and one teacher rollout per prompt.

    Returns:
        (policy, value table, per-update losses)
    """
    if value is None:
        value = ValueTable.zeros(student, max_len)
    env = DecodingEnvironment(teacher, max_len, 'kd')
    rng = make_rng(seed, 3)
    losses = []
    for _ in range(batches):
        trajectories = []
        for prompt in prompts:
            episode_seed = int(rng.integers(2 ** 31))
            trajectories.append(collect_episode(student, env, prompt, ON_POLICY, episode_seed))
            trajectories.append(teacher_trajectory(teacher, student, prompt, max_len,
                                                   Sampling('seeded', episode_seed)))
        segments = [seg for t in trajectories for seg in segments_of(t, cfg.window_d)]
        for _ in range(cfg.updates_per_batch):
            loss, grad_logits, grad_values, _ = pcl_loss_and_gradients(student, value, segments, cfg)
            student = student.with_logits(student.logits - cfg.lr_policy * grad_logits)
            value = value.with_values(value.values - cfg.lr_value * grad_values)
            losses.append(loss)
    return student, value, losses
