"""
Distillation as an entropy-regularised decision process

Exact machinery over enumerated sequence trees:

- reverse KL of a student against a teacher, summed over complete paths
- the one-step KL recursion and its residual against the path sums
- policy evaluation V^pi with temperature tau and discount gamma
- soft value iteration giving the ground-truth (V*, pi*)

Terminal handling: eos absorbs, and a path also ends when it reaches the
horizon. Post-terminal contributions are zero. Student distributions are
renormalised over the base alphabet before they meet the teacher.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from core.exceptions import ContractViolation, EnumerationBudgetExceeded
from core.tabular_lm import MASKED_LOGIT, Prompt, TabularLM

logger = logging.getLogger(__name__)

DEFAULT_PATH_CAP = 10 ** 7


@dataclass(frozen=True)
class SoftMDPConfig:
    """
    Temperature, discount and horizon of the decision process

    Attributes:
        tau: Entropy temperature (tau = 1, gamma = 1 is plain distillation)
        gamma: Discount in [0, 1]
        horizon: Maximum sequence length T; 0 is the empty problem
        path_cap: Enumeration refuses problems with more than this many paths
    """
    tau: float = 1.0
    gamma: float = 1.0
    horizon: int = 4
    path_cap: int = DEFAULT_PATH_CAP

    def __post_init__(self):
        if self.tau < 0:
            raise ContractViolation(f"tau must be >= 0, got {self.tau}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractViolation(f"gamma must be in [0, 1], got {self.gamma}")
        if self.horizon < 0:
            raise ContractViolation(f"horizon must be >= 0, got {self.horizon}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class ValueTable:
    """
    State values keyed on (instruction, window, step)

    Steps at or beyond the horizon are terminal and read as 0.

    Attributes:
        values: Array (n_instructions, context_size**order, horizon)
        order: Window length of the indexing model
        context_size: Number of distinct window symbols
    """
    values: np.ndarray
    order: int
    context_size: int
    _powers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[1] != self.context_size ** self.order:
            raise ContractViolation(
                f"Value array shape {values.shape} does not match "
                f"context_size={self.context_size}, order={self.order}"
            )
        if not np.all(np.isfinite(values)):
            raise ContractViolation("Value table contains non-finite entries")
        self.values = values
        self._powers = self.context_size ** np.arange(self.order - 1, -1, -1, dtype=np.int64)

    @classmethod
    def zeros(cls, model, horizon):
        """Zero table shaped for the windows of ``model``"""
        shape = (model.n_instructions, model.context_size ** model.order, horizon)
        return cls(np.zeros(shape), model.order, model.context_size)

    @property
    def horizon(self):
        return self.values.shape[2]

    def row_index(self, window):
        return int(np.dot(self._powers, window)) if self.order else 0

    def value(self, ctx, step):
        if step >= self.horizon:
            return 0.0
        return float(self.values[ctx.instruction_id, self.row_index(ctx.window), step])

    def with_values(self, values):
        return ValueTable(values, self.order, self.context_size)

    def to_dict(self):
        return {
            'format': 'kdlab-value-table',
            'order': self.order,
            'context_size': self.context_size,
            'horizon': self.horizon,
            'n_instructions': self.values.shape[0],
            'values': self.values.reshape(self.values.shape[0], -1).tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        values = np.array(data['values'], dtype=np.float64).reshape(
            int(data['n_instructions']),
            int(data['context_size']) ** int(data['order']),
            int(data['horizon']),
        )
        return cls(values, int(data['order']), int(data['context_size']))


@dataclass
class SoftOptimalPolicy:
    """
    Step-indexed Boltzmann-optimal policy

    A finite-horizon optimum depends on the remaining horizon, so pi* keeps one
    table per step. Tables share the teacher's window layout.
    """
    steps: Tuple[TabularLM, ...]

    @property
    def horizon(self):
        return len(self.steps)

    @property
    def vocab(self):
        return self.steps[0].vocab

    def at_step(self, step):
        return self.steps[min(step, self.horizon - 1)]

    def context(self, prompt, history=()):
        return self.steps[0].context(prompt, history)

    def distribution_at(self, ctx, step):
        return self.at_step(step).distribution(ctx)

    def log_distribution_at(self, ctx, step):
        return self.at_step(step).log_distribution(ctx)


def _policy_at(policy, step):
    if isinstance(policy, SoftOptimalPolicy):
        return policy.at_step(step)
    return policy


def _slide(windows, tokens):
    if windows.shape[1] == 0:
        return windows
    return np.concatenate([windows[:, 1:], tokens[:, None]], axis=1)


def _check_enumerable(vocab_size, horizon, cap):
    n_paths = vocab_size ** horizon
    if n_paths > cap:
        raise EnumerationBudgetExceeded(n_paths, cap)


@dataclass
class _Layer:
    """Live (non-terminal) states at one depth of the sequence tree"""
    policy_windows: np.ndarray
    teacher_windows: np.ndarray
    cum_log_pi: np.ndarray
    cum_log_ratio: np.ndarray
    ancestors: np.ndarray
    log_pi: np.ndarray = None   # (n, V) conditional, renormalised over base
    log_p: np.ndarray = None    # (n, V) teacher conditional
    child: np.ndarray = None    # (n, V) index into next layer, -1 when terminal


def _enumerate_tree(policy, teacher, prompt: Prompt, cfg: SoftMDPConfig) -> List[_Layer]:
    """Expand every live state reachable from ``prompt`` within the horizon"""
    if teacher.augmented:
        raise ContractViolation("Teacher must be a base-alphabet model")
    V = teacher.vocab.size
    eos = teacher.vocab.eos_id
    _check_enumerable(V, cfg.horizon, cfg.path_cap)
    instruction = prompt.instruction_id
    root_policy = _policy_at(policy, 0)
    for model in (root_policy, teacher):
        model.validate_context(model.context(prompt))

    layers = [_Layer(
        policy_windows=np.array([root_policy.context(prompt).window], dtype=np.int64).reshape(1, -1),
        teacher_windows=np.array([teacher.context(prompt).window], dtype=np.int64).reshape(1, -1),
        cum_log_pi=np.zeros(1),
        cum_log_ratio=np.zeros(1),
        ancestors=np.zeros((1, 1), dtype=np.int64),
    )]
    for step in range(cfg.horizon):
        layer = layers[-1]
        model = _policy_at(policy, step)
        rows = model.rows_of(layer.policy_windows)
        layer.log_pi = log_softmax(model.logits[instruction, rows, :V], axis=1)
        layer.log_p = teacher.log_probs[instruction, teacher.rows_of(layer.teacher_windows)]

        n = len(rows)
        tokens = np.tile(np.arange(V), n)
        parents = np.repeat(np.arange(n), V)
        terminal = (tokens == eos) | (step + 1 == cfg.horizon)
        child = np.full(n * V, -1, dtype=np.int64)
        child[~terminal] = np.arange(int((~terminal).sum()))
        layer.child = child.reshape(n, V)
        if terminal.all():
            break

        keep = ~terminal
        par, tok = parents[keep], tokens[keep]
        flat_pi = layer.log_pi.reshape(-1)[keep]
        flat_ratio = (layer.log_pi - layer.log_p).reshape(-1)[keep]
        layers.append(_Layer(
            policy_windows=_slide(layer.policy_windows[par], tok),
            teacher_windows=_slide(layer.teacher_windows[par], tok),
            cum_log_pi=layer.cum_log_pi[par] + flat_pi,
            cum_log_ratio=layer.cum_log_ratio[par] + flat_ratio,
            ancestors=np.concatenate(
                [layer.ancestors[par], np.arange(len(par))[:, None]], axis=1
            ),
        ))
    return layers


def _leaves(layer):
    """Complete paths ending below ``layer``: (node, cumulative log pi, cumulative log ratio)"""
    node, token = np.nonzero(layer.child < 0)
    log_pi = layer.cum_log_pi[node] + layer.log_pi[node, token]
    ratio = layer.cum_log_ratio[node] + (layer.log_pi - layer.log_p)[node, token]
    return node, log_pi, ratio


def reverse_kl_exact(student: TabularLM, teacher: TabularLM, prompt: Prompt,
                     cfg: SoftMDPConfig) -> float:
    """
    E_{1:T}: sum over complete paths of pi(path) * log(pi(path) / p(path))

    Raises:
        EnumerationBudgetExceeded: if |V|^T exceeds ``cfg.path_cap``
    """
    if cfg.horizon == 0:
        return 0.0
    total = 0.0
    for layer in _enumerate_tree(student, teacher, prompt, cfg):
        if layer.child is None:
            continue
        _, log_pi, ratio = _leaves(layer)
        total += float(np.sum(np.exp(log_pi) * ratio))
    return total


def recursion_residual(student: TabularLM, teacher: TabularLM, prompt: Prompt,
                       cfg: SoftMDPConfig) -> float:
    """
    Largest gap between path-summed E_{i:T} and its one-step recursion

    For every reachable live state s the tail KL E(s) is computed by summing
    over the complete paths through s, and compared against
    sum_x pi(x|s) * (log pi(x|s)/p(x|s) + E(s x)).
    """
    if cfg.horizon == 0:
        return 0.0
    layers = [layer for layer in _enumerate_tree(student, teacher, prompt, cfg)
              if layer.child is not None]

    tails = [np.zeros(len(layer.cum_log_pi)) for layer in layers]
    for layer in layers:
        node, log_pi, ratio = _leaves(layer)
        ancestry = layer.ancestors[node]
        for depth in range(ancestry.shape[1]):
            anc = ancestry[:, depth]
            weight = np.exp(log_pi - layers[depth].cum_log_pi[anc])
            np.add.at(tails[depth], anc, weight * (ratio - layers[depth].cum_log_ratio[anc]))

    worst = 0.0
    for depth, layer in enumerate(layers):
        child_tail = np.zeros_like(layer.log_pi)
        live = layer.child >= 0
        if live.any():
            child_tail[live] = tails[depth + 1][layer.child[live]]
        one_step = np.sum(np.exp(layer.log_pi) * (layer.log_pi - layer.log_p + child_tail), axis=1)
        worst = max(worst, float(np.max(np.abs(tails[depth] - one_step))))
    return worst


def policy_value(policy, teacher: TabularLM, cfg: SoftMDPConfig, prompt: Prompt) -> float:
    """
    Exact V^pi(prompt) by backward induction over the policy's own tree

    V(s) = sum_x pi(x|s) * (log p(x|s) - tau * log pi(x|s) + gamma * V(s x)).
    ``policy`` may be a TabularLM or a step-indexed SoftOptimalPolicy.
    """
    if cfg.horizon == 0:
        return 0.0
    layers = [layer for layer in _enumerate_tree(policy, teacher, prompt, cfg)
              if layer.child is not None]
    next_values = None
    for layer in reversed(layers):
        continuation = np.zeros_like(layer.log_pi)
        live = layer.child >= 0
        if live.any():
            continuation[live] = next_values[layer.child[live]]
        q = layer.log_p - cfg.tau * layer.log_pi + cfg.gamma * continuation
        next_values = np.sum(np.exp(layer.log_pi) * q, axis=1)
    return float(next_values[0])


def next_rows(context_size, order, vocab_size):
    """Row reached from every window row after appending each base token"""
    n_rows = context_size ** order
    if order == 0:
        return np.zeros((1, vocab_size), dtype=np.int64)
    rows = np.arange(n_rows)[:, None]
    return (rows % context_size ** (order - 1)) * context_size + np.arange(vocab_size)[None, :]


def soft_value_iteration(teacher: TabularLM, cfg: SoftMDPConfig) -> Tuple[ValueTable, SoftOptimalPolicy]:
    """
    Backward induction with the soft Bellman backup

    Q_t(s, x) = log p(x|s) + gamma * V_{t+1}(s x)    (zero continuation after eos)
    V_t(s) = tau * logsumexp(Q_t(s, .) / tau)        (max at tau = 0)
    pi*_t(x|s) proportional to exp(Q_t(s, x) / tau)

    Returns:
        (V*, pi*) with V* indexed on teacher windows and steps 0..T-1
    """
    if cfg.tau < 0:
        raise ContractViolation(f"tau must be >= 0, got {cfg.tau}")
    if teacher.augmented:
        raise ContractViolation("Teacher must be a base-alphabet model")
    V = teacher.vocab.size
    eos = teacher.vocab.eos_id
    shape = (teacher.n_instructions, teacher.n_rows)
    succ = next_rows(teacher.context_size, teacher.order, V)
    continues = np.ones(V)
    continues[eos] = 0.0

    values = np.zeros(shape + (cfg.horizon,))
    tables = [None] * cfg.horizon
    upcoming = np.zeros(shape)
    for step in reversed(range(cfg.horizon)):
        q = teacher.log_probs + cfg.gamma * upcoming[:, succ] * continues
        if cfg.tau > 0:
            logits = q / cfg.tau
            values[:, :, step] = cfg.tau * logsumexp(logits, axis=-1)
        else:
            best = np.argmax(q, axis=-1)
            logits = np.full(q.shape, MASKED_LOGIT)
            np.put_along_axis(logits, best[..., None], 0.0, axis=-1)
            values[:, :, step] = np.max(q, axis=-1)
        tables[step] = TabularLM(teacher.vocab, teacher.order, logits)
        upcoming = values[:, :, step]

    logger.debug("Soft value iteration: tau=%s gamma=%s horizon=%d", cfg.tau, cfg.gamma, cfg.horizon)
    value_table = ValueTable(values, teacher.order, teacher.context_size)
    if cfg.horizon == 0:
        return value_table, None
    return value_table, SoftOptimalPolicy(tuple(tables))


def max_total_variation(policy, teacher: TabularLM) -> float:
    """Largest per-state total-variation distance between a policy and the teacher"""
    steps = policy.steps if isinstance(policy, SoftOptimalPolicy) else (policy,)
    worst = 0.0
    for model in steps:
        probs = softmax(model.logits[..., :teacher.vocab.size], axis=-1)
        worst = max(worst, float(np.max(0.5 * np.abs(probs - teacher.probs).sum(axis=-1))))
    return worst
