"""
Tabular autoregressive language models

A TabularLM is a finite-order Markov table: for every (instruction, context
window) it stores a logit vector over the model's output alphabet. The same
class houses the teacher, the student (augmented alphabet, see core.alphabet)
and the baselines' draft models.
"""

import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from core.alphabet import AugAlphabet, Vocab
from core.exceptions import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

# Logit given to columns that must never be chosen (student's shifted block).
# exp(-1e4) underflows to exactly 0.0 in float64.
MASKED_LOGIT = -1.0e4

# Initial <tau> logit; keeps pi(<tau>|.) around 7.5e-5 before training, below 1e-4.
TAU_INIT_LOGIT = -9.5

DUMP_FORMAT = 'kdlab-tabular-lm'


def make_rng(seed, *stream):
    """Seeded generator; (seed, *stream) fully determines the draw sequence"""
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])


def sample_index(probs, u):
    """Inverse-CDF draw from ``probs`` at uniform ``u`` in [0, 1)"""
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side='right'))
    last_positive = int(np.flatnonzero(probs)[-1])
    return min(idx, last_positive)


def random_prefix(rng, vocab, length):
    """``length`` uniform non-eos base tokens; the synthetic source text of a prompt"""
    choices = np.array([t for t in range(vocab.size) if t != vocab.eos_id])
    return tuple(int(t) for t in rng.choice(choices, size=length))


def all_windows(context_size, order):
    """Every window of length ``order`` in row-index order"""
    windows = list(itertools.product(range(context_size), repeat=order))
    return np.array(windows, dtype=np.int64).reshape(len(windows), order)


@dataclass(frozen=True)
class Prompt:
    """
    Model-independent start of a decode

    Attributes:
        instruction_id: Task instruction (carries the budget keyword)
        prefix: Base tokens that condition the decode but are not output
    """
    instruction_id: int
    prefix: Tuple[int, ...] = ()

    def to_dict(self):
        return {'instruction_id': self.instruction_id, 'prefix': list(self.prefix)}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data['instruction_id']), tuple(int(t) for t in data.get('prefix', ())))


@dataclass(frozen=True)
class Context:
    """A model-relative conditioning window (X_{<i} truncated to the order, plus Y)"""
    window: Tuple[int, ...]
    instruction_id: int

    def advance(self, token):
        """Slide the window by one symbol"""
        if not self.window:
            return self
        return Context(self.window[1:] + (int(token),), self.instruction_id)


@dataclass(frozen=True)
class Distribution:
    """A probability vector over some alphabet"""
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(probs < 0):
            raise ContractViolation("Distribution has negative entries")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ContractViolation(f"Distribution sums to {probs.sum()!r}")
        object.__setattr__(self, 'probs', probs)

    def __len__(self):
        return len(self.probs)

    def __getitem__(self, token):
        return float(self.probs[token])

    def argmax(self):
        return int(np.argmax(self.probs))


@dataclass(eq=False)
class TabularLM:
    """
    Context-conditioned softmax table

    Attributes:
        vocab: Base alphabet
        order: Markov order m (window length)
        logits: Array (n_instructions, context_size**order, alphabet_size)
        augmented: True for student tables over V + shifted block + <tau>
    """
    vocab: Vocab
    order: int
    logits: np.ndarray
    augmented: bool = False
    _powers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.order < 0:
            raise ContractViolation(f"Order must be >= 0, got {self.order}")
        logits = np.array(self.logits, dtype=np.float64)
        expected = (self.context_size ** self.order, self.alphabet_size)
        if logits.ndim != 3 or logits.shape[1:] != expected:
            raise ContractViolation(
                f"Logit table has shape {logits.shape}, expected (n, {expected[0]}, {expected[1]})"
            )
        if not np.all(np.isfinite(logits)):
            raise ContractViolation("Logit table contains non-finite entries")
        logits.setflags(write=False)
        self.logits = logits
        self._powers = self.context_size ** np.arange(self.order - 1, -1, -1, dtype=np.int64)

    # -- shape ---------------------------------------------------------------

    @property
    def alphabet(self) -> Optional[AugAlphabet]:
        return AugAlphabet(self.vocab) if self.augmented else None

    @property
    def alphabet_size(self):
        return 2 * self.vocab.size + 1 if self.augmented else self.vocab.size

    @property
    def context_size(self):
        return 2 * self.vocab.size + 2 if self.augmented else self.vocab.size + 1

    @property
    def pad_id(self):
        return 2 * self.vocab.size + 1 if self.augmented else self.vocab.size

    @property
    def tau_id(self):
        return 2 * self.vocab.size if self.augmented else None

    @property
    def n_instructions(self):
        return self.logits.shape[0]

    @property
    def n_rows(self):
        return self.logits.shape[1]

    @cached_property
    def probs(self):
        return softmax(self.logits, axis=-1)

    @cached_property
    def log_probs(self):
        return log_softmax(self.logits, axis=-1)

    # -- contexts ------------------------------------------------------------

    def row_index(self, window):
        return int(np.dot(self._powers, window)) if self.order else 0

    def rows_of(self, windows):
        """Vectorised row_index over an (n, order) array"""
        windows = np.asarray(windows, dtype=np.int64)
        if self.order == 0:
            return np.zeros(len(windows), dtype=np.int64)
        return windows @ self._powers

    def windows(self):
        return all_windows(self.context_size, self.order)

    def context(self, prompt, history=()):
        """Build this model's window for ``prompt`` followed by ``history`` symbols"""
        symbols = tuple(prompt.prefix) + tuple(history)
        if self.order == 0:
            window = ()
        else:
            tail = symbols[-self.order:]
            window = (self.pad_id,) * (self.order - len(tail)) + tuple(int(s) for s in tail)
        return Context(window, prompt.instruction_id)

    def validate_context(self, ctx):
        if not 0 <= ctx.instruction_id < self.n_instructions:
            raise ConfigurationError(
                f"Unknown instruction_id {ctx.instruction_id} (model has {self.n_instructions})"
            )
        if len(ctx.window) != self.order:
            raise ContractViolation(
                f"Window length {len(ctx.window)} does not match order {self.order}"
            )
        for symbol in ctx.window:
            if not 0 <= symbol < self.context_size:
                raise ContractViolation(
                    f"Window symbol {symbol} outside context alphabet [0, {self.context_size})"
                )

    def distribution(self, ctx):
        """Probability row for ``ctx`` (unchecked fast path)"""
        return self.probs[ctx.instruction_id, self.row_index(ctx.window)]

    def distribution_at(self, ctx, step):
        """Stationary tables ignore the step"""
        return self.distribution(ctx)

    def log_distribution(self, ctx):
        return self.log_probs[ctx.instruction_id, self.row_index(ctx.window)]

    def log_distribution_at(self, ctx, step):
        return self.log_distribution(ctx)

    def base_distribution(self, ctx):
        """Distribution renormalised over the base alphabet"""
        probs = self.distribution(ctx)
        if not self.augmented:
            return probs
        base = probs[:self.vocab.size]
        return base / base.sum()

    def base_log_distribution(self, ctx):
        row = self.logits[ctx.instruction_id, self.row_index(ctx.window)]
        return log_softmax(row[:self.vocab.size])

    # -- derived tables ------------------------------------------------------

    def with_logits(self, logits):
        return TabularLM(self.vocab, self.order, logits, self.augmented)

    def repeat_instructions(self, k):
        """Give every instruction ``k`` identical consecutive copies"""
        return self.with_logits(np.repeat(self.logits, k, axis=0))

    # -- persistence ---------------------------------------------------------

    def to_dict(self):
        return {
            'format': DUMP_FORMAT,
            'order': self.order,
            'vocab': self.vocab.to_dict(),
            'augmented': self.augmented,
            'n_instructions': self.n_instructions,
            'alphabet_size': self.alphabet_size,
            'logits': self.logits.reshape(self.n_instructions, -1).tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        if data.get('format') != DUMP_FORMAT:
            raise ConfigurationError(f"Not a tabular model dump: format={data.get('format')!r}")
        vocab = Vocab.from_dict(data['vocab'])
        augmented = bool(data['augmented'])
        order = int(data['order'])
        context_size = 2 * vocab.size + 2 if augmented else vocab.size + 1
        alphabet_size = 2 * vocab.size + 1 if augmented else vocab.size
        if int(data['alphabet_size']) != alphabet_size:
            raise ConfigurationError(
                f"alphabet_size {data['alphabet_size']} inconsistent with vocab/augmented flag"
            )
        logits = np.array(data['logits'], dtype=np.float64).reshape(
            int(data['n_instructions']), context_size ** order, alphabet_size
        )
        return cls(vocab, order, logits, augmented)

    def __repr__(self):
        kind = 'student' if self.augmented else 'base'
        return (f"TabularLM({kind}, order={self.order}, vocab={self.vocab.size}, "
                f"instructions={self.n_instructions})")


# -- operations ---------------------------------------------------------------

def next_distribution(model: TabularLM, ctx: Context) -> Distribution:
    """Softmax of the stored logit row for ``ctx``"""
    model.validate_context(ctx)
    return Distribution(model.distribution(ctx))


def make_context(model: TabularLM, prompt: Prompt, history: Sequence[int] = ()) -> Context:
    """Window of ``model`` after ``prompt`` and the emitted ``history``"""
    return model.context(prompt, history)


def _as_context(model, prompt: Union[Prompt, Context]):
    if isinstance(prompt, Context):
        model.validate_context(prompt)
        return prompt
    return model.context(prompt)


def sequence_logprob(model: TabularLM, prompt: Union[Prompt, Context], seq: Sequence[int]) -> float:
    """
    Sum of per-step log-probabilities of ``seq`` under sliding contexts

    Args:
        model: Scoring model
        prompt: Start state, either a Prompt or an explicit Context
        seq: Tokens to score; each must be a valid output and context symbol

    Returns:
        log P(seq | prompt); 0.0 for an empty sequence
    """
    ctx = _as_context(model, prompt)
    total = 0.0
    for token in seq:
        if not 0 <= token < model.alphabet_size or token == model.tau_id:
            raise ContractViolation(f"Token {token} outside model alphabet")
        total += float(model.log_distribution(ctx)[token])
        ctx = ctx.advance(token)
    return total


def sample_token(model: TabularLM, ctx: Context, rng_seed: int, greedy: bool = False) -> int:
    """Greedy argmax (lowest index on ties) or an inverse-CDF draw seeded by ``rng_seed``"""
    model.validate_context(ctx)
    probs = model.distribution(ctx)
    if greedy:
        return int(np.argmax(probs))
    return sample_index(probs, make_rng(rng_seed).random())


def random_teacher(seed: int, order: int, vocab: Vocab, concentration: float,
                   n_instructions: int) -> TabularLM:
    """
    Random base-alphabet teacher

    Logits are i.i.d. standard normal draws scaled by ``concentration``; larger
    concentrations give peakier conditionals.
    """
    if concentration <= 0:
        raise ContractViolation(f"Concentration must be > 0, got {concentration}")
    rng = make_rng(seed)
    shape = (n_instructions, (vocab.size + 1) ** order, vocab.size)
    logits = concentration * rng.standard_normal(shape)
    return TabularLM(vocab, order, logits, augmented=False)


def estimate_visitation(teacher: TabularLM, n_rollouts: int = 256, max_len: int = 16,
                        seed: int = 0) -> np.ndarray:
    """
    Count how often each teacher window is visited by seeded teacher rollouts

    Returns:
        Array (n_instructions, n_rows) of visit counts
    """
    counts = np.zeros((teacher.n_instructions, teacher.n_rows))
    cdf = np.cumsum(teacher.probs, axis=-1)
    eos = teacher.vocab.eos_id
    for instruction in range(teacher.n_instructions):
        rng = make_rng(seed, instruction)
        windows = np.full((n_rollouts, teacher.order), teacher.pad_id, dtype=np.int64)
        alive = np.ones(n_rollouts, dtype=bool)
        for _ in range(max_len):
            if not alive.any():
                break
            rows = teacher.rows_of(windows)
            np.add.at(counts[instruction], rows[alive], 1.0)
            c = cdf[instruction, rows]
            u = rng.random(n_rollouts) * c[:, -1]
            tokens = np.minimum((c <= u[:, None]).sum(axis=1), teacher.vocab.size - 1)
            alive &= tokens != eos
            if teacher.order:
                windows = np.concatenate([windows[:, 1:], tokens[:, None]], axis=1)
    return counts


def derive_student_init(teacher: TabularLM, student_order: int, smoothing: float,
                        augmented: bool = True, n_rollouts: int = 256, max_len: int = 16,
                        seed: int = 0) -> TabularLM:
    """
    Capacity-limited student initialised from the teacher

    Each student row is the visitation-weighted mixture of the teacher rows that
    share its (de-shifted) window suffix, mixed with ``smoothing`` of uniform.
    On the augmented alphabet the shifted block is masked and <tau> starts
    strongly suppressed.

    Args:
        teacher: Base-alphabet teacher of order m
        student_order: Student order m' <= m
        smoothing: Weight of the uniform component in [0, 1]
        augmented: Build a student over V + shifted block + <tau>
        n_rollouts, max_len, seed: Visitation estimate settings

    Returns:
        Student TabularLM
    """
    if student_order > teacher.order:
        raise ContractViolation(
            f"Student order {student_order} exceeds teacher order {teacher.order}"
        )
    if not 0.0 <= smoothing <= 1.0:
        raise ContractViolation(f"Smoothing must be in [0, 1], got {smoothing}")
    vocab = teacher.vocab
    V = vocab.size
    counts = estimate_visitation(teacher, n_rollouts, max_len, seed)
    suffix = teacher.windows()[:, teacher.order - student_order:]

    student_ctx = 2 * V + 2 if augmented else V + 1
    student_pad = 2 * V + 1 if augmented else V
    student_windows = all_windows(student_ctx, student_order)
    alphabet_size = 2 * V + 1 if augmented else V
    logits = np.full((teacher.n_instructions, len(student_windows), alphabet_size), MASKED_LOGIT)
    if augmented:
        logits[:, :, 2 * V] = TAU_INIT_LOGIT

    for row, window in enumerate(student_windows):
        mapped = np.array([
            V if s == student_pad or s == 2 * V else (s - V if s >= V else s)
            for s in window
        ], dtype=np.int64)
        match = np.all(suffix == mapped, axis=1)
        for instruction in range(teacher.n_instructions):
            weights = counts[instruction, match]
            if weights.sum() == 0:
                weights = np.ones_like(weights)
            mixture = weights @ teacher.probs[instruction, match] / weights.sum()
            smoothed = (1.0 - smoothing) * mixture + smoothing / V
            logits[instruction, row, :V] = np.log(np.maximum(smoothed, np.finfo(float).tiny))

    logger.debug("Derived order-%d student from order-%d teacher", student_order, teacher.order)
    return TabularLM(vocab, student_order, logits, augmented=augmented)
