"""
Lossy greedy speculative decoding and its draft-model distillation

Each cycle the draft model proposes up to K greedy tokens; one (parallel)
teacher pass scores them. A drafted token survives while
p(draft) >= lenience * p(teacher argmax). The first failure is replaced by the
teacher argmax; a fully accepted draft earns a teacher bonus token conditioned
on the whole drafted prefix. Drafting stops at eos, and a draft that ends in
eos gets no bonus.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.exceptions import ContractViolation
from core.tabular_lm import Prompt, TabularLM, make_rng
from core.tandem import Sampling, rollout

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpecConfig:
    draft_len: int = 3
    lenience: float = 1.0

    def __post_init__(self):
        if self.draft_len < 1:
            raise ContractViolation(f"draft_len must be >= 1, got {self.draft_len}")
        if not 0.0 <= self.lenience <= 1.0:
            raise ContractViolation(f"lenience must be in [0, 1], got {self.lenience}")


@dataclass(frozen=True)
class SpecCycle:
    """
    One draft-and-verify cycle

    Attributes:
        drafted: Draft tokens proposed
        accepted: Length n of the accepted draft prefix
        teacher_token: Replacement or bonus token, or None
        emitted: Tokens this cycle appended to the output (before max_len truncation)
    """
    drafted: Tuple[int, ...]
    accepted: int
    teacher_token: Union[int, None]
    emitted: Tuple[int, ...]
    teacher_passes: int = 1

    @property
    def student_passes(self):
        return len(self.drafted)


@dataclass
class SpecTrace:
    cycles: List[SpecCycle] = field(default_factory=list)
    length: int = 0

    @property
    def teacher_passes(self):
        return sum(c.teacher_passes for c in self.cycles)

    @property
    def student_passes(self):
        return sum(c.student_passes for c in self.cycles)

    @property
    def teacher_use(self):
        """Teacher passes per emitted token"""
        return self.teacher_passes / self.length if self.length else 0.0

    @property
    def mean_accepted(self):
        return float(np.mean([c.accepted for c in self.cycles])) if self.cycles else 0.0

    def to_frame(self):
        return pd.DataFrame(
            [(i, len(c.drafted), c.accepted, c.teacher_token, len(c.emitted))
             for i, c in enumerate(self.cycles)],
            columns=['cycle', 'drafted', 'accepted', 'teacher_token', 'emitted'],
        )


def lossy_spec_step(teacher: TabularLM, student: TabularLM, prompt: Prompt, history: Sequence[int],
                    cfg: SpecConfig):
    """
    One lossy greedy speculative cycle after ``history``

    Returns:
        (emitted tokens, SpecCycle)
    """
    eos = teacher.vocab.eos_id
    history = tuple(history)
    drafted = []
    for _ in range(cfg.draft_len):
        token = int(np.argmax(student.base_distribution(student.context(prompt, history + tuple(drafted)))))
        drafted.append(token)
        if token == eos:
            break

    accepted = len(drafted)
    teacher_token = None
    for j, token in enumerate(drafted):
        p = teacher.distribution(teacher.context(prompt, history + tuple(drafted[:j])))
        best = int(np.argmax(p))
        if p[token] < cfg.lenience * p[best]:
            accepted = j
            teacher_token = best
            break

    emitted = tuple(drafted[:accepted])
    if teacher_token is None and drafted[-1] != eos:
        p = teacher.distribution(teacher.context(prompt, history + tuple(drafted)))
        teacher_token = int(np.argmax(p))
    if teacher_token is not None:
        emitted += (teacher_token,)
    return emitted, SpecCycle(tuple(drafted), accepted, teacher_token, emitted)


def lossy_spec_decode(teacher: TabularLM, student: TabularLM, prompt: Union[Prompt, int], max_len,
                      cfg: SpecConfig):
    """
    Repeat cycles until eos or ``max_len``; overshoot past max_len is cut

    Returns:
        (x_out, SpecTrace)
    """
    if max_len < 1:
        raise ContractViolation(f"max_len must be >= 1, got {max_len}")
    if not isinstance(prompt, Prompt):
        prompt = Prompt(int(prompt))
    eos = teacher.vocab.eos_id
    x_out = ()
    trace = SpecTrace()
    while len(x_out) < max_len and eos not in x_out:
        emitted, cycle = lossy_spec_step(teacher, student, prompt, x_out, cfg)
        trace.cycles.append(cycle)
        x_out = (x_out + emitted)[:max_len]
    trace.length = len(x_out)
    return x_out, trace


@dataclass(frozen=True)
class DraftConfig:
    """
    Reverse-KL distillation of the speculative draft model

    Attributes:
        steps: Trajectory batches sampled
        lr: Step size on the logit table
        order: Draft model order
        smoothing: Uniform smoothing of the draft initialisation
        n_prompts: Training prompts per batch
        updates_per_batch: Gradient steps on each sampled batch
        eval_every: Validation cadence in batches (the last batch is always scored)
        validation_size: Validation prompts used to pick the returned draft
    """
    steps: int = 200
    lr: float = 1.0
    order: int = 1
    smoothing: float = 0.1
    n_prompts: int = 16
    updates_per_batch: int = 4
    eval_every: int = 25
    validation_size: int = 64

    def __post_init__(self):
        if self.steps < 1 or self.updates_per_batch < 1 or self.eval_every < 1:
            raise ContractViolation("Draft steps, updates_per_batch and eval_every must be >= 1")
        if self.validation_size < 1:
            raise ContractViolation(f"validation_size must be >= 1, got {self.validation_size}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def reverse_kl_gradient(student: TabularLM, teacher: TabularLM, trajectories):
    """
    Mean token-wise KL(pi || p) over the positions of ``trajectories`` and its gradient

    ``trajectories`` is a list of (prompt, tokens) pairs.
    """
    grad = np.zeros_like(student.logits)
    total, count = 0.0, 0
    for prompt, tokens in trajectories:
        for i in range(len(tokens)):
            ctx = student.context(prompt, tokens[:i])
            row = student.row_index(ctx.window)
            pi = student.probs[ctx.instruction_id, row]
            log_pi = student.log_probs[ctx.instruction_id, row]
            log_p = teacher.log_distribution(teacher.context(prompt, tokens[:i]))
            kl = float(np.sum(pi * (log_pi - log_p)))
            grad[ctx.instruction_id, row] += pi * (log_pi - log_p - kl)
            total += kl
            count += 1
    if count == 0:
        return 0.0, grad
    return total / count, grad / count


def draft_validation_kl(student: TabularLM, teacher: TabularLM, prompts: Sequence[Prompt],
                        max_len=12) -> float:
    """
    Token-wise reverse KL on fixed-seed draft and teacher rollouts of ``prompts``

    Prompt i is rolled out with seed i by both models, so the score only moves
    with the draft table.
    """
    trajectories = [
        (prompt, rollout(model, prompt, max_len, Sampling('seeded', i)))
        for i, prompt in enumerate(prompts) for model in (student, teacher)
    ]
    return reverse_kl_gradient(student, teacher, trajectories)[0]


@dataclass(frozen=True)
class DraftCheckpoint:
    step: int
    model: TabularLM
    validation_kl: float


def reverse_kl_distill(student: TabularLM, teacher: TabularLM, prompts: Sequence[Prompt], steps,
                       lr=1.0, max_len=12, seed=0, mix=('student', 'teacher'), updates_per_batch=4,
                       validation_prompts: Sequence[Prompt] = (), eval_every=25) -> TabularLM:
    """
    Gradient descent on token-wise reverse KL along mixed trajectories

    Every batch samples one student and one teacher trajectory per prompt
    (configurable through ``mix``) and takes ``updates_per_batch`` steps on it.
    With ``validation_prompts`` the draft is scored before training, every
    ``eval_every`` batches and after the last one; the lowest validation KL wins
    (earliest on ties). Without them the last iterate is returned.
    """
    if student.augmented:
        raise ContractViolation("The draft model must be a base-alphabet model")
    if updates_per_batch < 1 or eval_every < 1:
        raise ContractViolation("updates_per_batch and eval_every must be >= 1")
    rng = make_rng(seed, 4)
    checkpoints = []

    def score(step):
        kl = draft_validation_kl(student, teacher, validation_prompts, max_len)
        checkpoints.append(DraftCheckpoint(step, student, kl))
        logger.info("Draft step %d/%d: validation reverse KL=%.5f", step, steps, kl)

    if validation_prompts:
        score(0)
    for step in range(steps):
        trajectories = []
        for prompt in prompts:
            for source in mix:
                model = student if source == 'student' else teacher
                sampling = Sampling('seeded', int(rng.integers(2 ** 31)))
                trajectories.append((prompt, rollout(model, prompt, max_len, sampling)))
        for _ in range(updates_per_batch):
            loss, grad = reverse_kl_gradient(student, teacher, trajectories)
            student = student.with_logits(student.logits - lr * grad)
        if validation_prompts and ((step + 1) % eval_every == 0 or step + 1 == steps):
            score(step + 1)
        elif (step + 1) % 50 == 0:
            logger.info("Draft distillation step %d/%d: reverse KL=%.5f", step + 1, steps, loss)
    if not checkpoints:
        return student
    best = min(checkpoints, key=lambda c: (c.validation_kl, c.step))
    logger.info("Kept draft from step %d (validation reverse KL=%.5f)", best.step, best.validation_kl)
    return best.model
