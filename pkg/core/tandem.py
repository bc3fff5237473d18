"""
Tandem student/teacher decoding

The student emits either a base token or <tau>. On <tau> the teacher produces
the next token, which enters the student's input sequence shifted by |V| and
the output sequence unshifted. The teacher conditions on the output sequence
only; the student conditions on the input sequence, so it sees token origin.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Tuple, Union

import numpy as np
import pandas as pd

from core.alphabet import AugAlphabet
from core.budget import STUDENT, TEACHER
from core.exceptions import ContractViolation
from core.tabular_lm import Prompt, TabularLM, make_rng, sample_index

logger = logging.getLogger(__name__)

SAMPLING_MODES = ('greedy', 'seeded')


@dataclass(frozen=True)
class Sampling:
    """Greedy argmax, or inverse-CDF draws replayable from ``seed``"""
    mode: str = 'greedy'
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SAMPLING_MODES:
            raise ContractViolation(f"Unknown sampling mode {self.mode!r}")

    @property
    def greedy(self):
        return self.mode == 'greedy'

    def draw(self, probs, step, stream):
        if self.greedy:
            return int(np.argmax(probs))
        return sample_index(probs, make_rng(self.seed, step, stream).random())


GREEDY = Sampling('greedy')


@dataclass(frozen=True)
class DecodeState:
    """
    Paired input/output sequences of a tandem decode

    Attributes:
        prompt: Instruction (carrying the budget keyword) and source prefix
        x_in: Student input symbols; teacher tokens are shifted by |V|
        x_out: Emitted base tokens
        finished: Set once eos has been emitted
    """
    prompt: Prompt
    x_in: Tuple[int, ...] = ()
    x_out: Tuple[int, ...] = ()
    finished: bool = False

    @property
    def instruction_id(self):
        return self.prompt.instruction_id

    @property
    def step(self):
        return len(self.x_out)


@dataclass(frozen=True)
class TraceRecord:
    step: int
    origin: str
    action: int
    token: int
    teacher_logprob: float


@dataclass
class DecodeTrace:
    """Per-step record of a tandem decode plus call accounting"""
    records: List[TraceRecord] = field(default_factory=list)

    @property
    def teacher_calls(self):
        return sum(1 for r in self.records if r.origin == TEACHER)

    @property
    def student_tokens(self):
        return sum(1 for r in self.records if r.origin == STUDENT)

    @property
    def student_passes(self):
        """Every step costs one student pass, including the ones that emit <tau>"""
        return len(self.records)

    @property
    def length(self):
        return len(self.records)

    @property
    def teacher_use(self):
        return self.teacher_calls / self.length if self.records else 0.0

    def to_frame(self):
        return pd.DataFrame(
            [(r.step, r.origin, r.action, r.token, r.teacher_logprob) for r in self.records],
            columns=['step', 'origin', 'action', 'token', 'teacher_logprob'],
        )


def deshift(x_in, vocab_size):
    return tuple(t - vocab_size if t >= vocab_size else t for t in x_in)


def tandem_step(student: TabularLM, teacher: TabularLM, state: DecodeState,
                sampling: Sampling = GREEDY):
    """
    One tandem step

    Returns:
        (next state, emitted base token, origin)
    """
    if state.finished:
        raise ContractViolation("tandem_step called on a finished decode")
    V = teacher.vocab.size
    step = state.step
    action = sampling.draw(student.distribution(student.context(state.prompt, state.x_in)), step, 0)

    if student.augmented and action == student.tau_id:
        teacher_ctx = teacher.context(state.prompt, state.x_out)
        token = sampling.draw(teacher.distribution(teacher_ctx), step, 1)
        x_in = state.x_in + (AugAlphabet(teacher.vocab).shift(token),)
        origin = TEACHER
    elif action < V:
        token = action
        x_in = state.x_in + (token,)
        origin = STUDENT
    else:
        raise ContractViolation(f"Student emitted non-action symbol {action}")

    next_state = replace(
        state,
        x_in=x_in,
        x_out=state.x_out + (token,),
        finished=token == teacher.vocab.eos_id,
    )
    return next_state, token, origin


def tandem_decode(student: TabularLM, teacher: TabularLM, prompt: Union[Prompt, int],
                  max_len: int, sampling: Sampling = GREEDY):
    """
    Decode until eos or ``max_len`` tokens

    The teacher is queried only after <tau>. Teacher log-probabilities in the
    trace are offline scores of the emitted tokens and are not counted as calls.

    Returns:
        (x_out, DecodeTrace)
    """
    if max_len < 1:
        raise ContractViolation(f"max_len must be >= 1, got {max_len}")
    if not isinstance(prompt, Prompt):
        prompt = Prompt(int(prompt))
    student.validate_context(student.context(prompt))
    teacher.validate_context(teacher.context(prompt))

    state = DecodeState(prompt)
    trace = DecodeTrace()
    while not state.finished and state.step < max_len:
        scoring_ctx = teacher.context(prompt, state.x_out)
        step = state.step
        state, token, origin = tandem_step(student, teacher, state, sampling)
        action = student.tau_id if origin == TEACHER else token
        trace.records.append(TraceRecord(
            step, origin, action, token, float(teacher.log_distribution(scoring_ctx)[token])
        ))
    return state.x_out, trace


def rollout(model: TabularLM, prompt: Prompt, max_len, sampling: Sampling = GREEDY, stream=1):
    """Tokens of a plain (no <tau>) decode of ``model`` from ``prompt``"""
    tokens = []
    while len(tokens) < max_len:
        probs = model.base_distribution(model.context(prompt, tokens))
        token = sampling.draw(probs, len(tokens), stream)
        tokens.append(token)
        if token == model.vocab.eos_id:
            break
    return tuple(tokens)
