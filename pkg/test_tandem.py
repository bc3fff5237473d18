"""
Tests for tandem student/teacher decoding
"""

import numpy as np
import pytest

from core.alphabet import Vocab
from core.budget import STUDENT, TEACHER
from core.exceptions import ContractViolation
from core.tabular_lm import MASKED_LOGIT, Prompt, derive_student_init, random_teacher
from core.tandem import (
    DecodeState, Sampling, deshift, rollout, tandem_decode, tandem_step,
)

VOCAB = Vocab(4, 0)
MAX_LEN = 10


class CountingTeacher:
    """Teacher proxy counting next-token queries"""

    def __init__(self, teacher):
        self._teacher = teacher
        self.calls = 0

    def distribution(self, ctx):
        self.calls += 1
        return self._teacher.distribution(ctx)

    def __getattr__(self, name):
        return getattr(self._teacher, name)


def models(seed=0):
    teacher = random_teacher(seed, 2, VOCAB, 2.0, 6)
    student = derive_student_init(teacher, 1, 0.1, n_rollouts=32, max_len=MAX_LEN)
    return student, teacher


def always_tau(student):
    logits = np.full(student.logits.shape, MASKED_LOGIT)
    logits[..., student.tau_id] = 0.0
    return student.with_logits(logits)


def test_teacher_is_queried_only_after_tau():
    student, teacher = models()
    counting = CountingTeacher(teacher)
    _, trace = tandem_decode(student, counting, Prompt(3), MAX_LEN)
    assert counting.calls == trace.teacher_calls == 0

    counting = CountingTeacher(teacher)
    _, trace = tandem_decode(always_tau(student), counting, Prompt(3), MAX_LEN)
    assert counting.calls == trace.teacher_calls == trace.length


def test_always_tau_reproduces_teacher_greedy():
    student, teacher = models(1)
    for instruction in range(6):
        prompt = Prompt(instruction, (2,))
        x_out, trace = tandem_decode(always_tau(student), teacher, prompt, MAX_LEN)
        assert x_out == rollout(teacher, prompt, MAX_LEN)
        assert trace.teacher_use == 1.0
        assert all(r.action == student.tau_id for r in trace.records)


def test_never_tau_is_a_student_rollout():
    student, teacher = models(2)
    prompt = Prompt(0)
    x_out, trace = tandem_decode(student, teacher, prompt, MAX_LEN)
    assert x_out == rollout(student, prompt, MAX_LEN)
    assert trace.teacher_use == 0.0
    assert trace.student_tokens == trace.student_passes == len(x_out)


def test_teacher_tokens_enter_input_shifted():
    student, teacher = models(3)
    state = DecodeState(Prompt(1))
    tau_student = always_tau(student)
    for _ in range(3):
        if state.finished:
            break
        state, token, origin = tandem_step(tau_student, teacher, state)
        assert origin == TEACHER
    assert state.x_in == tuple(t + VOCAB.size for t in state.x_out)
    assert deshift(state.x_in, VOCAB.size) == state.x_out


def test_stops_at_eos_or_max_len():
    student, teacher = models(4)
    for instruction in range(6):
        x_out, trace = tandem_decode(student, teacher, instruction, MAX_LEN, Sampling('seeded', instruction))
        assert 1 <= len(x_out) <= MAX_LEN
        assert VOCAB.eos_id not in x_out[:-1]
        assert len(x_out) == MAX_LEN or x_out[-1] == VOCAB.eos_id
        assert trace.length == len(x_out)
    x_out, _ = tandem_decode(student, teacher, Prompt(0), 1)
    assert len(x_out) == 1
    with pytest.raises(ContractViolation):
        tandem_decode(student, teacher, Prompt(0), 0)


def test_finished_state_cannot_step():
    student, teacher = models()
    with pytest.raises(ContractViolation):
        tandem_step(student, teacher, DecodeState(Prompt(0), (0,), (0,), True))


def test_seeded_decodes_replay():
    student, teacher = models(5)
    mixed = student.with_logits(np.where(
        np.arange(student.alphabet_size) == student.tau_id, 0.0, student.logits
    ))
    a = tandem_decode(mixed, teacher, Prompt(2), MAX_LEN, Sampling('seeded', 11))
    b = tandem_decode(mixed, teacher, Prompt(2), MAX_LEN, Sampling('seeded', 11))
    assert a[0] == b[0]
    assert a[1].records == b[1].records
    with pytest.raises(ContractViolation):
        Sampling('nucleus')


def test_trace_records_teacher_scores():
    student, teacher = models(6)
    prompt = Prompt(4)
    x_out, trace = tandem_decode(always_tau(student), teacher, prompt, MAX_LEN)
    frame = trace.to_frame()
    assert list(frame.columns) == ['step', 'origin', 'action', 'token', 'teacher_logprob']
    assert list(frame['token']) == list(x_out)
    for i, r in enumerate(trace.records):
        expected = teacher.log_distribution(teacher.context(prompt, x_out[:i]))[r.token]
        assert r.teacher_logprob == pytest.approx(expected)
    assert set(frame['origin']) == {TEACHER}
    assert STUDENT not in set(frame['origin'])
