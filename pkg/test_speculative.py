"""
Tests for lossy speculative decoding and draft distillation
"""

import numpy as np
import pytest

from core.alphabet import Vocab
from core.exceptions import ContractViolation
from core.speculative import (
    DraftConfig, SpecConfig, draft_validation_kl, lossy_spec_decode, lossy_spec_step, reverse_kl_distill,
    reverse_kl_gradient,
)
from core.tabular_lm import Prompt, derive_student_init, random_teacher
from core.tandem import Sampling, rollout

VOCAB = Vocab(6, 0)
MAX_LEN = 12


def models(seed=0):
    teacher = random_teacher(seed, 2, VOCAB, 1.0, 2)
    draft = derive_student_init(teacher, 1, 0.3, augmented=False, n_rollouts=32, max_len=MAX_LEN)
    return draft, teacher


@pytest.mark.parametrize('draft_len', [3, 5, 10])
def test_full_lenience_reproduces_teacher_greedy(draft_len):
    draft, teacher = models(1)
    cfg = SpecConfig(draft_len, 1.0)
    for instruction in range(2):
        for prefix in [(), (3,), (2, 5)]:
            prompt = Prompt(instruction, prefix)
            x_out, _ = lossy_spec_decode(teacher, draft, prompt, MAX_LEN, cfg)
            assert x_out == rollout(teacher, prompt, MAX_LEN)


@pytest.mark.parametrize('draft_len', [3, 5, 10])
def test_zero_lenience_accepts_whole_drafts(draft_len):
    draft, teacher = models(2)
    _, trace = lossy_spec_decode(teacher, draft, Prompt(0), MAX_LEN, SpecConfig(draft_len, 0.0))
    for cycle in trace.cycles:
        assert cycle.accepted == len(cycle.drafted)
        if VOCAB.eos_id not in cycle.drafted:
            assert len(cycle.drafted) == draft_len
            assert len(cycle.emitted) == draft_len + 1
        else:
            assert cycle.teacher_token is None


@pytest.mark.parametrize('draft_len', [3, 5, 10])
def test_accepted_length_grows_as_lenience_falls(draft_len):
    draft, teacher = models(5)
    lenience = np.linspace(1.0, 0.0, 11)
    for instruction in range(2):
        for prefix in [(), (4,), (1, 3)]:
            prompt = Prompt(instruction, prefix)
            for history in [(), rollout(teacher, prompt, 3)]:
                cycles = [lossy_spec_step(teacher, draft, prompt, history, SpecConfig(draft_len, c))[1]
                          for c in lenience]
                accepted = [cycle.accepted for cycle in cycles]
                assert all(a <= b for a, b in zip(accepted, accepted[1:]))


def test_draft_equal_to_teacher_is_always_accepted():
    _, teacher = models(3)
    for lenience in (0.0, 0.5, 1.0):
        x_out, trace = lossy_spec_decode(teacher, teacher, Prompt(1), MAX_LEN, SpecConfig(4, lenience))
        assert all(c.accepted == len(c.drafted) for c in trace.cycles)
        assert x_out == rollout(teacher, Prompt(1), MAX_LEN)


def test_rejection_is_replaced_by_teacher_argmax():
    draft, teacher = models(4)
    prompt = Prompt(0)
    emitted, cycle = lossy_spec_step(teacher, draft, prompt, (), SpecConfig(5, 1.0))
    n = cycle.accepted
    assert emitted[:n] == cycle.drafted[:n]
    if cycle.teacher_token is None:
        assert cycle.drafted[-1] == VOCAB.eos_id and emitted == cycle.drafted
        return
    p = teacher.distribution(teacher.context(prompt, cycle.drafted[:n]))
    assert cycle.teacher_token == int(np.argmax(p))
    assert emitted[-1] == cycle.teacher_token


def test_trace_accounting():
    draft, teacher = models(5)
    x_out, trace = lossy_spec_decode(teacher, draft, Prompt(0), MAX_LEN, SpecConfig(3, 0.5))
    assert trace.length == len(x_out)
    assert trace.teacher_passes == len(trace.cycles)
    assert trace.student_passes == sum(len(c.drafted) for c in trace.cycles)
    assert trace.teacher_use == pytest.approx(len(trace.cycles) / len(x_out))
    frame = trace.to_frame()
    assert list(frame.columns) == ['cycle', 'drafted', 'accepted', 'teacher_token', 'emitted']
    assert len(frame) == len(trace.cycles)


def test_output_is_cut_at_max_len():
    draft, teacher = models(6)
    x_out, trace = lossy_spec_decode(teacher, draft, Prompt(0), 1, SpecConfig(10, 0.0))
    assert len(x_out) == 1 and trace.length == 1
    with pytest.raises(ContractViolation):
        lossy_spec_decode(teacher, draft, Prompt(0), 0, SpecConfig())


def test_invalid_configs():
    with pytest.raises(ContractViolation):
        SpecConfig(0, 0.5)
    with pytest.raises(ContractViolation):
        SpecConfig(3, 1.5)


def test_reverse_kl_gradient_matches_finite_differences():
    draft, teacher = models(7)
    trajectories = [(Prompt(i % 2), rollout(teacher, Prompt(i % 2), 6, Sampling('seeded', i)))
                    for i in range(4)]
    _, grad = reverse_kl_gradient(draft, teacher, trajectories)
    eps = 1e-6
    for flat in np.argsort(-np.abs(grad).ravel())[:8]:
        index = np.unravel_index(flat, grad.shape)
        up = draft.logits.copy()
        down = draft.logits.copy()
        up[index] += eps
        down[index] -= eps
        numeric = (reverse_kl_gradient(draft.with_logits(up), teacher, trajectories)[0]
                   - reverse_kl_gradient(draft.with_logits(down), teacher, trajectories)[0]) / (2 * eps)
        assert numeric == pytest.approx(grad[index], rel=1e-4, abs=1e-8)
    assert reverse_kl_gradient(draft, teacher, [])[0] == 0.0


def test_distillation_lowers_reverse_kl():
    draft, teacher = models(8)
    prompts = [Prompt(i) for i in range(2)]
    held_out = [(p, rollout(m, p, MAX_LEN, Sampling('seeded', s)))
                for p in prompts for m in (draft, teacher) for s in range(10)]
    before = reverse_kl_gradient(draft, teacher, held_out)[0]
    trained = reverse_kl_distill(draft, teacher, prompts, steps=40, lr=1.0, max_len=MAX_LEN, seed=0)
    assert reverse_kl_gradient(trained, teacher, held_out)[0] < before


def test_distillation_keeps_the_best_validation_draft():
    draft, teacher = models(9)
    prompts = [Prompt(i) for i in range(2)]
    validation = [Prompt(i % 2, (i % 5 + 1,)) for i in range(6)]
    start = draft_validation_kl(draft, teacher, validation, MAX_LEN)
    trained = reverse_kl_distill(draft, teacher, prompts, steps=6, lr=1.0, max_len=MAX_LEN, seed=1,
                                 updates_per_batch=4, validation_prompts=validation, eval_every=2)
    scored = draft_validation_kl(trained, teacher, validation, MAX_LEN)
    assert scored <= start
    wild = reverse_kl_distill(draft, teacher, prompts, steps=2, lr=50.0, max_len=MAX_LEN, seed=1,
                              validation_prompts=validation, eval_every=1)
    assert draft_validation_kl(wild, teacher, validation, MAX_LEN) <= start


def test_draft_config_rejects_empty_schedules():
    assert DraftConfig().updates_per_batch == 4
    with pytest.raises(ContractViolation):
        DraftConfig(updates_per_batch=0)
    with pytest.raises(ContractViolation):
        DraftConfig(validation_size=0)


def test_distillation_refuses_augmented_draft():
    _, teacher = models()
    augmented = derive_student_init(teacher, 1, 0.1, n_rollouts=8, max_len=MAX_LEN)
    with pytest.raises(ContractViolation):
        reverse_kl_distill(augmented, teacher, [Prompt(0)], steps=1)
