"""
Tests for tabular language models, contexts and student initialisation
"""

import numpy as np
import pytest

from core.alphabet import AugAlphabet, Vocab, embed_augmented
from core.exceptions import ConfigurationError, ContractViolation
from core.tabular_lm import (
    Context, Distribution, Prompt, TabularLM, derive_student_init, estimate_visitation,
    make_context, make_rng, next_distribution, random_prefix, random_teacher, sample_index, sample_token,
    sequence_logprob,
)

VOCAB = Vocab(4, 0)


def teacher_fixture(seed=0, order=2, concentration=1.0, n_instructions=1):
    return random_teacher(seed, order, VOCAB, concentration, n_instructions)


def test_rows_are_distributions():
    teacher = teacher_fixture()
    assert teacher.probs.shape == (1, 25, 4)
    assert np.allclose(teacher.probs.sum(axis=-1), 1.0, atol=1e-12)
    ctx = teacher.context(Prompt(0))
    dist = next_distribution(teacher, ctx)
    assert isinstance(dist, Distribution)
    assert abs(sum(dist[t] for t in range(4)) - 1.0) < 1e-12


def test_context_pads_and_slides():
    teacher = teacher_fixture()
    assert teacher.context(Prompt(0)).window == (4, 4)
    assert teacher.context(Prompt(0), (1,)).window == (4, 1)
    assert teacher.context(Prompt(0, (3,)), (1, 2)).window == (1, 2)
    assert Context((4, 1), 0).advance(2).window == (1, 2)


def test_make_context_uses_each_models_pad():
    teacher = teacher_fixture()
    student = derive_student_init(teacher, 1, 0.1, augmented=True, n_rollouts=8, max_len=4, seed=0)
    assert make_context(teacher, Prompt(0), (2,)) == teacher.context(Prompt(0), (2,))
    assert make_context(student, Prompt(0)).window == (9,)
    assert make_context(student, Prompt(0, (3,)), (5,)).window == (5,)


def test_unknown_instruction_is_configuration_error():
    teacher = teacher_fixture()
    with pytest.raises(ConfigurationError):
        next_distribution(teacher, Context((4, 4), 3))


def test_window_mismatch_is_contract_violation():
    teacher = teacher_fixture()
    with pytest.raises(ContractViolation):
        next_distribution(teacher, Context((4,), 0))
    with pytest.raises(ContractViolation):
        next_distribution(teacher, Context((4, 9), 0))


def test_uniform_model_scores_minus_log_alphabet_per_token():
    uniform = TabularLM(VOCAB, 1, np.zeros((1, 5, 4)))
    seq = (1, 3, 2, 0)
    assert sequence_logprob(uniform, Prompt(0), seq) == pytest.approx(-4 * np.log(4), abs=1e-12)
    assert sequence_logprob(uniform, Prompt(0), ()) == 0.0


def test_sequence_logprob_accepts_explicit_context():
    teacher = teacher_fixture()
    prompt = Prompt(0, (2,))
    seq = (1, 3, 0)
    expected = sum(
        np.log(teacher.distribution(teacher.context(prompt, seq[:i]))[t]) for i, t in enumerate(seq)
    )
    assert sequence_logprob(teacher, teacher.context(prompt), seq) == pytest.approx(expected, abs=1e-12)


def test_sequence_logprob_sums_next_distribution_logs():
    teacher = teacher_fixture(seed=3)
    student = derive_student_init(teacher, 1, 0.1, n_rollouts=32, max_len=6)
    prompt = Prompt(0, (2,))
    seq = (1, 3, 2, 0)
    ctx = make_context(student, prompt)
    expected = 0.0
    for token in seq:
        expected += np.log(next_distribution(student, ctx)[token])
        ctx = ctx.advance(token)
    assert sequence_logprob(student, prompt, seq) == pytest.approx(expected, abs=1e-10)


def test_sequence_logprob_rejects_tau_and_foreign_tokens():
    teacher = teacher_fixture()
    student = derive_student_init(teacher, 1, 0.1, n_rollouts=32, max_len=6)
    with pytest.raises(ContractViolation):
        sequence_logprob(student, Prompt(0), (1, student.tau_id))
    with pytest.raises(ContractViolation):
        sequence_logprob(teacher, Prompt(0), (7,))


def test_higher_concentration_lowers_row_entropy():
    def mean_entropy(concentration):
        probs = teacher_fixture(seed=4, concentration=concentration).probs
        return float(-(probs * np.log(probs)).sum(axis=-1).mean())

    entropies = [mean_entropy(c) for c in (0.25, 0.5, 1.0, 2.0, 4.0)]
    assert all(a > b for a, b in zip(entropies, entropies[1:]))
    assert entropies[0] < np.log(VOCAB.size)


def test_sample_token_greedy_and_seeded():
    teacher = teacher_fixture(concentration=3.0)
    ctx = teacher.context(Prompt(0))
    assert sample_token(teacher, ctx, 0, greedy=True) == int(np.argmax(teacher.distribution(ctx)))
    draws = [sample_token(teacher, ctx, seed) for seed in range(20)]
    assert draws == [sample_token(teacher, ctx, seed) for seed in range(20)]


def test_sample_index_skips_zero_probability_tail():
    probs = np.array([0.5, 0.5, 0.0])
    assert sample_index(probs, 0.0) == 0
    assert sample_index(probs, 0.75) == 1
    assert sample_index(probs, np.nextafter(1.0, 0.0)) == 1


def test_make_rng_streams_are_independent_and_replayable():
    a = make_rng(5, 1).random(3)
    assert np.array_equal(a, make_rng(5, 1).random(3))
    assert not np.array_equal(a, make_rng(5, 2).random(3))


def test_random_prefix_avoids_eos():
    prefix = random_prefix(make_rng(0), VOCAB, 200)
    assert len(prefix) == 200
    assert VOCAB.eos_id not in prefix


def test_logit_table_is_read_only():
    teacher = teacher_fixture()
    with pytest.raises(ValueError):
        teacher.logits[0, 0, 0] = 1.0


def test_bad_shape_and_non_finite_logits_rejected():
    with pytest.raises(ContractViolation):
        TabularLM(VOCAB, 1, np.zeros((1, 4, 4)))
    logits = np.zeros((1, 5, 4))
    logits[0, 0, 0] = np.nan
    with pytest.raises(ContractViolation):
        TabularLM(VOCAB, 1, logits)


def test_student_init_masks_shifted_block_and_suppresses_tau():
    teacher = teacher_fixture()
    student = derive_student_init(teacher, 1, 0.1, n_rollouts=64, max_len=8)
    V = VOCAB.size
    assert student.augmented
    assert student.alphabet_size == 2 * V + 1
    assert student.context_size == 2 * V + 2
    assert np.all(student.probs[..., V:2 * V] == 0.0)
    assert np.all(student.probs[..., 2 * V] < 1e-4)


def test_student_init_rejects_order_above_teacher():
    with pytest.raises(ContractViolation):
        derive_student_init(teacher_fixture(order=1), 2, 0.1)


def test_full_capacity_student_without_smoothing_copies_teacher():
    teacher = teacher_fixture(concentration=2.0)
    student = derive_student_init(teacher, 2, 0.0, augmented=False, n_rollouts=16, max_len=4)
    assert np.allclose(student.probs, teacher.probs, atol=1e-12)


def test_unsmoothed_init_keeps_zero_probability_columns_finite():
    logits = np.zeros((1, 5, 4))
    logits[:, :, 3] = -1.0e4
    teacher = TabularLM(VOCAB, 1, logits)
    assert np.all(teacher.probs[..., 3] == 0.0)
    student = derive_student_init(teacher, 1, 0.0, n_rollouts=16, max_len=4)
    assert np.all(np.isfinite(student.logits))
    assert np.all(student.probs[..., 3] < 1e-300)
    assert np.allclose(student.probs[..., :3].sum(axis=-1), 1.0, atol=1e-4)


def test_shifted_window_maps_to_teacher_suffix():
    teacher = teacher_fixture(order=1, concentration=2.0)
    student = derive_student_init(teacher, 1, 0.0, n_rollouts=16, max_len=4)
    alphabet = AugAlphabet(VOCAB)
    for token in range(VOCAB.size):
        plain = student.base_distribution(student.context(Prompt(0), (token,)))
        shifted = student.base_distribution(student.context(Prompt(0), (alphabet.shift(token),)))
        assert np.allclose(plain, shifted, atol=1e-12)
        assert np.allclose(plain, teacher.distribution(teacher.context(Prompt(0), (token,))), atol=1e-12)


def test_visitation_counts_every_first_step():
    teacher = teacher_fixture(n_instructions=2)
    counts = estimate_visitation(teacher, n_rollouts=50, max_len=5, seed=1)
    start = teacher.row_index((teacher.pad_id, teacher.pad_id))
    assert counts.shape == (2, teacher.n_rows)
    assert np.all(counts[:, start] == 50)


def test_repeat_instructions_copies_rows():
    teacher = teacher_fixture(n_instructions=2).repeat_instructions(3)
    assert teacher.n_instructions == 6
    assert np.array_equal(teacher.logits[0], teacher.logits[2])
    assert np.array_equal(teacher.logits[3], teacher.logits[5])
    assert not np.array_equal(teacher.logits[0], teacher.logits[3])


def test_dump_restores_identical_table():
    student = derive_student_init(teacher_fixture(), 1, 0.2, n_rollouts=16, max_len=4)
    restored = TabularLM.from_dict(student.to_dict())
    assert restored.augmented and restored.order == 1
    assert np.array_equal(restored.logits, student.logits)


def test_load_rejects_foreign_documents():
    with pytest.raises(ConfigurationError):
        TabularLM.from_dict({'format': 'something-else'})
    data = teacher_fixture().to_dict()
    data['alphabet_size'] = 9
    with pytest.raises(ConfigurationError):
        TabularLM.from_dict(data)


def test_alphabet_layout():
    alphabet = AugAlphabet(VOCAB)
    assert alphabet.tau_id == 8 and alphabet.pad_id == 9
    assert alphabet.shift(3) == 7 and alphabet.deshift(7) == 3
    assert embed_augmented(6, alphabet) == 6
    with pytest.raises(ContractViolation):
        embed_augmented(alphabet.tau_id, alphabet)
    with pytest.raises(ContractViolation):
        alphabet.shift(5)
    with pytest.raises(ContractViolation):
        Vocab(4, 4)
