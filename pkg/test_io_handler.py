"""
Tests for artefact I/O
"""

import json

import numpy as np
import pandas as pd
import pytest

from core.exceptions import CheckpointMissingError, ConfigurationError
from core.soft_mdp import ValueTable
from core.tabular_lm import derive_student_init
from core.training import Checkpoint
from utils.io_handler import DRAFT_NAME, MANIFEST_NAME, IOHandler
from utils.task_suite import TaskSuite


@pytest.fixture
def io():
    return IOHandler()


@pytest.fixture
def tables():
    suite = TaskSuite(n_tasks=1, n_eval=4)
    teacher = suite.build_teacher()
    student = derive_student_init(teacher, 1, 0.1, n_rollouts=16, max_len=6)
    draft = derive_student_init(teacher, 1, 0.1, augmented=False, n_rollouts=16, max_len=6)
    return teacher, student, draft


def test_json_documents_are_byte_stable(io, tmp_path):
    document = {'b': [1, 2], 'a': {'y': 1.5, 'x': None}}
    io.write_json_document(document, tmp_path / 'one.json')
    io.write_json_document(json.loads((tmp_path / 'one.json').read_text()), tmp_path / 'two.json')
    assert (tmp_path / 'one.json').read_bytes() == (tmp_path / 'two.json').read_bytes()
    assert io.read_json_document(tmp_path / 'one.json') == document


def test_malformed_json_reports_line_and_column(io, tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text('{\n  "a": 1,\n  "b": ]\n}\n')
    with pytest.raises(ConfigurationError, match=r'bad\.json:3:8'):
        io.read_json_document(path)
    with pytest.raises(FileNotFoundError):
        io.read_json_document(tmp_path / 'absent.json')


def test_model_and_value_round_trip(io, tmp_path, tables):
    teacher, student, _ = tables
    io.save_model(student, tmp_path / 'student.json')
    restored = io.load_model(tmp_path / 'student.json')
    assert restored.augmented
    assert np.array_equal(restored.logits, student.logits)
    value = ValueTable(np.arange(teacher.n_instructions * 10 * 3, dtype=float).reshape(-1, 10, 3), 1, 10)
    io.save_value_table(value, tmp_path / 'value.json')
    assert np.array_equal(io.load_value_table(tmp_path / 'value.json').values, value.values)


def test_checkpoints_with_manifest(io, tmp_path, tables):
    _, student, draft = tables
    value = ValueTable.zeros(student, 6)
    checkpoints = [Checkpoint(b, student, value, {0: 0.1 * b}, {0: 0.2}) for b in (2, 4)]
    io.save_checkpoints(checkpoints, tmp_path / 'run', selected_batch=2, flagged=True, draft=draft)
    manifest = io.read_manifest(tmp_path / 'run')
    assert manifest['selected_batch'] == 2 and manifest['selection_flagged']
    assert manifest['draft'] == DRAFT_NAME
    assert io.load_checkpoint(tmp_path / 'run').batch == 2
    assert io.load_checkpoint(tmp_path / 'run', 4).lambdas == {0: 0.4}
    assert [c.batch for c in io.load_checkpoints(tmp_path / 'run')] == [2, 4]
    assert not io.load_draft(tmp_path / 'run').augmented


def test_missing_artefacts(io, tmp_path, tables):
    _, student, _ = tables
    with pytest.raises(CheckpointMissingError) as info:
        io.load_checkpoint(tmp_path / 'nothing')
    assert str(tmp_path / 'nothing' / MANIFEST_NAME) in str(info.value)
    assert isinstance(info.value, FileNotFoundError)

    io.save_checkpoints([Checkpoint(1, student, ValueTable.zeros(student, 6))], tmp_path / 'run')
    with pytest.raises(CheckpointMissingError):
        io.load_checkpoint(tmp_path / 'run', 7)
    with pytest.raises(CheckpointMissingError):
        io.load_draft(tmp_path / 'run')


def test_export_results_leaves_no_temporaries(io, tmp_path):
    rows = [{'method': 'tandem', 'param': 0.1}, {'method': 'specdec', 'param': 0.5}]
    io.export_results(rows, tmp_path / 'out' / 'report.csv')
    assert list((tmp_path / 'out').iterdir()) == [tmp_path / 'out' / 'report.csv']
    frame = io.load_results(tmp_path / 'out' / 'report.csv')
    pd.testing.assert_frame_equal(frame, pd.DataFrame(rows))
