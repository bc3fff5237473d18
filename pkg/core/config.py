"""
Experiment configuration documents

A configuration is one JSON document with a ``schema_version`` and the
sections ``suite``, ``training``, ``sweep`` and ``oracle``. Every section maps
onto a dataclass; missing keys take the dataclass defaults and unknown keys are
rejected.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from core.benchmark import SweepConfig
from core.budget import RewardConfig
from core.exceptions import ConfigurationError
from core.oracles import OracleConfig
from core.pcl import PCLConfig
from core.speculative import DraftConfig
from core.training import CheckpointSelector, LagrangeConfig, Phase1Config, Phase2Config
from utils.io_handler import IOHandler
from utils.task_suite import StudentSpec, TaskSuite, TeacherSpec

SCHEMA_VERSION = 1


def _check_keys(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        error = ConfigurationError(f"{where}: unknown key {unknown[0]!r}")
        error.key = unknown[0]
        raise error


def _build(cls, data, where):
    _check_keys(cls, data, where)
    try:
        return cls.from_dict(data)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{where}: {e}") from e


def _build_suite(data, where='suite'):
    _check_keys(TaskSuite, data, where)
    _check_keys(TeacherSpec, data.get('teacher', {}), f'{where}.teacher')
    _check_keys(StudentSpec, data.get('student', {}), f'{where}.student')
    try:
        return TaskSuite.from_dict(data)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{where}: {e}") from e


@dataclass(frozen=True)
class TrainingConfig:
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    pcl: PCLConfig = field(default_factory=PCLConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    lagrange: LagrangeConfig = field(default_factory=LagrangeConfig)
    selector: CheckpointSelector = field(default_factory=CheckpointSelector)
    draft: DraftConfig = field(default_factory=DraftConfig)

    def to_dict(self):
        return {f.name: getattr(self, f.name).to_dict() for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data, where='training'):
        _check_keys(cls, data, where)
        sections = {}
        for f in dataclasses.fields(cls):
            if f.name in data:
                sections[f.name] = _build(f.default_factory, data[f.name], f'{where}.{f.name}')
        return cls(**sections)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs besides the seed"""
    suite: TaskSuite = field(default_factory=TaskSuite)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def to_dict(self):
        return {
            'schema_version': SCHEMA_VERSION,
            'suite': self.suite.to_dict(),
            'training': self.training.to_dict(),
            'sweep': self.sweep.to_dict(),
            'oracle': self.oracle.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        """
        Build a configuration from a parsed document

        Raises:
            ConfigurationError: on a missing or unsupported schema version,
                unknown keys or invalid values
        """
        if not isinstance(data, dict):
            raise ConfigurationError("Configuration must be a JSON object")
        version = data.get('schema_version')
        if version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"Unsupported schema_version {version!r} (expected {SCHEMA_VERSION})"
            )
        body = {k: v for k, v in data.items() if k != 'schema_version'}
        _check_keys(cls, body, 'config')
        sections = {}
        if 'suite' in body:
            sections['suite'] = _build_suite(body['suite'])
        if 'training' in body:
            sections['training'] = TrainingConfig.from_dict(body['training'])
        if 'sweep' in body:
            sections['sweep'] = _build(SweepConfig, body['sweep'], 'sweep')
        if 'oracle' in body:
            sections['oracle'] = _build(OracleConfig, body['oracle'], 'oracle')
        return cls(**sections)


def load_config(file_path) -> ExperimentConfig:
    """
    Read and validate a configuration document

    Raises:
        ConfigurationError: prefixed with the file path (and line/column for
            JSON syntax errors)
    """
    document = IOHandler().read_json_document(file_path)
    try:
        return ExperimentConfig.from_dict(document)
    except ConfigurationError as e:
        location = _locate(Path(file_path).read_text(), getattr(e, "key", None))
        prefix = f"{file_path}:{location[0]}:{location[1]}" if location else str(file_path)
        raise ConfigurationError(f"{prefix}: {e}") from e


def _locate(text, key):
    """1-based (line, column) of the first quoted ``key`` in ``text``"""
    if key is None:
        return None
    index = text.find(f'"{key}"')
    if index < 0:
        return None
    line = text.count("\n", 0, index) + 1
    return line, index - (text.rfind("\n", 0, index) + 1) + 1


def save_config(config: ExperimentConfig, file_path):
    IOHandler().write_json_document(config.to_dict(), file_path)
