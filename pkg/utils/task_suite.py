"""
Generate synthetic distillation tasks

A task suite fixes a random teacher family, the capacity of the student, and
the evaluation prompts. Everything is reproducible from the suite seed.
"""

from dataclasses import asdict, dataclass, field

from core.alphabet import Vocab
from core.budget import BUDGET_SPECS, instruction_id
from core.tabular_lm import Prompt, derive_student_init, make_rng, random_prefix, random_teacher


@dataclass(frozen=True)
class TeacherSpec:
    order: int = 2
    vocab_size: int = 6
    eos_id: int = 0
    concentration: float = 2.0

    @property
    def vocab(self):
        return Vocab(self.vocab_size, self.eos_id)


@dataclass(frozen=True)
class StudentSpec:
    order: int = 1
    smoothing: float = 0.1
    visitation_rollouts: int = 256


@dataclass(frozen=True)
class TaskSuite:
    """
    Reference synthetic task family

    Attributes:
        seed: Suite seed; teacher tables and prompts derive from it
        n_tasks: Number of tasks; each owns one instruction per budget keyword
        teacher: Teacher table settings
        student: Student capacity and initialisation
        max_len: Decode cap
        prefix_len: Length of each prompt's source prefix
        n_eval: Evaluation prompts
    """
    seed: int = 0
    n_tasks: int = 2
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    student: StudentSpec = field(default_factory=StudentSpec)
    max_len: int = 12
    prefix_len: int = 2
    n_eval: int = 512

    def __post_init__(self):
        if self.n_tasks < 1 or self.n_eval < 1:
            raise ValueError("A task suite needs at least one task and one evaluation prompt")

    @property
    def vocab(self):
        return self.teacher.vocab

    @property
    def n_instructions(self):
        return self.n_tasks * len(BUDGET_SPECS)

    def build_teacher(self):
        """Teacher table; rows are shared by all budget keywords of a task"""
        teacher = random_teacher(self.seed, self.teacher.order, self.vocab,
                                 self.teacher.concentration, self.n_tasks)
        return teacher.repeat_instructions(len(BUDGET_SPECS))

    def build_student(self, teacher, augmented=True, order=None, smoothing=None):
        return derive_student_init(
            teacher,
            self.student.order if order is None else order,
            self.student.smoothing if smoothing is None else smoothing,
            augmented=augmented,
            n_rollouts=self.student.visitation_rollouts,
            max_len=self.max_len,
            seed=self.seed,
        )

    def prompts(self, n, stream):
        """``n`` prompts cycling over tasks, keyword 0; harnesses re-key the budget"""
        rng = make_rng(self.seed, stream)
        return [
            Prompt(instruction_id(i % self.n_tasks, 0), random_prefix(rng, self.vocab, self.prefix_len))
            for i in range(n)
        ]

    def eval_prompts(self):
        return self.prompts(self.n_eval, 10)

    def validation_prompts(self, n):
        return self.prompts(n, 11)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        teacher = TeacherSpec(**data.pop('teacher', {}))
        student = StudentSpec(**data.pop('student', {}))
        return cls(teacher=teacher, student=student, **data)


def generate_task_suite(seed=0, **overrides):
    """
    Build a task suite with the reference settings

    Args:
        seed: Suite seed
        **overrides: TaskSuite fields to replace

    Returns:
        TaskSuite
    """
    return TaskSuite(seed=seed, **overrides)
