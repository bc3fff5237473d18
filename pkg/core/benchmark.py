"""
Quality, cost and sweep reporting for tandem and speculative decoding

Quality is the mean per-token teacher log-likelihood of the outputs. Cost is a
declared per-pass cost model (c_s per student pass, c_t per teacher pass)
divided by emitted tokens. Every method sees the same prompts.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from core.budget import BUDGET_SPECS, instruction_id, task_of
from core.exceptions import ContractViolation
from core.speculative import SpecConfig, SpecTrace, lossy_spec_decode
from core.tabular_lm import Prompt, TabularLM, sequence_logprob
from core.tandem import DecodeTrace, Sampling, rollout, tandem_decode

logger = logging.getLogger(__name__)

REPORT_COLUMNS = [
    'method', 'param', 'draft_len', 'quality_nats_per_token', 'teacher_use_fraction',
    'cost_per_token', 'n_prompts', 'seed',
]


@dataclass(frozen=True)
class CostModel:
    c_s: float = 1.0
    c_t: float = 10.0

    def __post_init__(self):
        if not self.c_t > self.c_s > 0:
            raise ContractViolation(f"Cost model needs c_t > c_s > 0, got c_s={self.c_s}, c_t={self.c_t}")


@dataclass(frozen=True)
class SweepConfig:
    """
    Operating points of a sweep

    Attributes:
        lenience_values: Speculative lenience grid
        draft_lens: Speculative draft lengths
        c_s, c_t: Cost model
        sampling: Decode mode for every method
        include_reference_rows: Add pure teacher and pure student rows
        n_prompts: Evaluate on the first n suite prompts (None for all)
    """
    lenience_values: tuple = tuple(round(0.1 * i, 1) for i in range(11))
    draft_lens: tuple = (3, 5, 10)
    c_s: float = 1.0
    c_t: float = 10.0
    sampling: str = 'greedy'
    include_reference_rows: bool = False
    n_prompts: Optional[int] = None

    def __post_init__(self):
        CostModel(self.c_s, self.c_t)
        for k in self.draft_lens:
            SpecConfig(int(k), 1.0)
        for lenience in self.lenience_values:
            SpecConfig(1, float(lenience))
        if self.n_prompts is not None and self.n_prompts < 1:
            raise ContractViolation(f"n_prompts must be >= 1, got {self.n_prompts}")

    @property
    def cost_model(self):
        return CostModel(self.c_s, self.c_t)

    def to_dict(self):
        data = asdict(self)
        data['lenience_values'] = list(self.lenience_values)
        data['draft_lens'] = list(self.draft_lens)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ('lenience_values', 'draft_lens'):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class RunReport:
    """One operating point of a sweep"""
    method: str
    param: float
    draft_len: Optional[int]
    quality: float
    teacher_use: float
    cost: float
    n_prompts: int
    seed: int
    n_excluded: int = 0
    scores: np.ndarray = field(default=None, repr=False)

    def to_row(self):
        return {
            'method': self.method,
            'param': self.param,
            'draft_len': self.draft_len if self.draft_len is not None else '',
            'quality_nats_per_token': self.quality,
            'teacher_use_fraction': self.teacher_use,
            'cost_per_token': self.cost,
            'n_prompts': self.n_prompts,
            'seed': self.seed,
        }


def score_outputs(teacher: TabularLM, prompts: Sequence[Prompt], outputs) -> np.ndarray:
    """Per-token teacher log-likelihood of every output; NaN for empty outputs"""
    if len(prompts) != len(outputs):
        raise ContractViolation("Outputs are not aligned with prompts")
    scores = np.full(len(outputs), np.nan)
    for i, (prompt, x_out) in enumerate(zip(prompts, outputs)):
        if len(x_out):
            scores[i] = sequence_logprob(teacher, prompt, x_out) / len(x_out)
    return scores


def quality_metric(teacher: TabularLM, prompts: Sequence[Prompt], outputs) -> float:
    """Mean per-token teacher log-likelihood, empty outputs excluded"""
    scores = score_outputs(teacher, prompts, outputs)
    if np.all(np.isnan(scores)):
        return float('nan')
    return float(np.nanmean(scores))


def modeled_cost(trace, cm: CostModel) -> float:
    """
    Modeled cost per emitted token

    Tandem: every step is one student pass and every <tau> adds a teacher pass.
    Speculative: every cycle is its draft passes plus one teacher pass.
    """
    if isinstance(trace, DecodeTrace):
        total = trace.student_passes * cm.c_s + trace.teacher_calls * cm.c_t
    elif isinstance(trace, SpecTrace):
        total = trace.student_passes * cm.c_s + trace.teacher_passes * cm.c_t
    else:
        raise ContractViolation(f"Unknown trace type {type(trace).__name__}")
    if trace.length == 0:
        raise ContractViolation("Cannot cost an empty decode")
    return total / trace.length


def _total_cost(trace, cm):
    return modeled_cost(trace, cm) * trace.length


def _report(method, param, draft_len, teacher, prompts, outputs, use_num, tokens, cost_total, seed):
    scores = score_outputs(teacher, prompts, outputs)
    excluded = int(np.isnan(scores).sum())
    quality = float(np.nanmean(scores)) if excluded < len(scores) else float('nan')
    return RunReport(method, param, draft_len, quality, use_num / tokens, cost_total / tokens,
                     len(prompts), seed, excluded, scores)


def evaluate_tandem(student, teacher, prompts, spec_index, max_len, cm: CostModel, seed=0,
                    sampling: Sampling = Sampling('greedy'), traces=None) -> RunReport:
    """Tandem decoding of every prompt under budget keyword ``spec_index``"""
    keyed, outputs = [], []
    calls = tokens = cost = 0.0
    for p in prompts:
        prompt = Prompt(instruction_id(task_of(p.instruction_id), spec_index), p.prefix)
        x_out, trace = tandem_decode(student, teacher, prompt, max_len, sampling)
        keyed.append(prompt)
        outputs.append(x_out)
        calls += trace.teacher_calls
        tokens += trace.length
        cost += _total_cost(trace, cm)
        if traces is not None:
            traces.append(trace)
    return _report('tandem', BUDGET_SPECS[spec_index].b, None, teacher, keyed, outputs,
                   calls, tokens, cost, seed)


def evaluate_specdec(draft, teacher, prompts, spec_cfg: SpecConfig, max_len, cm: CostModel,
                     seed=0, traces=None) -> RunReport:
    """Lossy speculative decoding of every prompt (budget keyword 0)"""
    outputs = []
    passes = tokens = cost = 0.0
    for prompt in prompts:
        x_out, trace = lossy_spec_decode(teacher, draft, prompt, max_len, spec_cfg)
        outputs.append(x_out)
        passes += trace.teacher_passes
        tokens += trace.length
        cost += _total_cost(trace, cm)
        if traces is not None:
            traces.append(trace)
    return _report('specdec', spec_cfg.lenience, spec_cfg.draft_len, teacher, list(prompts),
                   outputs, passes, tokens, cost, seed)


def evaluate_reference(model, teacher, prompts, max_len, cm: CostModel, method, seed=0) -> RunReport:
    """Plain greedy decode of a single model; 'teacher' rows cost c_t per token, 'student' rows c_s"""
    outputs = [rollout(model, prompt, max_len, Sampling('greedy')) for prompt in prompts]
    tokens = float(sum(len(x) for x in outputs))
    per_token = cm.c_t if method == 'teacher' else cm.c_s
    use = tokens if method == 'teacher' else 0.0
    return _report(method, 0.0, None, teacher, list(prompts), outputs, use, tokens,
                   per_token * tokens, seed)


def sweep_reports(student, draft, teacher, prompts, sweep: SweepConfig, max_len, seed=0,
                  trace_sink=None) -> List[RunReport]:
    """
    Evaluate the six tandem budgets and every (lenience, draft length) pair

    ``trace_sink``, when given, receives (method, param, draft_len, traces).
    """
    cm = sweep.cost_model
    sampling = Sampling(sweep.sampling, seed)
    reports = []
    for k, spec in enumerate(BUDGET_SPECS):
        traces = [] if trace_sink is not None else None
        reports.append(evaluate_tandem(student, teacher, prompts, k, max_len, cm, seed, sampling, traces))
        if trace_sink is not None:
            trace_sink('tandem', spec.b, None, traces)
        logger.info("tandem b=%.1f: quality=%.4f use=%.3f cost=%.3f", spec.b,
                    reports[-1].quality, reports[-1].teacher_use, reports[-1].cost)
    for draft_len in sweep.draft_lens:
        for lenience in sweep.lenience_values:
            traces = [] if trace_sink is not None else None
            cfg = SpecConfig(int(draft_len), float(lenience))
            reports.append(evaluate_specdec(draft, teacher, prompts, cfg, max_len, cm, seed, traces))
            if trace_sink is not None:
                trace_sink('specdec', lenience, draft_len, traces)
        logger.info("specdec K=%d: %d lenience values done", draft_len, len(sweep.lenience_values))
    if sweep.include_reference_rows:
        reports.append(evaluate_reference(teacher, teacher, prompts, max_len, cm, 'teacher', seed))
        reports.append(evaluate_reference(student, teacher, prompts, max_len, cm, 'student', seed))
    return reports


def report_frame(reports: List[RunReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in reports], columns=REPORT_COLUMNS)


@dataclass(frozen=True)
class TrendSummary:
    spearman_rho: float
    margin: float
    paired_se: float

    @property
    def passes(self):
        return self.spearman_rho >= 0.8 and self.margin > self.paired_se


def quality_budget_trend(reports: List[RunReport]) -> TrendSummary:
    """
    Rank correlation of tandem quality against budget, plus the paired b=0.5 vs b=0.0 margin
    """
    tandem = sorted((r for r in reports if r.method == 'tandem'), key=lambda r: r.param)
    if len(tandem) < 2:
        raise ContractViolation("Trend needs at least two tandem rows")
    rho = stats.spearmanr([r.param for r in tandem], [r.quality for r in tandem]).correlation
    low, high = tandem[0], tandem[-1]
    diff = high.scores - low.scores
    diff = diff[~np.isnan(diff)]
    se = float(np.std(diff, ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else float('nan')
    return TrendSummary(float(rho), high.quality - low.quality, se)


def frontier_dominance(frame: pd.DataFrame) -> bool:
    """
    True when some tandem point is strictly cheaper than every speculative point
    of equal-or-better quality (and at least one such point exists)
    """
    tandem = frame[frame['method'] == 'tandem']
    spec = frame[frame['method'] == 'specdec']
    for _, row in tandem.iterrows():
        rivals = spec[spec['quality_nats_per_token'] >= row['quality_nats_per_token']]
        if len(rivals) and bool((row['cost_per_token'] < rivals['cost_per_token']).all()):
            return True
    return False


def trace_frame(traces) -> pd.DataFrame:
    """One row per trace record or cycle, tagged with its prompt index; empty traces add no rows"""
    frames = [trace.to_frame() for trace in traces]
    columns = ['prompt'] + (list(frames[0].columns) if frames else [])
    rows = [(i, *row) for i, frame in enumerate(frames) for row in frame.itertuples(index=False, name=None)]
    return pd.DataFrame(rows, columns=columns)


def run_sweep(config, checkpoints_dir, out_path, seed, trace_dir=None) -> pd.DataFrame:
    """
    Evaluate the selected checkpoint and the draft model and write the CSV report

    Checkpoints are loaded before anything is written, so a missing checkpoint
    leaves no partial report.

    Raises:
        CheckpointMissingError: listing the expected manifest path
    """
    from utils.io_handler import IOHandler

    io = IOHandler()
    checkpoint = io.load_checkpoint(checkpoints_dir)
    draft = io.load_draft(checkpoints_dir)
    suite = config.suite
    teacher = suite.build_teacher()
    prompts = suite.eval_prompts()
    if config.sweep.n_prompts is not None:
        prompts = prompts[:config.sweep.n_prompts]

    sink = None
    if trace_dir is not None:
        def sink(method, param, draft_len, traces):
            suffix = f'_K{draft_len}' if draft_len is not None else ''
            io.export_results(trace_frame(traces), f'{trace_dir}/{method}_{param}{suffix}.csv')

    reports = sweep_reports(checkpoint.policy, draft, teacher, prompts, config.sweep,
                            suite.max_len, seed, sink)
    frame = report_frame(reports)
    io.export_results(frame, out_path)
    return frame
