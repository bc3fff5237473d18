"""
Brute-force verifiers for the distillation MDP, PCL and speculative decoding

Every check recomputes the audited quantity with its own code (itertools path
enumeration, a local softmax, a plain greedy loop) and compares it against
the module under audit. Each check has a negative control: a deliberately
broken input whose report must NOT pass.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np

from core.alphabet import Vocab
from core.budget import STUDENT
from core.exceptions import ContractViolation
from core.pcl import ORACLE, PCLConfig, Trajectory, TrajectoryStep, path_residual, segments_of
from core.soft_mdp import (
    SoftMDPConfig, policy_value, recursion_residual, reverse_kl_exact, soft_value_iteration,
)
from core.speculative import SpecConfig, lossy_spec_decode
from core.tabular_lm import Prompt, TabularLM, make_rng, random_teacher

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleConfig:
    """
    Seed grids and sizes of the oracle suite

    Attributes:
        n_seeds: Instances per enumeration check
        recursion_sizes: (alphabet, horizon) pairs for the reverse-KL recursion check
        soft_opt_sizes: (alphabet, horizon) pairs for the soft-optimum check
        pcl_taus: Temperatures of the PCL fixed-point check
        pcl_horizon: Horizon of the PCL fixed-point check
        specdec_instances: Paired decodes per draft length
        draft_lens: Draft lengths of the speculative limits check
        specdec_max_len: Decode cap of the speculative limits check
        mc_samples: Rollouts of the Monte-Carlo reverse-KL check
        mc_band: Allowed |MC - exact| in standard errors
        workers: Checks run concurrently on this many threads
    """
    n_seeds: int = 100
    recursion_sizes: tuple = ((3, 4), (4, 3))
    soft_opt_sizes: tuple = ((3, 4), (4, 3))
    pcl_taus: tuple = (1.0, 0.5)
    pcl_horizon: int = 4
    specdec_instances: int = 50
    draft_lens: tuple = (3, 5, 10)
    specdec_max_len: int = 12
    mc_samples: int = 4000
    mc_band: float = 3.0
    workers: int = 4

    def to_dict(self):
        data = asdict(self)
        for key in ('recursion_sizes', 'soft_opt_sizes'):
            data[key] = [list(pair) for pair in getattr(self, key)]
        data['pcl_taus'] = list(self.pcl_taus)
        data['draft_lens'] = list(self.draft_lens)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ('recursion_sizes', 'soft_opt_sizes'):
            if key in data:
                data[key] = tuple(tuple(int(v) for v in pair) for pair in data[key])
        for key in ('pcl_taus', 'draft_lens'):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class OracleReport:
    """
    Outcome of one check

    ``negative_control`` reports are expected to fail; the suite is healthy
    when every ordinary report passes and every control does not.
    """
    name: str
    max_residual: float
    tolerance: float
    instances: List[str] = field(default_factory=list)
    negative_control: bool = False

    @property
    def passed(self):
        return bool(self.max_residual <= self.tolerance)

    @property
    def healthy(self):
        return self.passed != self.negative_control


# -- independent helpers -------------------------------------------------------

def _softmax(row):
    z = np.exp(row - np.max(row))
    return z / z.sum()


def _conditional(model: TabularLM, prompt: Prompt, history):
    """Model conditional over the base alphabet, from the raw logit row"""
    ctx = model.context(prompt, history)
    row = model.logits[ctx.instruction_id, model.row_index(ctx.window)]
    return _softmax(row[:model.vocab.size])


def complete_paths(vocab: Vocab, horizon):
    """Every output sequence of length <= horizon that ends in eos or at the horizon"""
    eos = vocab.eos_id
    for length in range(1, horizon + 1):
        for path in itertools.product(range(vocab.size), repeat=length):
            if eos in path[:-1]:
                continue
            if path[-1] == eos or length == horizon:
                yield path


def brute_reverse_kl(student: TabularLM, teacher: TabularLM, prompt: Prompt, horizon) -> float:
    """sum over complete paths of pi(path) * log(pi(path) / p(path))"""
    cache = {}

    def cond(model, history):
        key = (id(model), history)
        if key not in cache:
            cache[key] = _conditional(model, prompt, history)
        return cache[key]

    total = 0.0
    for path in complete_paths(teacher.vocab, horizon):
        log_pi = log_p = 0.0
        for i, token in enumerate(path):
            log_pi += np.log(cond(student, path[:i])[token])
            log_p += np.log(cond(teacher, path[:i])[token])
        total += np.exp(log_pi) * (log_pi - log_p)
    return float(total)


def recursive_reverse_kl(student: TabularLM, teacher: TabularLM, prompt: Prompt, horizon) -> float:
    """E(s) = sum_x pi(x|s) * (log pi(x|s) / p(x|s) + E(s x)), E = 0 past eos or the horizon"""
    eos = teacher.vocab.eos_id

    @lru_cache(maxsize=None)
    def tail(history):
        pi = _conditional(student, prompt, history)
        p = _conditional(teacher, prompt, history)
        total = 0.0
        for x in range(len(pi)):
            rest = 0.0
            if x != eos and len(history) + 1 < horizon:
                rest = tail(history + (x,))
            total += pi[x] * (np.log(pi[x]) - np.log(p[x]) + rest)
        return total

    return float(tail(())) if horizon > 0 else 0.0


def monte_carlo_reverse_kl(student: TabularLM, teacher: TabularLM, prompt: Prompt, horizon, n,
                           seed=0) -> Tuple[float, float]:
    """
    On-policy estimate of the sequence reverse KL

    Samples ``n`` student sequences in parallel (student renormalised over the
    base alphabet) and averages log(pi/p) along each.

    Returns:
        (mean, standard error)
    """
    if n < 2:
        raise ContractViolation(f"Monte-Carlo estimate needs n >= 2, got {n}")
    V = teacher.vocab.size
    eos = teacher.vocab.eos_id
    rng = make_rng(seed, 7)
    instruction = prompt.instruction_id
    s_win = np.tile(np.array(student.context(prompt).window, dtype=np.int64), (n, 1))
    t_win = np.tile(np.array(teacher.context(prompt).window, dtype=np.int64), (n, 1))
    alive = np.ones(n, dtype=bool)
    ratio = np.zeros(n)
    for _ in range(horizon):
        if not alive.any():
            break
        logits = student.logits[instruction, student.rows_of(s_win), :V]
        pi = np.exp(logits - logits.max(axis=1, keepdims=True))
        pi /= pi.sum(axis=1, keepdims=True)
        p = teacher.probs[instruction, teacher.rows_of(t_win)]
        u = rng.random(n)
        tokens = np.minimum((np.cumsum(pi, axis=1) <= u[:, None]).sum(axis=1), V - 1)
        rows = np.arange(n)
        ratio += np.where(alive, np.log(pi[rows, tokens]) - np.log(p[rows, tokens]), 0.0)
        alive &= tokens != eos
        if student.order:
            s_win = np.concatenate([s_win[:, 1:], tokens[:, None]], axis=1)
        if teacher.order:
            t_win = np.concatenate([t_win[:, 1:], tokens[:, None]], axis=1)
    return float(ratio.mean()), float(ratio.std(ddof=1) / np.sqrt(n))


def _instance(seed, vocab_size, concentration):
    vocab = Vocab(vocab_size, 0)
    teacher = random_teacher(seed, 2, vocab, concentration, 1)
    student = random_teacher(seed + 100_000, 1, vocab, concentration, 1)
    return student, teacher


def _concentration(seed):
    """Every fifth instance is near one-hot"""
    return 10.0 if seed % 5 == 0 else 1.0


# -- checks --------------------------------------------------------------------

def check_kl_recursion_identity(seeds: Sequence[int], sizes) -> List[OracleReport]:
    """
    Sequence reverse KL equals its one-step recursion, and V^pi = -KL at tau = gamma = 1

    Compares the brute path sum against the independent recursion, the exact
    enumerator, the enumerator's own recursion residual and the backward-induction
    value. The control drops the continuation term from the recursion.
    """
    worst, control = 0.0, 0.0
    instances = []
    for vocab_size, horizon in sizes:
        cfg = SoftMDPConfig(tau=1.0, gamma=1.0, horizon=horizon)
        for seed in seeds:
            student, teacher = _instance(seed, vocab_size, _concentration(seed))
            prompt = Prompt(0)
            brute = brute_reverse_kl(student, teacher, prompt, horizon)
            gaps = (
                abs(brute - recursive_reverse_kl(student, teacher, prompt, horizon)),
                abs(brute - reverse_kl_exact(student, teacher, prompt, cfg)),
                recursion_residual(student, teacher, prompt, cfg),
                abs(brute + policy_value(student, teacher, cfg, prompt)),
            )
            worst = max(worst, *gaps)
            myopic = recursive_reverse_kl(student, teacher, prompt, 1)
            if horizon > 1:
                control = max(control, abs(brute - myopic))
        instances.append(f"V={vocab_size} T={horizon} x{len(seeds)}")
    reports = [OracleReport('kl_recursion_identity', worst, 1e-9, instances)]
    if any(horizon > 1 for _, horizon in sizes):
        reports.append(OracleReport('kl_recursion_identity/myopic_control', control, 1e-9, instances, True))
    return reports


def check_soft_opt_equals_teacher(seeds: Sequence[int], sizes=((3, 4),)) -> List[OracleReport]:
    """
    At tau = 1, gamma = 1 the soft optimum is the teacher and V* vanishes

    The control runs tau = 0.5, whose optimum sharpens the teacher.
    """
    worst, control = 0.0, 0.0
    instances = []
    for vocab_size, horizon in sizes:
        for seed in seeds:
            teacher = random_teacher(seed, 2, Vocab(vocab_size, 0), _concentration(seed), 1)
            target = np.apply_along_axis(_softmax, -1, teacher.logits)
            value, policy = soft_value_iteration(teacher, SoftMDPConfig(1.0, 1.0, horizon))
            tv = max(
                float(np.max(0.5 * np.abs(np.apply_along_axis(_softmax, -1, m.logits) - target).sum(-1)))
                for m in policy.steps
            )
            worst = max(worst, tv, float(np.max(np.abs(value.values))))
            _, sharp = soft_value_iteration(teacher, SoftMDPConfig(0.5, 1.0, horizon))
            control = max(control, float(np.max(
                0.5 * np.abs(np.apply_along_axis(_softmax, -1, sharp.steps[0].logits) - target).sum(-1)
            )))
        instances.append(f"V={vocab_size} T={horizon} x{len(seeds)}")
    return [
        OracleReport('soft_opt_equals_teacher', worst, 1e-10, instances),
        OracleReport('soft_opt_equals_teacher/tau_control', control, 1e-10, instances, True),
    ]


def _token_trajectory(policy, teacher, prompt, tokens, horizon):
    """Segment source taking ``tokens`` with rewards log p"""
    eos = teacher.vocab.eos_id
    steps = []
    for i, token in enumerate(tokens):
        lp = float(np.log(_conditional(teacher, prompt, tokens[:i])[token]))
        done = i == len(tokens) - 1 and (token == eos or i + 1 >= horizon)
        steps.append(TrajectoryStep(policy.context(prompt, tokens[:i]), i, int(token), int(token),
                                    STUDENT, lp, done, lp))
    return Trajectory(steps, prompt.instruction_id, ORACLE, prompt)


def _draw_tokens(sample, horizon, eos):
    tokens = []
    while len(tokens) < horizon:
        token = sample(tuple(tokens))
        tokens.append(token)
        if token == eos:
            break
    return tuple(tokens)


VALUE_SHIFT = 0.1


def shifted_value_gap(segment, horizon, shift, gamma=1.0):
    """
    Residual of a zero-residual segment once every value entry is raised by ``shift``

    The start value contributes -shift; the bootstrap value contributes
    gamma^d * shift unless the segment ends at the terminal or the horizon.
    """
    end = segment.end
    live = end is not None and end.step < horizon
    return -shift + (gamma ** len(segment.steps) * shift if live else 0.0)


def check_pcl_fixed_point(seeds: Sequence[int], taus=(1.0, 0.5), vocab_size=3,
                          horizon=4) -> List[OracleReport]:
    """
    (pi*, V*) from soft value iteration zeroes every PCL residual

    Segments of every length d come from on-policy rollouts of pi*, teacher
    rollouts and uniform-random token sequences. The control adds 0.1 to V*,
    which must fail; the gap report checks the shifted residual of every segment
    against its analytic value (see ``shifted_value_gap``).
    """
    worst, control, gap = 0.0, 0.0, 0.0
    instances = []
    for tau in taus:
        cfg = SoftMDPConfig(tau=tau, gamma=1.0, horizon=horizon)
        for seed in seeds:
            teacher = random_teacher(seed, 2, Vocab(vocab_size, 0), _concentration(seed), 1)
            value, policy = soft_value_iteration(teacher, cfg)
            shifted = value.with_values(value.values + VALUE_SHIFT)
            prompt = Prompt(0)
            rng = make_rng(seed, 8)
            eos = teacher.vocab.eos_id

            def draw(probs):
                return int(np.minimum((np.cumsum(probs) <= rng.random()).sum(), vocab_size - 1))

            sources = (
                _draw_tokens(lambda h: draw(np.exp(policy.log_distribution_at(
                    policy.context(prompt, h), len(h)))), horizon, eos),
                _draw_tokens(lambda h: draw(_conditional(teacher, prompt, h)), horizon, eos),
                _draw_tokens(lambda h: int(rng.integers(vocab_size)), horizon, eos),
            )
            for tokens in sources:
                traj = _token_trajectory(policy, teacher, prompt, tokens, horizon)
                for d in range(1, horizon + 1):
                    pcl_cfg = PCLConfig(tau=tau, gamma=1.0, window_d=d)
                    for segment in segments_of(traj, d):
                        worst = max(worst, abs(path_residual(policy, value, segment, pcl_cfg)))
                        moved = path_residual(policy, shifted, segment, pcl_cfg)
                        control = max(control, abs(moved))
                        expected = shifted_value_gap(segment, horizon, VALUE_SHIFT, pcl_cfg.gamma)
                        gap = max(gap, abs(moved - expected))
        instances.append(f"tau={tau} V={vocab_size} T={horizon} x{len(seeds)}")
    return [
        OracleReport('pcl_fixed_point', worst, 1e-9, instances),
        OracleReport('pcl_fixed_point/shifted_value_control', control, 1e-9, instances, True),
        OracleReport('pcl_fixed_point/shifted_value_gap', gap, 1e-9, instances),
    ]


def _greedy_teacher(teacher, prompt, max_len):
    eos = teacher.vocab.eos_id
    return _draw_tokens(lambda h: int(np.argmax(_conditional(teacher, prompt, h))), max_len, eos)


def check_specdec_limits(seeds: Sequence[int], draft_lens=(3, 5, 10), vocab_size=6,
                         max_len=12) -> List[OracleReport]:
    """
    Lenience 1 reproduces greedy teacher decoding; lenience 0 emits K+1 per full cycle

    Residuals count violating instances or cycles. A draft equal to the teacher
    must be fully accepted at any lenience. The control compares lenience-0
    output against the teacher, which must disagree somewhere.
    """
    mismatches = 0
    mismatches_control = 0
    instances = []
    for draft_len in draft_lens:
        for seed in seeds:
            draft, teacher = _instance(seed, vocab_size, 1.0)
            prompt = Prompt(0)
            eos = teacher.vocab.eos_id
            reference = _greedy_teacher(teacher, prompt, max_len)
            exact, _ = lossy_spec_decode(teacher, draft, prompt, max_len, SpecConfig(draft_len, 1.0))
            mismatches += exact != reference
            loose, trace = lossy_spec_decode(teacher, draft, prompt, max_len, SpecConfig(draft_len, 0.0))
            for cycle in trace.cycles:
                if len(cycle.drafted) == draft_len and eos not in cycle.drafted:
                    mismatches += len(cycle.emitted) != draft_len + 1
            mismatches_control += loose != reference
            for lenience in (0.0, 0.5, 1.0):
                _, self_trace = lossy_spec_decode(teacher, teacher, prompt, max_len,
                                                  SpecConfig(draft_len, lenience))
                mismatches += sum(c.accepted != len(c.drafted) for c in self_trace.cycles)
        instances.append(f"K={draft_len} x{len(seeds)}")
    return [
        OracleReport('specdec_limits', float(mismatches), 0.0, instances),
        OracleReport('specdec_limits/lenience_control', float(mismatches_control), 0.0, instances, True),
    ]


def check_monte_carlo_reverse_kl(seeds: Sequence[int], vocab_size=3, horizon=4, n=4000,
                                 band=3.0) -> List[OracleReport]:
    """
    The on-policy estimate sits within ``band`` standard errors of the exact value

    The control estimates with the teacher's samples in place of the student's
    (the forward direction), which lands far outside the band.
    """
    worst, control = 0.0, 0.0
    cfg = SoftMDPConfig(tau=1.0, gamma=1.0, horizon=horizon)
    for seed in seeds:
        student, teacher = _instance(seed, vocab_size, 2.0)
        prompt = Prompt(0)
        exact = reverse_kl_exact(student, teacher, prompt, cfg)
        mean, se = monte_carlo_reverse_kl(student, teacher, prompt, horizon, n, seed)
        worst = max(worst, abs(mean - exact) / max(se, 1e-12))
        forward, se_f = monte_carlo_reverse_kl(teacher, student, prompt, horizon, n, seed)
        control = max(control, abs(forward - exact) / max(se_f, 1e-12))
    instances = [f"V={vocab_size} T={horizon} n={n} x{len(seeds)}"]
    return [
        OracleReport('monte_carlo_reverse_kl', worst, band, instances),
        OracleReport('monte_carlo_reverse_kl/direction_control', control, band, instances, True),
    ]


def run_oracle_suite(config: OracleConfig = OracleConfig()) -> List[OracleReport]:
    """Every check with its negative control, in a fixed order"""
    if config.workers < 1:
        raise ContractViolation(f"workers must be >= 1, got {config.workers}")
    seeds = range(config.n_seeds)
    jobs = [
        lambda: check_kl_recursion_identity(seeds, config.recursion_sizes),
        lambda: check_soft_opt_equals_teacher(seeds, config.soft_opt_sizes),
        lambda: check_pcl_fixed_point(range(min(config.n_seeds, 50)), config.pcl_taus,
                                      horizon=config.pcl_horizon),
        lambda: check_specdec_limits(range(config.specdec_instances), config.draft_lens,
                                     max_len=config.specdec_max_len),
        lambda: check_monte_carlo_reverse_kl(range(5), n=config.mc_samples, band=config.mc_band),
    ]
    # map keeps submission order, so the report order is fixed
    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        reports = [r for batch in executor.map(lambda job: job(), jobs) for r in batch]
    for report in reports:
        level = logging.INFO if report.healthy else logging.ERROR
        logger.log(level, "%s: max residual %.3g (tolerance %.1g)", report.name,
                   report.max_residual, report.tolerance)
    return reports
