#!/usr/bin/env python3
"""
KDLab command-line entry point

Usage:
    python main.py gen-task --seed 0 --out suite.json
    python main.py train --config configs/reference.json --checkpoints runs/ref
    python main.py eval --config configs/reference.json --checkpoints runs/ref
    python main.py sweep --config configs/reference.json --checkpoints runs/ref --out report.csv
    python main.py oracle-check --config configs/reference.json
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from core.benchmark import (
    evaluate_reference, evaluate_tandem, frontier_dominance, report_frame, run_sweep,
)
from core.budget import BUDGET_SPECS
from core.config import SCHEMA_VERSION, ExperimentConfig, load_config
from core.exceptions import ConfigurationError, KDLabError
from core.oracles import run_oracle_suite
from core.speculative import reverse_kl_distill
from core.tandem import Sampling
from core.training import phase1_train, phase2_train, select_checkpoint
from utils.io_handler import TRAINING_LOG_NAME, IOHandler

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def banner(title):
    print()
    print("╔" + "═" * 68 + "╗")
    print("║" + title.center(68) + "║")
    print("╚" + "═" * 68 + "╝")
    print()


def rule():
    print("=" * 70)


def resolve(args):
    """Configuration and run seed; --seed defaults to the suite seed"""
    config = load_config(args.config) if args.config else ExperimentConfig()
    seed = config.suite.seed if args.seed is None else args.seed
    return config, seed


# -- pipeline ------------------------------------------------------------------

def train_pipeline(config: ExperimentConfig, seed, checkpoints_dir):
    """
    Phase 1, phase 2, checkpoint selection and draft distillation

    The training log is written before the checkpoints; the manifest is the
    last file, so a directory with a manifest holds a complete run.
    """
    suite = config.suite
    training = config.training
    io = IOHandler()
    teacher = suite.build_teacher()

    print("Phase 1: cloning the KL-rank oracle...")
    student = suite.build_student(teacher)
    student = phase1_train(student, teacher, training.phase1, seed, suite.max_len, suite.prefix_len)

    print("Phase 2: constrained PCL fine-tuning...")
    checkpoints, log = phase2_train(
        student, teacher, training.phase2, training.lagrange.initial_states(), seed,
        training.pcl, training.reward, suite.max_len, suite.prefix_len,
    )

    print(f"Selecting among {len(checkpoints)} checkpoints...")
    validation = suite.validation_prompts(training.selector.validation_size)
    selection = select_checkpoint(checkpoints, validation, training.selector, teacher, suite.max_len)

    print("Distilling the speculative draft model...")
    draft = suite.build_student(teacher, augmented=False, order=training.draft.order,
                                smoothing=training.draft.smoothing)
    draft = reverse_kl_distill(
        draft, teacher, suite.prompts(training.draft.n_prompts, 12), training.draft.steps,
        training.draft.lr, suite.max_len, seed, updates_per_batch=training.draft.updates_per_batch,
        validation_prompts=suite.validation_prompts(training.draft.validation_size),
        eval_every=training.draft.eval_every,
    )

    io.export_results(log, Path(checkpoints_dir) / TRAINING_LOG_NAME)
    io.save_checkpoints(checkpoints, checkpoints_dir, selection.checkpoint.batch,
                        selection.flagged, draft)
    return selection, log


# -- subcommands ---------------------------------------------------------------

def cmd_gen_task(args):
    config, seed = resolve(args)
    suite = replace(config.suite, seed=seed)
    document = {'schema_version': SCHEMA_VERSION, 'suite': suite.to_dict()}
    IOHandler().write_json_document(document, args.out)
    print(f"✓ Task suite written to {args.out}")
    print(f"  seed={suite.seed} tasks={suite.n_tasks} vocab={suite.vocab.size} "
          f"teacher order={suite.teacher.order} student order={suite.student.order}")
    return EXIT_OK


def cmd_train(args):
    config, seed = resolve(args)
    banner("KDLab Training")
    selection, log = train_pipeline(config, seed, args.checkpoints)
    rule()
    print(f"✓ Training complete: selected checkpoint at batch {selection.checkpoint.batch}")
    if selection.flagged:
        print("  ⚠ no checkpoint met every budget within delta; kept the smallest violation")
    print(f"  {'budget':>8} {'lambda':>8} {'use':>8}")
    for k, spec in enumerate(BUDGET_SPECS):
        print(f"  {spec.b:>8.1f} {selection.checkpoint.lambdas[k]:>8.3f} "
              f"{selection.evaluation.measured_use[k]:>8.3f}")
    print(f"  validation quality: {selection.evaluation.quality:.4f} nats/token")
    print(f"  checkpoints in {args.checkpoints}")
    rule()
    return EXIT_OK


def cmd_eval(args):
    config, seed = resolve(args)
    io = IOHandler()
    checkpoint = io.load_checkpoint(args.checkpoints, args.batch)
    suite = config.suite
    teacher = suite.build_teacher()
    prompts = suite.eval_prompts()
    if config.sweep.n_prompts is not None:
        prompts = prompts[:config.sweep.n_prompts]
    cm = config.sweep.cost_model
    sampling = Sampling(config.sweep.sampling, seed)

    banner(f"KDLab Evaluation (checkpoint {checkpoint.batch})")
    reports = [evaluate_tandem(checkpoint.policy, teacher, prompts, k, suite.max_len, cm, seed, sampling)
               for k in range(len(BUDGET_SPECS))]
    reports.append(evaluate_reference(teacher, teacher, prompts, suite.max_len, cm, 'teacher', seed))
    print(f"  {'method':<8} {'budget':>7} {'use':>7} {'quality':>9} {'cost':>7}")
    for r in reports:
        print(f"  {r.method:<8} {r.param:>7.1f} {r.teacher_use:>7.3f} {r.quality:>9.4f} {r.cost:>7.3f}")
    delta = config.training.selector.delta
    within = all(abs(r.teacher_use - r.param) <= delta for r in reports if r.method == 'tandem')
    print()
    print(f"{'✓' if within else '❌'} teacher use within delta={delta} of every budget")
    if args.out:
        io.export_results(report_frame(reports), args.out)
        print(f"  report written to {args.out}")
    return EXIT_OK


def cmd_sweep(args):
    config, seed = resolve(args)
    banner("KDLab Sweep")
    if args.train_inline:
        train_pipeline(config, seed, args.checkpoints)
    trace_dir = None
    if args.verbose_traces:
        out = Path(args.out)
        trace_dir = out.with_name(out.stem + '_traces')
    frame = run_sweep(config, args.checkpoints, args.out, seed, trace_dir)
    print(f"✓ {len(frame)} operating points written to {args.out}")
    dominated = frontier_dominance(frame)
    print(f"  {'✓' if dominated else '·'} tandem frontier point cheaper than every "
          f"speculative point of equal-or-better quality")
    return EXIT_OK


def cmd_oracle_check(args):
    config, _ = resolve(args)
    banner("KDLab Oracle Suite")
    reports = run_oracle_suite(config.oracle)
    print(f"  {'check':<44} {'residual':>10} {'tolerance':>10}")
    for r in reports:
        mark = '✓' if r.healthy else '❌'
        note = ' (control)' if r.negative_control else ''
        print(f"{mark} {r.name + note:<44} {r.max_residual:>10.3g} {r.tolerance:>10.1g}")
    healthy = all(r.healthy for r in reports)
    rule()
    print("All checks passed" if healthy else "Oracle violation detected")
    rule()
    return EXIT_OK if healthy else EXIT_FAILURE


# -- argument parsing ----------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog='kdlab',
        description='Budgeted teacher-calling distillation on tabular language models',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__.split('Usage:')[1],
    )
    parser.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging verbosity')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p):
        p.add_argument('--config', help='Configuration document (JSON)')
        p.add_argument('--seed', type=int, default=None, help='Run seed (defaults to the suite seed)')
        return p

    p = common(sub.add_parser('gen-task', help='Write a task suite document'))
    p.add_argument('--out', required=True, help='Output JSON path')
    p.set_defaults(func=cmd_gen_task)

    p = common(sub.add_parser('train', help='Run phase 1 and phase 2 and write checkpoints'))
    p.add_argument('--checkpoints', required=True, help='Checkpoint directory')
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser('eval', help='Score one checkpoint at every budget'))
    p.add_argument('--checkpoints', required=True, help='Checkpoint directory')
    p.add_argument('--batch', type=int, default=None, help='Checkpoint batch (default: selected)')
    p.add_argument('--out', help='Optional CSV report')
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser('sweep', help='Budget and lenience sweep to CSV'))
    p.add_argument('--checkpoints', required=True, help='Checkpoint directory')
    p.add_argument('--out', required=True, help='Output CSV path')
    p.add_argument('--verbose-traces', action='store_true', help='Also dump per-step decode traces')
    p.add_argument('--train-inline', action='store_true', help='Train into --checkpoints first')
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser('oracle-check', help='Run the brute-force verifier suite'))
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s %(name)s %(levelname)s: %(message)s')
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KDLabError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_FAILURE
    except FileNotFoundError as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
