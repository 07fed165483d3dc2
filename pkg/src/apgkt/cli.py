"""Command-line front end: run experiments, compare runs, generate data.

Exit codes: 0 success, 2 missing input file (message names it), 1 any
other failure with a stage-tagged message.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness, synth


def _add_run_parser(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("run", help="train and evaluate one configuration")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", default="run_out", help="output directory")
    p.add_argument("--no-plots", action="store_true", help="skip PNG emission")
    # flag overrides beat config-file values
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", choices=list(harness.VARIANTS), default=None)
    p.add_argument("--recap", choices=["hard", "soft"], default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--att-bound", dest="att_bound", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--layers", dest="n_layers", type=int, default=None)


def _add_compare_parser(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("compare", help="rank runs with a Nemenyi test")
    p.add_argument("--runs", nargs="+", required=True, help="metrics.json files")
    p.add_argument("--alpha", type=float, default=0.05, choices=[0.05, 0.10])
    p.add_argument("--out", default="compare_out")
    p.add_argument("--no-plots", action="store_true")


def _add_synth_parser(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", default="synth_out")
    p.add_argument("--students", type=int, default=200)
    p.add_argument("--questions", type=int, default=50)
    p.add_argument("--skills", type=int, default=8)
    p.add_argument("--h-min", dest="h_min", type=int, default=2)
    p.add_argument("--h-max", dest="h_max", type=int, default=3)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=40)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--mastery-low", dest="mastery_low", type=float, default=0.6)
    p.add_argument("--mastery-high", dest="mastery_high", type=float, default=1.0)
    p.add_argument("--ss-mode", dest="ss_mode", choices=list(synth.SS_MODES),
                   default="cooccurrence")
    p.add_argument("--skill-concentration", dest="skill_concentration",
                   type=float, default=0.0,
                   help="Dirichlet concentration for skill popularity; 0 = uniform")
    p.add_argument("--pair-concentration", dest="pair_concentration",
                   type=float, default=0.0,
                   help="Dirichlet concentration over whole skill combinations; "
                        "0 = uniform over skills")
    p.add_argument("--block-persistence", dest="block_persistence",
                   type=float, default=0.0,
                   help="probability the next question repeats the previous "
                        "skill set (topic-block practice)")
    p.add_argument("--seed", type=int, default=0)


def _add_report_parser(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser(
        "report", help="emit the published-AUC comparison table and ranks"
    )
    p.add_argument("--alpha", type=float, default=0.05, choices=[0.05, 0.10])
    p.add_argument("--out", default="report_out")
    p.add_argument("--no-plots", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apgkt", description="knowledge-tracing experiment toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_parser(sub)
    _add_compare_parser(sub)
    _add_synth_parser(sub)
    _add_report_parser(sub)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    config = harness.load_config(args.config)
    for name in ("lr", "seed", "variant", "recap", "k", "att_bound", "lam", "n_layers"):
        value = getattr(args, name)
        if value is not None:
            setattr(config, name, value)
    config.validate()
    report = harness.run_experiment(config, args.out, plots=not args.no_plots)
    print(f"test AUC {report.test_auc:.4f} after {report.epochs_run} epochs "
          f"(best epoch {report.best_epoch + 1}); outputs in {args.out}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    reports = []
    for run in args.runs:
        path = Path(run)
        if not path.exists():
            raise FileNotFoundError(f"missing run file: {path}")
        reports.append(harness.MetricsReport.from_json(path.read_text(encoding="utf-8")))
    models, _, _, result = harness.compare_runs(
        reports, args.out, args.alpha, plots=not args.no_plots
    )
    for model, rank in zip(models, result.average_ranks):
        print(f"{model}: average rank {rank:.3f}")
    print(f"critical difference: {result.critical_difference:.4f}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    config = synth.SynthConfig(
        n_students=args.students,
        n_questions=args.questions,
        n_skills=args.skills,
        h_min=args.h_min,
        h_max=args.h_max,
        seq_len=args.seq_len,
        gamma=args.gamma,
        mastery_low=args.mastery_low,
        mastery_high=args.mastery_high,
        ss_mode=args.ss_mode,
        skill_concentration=args.skill_concentration,
        pair_concentration=args.pair_concentration,
        block_persistence=args.block_persistence,
        seed=args.seed,
    )
    paths = synth.write_synthetic(config, args.out)
    print(f"wrote {paths['log']}, {paths['qmatrix']}, {paths['truth']}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    models, table, result = harness.reference_rank_table(args.alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_auc_table(models, harness.BASE_DATASETS, table, out / "auc_table.csv")
    harness.write_nemenyi_csv(models, result, out / "nemenyi.csv")
    if not args.no_plots:
        harness._plot_ranks(models, result, out / "nemenyi.png")
    for model, rank in zip(models, result.average_ranks):
        print(f"{model}: average rank {rank:.3f}")
    print(f"critical difference: {result.critical_difference:.4f}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "compare": _cmd_compare,
    "synth": _cmd_synth,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except harness.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
