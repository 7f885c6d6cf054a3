"""Command-line entry point.

    dml <subcommand> --config PATH [--set key=value]... [--out DIR]
        [--seeds N] [--member-id I] [--endpoints LIST]

Exit codes: 0 success, 1 validation/usage error, 2 runtime error,
3 gradient check above tolerance.  Files go under ``--out``; stdout only
carries a human-readable summary.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .analysis import accuracy, posteriors
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, dataset_from_spec
from .experiments import analyze_params, compare_summary, run_compare, run_sweep_k, sweep_summary
from .gradcheck import run_gradcheck
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .report import write_csv, write_report
from .trainer import load_teacher, pretrain_teacher, train
from .transport import TransportError, run_distributed_worker

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dml", description="Deep mutual learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="experiment config (JSON)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory (default: config out_dir)")
        return p

    common(sub.add_parser("train", help="train one configuration"))
    common(sub.add_parser("pretrain", help="train a single teacher network for distillation"))
    p = common(sub.add_parser("compare", help="independent / dml / dml_e / distill on shared seeds"))
    p.add_argument("--seeds", type=int, default=10)
    p = common(sub.add_parser("sweep-k", help="cohort-size sweep"))
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--ks", default="2,3,4,5", help="comma-separated cohort sizes")
    p = common(sub.add_parser("analyze", help="flatness, entropy and top-k analysis of checkpoints"))
    p.add_argument("--ckpt", action="append", default=[], help="checkpoint to analyse (default: out_dir/member_*.ckpt)")
    p = common(sub.add_parser("worker", help="run one distributed cohort member"))
    p.add_argument("--member-id", type=int, required=True)
    p.add_argument("--endpoints", help="comma-separated host:port list, one per member")
    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config", help="ignored; accepted for a uniform grammar")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _load(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config, args.set)
    out = Path(args.out or cfg.out_dir)
    return cfg, out


def _cmd_train(args) -> int:
    cfg, out = _load(args)
    dataset = dataset_from_spec(cfg.dataset.kind, cfg.dataset.params)
    report = train(cfg, dataset)
    out.mkdir(parents=True, exist_ok=True)
    for i, params in enumerate(report.params):
        name = f"member_{i}.ckpt"
        (out / name).write_bytes(save_checkpoint(params))
        report.checkpoints.append(name)
    write_report(report, out)
    for row in report.final_rows():
        print(f"member {row.member}: test_acc={row.test_acc:.4f} train_loss={row.train_loss:.4f} entropy={row.entropy:.4f}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cfg, out = _load(args)
    dataset = dataset_from_spec(cfg.dataset.kind, cfg.dataset.params)
    path = Path(cfg.distill.teacher_ckpt) if cfg.distill and cfg.distill.teacher_ckpt else out / "teacher.ckpt"
    _, report = pretrain_teacher(replace(cfg, distill=None), dataset, path)
    write_report(report, out)
    print(f"teacher: test_acc={report.tables['teacher'][0]['test_acc']:.4f} -> {path}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    cfg, out = _load(args)
    dataset = dataset_from_spec(cfg.dataset.kind, cfg.dataset.params)
    teacher = load_teacher(cfg) if cfg.distill and cfg.distill.teacher_ckpt else None
    rows = run_compare(cfg, dataset, args.seeds, teacher=teacher)
    summary = compare_summary(rows)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "compare.csv", ["mode", "seed", "member", "test_acc"], rows + summary)
    for s in summary:
        print(f"{s['mode']:>12}: mean delta vs independent {s['test_acc']:+.4f}")
    return EXIT_OK


def _cmd_sweep_k(args) -> int:
    cfg, out = _load(args)
    try:
        ks = [int(k) for k in args.ks.split(",")]
    except ValueError:
        raise ConfigError(f"--ks: expected comma-separated integers, got {args.ks!r}") from None
    dataset = dataset_from_spec(cfg.dataset.kind, cfg.dataset.params)
    rows = run_sweep_k(cfg, dataset, ks, args.seeds)
    summary = sweep_summary(rows)
    out.mkdir(parents=True, exist_ok=True)
    flat = [{k: v for k, v in r.items() if k != "member_accs"} for r in rows]
    write_csv(out / "sweep_k.csv", list(flat[0].keys()), flat)
    write_csv(out / "sweep_k_summary.csv", list(summary[0].keys()), summary)
    for s in summary:
        print(f"{s['mode']:>12} K={s['k']}: member {s['member_mean_acc']:.4f} (pooled std {s['pooled_std']:.4f}) ensemble {s['ensemble_acc']:.4f}")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    cfg, out = _load(args)
    paths = [Path(p) for p in args.ckpt] or sorted(out.glob("member_*.ckpt"))
    if not paths:
        raise ConfigError(f"--ckpt: no checkpoints given and none found under {out}")
    params = []
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"--ckpt: checkpoint not found: {p}")
        params.append(load_checkpoint(p.read_bytes()))
    dataset = dataset_from_spec(cfg.dataset.kind, cfg.dataset.params)
    tables = analyze_params(params, dataset, cfg.analysis)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in tables.items():
        write_csv(out / f"{name}.csv", list(rows[0].keys()), rows)
    for row in tables["entropy"]:
        acc = accuracy(posteriors(params[row["member"]], dataset.test_x), dataset.test_y)
        print(f"member {row['member']}: entropy={row['entropy']:.4f} test_acc={acc:.4f}")
    print(f"ensemble test_acc={tables['ensemble'][0]['ensemble_acc']:.4f}")
    return EXIT_OK


def _cmd_worker(args) -> int:
    cfg, out = _load(args)
    endpoints = args.endpoints or list(cfg.transport.endpoints)
    report = run_distributed_worker(cfg, args.member_id, endpoints, out_dir=out / f"member_{args.member_id}")
    (out / f"member_{args.member_id}" / "member.ckpt").write_bytes(save_checkpoint(report.params[0]))
    row = report.final_rows()[0]
    print(f"member {row.member}: test_acc={row.test_acc:.4f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed, trials=args.trials)
    worst = max(r.max_rel_err for r in results)
    for r in results:
        print(f"{r.name:<24} trials={r.trials:<5} max_rel_err={r.max_rel_err:.3e} {'ok' if r.passed(args.tol) else 'FAIL'}")
    print(f"max relative error {worst:.3e} (tol {args.tol:g})")
    return EXIT_OK if worst < args.tol else EXIT_GRADCHECK


_COMMANDS = {
    "train": _cmd_train,
    "pretrain": _cmd_pretrain,
    "compare": _cmd_compare,
    "sweep-k": _cmd_sweep_k,
    "analyze": _cmd_analyze,
    "worker": _cmd_worker,
    "gradcheck": _cmd_gradcheck,
}


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TransportError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

