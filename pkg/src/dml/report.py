"""Experiment reports and their on-disk form.

A report directory holds ``report.json`` (deterministic content),
``metrics.csv`` (columns epoch, member, train_loss, test_acc, entropy),
one wide CSV per metric for plotting, and ``report.meta.json`` carrying the
wall-clock time, which is kept apart so that reruns produce byte-identical
primary files.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

__all__ = ["EpochRecord", "ExperimentReport", "write_report", "read_report", "write_csv", "METRIC_COLUMNS"]

METRIC_COLUMNS = ("epoch", "member", "train_loss", "test_acc", "entropy")


@dataclass
class EpochRecord:
    epoch: int
    member: int
    train_loss: float
    train_acc: float
    test_acc: float
    entropy: float

    def __post_init__(self):
        for name in ("train_acc", "test_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class ExperimentReport:
    config: dict
    rows: list[EpochRecord] = field(default_factory=list)
    variant: str = "round_robin"
    wall_clock: float = 0.0
    checkpoints: list[str] = field(default_factory=list)
    tables: dict[str, list[dict]] = field(default_factory=dict)
    # final parameters of each member; in-memory only
    params: list = field(default_factory=list, repr=False, compare=False)

    def final_rows(self) -> list[EpochRecord]:
        if not self.rows:
            return []
        last = max(r.epoch for r in self.rows)
        return sorted((r for r in self.rows if r.epoch == last), key=lambda r: r.member)

    def metric(self, name: str, epoch: int | None = None) -> list[float]:
        rows = self.final_rows() if epoch is None else sorted(
            (r for r in self.rows if r.epoch == epoch), key=lambda r: r.member
        )
        return [getattr(r, name) for r in rows]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "variant": self.variant,
            "rows": [asdict(r) for r in self.rows],
            "checkpoints": list(self.checkpoints),
            "tables": self.tables,
        }

    @classmethod
    def from_dict(cls, d: dict, wall_clock: float = 0.0) -> "ExperimentReport":
        return cls(
            config=d["config"],
            rows=[EpochRecord(**r) for r in d["rows"]],
            variant=d.get("variant", "round_robin"),
            wall_clock=wall_clock,
            checkpoints=list(d.get("checkpoints", [])),
            tables=d.get("tables", {}),
        )


def write_csv(path, columns, rows) -> None:
    """Write dict rows with a header; floats use ``repr`` for exact round-trips."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c, "")) for c in columns])
    Path(path).write_text(buf.getvalue())


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def write_report(report: ExperimentReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "report.meta.json").write_text(json.dumps({"wall_clock_seconds": report.wall_clock}) + "\n")
    write_csv(out / "metrics.csv", METRIC_COLUMNS, [asdict(r) for r in report.rows])
    members = sorted({r.member for r in report.rows})
    epochs = sorted({r.epoch for r in report.rows})
    by_key = {(r.epoch, r.member): r for r in report.rows}
    for metric in ("train_loss", "test_acc", "entropy"):
        cols = ["epoch", *(f"member_{m}" for m in members)]
        rows = []
        for e in epochs:
            row = {"epoch": e}
            for m in members:
                rec = by_key.get((e, m))
                row[f"member_{m}"] = getattr(rec, metric) if rec else ""
            rows.append(row)
        write_csv(out / f"{metric}.csv", cols, rows)
    for name, table in report.tables.items():
        if table:
            write_csv(out / f"{name}.csv", list(table[0].keys()), table)
    return out / "report.json"


def read_report(out_dir) -> ExperimentReport:
    out = Path(out_dir)
    data = json.loads((out / "report.json").read_text())
    meta_path = out / "report.meta.json"
    wall = json.loads(meta_path.read_text())["wall_clock_seconds"] if meta_path.exists() else 0.0
    return ExperimentReport.from_dict(data, wall)
