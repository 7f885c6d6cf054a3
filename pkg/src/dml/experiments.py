"""Multi-run drivers: mode comparison, cohort-size sweep, checkpoint analysis."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from . import analysis as A
from .config import AnalysisConfig, CohortConfig, MemberConfig
from .data import Dataset
from .model import NetworkParams
from .trainer import train

__all__ = ["run_compare", "compare_summary", "run_sweep_k", "sweep_summary", "analyze_params", "cohort_of_size"]

SEED_STRIDE = 1000


def _mode_config(config: CohortConfig, mode: str, seed: int) -> CohortConfig:
    return replace(config.with_seed_offset(seed, SEED_STRIDE), mode=mode)


def run_compare(
    config: CohortConfig,
    dataset: Dataset,
    seeds: int,
    modes: Sequence[str] | None = None,
    teacher: NetworkParams | None = None,
) -> list[dict]:
    """Train each mode on the same member seeds and data order per seed.

    Returns one row per (mode, seed, member) with the final test accuracy.
    """
    if modes is None:
        modes = ["independent", "dml", "dml_e"]
        if teacher is not None or (config.distill and config.distill.teacher_ckpt):
            modes.append("distill")
    rows = []
    for s in range(seeds):
        for mode in modes:
            cfg = _mode_config(config, mode, s)
            report = train(cfg, dataset, teacher=teacher if mode == "distill" else None)
            for member, acc in enumerate(report.metric("test_acc")):
                rows.append({"mode": mode, "seed": s, "member": member, "test_acc": acc})
    return rows


def compare_summary(rows: list[dict], baseline: str = "independent") -> list[dict]:
    """Mean over seeds of (mode mean member accuracy - baseline mean accuracy)."""
    by = {}
    for r in rows:
        by.setdefault((r["mode"], r["seed"]), []).append(r["test_acc"])
    seeds = sorted({s for _, s in by})
    out = []
    for mode in dict.fromkeys(r["mode"] for r in rows):
        deltas = [np.mean(by[(mode, s)]) - np.mean(by[(baseline, s)]) for s in seeds if (baseline, s) in by]
        out.append({"mode": mode, "seed": "mean_delta", "member": "", "test_acc": float(np.mean(deltas)) if deltas else float("nan")})
    return out


def cohort_of_size(config: CohortConfig, k: int) -> CohortConfig:
    """``k`` members shaped like the first configured member, with consecutive seeds."""
    first = config.members[0]
    return replace(config, members=tuple(MemberConfig(first.hidden, first.seed + i) for i in range(k)))


def run_sweep_k(
    config: CohortConfig,
    dataset: Dataset,
    ks: Sequence[int],
    seeds: int,
    modes: Sequence[str] = ("dml", "independent"),
) -> list[dict]:
    """Per (mode, K, seed): mean and std of member accuracy, and ensemble accuracy."""
    rows = []
    for k in ks:
        for mode in modes:
            if mode in ("dml", "dml_e") and k < 2:
                continue
            for s in range(seeds):
                cfg = _mode_config(cohort_of_size(config, k), mode, s)
                report = train(cfg, dataset)
                accs = report.metric("test_acc")
                rows.append({
                    "mode": mode,
                    "k": k,
                    "seed": s,
                    "member_accs": [float(a) for a in accs],
                    "member_mean_acc": float(np.mean(accs)),
                    "member_std_acc": float(np.std(accs)),
                    "ensemble_acc": A.ensemble_accuracy(report.params, dataset.test_x, dataset.test_y),
                })
    return rows


def sweep_summary(rows: list[dict]) -> list[dict]:
    """Aggregate sweep rows per (mode, K).

    ``std_across_runs`` is the spread of per-run member means over seeds;
    ``std_across_members`` averages the within-cohort spread; ``pooled_std``
    pools every member accuracy of every seed.
    """
    out = []
    keys = dict.fromkeys((r["mode"], r["k"]) for r in rows)
    for mode, k in keys:
        sel = [r for r in rows if r["mode"] == mode and r["k"] == k]
        pooled = [a for r in sel for a in r["member_accs"]]
        out.append({
            "mode": mode,
            "k": k,
            "runs": len(sel),
            "member_mean_acc": float(np.mean([r["member_mean_acc"] for r in sel])),
            "std_across_runs": float(np.std([r["member_mean_acc"] for r in sel])),
            "std_across_members": float(np.mean([r["member_std_acc"] for r in sel])),
            "pooled_std": float(np.std(pooled)),
            "ensemble_acc": float(np.mean([r["ensemble_acc"] for r in sel])),
        })
    return out


def analyze_params(params: Sequence[NetworkParams], dataset: Dataset, cfg: AnalysisConfig) -> dict[str, list[dict]]:
    """Flatness, entropy, top-k profile and ensemble tables for trained members."""
    flat, ent, topk = [], [], []
    k = min(cfg.topk, dataset.num_classes)
    for i, p in enumerate(params):
        table = A.flatness_probe(p, dataset.train_x, dataset.train_y, cfg.sigmas, cfg.trials, cfg.noise_seed, relative=cfg.relative)
        for row in table.rows:
            flat.append({"member": i, **row.as_dict(), "base_loss": table.base_loss, "increase": row.mean_loss - table.base_loss})
        ent.append({"member": i, "entropy": A.avg_posterior_entropy(p, dataset.train_x)})
        for rank, mass in enumerate(A.topk_mass_profile(p, dataset.train_x, k), start=1):
            topk.append({"member": i, "rank": rank, "mass": float(mass)})
    member_accs = [A.accuracy(A.posteriors(p, dataset.test_x), dataset.test_y) for p in params]
    ensemble = [{
        "members": len(params),
        "mean_member_acc": float(np.mean(member_accs)),
        "ensemble_acc": A.ensemble_accuracy(params, dataset.test_x, dataset.test_y),
    }]
    return {"flatness": flat, "entropy": ent, "topk": topk, "ensemble": ensemble}
