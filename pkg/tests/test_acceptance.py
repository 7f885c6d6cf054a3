"""Acceptance gate.

Each numbered test checks one criterion at its stated tolerance and records
a PASS/FAIL line (shown in the pytest terminal summary).  Training runs are
shared through session fixtures: ten paired seeds of independent vs mutual
training on the spiral-3 substrate feed criteria 4, 6, 7 and 8.

Run just this gate with ``pytest tests/test_acceptance.py -v``.
"""

import hashlib
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE
from dml import analysis as A
from dml import losses as L
from dml.cli import dispatch
from dml.config import DistillConfig, MemberConfig, parse_config
from dml.data import dataset_from_spec
from dml.experiments import SEED_STRIDE, cohort_of_size
from dml.gradcheck import run_gradcheck
from dml.tensor import Tape, Tensor
from dml.trainer import pretrain_teacher, train
from dml.transport import run_distributed_worker

pytestmark = pytest.mark.slow

SEEDS = 10
SWEEP_SEEDS = 5
SWEEP_KS = (2, 3, 4, 5)
SIGMAS = (0.0, 0.01, 0.02, 0.05, 0.1)

SPIRAL_CONFIG = {
    "mode": "dml",
    "members": [{"hidden": [64, 64], "seed": 1}, {"hidden": [64, 64], "seed": 2}],
    "dataset": {"kind": "spiral", "params": {"n_train": 1500, "n_test": 1500, "classes": 3, "noise_std": 0.2, "seed": 7}},
    "optimizer": {"kind": "sgd_nesterov", "lr": 0.1, "momentum": 0.9},
    "schedule": {"drop_every": 60, "factor": 0.1},
    "batch_size": 64,
    "epochs": 200,
    "data_seed": 0,
}
TEACHER_HIDDEN = (128, 128)
TEACHER_SEED = 3


def record(num, title, passed, detail):
    line = f"criterion {num:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[str(num)] = line
    print(line)
    assert passed, line


def member_mean(report, name="test_acc"):
    return float(np.mean(report.metric(name)))


@pytest.fixture(scope="session")
def base_cfg():
    return parse_config(SPIRAL_CONFIG)


@pytest.fixture(scope="session")
def spiral(base_cfg):
    return dataset_from_spec("spiral", base_cfg.dataset.params)


@pytest.fixture(scope="session")
def paired(base_cfg, spiral):
    """Per seed: (independent report, dml report) with shared inits and data order."""
    runs = []
    for s in range(SEEDS):
        cfg = base_cfg.with_seed_offset(s, SEED_STRIDE)
        runs.append((train(replace(cfg, mode="independent"), spiral), train(replace(cfg, mode="dml"), spiral)))
    return runs


# ---------------------------------------------------------------------------
# 1-3: gradients and loss identities


def test_criterion_01_gradcheck():
    start = time.perf_counter()
    results = run_gradcheck(seed=0, trials=100)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_err)
    losses = [r for r in results if r.name.startswith("loss:")]
    covered = {"loss:cross_entropy", "loss:kl_div", "loss:dml_k2", "loss:dml_k3", "loss:dml_e_prob_mean", "loss:dml_e_logit_mean", "loss:distill_t1"}
    passed = worst.max_rel_err < 1e-4 and elapsed < 60 and covered <= {r.name for r in losses} and min(r.trials for r in results) >= 100
    record(1, "gradient check", passed, f"max rel err {worst.max_rel_err:.2e} ({worst.name}) over {len(results)} checks x 100 trials, {elapsed:.1f}s")


def _logit_grad(build, z):
    with Tape() as tape:
        leaf = Tensor(z, requires_grad=True)
        return tape.backward(build(leaf))[leaf]


def test_criterion_02_gradient_identity():
    g = _logit_grad(lambda z: L.dml_objective(0, [L.softmax_probs(z), np.array([[0.25, 0.75]])], [0]), np.zeros((1, 2)))
    worked = float(np.max(np.abs(g[0] - [-0.25, 0.25])))
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        n, m, k_members = int(rng.integers(1, 8)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        z = rng.normal(scale=2, size=(n, m))
        peers = [L.softmax_np(rng.normal(scale=2, size=(n, m))) for _ in range(k_members - 1)]
        y = rng.integers(0, m, size=n)
        g_total = _logit_grad(lambda t: L.dml_objective(0, [L.softmax_probs(t), *peers], y, "sum"), z)
        g_mimic = g_total - _logit_grad(lambda t: L.cross_entropy(L.softmax_probs(t), y, "sum"), z)
        p, pbar = L.softmax_np(z), np.mean(peers, axis=0)
        worst = max(worst, float(np.max(np.abs(g_mimic - (p - pbar)))), float(np.max(np.abs(g_total - (2 * p - L.one_hot(y, m) - pbar)))))
    passed = worked < 1e-10 and worst < 1e-10
    record(2, "analytic gradient identity", passed, f"worked case error {worked:.1e}, max error over 200 random batches {worst:.1e}")


def test_criterion_03_loss_identities():
    rng = np.random.default_rng(1)
    eq4_exact = True
    grad_dev = kl_self = 0.0
    kl_min = np.inf
    convex_ok = True
    for _ in range(1000):
        n, m, k_members = int(rng.integers(1, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        z = rng.normal(scale=2, size=(n, m))
        probs = [L.softmax_np(rng.normal(scale=2, size=(n, m))) for _ in range(k_members)]
        y = rng.integers(0, m, size=n)
        p1, p2 = probs[0], probs[1]
        two = L.dml_objective(0, [p1, p2], y).item()
        eq4 = L.cross_entropy(p1, y).item() + L.kl_div(p2, p1).item()
        eq4_exact &= two == eq4
        peers = probs[1:]
        g_dml = _logit_grad(lambda t: L.dml_objective(0, [L.softmax_probs(t), *peers], y), z)
        g_e = _logit_grad(lambda t: L.dml_e_objective(0, [L.softmax_probs(t), *peers], y, "prob_mean"), z)
        grad_dev = max(grad_dev, float(np.max(np.abs(g_dml - g_e))))
        kl_min = min(kl_min, L.kl_div(p1, p2).item())
        kl_self = max(kl_self, abs(L.kl_div(p1, p1).item()))
        avg = L.ensemble_teacher(0, probs, "prob_mean")
        lhs = L.kl_div(avg, p1).item()
        rhs = np.mean([L.kl_div(q, p1).item() for q in peers])
        convex_ok &= lhs <= rhs + 1e-15
    passed = eq4_exact and grad_dev < 1e-10 and kl_min >= 0 and kl_self < 1e-12 and convex_ok
    record(
        3,
        "loss identities",
        passed,
        f"K=2 equals CE+KL exactly: {eq4_exact}; dml_e(prob_mean) vs dml grad max dev {grad_dev:.1e}; "
        f"min KL {kl_min:.2e}; max |KL(p,p)| {kl_self:.1e}; convexity held: {convex_ok} (1000 batches)",
    )


# ---------------------------------------------------------------------------
# 4-8: statistical experiments on spiral-3


def _substrate(key, passed, line):
    ACCEPTANCE[key] = f"         {'PASS' if passed else 'FAIL'}  {line}"
    print(ACCEPTANCE[key])
    assert passed, line


def test_substrate_baseline(paired):
    acc = [a for ind, _ in paired for a in ind.metric("test_acc")]
    _substrate("substrate a", min(acc) >= 0.9, f"substrate: independent test acc min {min(acc):.4f} (need >= 0.90)")


def test_substrate_train_accuracy(paired):
    acc = {mode: [a for pair in paired for a in pair[j].metric("train_acc")] for j, mode in enumerate(("independent", "dml"))}
    passed = all(min(v) == 1.0 for v in acc.values())
    detail = ", ".join(f"{m} min {min(v):.4f} ({sum(a < 1 for a in v)}/{len(v)} members below 1.0)" for m, v in acc.items())
    _substrate("substrate b", passed, f"substrate: final train acc reaches 1.0: {detail}")


def test_criterion_04_dml_beats_independent(paired):
    deltas = [member_mean(d) - member_mean(i) for i, d in paired]
    wins = sum(d > 0 for d in deltas)
    wall = sum(i.wall_clock + d.wall_clock for i, d in paired)
    passed = wins >= 8 and np.mean(deltas) > 0 and wall < 600
    detail = f"DML wins {wins}/10 seeds (need >= 8), mean delta {np.mean(deltas):+.4f} (need > 0), deltas {[round(d, 4) for d in deltas]}, {wall:.0f}s"
    record(4, "DML beats independent", passed, detail)


def test_criterion_05_cohort_size(base_cfg, spiral, paired):
    accs, ens, wall = {}, {}, 0.0
    for k in SWEEP_KS:
        accs[k], ens[k] = [], []
        for s in range(SWEEP_SEEDS):
            if k == 2:
                rep = paired[s][1]
            else:
                rep = train(replace(cohort_of_size(base_cfg, k), mode="dml").with_seed_offset(s, SEED_STRIDE), spiral)
            wall += rep.wall_clock
            accs[k].append(rep.metric("test_acc"))
            ens[k].append(A.ensemble_accuracy(rep.params, spiral.test_x, spiral.test_y))
    means = {k: float(np.mean(accs[k])) for k in SWEEP_KS}
    trend_ok = True
    for a, b in zip(SWEEP_KS, SWEEP_KS[1:]):
        pooled = float(np.std(np.concatenate([np.ravel(accs[a]), np.ravel(accs[b])])))
        trend_ok &= means[b] >= means[a] - pooled
    ens_ok = all(np.mean(ens[k]) >= means[k] for k in SWEEP_KS)
    passed = trend_ok and ens_ok and wall < 1800
    detail = (
        "member mean " + ", ".join(f"K={k}: {means[k]:.4f}" for k in SWEEP_KS)
        + "; ensemble " + ", ".join(f"K={k}: {np.mean(ens[k]):.4f}" for k in SWEEP_KS)
        + f"; trend within pooled std: {trend_ok}; ensemble >= member: {ens_ok}; {wall:.0f}s"
    )
    record(5, "cohort-size trend", passed, detail)


def test_criterion_06_entropy(paired, spiral):
    pairs = [
        (np.mean([A.avg_posterior_entropy(p, spiral.train_x) for p in d.params]), np.mean([A.avg_posterior_entropy(p, spiral.train_x) for p in i.params]))
        for i, d in paired
    ]
    wins = sum(d > i for d, i in pairs)
    detail = f"DML entropy higher in {wins}/10 seeds (need >= 8); mean DML {np.mean([d for d, _ in pairs]):.4f} vs independent {np.mean([i for _, i in pairs]):.4f} nats"
    record(6, "entropy ordering", wins >= 8, detail)


def test_criterion_07_flatness(paired, spiral):
    wins, zero_exact, incs = 0, True, []
    for s, (ind, dml) in enumerate(paired):
        tables = [A.flatness_probe(r.params[0], spiral.train_x, spiral.train_y, SIGMAS, trials=100, noise_seed=s) for r in (ind, dml)]
        zero_exact &= all(t.rows[0].mean_loss == A.dataset_loss(r.params[0], spiral.train_x, spiral.train_y) for t, r in zip(tables, (ind, dml)))
        inc_i, inc_d = tables[0].increase(0.05), tables[1].increase(0.05)
        incs.append((inc_d, inc_i))
        wins += inc_d < inc_i
    passed = wins >= 7 and zero_exact
    detail = (
        f"DML loss increase at sigma=0.05 smaller in {wins}/10 seeds (need >= 7); "
        f"mean increase DML {np.mean([d for d, _ in incs]):.4f} vs independent {np.mean([i for _, i in incs]):.4f}; sigma=0 rows exact: {zero_exact}"
    )
    record(7, "flatness ordering", passed, detail)


def test_criterion_08_distillation(base_cfg, spiral, paired, tmp_path_factory):
    student = MemberConfig((64, 64), 1)
    teacher_m = MemberConfig(TEACHER_HIDDEN, TEACHER_SEED)
    distill_wins = dml_wins = 0
    rows = []
    for s in range(SEEDS):
        path = tmp_path_factory.mktemp(f"teacher{s}") / "teacher.ckpt"
        tcfg = replace(base_cfg, mode="independent", members=(teacher_m,)).with_seed_offset(s, SEED_STRIDE)
        blob, _ = pretrain_teacher(tcfg, spiral, path)
        digest = hashlib.sha256(blob).hexdigest()
        dcfg = replace(base_cfg, mode="distill", members=(student,), distill=DistillConfig(str(path), 1.0)).with_seed_offset(s, SEED_STRIDE)
        distilled = train(dcfg, spiral).metric("test_acc")[0]
        assert hashlib.sha256(path.read_bytes()).hexdigest() == digest
        mcfg = replace(base_cfg, mode="dml", members=(teacher_m, student)).with_seed_offset(s, SEED_STRIDE)
        dml_student = train(mcfg, spiral).metric("test_acc")[1]
        # member 0 of the independent cohort has the student's seed and data order
        independent = paired[s][0].metric("test_acc")[0]
        distill_wins += distilled >= independent
        dml_wins += dml_student >= distilled
        rows.append((independent, distilled, dml_student))
    passed = distill_wins >= 7 and dml_wins >= 7
    mean = np.mean(rows, axis=0)
    detail = (
        f"distilled >= independent in {distill_wins}/10, DML student >= distilled in {dml_wins}/10 (need >= 7 each); "
        f"mean acc independent {mean[0]:.4f}, distilled {mean[1]:.4f}, DML {mean[2]:.4f}"
    )
    record(8, "distillation comparison", passed, detail)


# ---------------------------------------------------------------------------
# 9-10: distributed equivalence and determinism


def _free_endpoints(k):
    import socket

    socks = [socket.socket() for _ in range(k)]
    try:
        for s in socks:
            s.bind(("127.0.0.1", 0))
        return [f"127.0.0.1:{s.getsockname()[1]}" for s in socks]
    finally:
        for s in socks:
            s.close()


def _distributed(cfg, spiral):
    import threading

    out, errs = [None, None], [None, None]

    def run(i):
        try:
            out[i] = run_distributed_worker(cfg, i, dataset=spiral)
        except Exception as exc:  # noqa: BLE001 - reported below
            errs[i] = exc

    threads = [threading.Thread(target=run, args=(i,), daemon=True) for i in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(600)
    if any(errs) or any(t.is_alive() for t in threads):
        raise RuntimeError(f"distributed run failed: {errs}")
    return out


def _max_dev(reports, ref):
    return max(float(np.max(np.abs(a - b))) for i in range(2) for a, b in zip(reports[i].params[0].arrays(), ref.params[i].arrays()))


def test_criterion_09_distributed(base_cfg, spiral):
    start = time.perf_counter()
    sim = replace(base_cfg, mode="dml", variant="simultaneous")
    wide_cfg = replace(sim, transport=replace(sim.transport, endpoints=tuple(_free_endpoints(2)), wide=True))
    wide = _distributed(wide_cfg, spiral)
    ref = train(sim, spiral)
    bit_identical = all(wide[i].params[0].equals(ref.params[i]) for i in range(2))
    # 32-bit rounding perturbs every step and training amplifies it; the bound is
    # checked on a 3-epoch run and the growth with run length is reported
    growth = {}
    for epochs in (1, 3, 10):
        cfg = replace(sim, epochs=epochs, transport=replace(sim.transport, endpoints=tuple(_free_endpoints(2)), wide=False))
        growth[epochs] = _max_dev(_distributed(cfg, spiral), train(replace(sim, epochs=epochs), spiral))
    elapsed = time.perf_counter() - start
    passed = bit_identical and growth[3] < 1e-6 and elapsed < 300
    detail = (
        f"64-bit 200-epoch run bit-identical: {bit_identical}; 32-bit max param deviation "
        + ", ".join(f"{e} ep {d:.1e}" for e, d in growth.items())
        + f" (gate: 3 epochs < 1e-6); {elapsed:.0f}s"
    )
    record(9, "distributed equivalence", passed, detail)


def test_criterion_10_determinism(tmp_path, base_cfg):
    import json

    teacher_cfg = tmp_path / "teacher.json"
    teacher_cfg.write_text(json.dumps({**SPIRAL_CONFIG, "mode": "independent", "members": [{"hidden": list(TEACHER_HIDDEN), "seed": TEACHER_SEED}]}))
    assert dispatch(["pretrain", "--config", str(teacher_cfg), "--out", str(tmp_path / "teacher")]) == 0
    configs = {
        "independent": {**SPIRAL_CONFIG, "mode": "independent"},
        "dml": SPIRAL_CONFIG,
        "dml_e": {**SPIRAL_CONFIG, "mode": "dml_e", "members": SPIRAL_CONFIG["members"] + [{"hidden": [64, 64], "seed": 4}]},
        "distill": {**SPIRAL_CONFIG, "mode": "distill", "members": [{"hidden": [64, 64], "seed": 1}], "distill": {"teacher_ckpt": str(tmp_path / "teacher" / "teacher.ckpt")}},
    }
    mismatched = []
    compared = 0
    for mode, raw in configs.items():
        path = tmp_path / f"{mode}.json"
        path.write_text(json.dumps(raw))
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / mode / rep
            assert dispatch(["train", "--config", str(path), "--out", str(out)]) == 0
            assert dispatch(["analyze", "--config", str(path), "--out", str(out)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "report.meta.json"})
        compared += len(outs[0])
        if outs[0] != outs[1]:
            mismatched.append(mode)
    passed = not mismatched
    record(10, "determinism", passed, f"train+analyze twice for 4 modes, {compared} files compared byte-for-byte, mismatches: {mismatched or 'none'}")
