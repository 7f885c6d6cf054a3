"""Cohort training: independent, mutual (dml), ensemble-teacher (dml_e) and distillation.

The default ``round_robin`` variant follows the interleaved schedule: all
members see the same mini-batch, and before member ``k`` updates, every
member's predictions on that batch are brought up to date, so later members
see the updates made earlier in the same step.  ``simultaneous`` snapshots
all predictions once per step and updates every member against that
snapshot; the distributed worker implements the same semantics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from .analysis import accuracy, entropy_of
from .config import CohortConfig, ConfigError, ExperimentConfig
from .data import Dataset
from .model import MlpSpec, NetworkParams, as_leaves, forward, init_mlp, load_checkpoint, predict_logits, save_checkpoint
from .optim import OptimizerState, lr_at, optimizer_step
from .report import EpochRecord, ExperimentReport
from .tensor import Tape

__all__ = [
    "Member",
    "ModeArgs",
    "make_members",
    "member_update",
    "cohort_step",
    "evaluate_member",
    "epoch_batches",
    "train",
    "pretrain_teacher",
    "load_teacher",
]


@dataclass
class Member:
    spec: MlpSpec
    params: NetworkParams
    opt: OptimizerState


@dataclass
class ModeArgs:
    reduction: str = "mean"
    aggregation: str = "logit_mean"
    temperature: float = 1.0
    teacher: NetworkParams | None = None


def make_members(config: CohortConfig, input_dim: int, num_classes: int) -> list[Member]:
    return [
        Member(spec, init_mlp(spec), config.optimizer.new_state(config.weight_decay))
        for spec in config.member_specs(input_dim, num_classes)
    ]


def _outputs(params: NetworkParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = predict_logits(params, x)
    return logits, L.softmax_np(logits)


def member_update(
    member: Member,
    x: np.ndarray,
    y: np.ndarray,
    mode: str,
    k: int = 0,
    peer_probs: Sequence | None = None,
    peer_logits: Sequence | None = None,
    args: ModeArgs | None = None,
    teacher_probs: np.ndarray | None = None,
) -> float:
    """One optimizer step of ``member`` on its objective for this batch.

    ``peer_probs``/``peer_logits`` are length-K sequences indexed by member;
    entry ``k`` is ignored and replaced by the member's own fresh output.
    """
    args = args or ModeArgs()
    with Tape() as tape:
        leaves = as_leaves(member.params)
        logits = forward(leaves, x)
        if mode == "distill":
            loss = L.distill_objective(logits, teacher_probs, y, args.temperature, args.reduction)
        else:
            probs = L.softmax_probs(logits)
            if mode == "independent":
                loss = L.cross_entropy(probs, y, args.reduction)
            elif mode == "dml":
                all_probs = [probs if i == k else p for i, p in enumerate(peer_probs)]
                loss = L.dml_objective(k, all_probs, y, args.reduction)
            elif mode == "dml_e":
                all_probs = [probs if i == k else p for i, p in enumerate(peer_probs)]
                all_logits = None
                if peer_logits is not None:
                    all_logits = [logits.data if i == k else z for i, z in enumerate(peer_logits)]
                loss = L.dml_e_objective(k, all_probs, y, args.aggregation, all_logits, args.reduction)
            else:
                raise ValueError(f"unknown mode {mode!r}")
        grads = tape.backward(loss, wrt=leaves)
    member.params = optimizer_step(member.opt, member.params, [grads[leaf] for leaf in leaves])
    return loss.item()


def cohort_step(
    members: list[Member],
    x: np.ndarray,
    y: np.ndarray,
    mode: str,
    args: ModeArgs | None = None,
    variant: str = "round_robin",
    hook: Callable[[int, list], None] | None = None,
) -> list[float]:
    """Update every member once on the shared batch ``(x, y)``.

    ``hook(k, peer_probs)`` is called just before member ``k`` updates with
    the peer predictions it is about to use.
    """
    args = args or ModeArgs()
    n = len(members)
    if mode in ("dml", "dml_e") and n < 2:
        raise ValueError(f"mode {mode!r} needs at least 2 members, got {n}")
    if mode == "distill" and args.teacher is None:
        raise ValueError("distill mode needs a teacher")
    if variant not in ("round_robin", "simultaneous"):
        raise ValueError(f"unknown variant {variant!r}")

    teacher_probs = None
    if mode == "distill":
        teacher_probs = L.softmax_np(predict_logits(args.teacher, x), args.temperature)

    needs_peers = mode in ("dml", "dml_e")
    cache = [_outputs(m.params, x) for m in members] if needs_peers else [None] * n
    losses = []
    for k, member in enumerate(members):
        peer_probs = [c[1] if c is not None else None for c in cache]
        peer_logits = [c[0] if c is not None else None for c in cache]
        if hook is not None:
            hook(k, peer_probs)
        losses.append(member_update(member, x, y, mode, k, peer_probs, peer_logits, args, teacher_probs))
        if needs_peers and variant == "round_robin":
            cache[k] = _outputs(member.params, x)
    return losses


def evaluate_member(params: NetworkParams, dataset: Dataset) -> dict:
    train_probs = L.softmax_np(predict_logits(params, dataset.train_x))
    test_probs = L.softmax_np(predict_logits(params, dataset.test_x))
    return {
        "train_loss": L.cross_entropy(train_probs, dataset.train_y).item(),
        "train_acc": accuracy(train_probs, dataset.train_y),
        "test_acc": accuracy(test_probs, dataset.test_y),
        "entropy": entropy_of(train_probs),
    }


def epoch_batches(n: int, batch_size: int, data_seed: int, epoch: int):
    """Index arrays of the shuffled mini-batches for one epoch."""
    perm = np.random.default_rng([data_seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def load_teacher(config: CohortConfig) -> NetworkParams:
    path = Path(config.distill.teacher_ckpt) if config.distill else None
    if path is None or not path.is_file():
        raise ConfigError(f"distill.teacher_ckpt: teacher checkpoint not found: {path}")
    return load_checkpoint(path.read_bytes())


def _config_echo(config: CohortConfig) -> dict:
    if isinstance(config, ExperimentConfig):
        return config.to_dict()
    return {"mode": config.mode, "members": [{"hidden": list(m.hidden), "seed": m.seed} for m in config.members]}


def train(
    config: CohortConfig,
    dataset: Dataset,
    teacher: NetworkParams | None = None,
    hook: Callable[[int, list], None] | None = None,
) -> ExperimentReport:
    """Train the cohort for ``config.epochs`` epochs, evaluating after each.

    The returned report carries one row per (epoch, member), with epoch 0
    describing the freshly initialised networks, and the final parameters
    in ``report.params``.
    """
    config.validate()
    start = time.perf_counter()
    if config.mode == "distill" and teacher is None:
        teacher = load_teacher(config)
    if teacher is not None and (teacher.input_dim, teacher.num_classes) != (dataset.input_dim, dataset.num_classes):
        raise ConfigError("distill.teacher_ckpt: teacher dims do not match the dataset")
    members = make_members(config, dataset.input_dim, dataset.num_classes)
    distill = config.distill
    args = ModeArgs(
        reduction=config.reduction,
        aggregation=config.aggregation,
        temperature=distill.temperature if distill else 1.0,
        teacher=teacher,
    )

    rows = []

    def record(epoch):
        for i, m in enumerate(members):
            rows.append(EpochRecord(epoch=epoch, member=i, **evaluate_member(m.params, dataset)))

    record(0)
    base_lr = config.optimizer.lr
    n = len(dataset.train_y)
    for epoch in range(config.epochs):
        lr = lr_at(config.schedule, base_lr, epoch)
        for m in members:
            m.opt.lr = lr
        for idx in epoch_batches(n, config.batch_size, config.data_seed, epoch):
            cohort_step(members, dataset.train_x[idx], dataset.train_y[idx], config.mode, args, config.variant, hook)
        record(epoch + 1)

    report = ExperimentReport(
        config=_config_echo(config),
        rows=rows,
        variant=config.variant,
        wall_clock=time.perf_counter() - start,
    )
    report.params = [m.params for m in members]
    return report


def pretrain_teacher(config: CohortConfig, dataset: Dataset, path=None) -> tuple[bytes, ExperimentReport]:
    """Train a single network independently and serialise it as a teacher."""
    if config.mode != "independent" or config.k != 1:
        raise ConfigError("members: teacher pretraining takes one member in independent mode")
    report = train(config, dataset)
    blob = save_checkpoint(report.params[0])
    report.tables["teacher"] = [{"test_acc": report.final_rows()[0].test_acc}]
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(blob)
        report.checkpoints.append(str(path))
    return blob, report
