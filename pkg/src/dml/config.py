"""Experiment configuration: strict JSON schema, defaults, overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import jsonschema

from .model import MlpSpec
from .optim import OptimizerState, Schedule

__all__ = [
    "ConfigError",
    "MemberConfig",
    "OptimizerConfig",
    "DatasetConfig",
    "DistillConfig",
    "TransportConfig",
    "AnalysisConfig",
    "CohortConfig",
    "ExperimentConfig",
    "CONFIG_SCHEMA",
    "MODES",
    "parse_config",
    "load_config",
    "apply_overrides",
    "config_hash",
]

MODES = ("independent", "dml", "dml_e", "distill")


class ConfigError(ValueError):
    """Configuration failed validation; the message names the offending key."""


_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["mode", "members", "dataset"],
    "properties": {
        "mode": {"enum": list(MODES)},
        "members": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["seed"],
                "properties": {
                    "hidden": {"type": "array", "items": _pos_int},
                    "seed": {"type": "integer", "minimum": 0},
                },
            },
        },
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["sgd_nesterov", "adam"]},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"drop_every": _int, "factor": {"type": "number", "exclusiveMinimum": 0}},
        },
        "batch_size": _pos_int,
        "epochs": {"type": "integer", "minimum": 0},
        "reduction": {"enum": ["mean", "sum"]},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["blobs", "spiral", "idx"]},
                "params": {"type": "object"},
            },
        },
        "distill": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "teacher_ckpt": {"type": "string"},
                "temperature": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "dml_e": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"aggregation": {"enum": ["prob_mean", "logit_mean"]}},
        },
        "data_seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
        "variant": {"enum": ["round_robin", "simultaneous"]},
        "weight_decay": {"type": "number", "minimum": 0},
        "transport": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "endpoints": {"type": "array", "items": {"type": "string"}},
                "wide": {"type": "boolean"},
                "timeout": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sigmas": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "trials": _pos_int,
                "noise_seed": {"type": "integer", "minimum": 0},
                "topk": _pos_int,
                "relative": {"type": "boolean"},
            },
        },
    },
}

_DATASET_PARAMS = {
    "spiral": {"n_train": 1500, "n_test": 1500, "classes": 3, "noise_std": 0.2, "seed": 7},
    "blobs": {"n_train": 600, "n_test": 600, "classes": 3, "noise_std": 1.0, "seed": 0, "dim": 2},
    "idx": {"normalize": True},
}
_DATASET_REQUIRED = {"idx": ("train_images", "train_labels", "test_images", "test_labels")}


@dataclass(frozen=True)
class MemberConfig:
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd_nesterov"
    lr: float = 0.1
    momentum: float = 0.9
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    def new_state(self, weight_decay: float = 0.0) -> OptimizerState:
        return OptimizerState(
            kind=self.kind,
            lr=self.lr,
            momentum=self.momentum,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=weight_decay,
        )


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "spiral"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DistillConfig:
    teacher_ckpt: str = ""
    temperature: float = 1.0


@dataclass(frozen=True)
class TransportConfig:
    endpoints: tuple[str, ...] = ()
    wide: bool = False
    timeout: float = 30.0


@dataclass(frozen=True)
class AnalysisConfig:
    sigmas: tuple[float, ...] = (0.0, 0.01, 0.02, 0.05, 0.1)
    trials: int = 100
    noise_seed: int = 0
    topk: int = 3
    relative: bool = False


@dataclass(frozen=True)
class CohortConfig:
    """Everything the trainer needs, independent of where data comes from."""

    mode: str = "independent"
    members: tuple[MemberConfig, ...] = (MemberConfig(),)
    optimizer: OptimizerConfig = OptimizerConfig()
    schedule: Schedule = Schedule()
    batch_size: int = 64
    epochs: int = 200
    reduction: str = "mean"
    data_seed: int = 0
    aggregation: str = "logit_mean"
    distill: DistillConfig | None = None
    variant: str = "round_robin"
    weight_decay: float = 0.0

    @property
    def k(self) -> int:
        return len(self.members)

    def member_specs(self, input_dim: int, num_classes: int) -> list[MlpSpec]:
        return [MlpSpec(input_dim, m.hidden, num_classes, m.seed) for m in self.members]

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown mode {self.mode!r}")
        if self.k < 1:
            raise ConfigError("members: at least one member is required")
        if self.mode in ("dml", "dml_e") and self.k < 2:
            raise ConfigError(f"members: mode {self.mode!r} needs at least 2 members, got {self.k}")
        if self.k >= 2:
            seeds = [m.seed for m in self.members]
            dup = sorted({s for s in seeds if seeds.count(s) > 1})
            if dup:
                raise ConfigError(f"members: init seeds must be pairwise distinct, duplicated seeds {dup}")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.mode == "distill" and (self.distill is None or not self.distill.teacher_ckpt):
            raise ConfigError("distill.teacher_ckpt: required in distill mode")

    def with_seed_offset(self, offset: int, stride: int = 1000) -> "CohortConfig":
        """Same experiment with member and data seeds shifted by ``offset``."""
        members = tuple(replace(m, seed=m.seed + stride * offset) for m in self.members)
        return replace(self, members=members, data_seed=self.data_seed + offset)


@dataclass(frozen=True)
class ExperimentConfig(CohortConfig):
    dataset: DatasetConfig = DatasetConfig()
    out_dir: str = "runs"
    transport: TransportConfig = TransportConfig()
    analysis: AnalysisConfig = AnalysisConfig()

    def to_dict(self) -> dict:
        """Canonical JSON form with every default filled in."""
        d = {
            "mode": self.mode,
            "members": [{"hidden": list(m.hidden), "seed": m.seed} for m in self.members],
            "optimizer": asdict(self.optimizer),
            "schedule": asdict(self.schedule),
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "reduction": self.reduction,
            "dataset": {"kind": self.dataset.kind, "params": dict(self.dataset.params)},
            "dml_e": {"aggregation": self.aggregation},
            "data_seed": self.data_seed,
            "out_dir": self.out_dir,
            "variant": self.variant,
            "weight_decay": self.weight_decay,
            "transport": {
                "endpoints": list(self.transport.endpoints),
                "wide": self.transport.wide,
                "timeout": self.transport.timeout,
            },
            "analysis": {
                "sigmas": list(self.analysis.sigmas),
                "trials": self.analysis.trials,
                "noise_seed": self.analysis.noise_seed,
                "topk": self.analysis.topk,
                "relative": self.analysis.relative,
            },
        }
        if self.distill is not None:
            d["distill"] = asdict(self.distill)
        return d


def _check_schema(raw: Any) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {err.message}")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config document and fill defaults."""
    _check_schema(raw)
    opt_raw = dict(raw.get("optimizer", {}))
    kind = opt_raw.get("kind", "sgd_nesterov")
    opt_defaults = {"lr": 0.1} if kind == "sgd_nesterov" else {"lr": 0.0002}
    optimizer = OptimizerConfig(**{**opt_defaults, **opt_raw})

    ds_raw = raw["dataset"]
    kind_ds = ds_raw["kind"]
    params = {**_DATASET_PARAMS[kind_ds], **ds_raw.get("params", {})}
    for key in _DATASET_REQUIRED.get(kind_ds, ()):
        if key not in params:
            raise ConfigError(f"dataset.params.{key}: required for dataset kind {kind_ds!r}")
    unknown = set(params) - set(_DATASET_PARAMS[kind_ds]) - set(_DATASET_REQUIRED.get(kind_ds, ())) - {"classes"}
    if unknown:
        raise ConfigError(f"dataset.params.{sorted(unknown)[0]}: unknown key for dataset kind {kind_ds!r}")

    distill = DistillConfig(**raw["distill"]) if "distill" in raw else None
    tr = raw.get("transport", {})
    an = raw.get("analysis", {})
    cfg = ExperimentConfig(
        mode=raw["mode"],
        members=tuple(MemberConfig(tuple(m.get("hidden", (64, 64))), m["seed"]) for m in raw["members"]),
        optimizer=optimizer,
        schedule=Schedule(**raw.get("schedule", {})),
        batch_size=raw.get("batch_size", 64),
        epochs=raw.get("epochs", 200),
        reduction=raw.get("reduction", "mean"),
        data_seed=raw.get("data_seed", 0),
        aggregation=raw.get("dml_e", {}).get("aggregation", "logit_mean"),
        distill=distill,
        variant=raw.get("variant", "round_robin"),
        weight_decay=raw.get("weight_decay", 0.0),
        dataset=DatasetConfig(kind_ds, params),
        out_dir=raw.get("out_dir", "runs"),
        transport=TransportConfig(tuple(tr.get("endpoints", ())), tr.get("wide", False), tr.get("timeout", 30.0)),
        analysis=AnalysisConfig(
            tuple(an.get("sigmas", AnalysisConfig.sigmas)),
            an.get("trials", 100),
            an.get("noise_seed", 0),
            an.get("topk", 3),
            an.get("relative", False),
        ),
    )
    cfg.validate()
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible.

    Keys must name properties the schema knows about; list elements are
    addressed by index and must already exist.
    """
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.split(".")
        node, schema = raw, CONFIG_SCHEMA
        for i, part in enumerate(parts):
            last = i == len(parts) - 1
            where = ".".join(parts[: i + 1])
            if isinstance(node, list):
                if not part.isdigit() or int(part) >= len(node):
                    raise ConfigError(f"{where}: no such list element")
                idx = int(part)
                schema = schema.get("items", {})
                if last:
                    node[idx] = _parse_value(text)
                else:
                    node = node[idx]
                continue
            props = schema.get("properties")
            if props is not None and part not in props:
                raise ConfigError(f"{where}: unknown configuration key")
            schema = props[part] if props is not None else {}
            if last:
                node[part] = _parse_value(text)
            else:
                node = node.setdefault(part, [] if schema.get("type") == "array" else {})
    return raw


def load_config(path, overrides=None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(apply_overrides(raw, overrides))


def config_hash(cfg: ExperimentConfig) -> bytes:
    """SHA-256 of the canonical config, ignoring per-worker output paths."""
    d = cfg.to_dict()
    d.pop("out_dir", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()
