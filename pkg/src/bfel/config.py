"""Experiment configuration: YAML files validated against a JSON schema.

Every field has a default, so ``{}`` is a valid config; defaults follow the
published experimental setup where it states a value (learning rate 0.001,
1000 epochs, batch 128, theta 0.05, 10 workers and 11 miners per training
subchain, 2 task publishers). The ``desk`` preset scales this down for the
acceptance suite.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .adversary import AttackConfig, DIRECTIVES, POISON_MODES
from .compression import CompressionConfig
from .errors import ConfigurationError
from .netsim import CostModel

SCENARIOS = ("fel", "fel-gcs", "bfel-gcs")
PAPER_RHO_VALUES = (0.1, 0.2, 0.3, 0.5, 0.9, 1, 100)

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer"}
_posint = {"type": "integer", "minimum": 1}
_frac = {"type": "number", "minimum": 0, "maximum": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "BFEL experiment configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "scenario": {"enum": list(SCENARIOS)},
        "rounds": {"type": ["integer", "null"], "minimum": 1},
        "federation": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "tasks": _posint,
                "workers_per_task": _posint,
                "miners_per_task": {"type": "integer", "minimum": 2},
                "standby_miners": {"type": "integer", "minimum": 0},
                "buyers": {"type": "integer", "minimum": 0},
                "deposit": {"type": "integer", "minimum": 0},
                "min_deposit": {"type": "integer", "minimum": 0},
                "anchor_period": _posint,
                "slash_after": _posint,
                "retry_failed_round": {"type": "boolean"},
                "trade_price": {"type": "integer", "minimum": 0},
            },
        },
        "training": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "learning_rate": _pos,
                "batch_size": _posint,
                "epochs": _posint,
                "model": {
                    "type": "object", "additionalProperties": False,
                    "properties": {"kind": {"enum": ["mlp", "logistic"]}, "hidden": _posint},
                },
                "dataset": {
                    "type": "object", "additionalProperties": False,
                    "properties": {
                        "source": {"enum": ["synthetic", "csv", "mnist", "auto"]},
                        "path": {"type": ["string", "null"]},
                        "samples": _posint,
                        "dim": _posint,
                        "num_classes": {"type": "integer", "minimum": 2},
                        "separation": _pos,
                        "noise": _pos,
                        "train_fraction": {"type": "number", "exclusiveMinimum": 0,
                                           "exclusiveMaximum": 1},
                    },
                },
            },
        },
        "compression": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "rho": {"type": "number", "exclusiveMinimum": 0, "maximum": 100},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "clip_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "policy": {
            "type": "object", "additionalProperties": False,
            "properties": {"theta": _frac},
        },
        "cost_model": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "bytes_per_ms": _pos,
                "base_latency_ms": {"type": "number", "minimum": 0},
                "consensus_delay_ms": {"type": "integer", "minimum": 0},
                "jitter_ms": {"type": "number", "minimum": 0},
            },
        },
        "attack": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "poison_fraction": _frac,
                "poison_mode": {"enum": list(POISON_MODES)},
                "poison_scale": _pos,
                "noise_sigma": {"type": "number", "minimum": 0},
                "start_round": _posint,
                "byzantine_fraction": _frac,
                "byzantine_directive": {"enum": list(DIRECTIVES)},
                "seed": {"type": ["integer", "null"], "minimum": 0},
                "fault_script": {"type": ["string", "object", "null"]},
            },
        },
    },
}


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "auto"  # auto: MNIST when ``path`` holds IDX files, else synthetic
    path: str | None = None
    samples: int = 10_000
    dim: int = 100
    num_classes: int = 10
    separation: float = 3.0
    noise: float = 1.0
    train_fraction: float = 0.7


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 1000
    model_kind: str = "mlp"
    hidden: int = 64
    dataset: DatasetConfig = field(default_factory=DatasetConfig)


@dataclass(frozen=True)
class FederationConfig:
    tasks: int = 2
    workers_per_task: int = 10
    miners_per_task: int = 11
    standby_miners: int = 0
    buyers: int = 1
    deposit: int = 100
    min_deposit: int = 100
    anchor_period: int = 5
    slash_after: int = 3
    retry_failed_round: bool = True
    trade_price: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    scenario: str = "bfel-gcs"
    rounds: int | None = None  # overrides epochs * batches-per-epoch when set
    federation: FederationConfig = field(default_factory=FederationConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    theta: float = 0.05
    cost_model: CostModel = field(default_factory=CostModel)
    attack: AttackConfig = field(default_factory=AttackConfig)
    fault_script: dict | str | None = None
    source_dict: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def attack_seed(self) -> int:
        return self.seed if self.attack.seed is None else self.attack.seed

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``{"compression.rho": 1}``."""
        doc = copy.deepcopy(self.source_dict)
        for key, value in dotted.items():
            set_path(doc, key, value)
        return from_dict(doc)


PARAM_ALIASES = {
    "rho": "compression.rho", "momentum": "compression.momentum",
    "clip_norm": "compression.clip_norm", "theta": "policy.theta",
    "lr": "training.learning_rate", "learning_rate": "training.learning_rate",
    "epochs": "training.epochs", "batch_size": "training.batch_size",
    "poison_fraction": "attack.poison_fraction",
    "byzantine_fraction": "attack.byzantine_fraction",
}


def set_path(doc: dict, dotted: str, value) -> None:
    dotted = PARAM_ALIASES.get(dotted, dotted)
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot address {dotted!r} in config")
    node[parts[-1]] = value


_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


def validate(doc: dict) -> None:
    exc = jsonschema.exceptions.best_match(_VALIDATOR.iter_errors(doc))
    if exc is not None:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config error at {where}: {exc.message}")


def _pick(cls, section: dict, rename: dict | None = None, **extra):
    rename = rename or {}
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in section.items():
        key = rename.get(key, key)
        if key in names:
            kwargs[key] = value
    kwargs.update(extra)
    return cls(**kwargs)


def from_dict(doc: dict | None) -> ExperimentConfig:
    doc = copy.deepcopy(doc or {})
    validate(doc)
    tr = doc.get("training", {})
    model = tr.get("model", {})
    training = _pick(TrainingConfig, {k: v for k, v in tr.items() if k not in ("model", "dataset")},
                     model_kind=model.get("kind", "mlp"), hidden=model.get("hidden", 64),
                     dataset=_pick(DatasetConfig, tr.get("dataset", {})))
    comp = doc.get("compression", {})
    compression = CompressionConfig(comp.get("rho", 0.3), comp.get("momentum", 0.9),
                                    comp.get("clip_norm", 1.0))
    att = dict(doc.get("attack", {}))
    fault = att.pop("fault_script", None)
    return ExperimentConfig(
        name=doc.get("name", "experiment"),
        seed=doc.get("seed", 0),
        scenario=doc.get("scenario", "bfel-gcs"),
        rounds=doc.get("rounds"),
        federation=_pick(FederationConfig, doc.get("federation", {})),
        training=training,
        compression=compression,
        theta=doc.get("policy", {}).get("theta", 0.05),
        cost_model=_pick(CostModel, doc.get("cost_model", {})),
        attack=_pick(AttackConfig, att),
        fault_script=fault,
        source_dict=doc,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigurationError("config file must hold a mapping")
    return from_dict(doc)


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("bfel.presets").iterdir()
                  if p.name.endswith(".yaml"))


def preset(name: str) -> ExperimentConfig:
    ref = resources.files("bfel.presets") / f"{name}.yaml"
    if not ref.is_file():
        raise ConfigurationError(f"unknown preset {name!r}; have {preset_names()}")
    return from_dict(yaml.safe_load(ref.read_text()) or {})


def resolve(spec: str) -> ExperimentConfig:
    """A config file path, or ``preset:<name>``."""
    if spec.startswith("preset:"):
        return preset(spec.split(":", 1)[1])
    return load_config(spec)
