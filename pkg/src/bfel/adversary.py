"""Attack injection: poisoned workers, Byzantine verifier scripts, exposure metric.

``exposure_ratio`` is a proxy for inference-attack surface (the share of
gradient coordinates an eavesdropper ever sees). No gradient-inversion
attack is performed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .compression import SparseGradient
from .errors import ConfigurationError, InputError

POISON_MODES = ("sign-flip", "gaussian-noise", "label-flip")
DIRECTIVES = ("honest", "invert-verdicts", "withhold", "equivocate")


@dataclass(frozen=True)
class AttackConfig:
    poison_fraction: float = 0.0
    poison_mode: str = "sign-flip"
    poison_scale: float = 1.0  # sign-flip sends -scale * g
    noise_sigma: float = 0.0
    start_round: int = 1  # poisoners behave honestly before this round
    byzantine_fraction: float = 0.0
    byzantine_directive: str = "invert-verdicts"
    seed: int | None = None  # defaults to the experiment seed

    def __post_init__(self):
        for name in ("poison_fraction", "byzantine_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.poison_mode not in POISON_MODES:
            raise ConfigurationError(f"unknown poison mode {self.poison_mode!r}")
        if self.byzantine_directive not in DIRECTIVES:
            raise ConfigurationError(f"unknown directive {self.byzantine_directive!r}")
        if self.noise_sigma < 0 or self.poison_scale <= 0 or self.start_round < 1:
            raise ConfigurationError("noise_sigma >= 0, poison_scale > 0, start_round >= 1")


def pick_nodes(node_ids: Sequence[str], fraction: float, seed: int, salt: int) -> list[str]:
    """floor(fraction * n) identities drawn by the seeded generator, sorted."""
    count = int(math.floor(fraction * len(node_ids) + 1e-9))
    if count == 0:
        return []
    rng = np.random.default_rng([seed, salt])
    chosen = rng.choice(len(node_ids), size=count, replace=False)
    return sorted(node_ids[i] for i in chosen)


def poison_gradient(g: np.ndarray, mode: str, seed: int = 0, sigma: float = 0.0,
                    scale: float = 1.0) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if mode == "sign-flip":
        return -scale * g
    if mode == "gaussian-noise":
        if sigma == 0:
            return g.copy()
        return g + np.random.default_rng(seed).normal(0.0, sigma, size=g.shape)
    if mode == "label-flip":
        # applied to the worker's data, not to its gradient
        return g.copy()
    raise ConfigurationError(f"unknown poison mode {mode!r}")


def poison_update(update: SparseGradient, cfg: AttackConfig, seed: int) -> SparseGradient:
    """Poison an outgoing sparse update (the attacker controls its own transmission)."""
    if cfg.poison_mode == "sign-flip":
        return SparseGradient(update.indices, -cfg.poison_scale * update.values,
                              update.dim, update.round)
    dense = poison_gradient(update.to_dense(), cfg.poison_mode, seed, cfg.noise_sigma,
                            cfg.poison_scale)
    return SparseGradient.from_dense(dense, update.round)


def exposure_ratio(updates: Sequence[SparseGradient], dim: int, rounds: int | None = None) -> float:
    """Transmitted entries over dim * rounds, in [0, 1].

    ``rounds`` follows the same convention as ``compression_ratio``.
    """
    updates = list(updates)
    if not updates:
        raise InputError("exposure of an empty update set")
    rounds = len(updates) if rounds is None else rounds
    if rounds < 1:
        raise InputError("rounds must be >= 1")
    return sum(len(u) for u in updates) / (dim * rounds)


# -- Byzantine fault scripts ------------------------------------------------------

@dataclass(frozen=True)
class FaultRule:
    miner: str
    directive: str
    first_round: int = 1
    last_round: int | None = None

    def applies(self, miner: str, round: int) -> bool:
        return (miner == self.miner and round >= self.first_round
                and (self.last_round is None or round <= self.last_round))


class FaultScript:
    """Per-round, per-miner directives; later rules override earlier ones.

    File format (YAML)::

        default: honest
        rules:
          - {miner: t1.m03, directive: invert-verdicts}
          - {miner: t1.m05, directive: withhold, rounds: [10, 20]}
    """

    def __init__(self, rules: Sequence[FaultRule] = (), default: str = "honest"):
        if default not in DIRECTIVES:
            raise ConfigurationError(f"unknown directive {default!r}")
        for r in rules:
            if r.directive not in DIRECTIVES:
                raise ConfigurationError(f"unknown directive {r.directive!r}")
        self.rules = list(rules)
        self.default = default

    def directive(self, miner: str, round: int) -> str:
        out = self.default
        for r in self.rules:
            if r.applies(miner, round):
                out = r.directive
        return out

    def byzantine(self) -> set[str]:
        return {r.miner for r in self.rules if r.directive != "honest"}

    @classmethod
    def from_dict(cls, doc: dict) -> "FaultScript":
        rules = []
        for entry in doc.get("rules", []) or []:
            first, last = 1, None
            if "rounds" in entry:
                first, last = entry["rounds"]
            rules.append(FaultRule(entry["miner"], entry["directive"], int(first),
                                   None if last is None else int(last)))
        return cls(rules, doc.get("default", "honest"))

    @classmethod
    def load(cls, path) -> "FaultScript":
        doc = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigurationError("fault script must be a mapping")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        rules = []
        for r in self.rules:
            entry = {"miner": r.miner, "directive": r.directive}
            if r.first_round != 1 or r.last_round is not None:
                entry["rounds"] = [r.first_round, r.last_round]
            rules.append(entry)
        return {"default": self.default, "rules": rules}
