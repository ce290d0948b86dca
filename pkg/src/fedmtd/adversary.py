"""Internal poisoning attacks on federation clients.

Three attacks, each applied identically on every compromised client:

* label flipping: every detector verdict on the client's reward path is inverted;
* sample poisoning: Gaussian noise added to every fingerprint the client trains on;
* model poisoning: Gaussian noise added to the local weights before upload.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .agent import ClientHooks
from .anomaly import AdModel, Label, Verdict, feature_stds
from .environment import Fingerprint
from .errors import ConfigurationError
from .numkit import MlpModel

log = logging.getLogger(__name__)


class AttackKind(str, enum.Enum):
    NONE = "none"
    LABEL_FLIPPING = "label_flipping"
    SAMPLE_POISONING = "sample_poisoning"
    MODEL_POISONING = "model_poisoning"


@dataclass
class AdversaryConfig:
    kind: AttackKind = AttackKind.NONE
    pnr: float = 0.0
    seed: int = 0
    noise_ratio: float = 0.5

    def __post_init__(self):
        self.kind = AttackKind(self.kind)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.pnr <= 1.0:
            raise ConfigurationError(f"pnr must lie in [0, 1], got {self.pnr}")
        if self.noise_ratio < 0:
            raise ConfigurationError("noise_ratio must be >= 0")

    @property
    def active(self) -> bool:
        return self.kind is not AttackKind.NONE and self.pnr > 0


def n_poisoned(num_clients: int, pnr: float) -> int:
    # half-up rounding; a small tolerance absorbs products like 0.7 * 10 = 7.000000000000001
    return min(num_clients, int(math.floor(pnr * num_clients + 0.5 + 1e-9)))


def select_poisoned(num_clients: int, pnr: float, seed: int) -> frozenset[int]:
    if not 0.0 <= pnr <= 1.0:
        raise ConfigurationError(f"pnr must lie in [0, 1], got {pnr}")
    k = n_poisoned(num_clients, pnr)
    rng = np.random.default_rng(seed)
    return frozenset(int(i) for i in rng.choice(num_clients, size=k, replace=False))


def flip_verdict(v: Verdict) -> Verdict:
    return Verdict(Label.ABNORMAL if v.label is Label.NORMAL else Label.NORMAL, v.mse)


def poison_sample(f: Fingerprint, stds: np.ndarray, noise_ratio: float, rng: np.random.Generator) -> Fingerprint:
    if noise_ratio == 0:
        return f
    noise = rng.normal(0.0, 1.0, size=f.values.size) * (noise_ratio * np.asarray(stds))
    return Fingerprint(f.values + noise, f.true_class)


def poison_flat(flat: np.ndarray, noise_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Add ``N(0, noise_ratio * std(flat))`` to every parameter."""
    if noise_ratio == 0:
        return flat.copy()
    sigma = float(np.std(flat))
    if sigma == 0.0:
        log.warning("parameter std is 0; model poisoning falls back to absolute noise std %g", noise_ratio)
        scale = noise_ratio
    else:
        scale = noise_ratio * sigma
    return flat + rng.normal(0.0, scale, size=flat.size)


def poison_model(m: MlpModel, noise_ratio: float, rng: np.random.Generator) -> MlpModel:
    return MlpModel(m.specs, poison_flat(m.params, noise_ratio, rng))


@dataclass
class ClientAttack:
    """What the adversary does to one compromised client."""

    hooks: ClientHooks
    upload: Optional[Callable[[np.ndarray], np.ndarray]] = None


def client_attack(cfg: AdversaryConfig, ad: AdModel, rng: np.random.Generator) -> ClientAttack:
    """Hooks for a poisoned client. ``rng`` is a stream dedicated to the attack."""
    if cfg.kind is AttackKind.LABEL_FLIPPING:
        return ClientAttack(ClientHooks(verdict=flip_verdict))
    if cfg.kind is AttackKind.SAMPLE_POISONING:
        stds = feature_stds(ad)
        return ClientAttack(ClientHooks(sample=lambda f: poison_sample(f, stds, cfg.noise_ratio, rng)))
    if cfg.kind is AttackKind.MODEL_POISONING:
        return ClientAttack(ClientHooks(), upload=lambda flat: poison_flat(flat, cfg.noise_ratio, rng))
    return ClientAttack(ClientHooks())
