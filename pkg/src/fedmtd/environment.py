"""Synthetic device environment.

Behaviour classes are Gaussian clouds in fingerprint space. Each malware
mean sits at ``normal_mean + family_direction * family_offset_magnitude +
perturbation`` with the family directions and per-malware perturbations
mutually orthogonal, so siblings inside a family are always closer to each
other than to any other family. MTD actions move an infected device to an
afterstate class according to the ground-truth effectiveness table.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigurationError, DomainError, ParseError


class Family(str, enum.Enum):
    CNC = "cnc"
    ROOTKIT = "rootkit"
    RANSOMWARE = "ransomware"


class BehaviorClass(str, enum.Enum):
    NORMAL = "normal"
    THE_TICK = "the_tick"
    JAKORITAR = "jakoritar"
    DATALEAK = "dataleak"
    BEURK = "beurk"
    BDVL = "bdvl"
    RANSOMWARE_POC = "ransomware_poc"

    @property
    def family(self) -> Family | None:
        return _FAMILY.get(self)

    @property
    def is_malware(self) -> bool:
        return self is not BehaviorClass.NORMAL


class MtdAction(enum.IntEnum):
    IP_SHUFFLING = 0
    RANSOMWARE_TRAP = 1
    FILE_RANDOMIZATION = 2
    LIBRARY_SANITATION = 3


MALWARE = tuple(b for b in BehaviorClass if b.is_malware)
ACTIONS = tuple(MtdAction)

_FAMILY = {
    BehaviorClass.THE_TICK: Family.CNC,
    BehaviorClass.JAKORITAR: Family.CNC,
    BehaviorClass.DATALEAK: Family.CNC,
    BehaviorClass.BEURK: Family.ROOTKIT,
    BehaviorClass.BDVL: Family.ROOTKIT,
    BehaviorClass.RANSOMWARE_POC: Family.RANSOMWARE,
}

_EFFECTIVE = {
    Family.CNC: frozenset({MtdAction.IP_SHUFFLING}),
    Family.ROOTKIT: frozenset({MtdAction.LIBRARY_SANITATION}),
    Family.RANSOMWARE: frozenset({MtdAction.RANSOMWARE_TRAP, MtdAction.FILE_RANDOMIZATION}),
}


def family_members(family: Family) -> tuple[BehaviorClass, ...]:
    return tuple(m for m in MALWARE if m.family is family)


def effective_set(malware: BehaviorClass) -> frozenset[MtdAction]:
    """MTD techniques that mitigate ``malware``."""
    malware = BehaviorClass(malware)
    if not malware.is_malware:
        raise DomainError("Normal behaviour has no mitigating MTD")
    return _EFFECTIVE[malware.family]


def effective_mask(malware: BehaviorClass) -> np.ndarray:
    mask = np.zeros(len(ACTIONS), dtype=bool)
    mask[[int(a) for a in effective_set(malware)]] = True
    return mask


@dataclass
class EnvConfig:
    """Geometry of the synthetic fingerprint space.

    Magnitudes are Euclidean norms in raw feature units. With the defaults a
    malware mean lies about 9.4 units from the Normal mean, i.e. roughly two
    noise standard deviations per coordinate at 85 features.
    """

    feature_dim: int = 85
    family_offset_magnitude: float = 7.0
    within_family_spread: float = 6.3
    noise_scale: float = 0.5
    base_scale: float = 1.0
    confusability: dict = field(default_factory=dict)

    def __post_init__(self):
        self.confusability = {BehaviorClass(k): float(v) for k, v in dict(self.confusability).items()}
        self.validate()

    def validate(self) -> None:
        if self.feature_dim <= 0:
            raise ConfigurationError("feature_dim must be positive")
        if self.family_offset_magnitude <= 0:
            raise ConfigurationError("family_offset_magnitude must be > 0")
        if self.noise_scale <= 0:
            raise ConfigurationError("noise_scale must be > 0")
        if not 0 <= self.within_family_spread < self.family_offset_magnitude:
            raise ConfigurationError("within_family_spread must lie in [0, family_offset_magnitude)")
        for k, v in self.confusability.items():
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"confusability of {k.value} must be in [0, 1]")

    def confusability_of(self, b: BehaviorClass) -> float:
        return self.confusability.get(b, 0.0)


@dataclass
class ProfileSet:
    means: dict[BehaviorClass, np.ndarray]
    sigmas: dict[BehaviorClass, float]

    @property
    def feature_dim(self) -> int:
        return next(iter(self.means.values())).size

    def mean(self, b: BehaviorClass) -> np.ndarray:
        return self.means[BehaviorClass(b)]

    def sigma(self, b: BehaviorClass) -> float:
        return self.sigmas[BehaviorClass(b)]

    def distance(self, a: BehaviorClass, b: BehaviorClass) -> float:
        return float(np.linalg.norm(self.mean(a) - self.mean(b)))

    def save(self, path) -> None:
        """Tab-separated text: ``class  sigma  mean_0 ... mean_{d-1}`` with a header row."""
        d = self.feature_dim
        lines = ["class\tsigma\t" + "\t".join(f"f{i}" for i in range(d))]
        for b in BehaviorClass:
            vals = "\t".join(repr(float(x)) for x in self.means[b])
            lines.append(f"{b.value}\t{self.sigmas[b]!r}\t{vals}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ProfileSet":
        text = Path(path).read_text().splitlines()
        if not text or not text[0].startswith("class\tsigma"):
            raise ParseError("missing ProfileSet header", line=1)
        d = len(text[0].split("\t")) - 2
        means, sigmas = {}, {}
        for lineno, line in enumerate(text[1:], start=2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != d + 2:
                raise ParseError(f"expected {d + 2} fields, got {len(parts)}", line=lineno)
            try:
                b = BehaviorClass(parts[0])
                sigmas[b] = float(parts[1])
                means[b] = np.array([float(x) for x in parts[2:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
        missing = set(BehaviorClass) - set(means)
        if missing:
            raise ParseError(f"classes missing: {sorted(m.value for m in missing)}")
        return cls(means, sigmas)


def build_profiles(cfg: EnvConfig, seed: int) -> ProfileSet:
    cfg.validate()
    rng = np.random.default_rng(seed)
    d = cfg.feature_dim
    normal = rng.normal(0.0, cfg.base_scale, size=d)
    n_dirs = len(Family) + len(MALWARE)
    for _ in range(100):
        if d >= n_dirs:
            # orthonormal columns: 3 family directions then 6 perturbation directions
            q, _ = np.linalg.qr(rng.normal(size=(d, n_dirs)))
            dirs = q.T
        else:
            raw = rng.normal(size=(n_dirs, d))
            dirs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        fam_dir = {f: dirs[i] for i, f in enumerate(Family)}
        means = {BehaviorClass.NORMAL: normal.copy()}
        for j, m in enumerate(MALWARE):
            means[m] = (normal + fam_dir[m.family] * cfg.family_offset_magnitude
                        + dirs[len(Family) + j] * cfg.within_family_spread)
        profiles = ProfileSet(means, {b: cfg.noise_scale for b in BehaviorClass})
        if _geometry_ok(profiles, cfg):
            return profiles
    raise ConfigurationError("could not build a profile set with separable, family-clustered means")


def _geometry_ok(p: ProfileSet, cfg: EnvConfig) -> bool:
    if min(p.distance(m, BehaviorClass.NORMAL) for m in MALWARE) < 6 * cfg.noise_scale:
        return False
    for a in MALWARE:
        for b in MALWARE:
            if a is b or a.family is not b.family:
                continue
            within = p.distance(a, b)
            cross = min(p.distance(a, c) for c in MALWARE if c.family is not a.family)
            if within >= cross:
                return False
    return True


@dataclass
class Fingerprint:
    values: np.ndarray
    true_class: BehaviorClass


def sample_fingerprint(profiles: ProfileSet, b: BehaviorClass, rng: np.random.Generator) -> Fingerprint:
    b = BehaviorClass(b)
    mean = profiles.means[b]
    values = mean + rng.normal(0.0, profiles.sigmas[b], size=mean.size)
    return Fingerprint(values, b)


def sample_many(profiles: ProfileSet, b: BehaviorClass, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` fingerprint vectors of class ``b`` as an ``(n, feature_dim)`` array."""
    b = BehaviorClass(b)
    mean = profiles.means[b]
    return mean + rng.normal(0.0, profiles.sigmas[b], size=(n, mean.size))


def afterstate(m: BehaviorClass, a: MtdAction, cfg: EnvConfig, rng: np.random.Generator) -> BehaviorClass:
    """Behaviour class after deploying MTD ``a`` on a device infected by ``m``."""
    m = BehaviorClass(m)
    if not m.is_malware:
        raise DomainError("afterstate is only defined for infected devices")
    if MtdAction(a) in effective_set(m):
        return BehaviorClass.NORMAL
    c = cfg.confusability_of(m)
    if c > 0.0 and rng.random() < c:
        return BehaviorClass.NORMAL
    return m


def spawn_attack(allowed: Iterable[BehaviorClass], rng: np.random.Generator) -> BehaviorClass:
    pool = sorted({BehaviorClass(b) for b in allowed}, key=MALWARE.index)
    if not pool:
        raise ConfigurationError("no malware allowed on this client")
    if BehaviorClass.NORMAL in pool:
        raise ConfigurationError("Normal is not an attack")
    return pool[int(rng.integers(len(pool)))]


def child_seed(master_seed: int, client_id: int, stream: str = "") -> int:
    """Stable 63-bit seed for one client's independent random stream."""
    h = hashlib.sha256(f"{int(master_seed)}:{int(client_id)}:{stream}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass
class Environment:
    """An ``EnvConfig`` together with the profile set built from it."""

    cfg: EnvConfig
    profiles: ProfileSet

    @classmethod
    def build(cls, cfg: EnvConfig, seed: int) -> "Environment":
        return cls(cfg, build_profiles(cfg, seed))

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def sample(self, b: BehaviorClass, rng: np.random.Generator) -> Fingerprint:
        return sample_fingerprint(self.profiles, b, rng)

    def sample_many(self, b: BehaviorClass, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_many(self.profiles, b, n, rng)

    def afterstate(self, m: BehaviorClass, a: MtdAction, rng: np.random.Generator) -> BehaviorClass:
        return afterstate(m, a, self.cfg, rng)


def class_counts(draws: Iterable[BehaviorClass]) -> Mapping[BehaviorClass, int]:
    out = {m: 0 for m in MALWARE}
    for d in draws:
        out[d] += 1
    return out


def min_separation(profiles: ProfileSet) -> float:
    """Smallest malware-to-Normal mean distance in units of the Normal noise scale."""
    sigma = profiles.sigma(BehaviorClass.NORMAL)
    return min(profiles.distance(m, BehaviorClass.NORMAL) for m in MALWARE) / sigma if sigma else math.inf
