"""Autoencoder anomaly detector used as the reward oracle.

One detector per client, trained on that client's normal fingerprints only.
A fingerprint is Abnormal when its mean squared reconstruction error exceeds
``mean + n_std * std`` of the errors on held-out normal data.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import textio
from .environment import Fingerprint
from .errors import ConfigurationError, ShapeError, TrainingError
from .numkit import (
    Activation,
    AdamState,
    LayerSpec,
    MlpModel,
    activate,
    activation_derivative,
    adam_step,
    mlp_init,
)

log = logging.getLogger(__name__)

BN_EPS = 1e-5


class Label(str, enum.Enum):
    NORMAL = "normal"
    ABNORMAL = "abnormal"


@dataclass(frozen=True)
class Verdict:
    label: Label
    mse: float

    @property
    def is_normal(self) -> bool:
        return self.label is Label.NORMAL


@dataclass
class AdHyper:
    encoder_dims: tuple = (64, 32)
    activation: Activation = Activation.GELU
    batch_norm: bool = True
    learning_rate: float = 1e-4
    l2: float = 1e-2
    batch_size: int = 32
    early_stop_patience: int = 5
    n_std: float = 2.0
    max_epochs: int = 100
    bn_momentum: float = 0.9
    train_fraction: float = 0.8

    def __post_init__(self):
        self.encoder_dims = tuple(int(d) for d in self.encoder_dims)
        self.activation = Activation(self.activation)
        self.validate()

    def validate(self) -> None:
        dims = self.encoder_dims
        if not dims or any(d <= 0 for d in dims):
            raise ConfigurationError("encoder_dims must be positive")
        if any(a <= b for a, b in zip(dims, dims[1:])):
            raise ConfigurationError("encoder_dims must be strictly decreasing")
        if self.n_std < 0:
            raise ConfigurationError("n_std must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("max_epochs and early_stop_patience must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("train_fraction must lie in (0, 1)")

    def layer_specs(self, feature_dim: int) -> list[LayerSpec]:
        dims = [feature_dim, *self.encoder_dims, *reversed(self.encoder_dims[:-1]), feature_dim]
        return [
            LayerSpec(dims[i], dims[i + 1], self.activation if i < len(dims) - 2 else Activation.IDENTITY)
            for i in range(len(dims) - 1)
        ]


@dataclass
class NormStats:
    """Per-feature min/max for scaling plus mean/std of the retained raw samples."""

    minimum: np.ndarray
    maximum: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        span = self.maximum - self.minimum
        # constant features scale by 0 and therefore map to 0
        self._scale = np.divide(1.0, span, out=np.zeros_like(span), where=span > 0)

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = (x - self.minimum) * self._scale
        if not np.isfinite(out).all():
            big = np.finfo(np.float64).max
            out = np.nan_to_num(out, nan=0.0, posinf=big, neginf=-big)
        return out


def as_matrix(samples) -> np.ndarray:
    if isinstance(samples, Fingerprint):
        return samples.values[None, :]
    if isinstance(samples, np.ndarray):
        x = samples.astype(np.float64, copy=False)
    else:
        samples = list(samples)
        if samples and isinstance(samples[0], Fingerprint):
            x = np.stack([f.values for f in samples])
        else:
            x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D sample matrix, got shape {x.shape}")
    return x


def zscore_keep_mask(x: np.ndarray, limit: float = 3.0) -> np.ndarray:
    """Rows whose every feature has ``|z| <= limit`` (population std; constant features never flag)."""
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    z = np.divide(x - mu, sd, out=np.zeros_like(x), where=sd > 0)
    return np.all(np.abs(z) <= limit, axis=1)


def preprocess(samples, stats: NormStats | None = None) -> tuple[np.ndarray, NormStats]:
    """Min-max scale features to [0, 1].

    Without ``stats`` the statistics are fitted: rows with any ``|z| > 3``
    are dropped first and the returned matrix holds the retained rows only.
    With ``stats`` every row is scaled and kept.
    """
    x = as_matrix(samples)
    if stats is not None:
        if x.shape[1] != stats.minimum.size:
            raise ShapeError(f"{x.shape[1]} features, stats cover {stats.minimum.size}")
        return stats.apply(x), stats
    if x.shape[0] == 0:
        raise ConfigurationError("cannot fit normalisation on an empty sample set")
    x = x[zscore_keep_mask(x)]
    lo, hi = x.min(axis=0), x.max(axis=0)
    constant = hi == lo
    if constant.any():
        log.warning("%d constant feature(s) will be mapped to 0", int(constant.sum()))
    stats = NormStats(lo, hi, x.mean(axis=0), x.std(axis=0))
    return stats.apply(x), stats


def threshold_from_mse(mse: np.ndarray, n_std: float) -> float:
    mse = np.asarray(mse, dtype=np.float64)
    if mse.size == 0:
        raise ConfigurationError("threshold needs at least one validation sample")
    std = float(mse.std(ddof=1)) if mse.size > 1 else 0.0
    return float(mse.mean()) + n_std * std


@dataclass
class AdModel:
    autoencoder: MlpModel
    stats: NormStats
    threshold: float
    hyper: AdHyper
    bn_mean: list = field(default_factory=list)
    bn_var: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return self.autoencoder.input_dim

    def reconstruct(self, x_norm: np.ndarray) -> np.ndarray:
        return _ae_forward(self.autoencoder, x_norm, self.hyper.batch_norm, self.bn_mean, self.bn_var)[0]

    def mse(self, samples) -> np.ndarray:
        """Per-sample mean squared reconstruction error of preprocessed samples."""
        x = self.stats.apply(as_matrix(samples))
        r = self.reconstruct(x)
        return np.mean((r - x) ** 2, axis=1)

    def save(self, path) -> None:
        ae = self.autoencoder
        records = {
            "dims": [ae.specs[0].input_dim] + [s.output_dim for s in ae.specs],
            "activation": self.hyper.activation.value,
            "batch_norm": int(self.hyper.batch_norm),
            "n_std": float(self.hyper.n_std),
            "threshold": float(self.threshold),
            "stat_min": self.stats.minimum,
            "stat_max": self.stats.maximum,
            "stat_mean": self.stats.mean,
            "stat_std": self.stats.std,
        }
        for i, (m, v) in enumerate(zip(self.bn_mean, self.bn_var)):
            records[f"bn_mean_{i}"] = m
            records[f"bn_var_{i}"] = v
        records["params"] = ae.params
        textio.write_records(path, "admodel", records)

    @classmethod
    def load(cls, path) -> "AdModel":
        r = textio.read_records(path, "admodel")
        dims = textio.ints(r, "dims")
        d = dims[0]
        enc = tuple(dims[1 : (len(dims) + 1) // 2])
        hyper = AdHyper(
            encoder_dims=enc,
            activation=Activation(textio.scalar(r, "activation", str)),
            batch_norm=bool(textio.scalar(r, "batch_norm", int)),
            n_std=textio.scalar(r, "n_std"),
        )
        specs = hyper.layer_specs(d)
        net = MlpModel(specs, textio.floats(r, "params"))
        n_hidden = len(specs) - 1
        bn_mean = [textio.floats(r, f"bn_mean_{i}") for i in range(n_hidden)] if hyper.batch_norm else []
        bn_var = [textio.floats(r, f"bn_var_{i}") for i in range(n_hidden)] if hyper.batch_norm else []
        stats = NormStats(*(textio.floats(r, k) for k in ("stat_min", "stat_max", "stat_mean", "stat_std")))
        return cls(net, stats, textio.scalar(r, "threshold"), hyper, bn_mean, bn_var)


def _ae_forward(net: MlpModel, x: np.ndarray, batch_norm: bool, bn_mean=None, bn_var=None, train=False):
    """Dense -> [batch norm] -> activation per hidden layer; linear output.

    In training mode batch statistics are used and a cache for the backward
    pass is returned; otherwise the running statistics ``bn_mean``/``bn_var``.
    """
    cache = []
    h = x
    last = len(net.specs) - 1
    for i, (s, w, b) in enumerate(zip(net.specs, net.weights, net.biases)):
        z = h @ w.T + b
        entry = {"x": h, "z": z}
        if i < last and batch_norm:
            if train:
                mu, var = z.mean(axis=0), z.var(axis=0)
            else:
                mu, var = bn_mean[i], bn_var[i]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            zn = (z - mu) * inv
            entry.update(mu=mu, var=var, inv=inv, zn=zn)
        else:
            zn = z
        a = activate(s.activation, zn)
        entry.update(zn=zn, a=a)
        cache.append(entry)
        h = a
    return h, cache


def _ae_backward(net: MlpModel, cache, grad_out: np.ndarray, batch_norm: bool) -> np.ndarray:
    grads = np.empty(net.n_params)
    offsets = []
    off = 0
    for s in net.specs:
        offsets.append(off)
        off += s.n_params
    g = grad_out
    last = len(net.specs) - 1
    for i in range(last, -1, -1):
        s, c = net.specs[i], cache[i]
        dzn = g * activation_derivative(s.activation, c["zn"], c["a"])
        if i < last and batch_norm:
            n = dzn.shape[0]
            zhat = c["zn"]
            dz = (c["inv"] / n) * (n * dzn - dzn.sum(axis=0) - zhat * (dzn * zhat).sum(axis=0))
        else:
            dz = dzn
        nw = s.output_dim * s.input_dim
        o = offsets[i]
        grads[o : o + nw] = (dz.T @ c["x"]).ravel()
        grads[o + nw : o + nw + s.output_dim] = dz.sum(axis=0)
        if i:
            g = dz @ net.weights[i]
    return grads


def _rmse(r: np.ndarray, x: np.ndarray) -> float:
    return math.sqrt(float(np.mean((r - x) ** 2)) + 1e-12)


def train_ad(normal_samples, hyper: AdHyper | None = None, seed: int = 0) -> AdModel:
    """Fit an autoencoder on normal fingerprints and calibrate its threshold.

    The samples are shuffled with ``seed`` and split by ``hyper.train_fraction``;
    the autoencoder trains on the first part (after outlier removal) with
    early stopping on the held-out part, which also calibrates the threshold.
    """
    hyper = hyper or AdHyper()
    x = as_matrix(normal_samples)
    if x.shape[0] < 100:
        raise ConfigurationError(f"need at least 100 normal samples, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(x.shape[0])
    n_train = int(round(hyper.train_fraction * x.shape[0]))
    train_raw, val_raw = x[order[:n_train]], x[order[n_train:]]
    train, stats = preprocess(train_raw)
    val = stats.apply(val_raw)

    specs = hyper.layer_specs(x.shape[1])
    net = mlp_init(specs, int(rng.integers(2**62)))
    # start as the mean predictor so early stopping judges real progress
    net.weights[-1][...] = 0.0
    net.biases[-1][...] = train.mean(axis=0)
    n_hidden = len(specs) - 1
    bn_mean = [np.zeros(s.output_dim) for s in specs[:n_hidden]] if hyper.batch_norm else []
    bn_var = [np.ones(s.output_dim) for s in specs[:n_hidden]] if hyper.batch_norm else []
    opt = AdamState.for_model(net, learning_rate=hyper.learning_rate, l2_coefficient=hyper.l2)
    mom = hyper.bn_momentum

    def val_loss():
        r, _ = _ae_forward(net, val, hyper.batch_norm, bn_mean, bn_var)
        return _rmse(r, val)

    history = [val_loss()]
    best = history[0]
    best_state = (net.params.copy(), [m.copy() for m in bn_mean], [v.copy() for v in bn_var])
    waited = 0
    bs = hyper.batch_size
    for epoch in range(hyper.max_epochs):
        perm = rng.permutation(train.shape[0])
        for start in range(0, train.shape[0], bs):
            idx = perm[start : start + bs]
            if idx.size < 2:
                continue
            xb = train[idx]
            r, cache = _ae_forward(net, xb, hyper.batch_norm, train=True)
            loss = _rmse(r, xb)
            grad_out = (r - xb) / (r.size * loss)
            grads = _ae_backward(net, cache, grad_out, hyper.batch_norm)
            adam_step(opt, net, grads)
            if hyper.batch_norm:
                for i in range(n_hidden):
                    bn_mean[i] = mom * bn_mean[i] + (1 - mom) * cache[i]["mu"]
                    bn_var[i] = mom * bn_var[i] + (1 - mom) * cache[i]["var"]
        current = val_loss()
        if not math.isfinite(current):
            raise TrainingError(f"validation loss became {current} at epoch {epoch}; history={history[-5:]}")
        history.append(current)
        if current < best:
            best = current
            best_state = (net.params.copy(), [m.copy() for m in bn_mean], [v.copy() for v in bn_var])
            waited = 0
        else:
            waited += 1
            if waited >= hyper.early_stop_patience:
                break
    net.set_params(best_state[0])
    model = AdModel(net, stats, 0.0, hyper, best_state[1], best_state[2], history)
    model.threshold = calibrate_threshold(model, val_raw, hyper.n_std)
    return model


def calibrate_threshold(model: AdModel, validation_samples, n_std: float) -> float:
    """``mean + n_std * std`` (sample std) of per-sample reconstruction MSE."""
    return threshold_from_mse(model.mse(validation_samples), n_std)


def detect(model: AdModel, f) -> Verdict:
    values = f.values if isinstance(f, Fingerprint) else f
    mse = float(model.mse(values)[0])
    return Verdict(Label.ABNORMAL if mse > model.threshold else Label.NORMAL, mse)


def detect_many(model: AdModel, samples) -> np.ndarray:
    """Boolean array, True where the sample is labelled Normal."""
    return model.mse(samples) <= model.threshold


def reward(model: AdModel, after) -> int:
    return 1 if detect(model, after).is_normal else -1


def reward_of(verdict: Verdict) -> int:
    return 1 if verdict.is_normal else -1


def feature_stds(model: AdModel) -> np.ndarray:
    """Per-feature std of the clean normal training data (raw units)."""
    return model.stats.std


def pretrained_loss(model: AdModel) -> float:
    return model.history[0]


def trained_loss(model: AdModel) -> float:
    return min(model.history)


def layer_dims(specs: Sequence[LayerSpec]) -> list[int]:
    return [specs[0].input_dim] + [s.output_dim for s in specs]
