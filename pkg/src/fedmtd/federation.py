"""Federation server: local training, aggregation, broadcast.

Aggregators operate on flat parameter vectors. ``fedavg`` and
``trimmed_mean`` share one summation kernel so that a zero trim reproduces
FedAvg bit for bit.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .agent import Agent, ClientHooks, accuracy_on, epsilon_at, mean_accuracy, run_episode
from .anomaly import AdModel
from .environment import MALWARE, BehaviorClass, Environment
from .errors import ConfigurationError, FedMtdError, ShapeError, TrainingError
from .numkit import MlpModel

log = logging.getLogger(__name__)


def _stack(models: Sequence[np.ndarray]) -> np.ndarray:
    if len(models) == 0:
        raise ConfigurationError("aggregation needs at least one model")
    sizes = {np.asarray(m).size for m in models}
    if len(sizes) != 1:
        raise ShapeError(f"models have different lengths: {sorted(sizes)}")
    return np.stack([np.asarray(m, dtype=np.float64).ravel() for m in models])


def _mean_rows(a: np.ndarray) -> np.ndarray:
    # the one summation kernel; averaging offsets from row 0 makes identical rows exact
    base = a[0]
    return base + (a - base).sum(axis=0) / a.shape[0]


def fedavg(models: Sequence[np.ndarray]) -> np.ndarray:
    return _mean_rows(_stack(models))


def n_trimmed(k: int, trim_fraction: float) -> int:
    # tolerance keeps products like 0.29 * 100 from flooring one short
    return int(math.floor(trim_fraction * k + 1e-9))


def trimmed_mean(models: Sequence[np.ndarray], trim_fraction: float = 0.2) -> np.ndarray:
    a = _stack(models)
    k = a.shape[0]
    if not 0.0 <= trim_fraction < 0.5:
        raise ConfigurationError(f"trim_fraction must lie in [0, 0.5), got {trim_fraction}")
    t = n_trimmed(k, trim_fraction)
    if k - 2 * t < 1:
        raise ConfigurationError(f"trimming {t} per tail leaves nothing of {k} models")
    if t == 0:
        return _mean_rows(a)
    return _mean_rows(np.sort(a, axis=0)[t:k - t])


def krum_scores(a: np.ndarray) -> np.ndarray:
    k = a.shape[0]
    d = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            d[i, j] = d[j, i] = np.linalg.norm(a[i] - a[j])
    return d.sum(axis=1)


def krum(models: Sequence[np.ndarray]) -> tuple[np.ndarray, int]:
    """Model with the smallest summed distance to all others; lowest index on ties."""
    a = _stack(models)
    if a.shape[0] < 2:
        raise ConfigurationError("krum needs at least two models")
    idx = int(np.argmin(krum_scores(a)))
    return a[idx].copy(), idx


class AggregationKind(str, enum.Enum):
    FEDAVG = "fedavg"
    KRUM = "krum"
    TRIMMED_MEAN = "trimmed_mean"


_LABELS = {AggregationKind.FEDAVG: "FedAvg", AggregationKind.KRUM: "Krum", AggregationKind.TRIMMED_MEAN: "TrimmedMean"}


def parse_aggregation(name: str) -> AggregationKind:
    """Accepts enum values and display labels, e.g. ``trimmed_mean`` or ``TrimmedMean``."""
    if isinstance(name, AggregationKind):
        return name
    key = str(name).strip().lower().replace("-", "_")
    for kind, label in _LABELS.items():
        if key in (kind.value, label.lower()):
            return kind
    raise ConfigurationError(f"unknown aggregation {name!r}; expected one of {list(_LABELS.values())}")


@dataclass(frozen=True)
class AggregationStrategy:
    kind: AggregationKind = AggregationKind.FEDAVG
    trim_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "kind", parse_aggregation(self.kind))
        if not 0.0 <= self.trim_fraction < 0.5:
            raise ConfigurationError(f"trim_fraction must lie in [0, 0.5), got {self.trim_fraction}")

    @property
    def label(self) -> str:
        return _LABELS[self.kind]

    def check_clients(self, k: int) -> None:
        if self.kind is AggregationKind.TRIMMED_MEAN and k - 2 * n_trimmed(k, self.trim_fraction) < 1:
            raise ConfigurationError(f"trim_fraction {self.trim_fraction} over-trims {k} clients")
        if self.kind is AggregationKind.KRUM and k < 2:
            raise ConfigurationError("krum needs at least two clients")

    def aggregate(self, models: Sequence[np.ndarray]) -> tuple[np.ndarray, Optional[int]]:
        if self.kind is AggregationKind.KRUM:
            return krum(models)
        if self.kind is AggregationKind.TRIMMED_MEAN:
            return trimmed_mean(models, self.trim_fraction), None
        return fedavg(models), None


def model_similarity(models: Sequence[np.ndarray], global_model: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; the global model is the last row and column.

    A zero vector has similarity 0 with everything, itself included.
    """
    v = _stack(list(models) + [global_model])
    norms = np.linalg.norm(v, axis=1)
    zero = norms == 0
    if zero.any():
        log.warning("zero parameter vector at rows %s; similarity set to 0", np.flatnonzero(zero).tolist())
    safe = np.where(zero, 1.0, norms)
    u = v / safe[:, None]
    s = u @ u.T
    s = 0.5 * (s + s.T)
    np.clip(s, -1.0, 1.0, out=s)
    s[zero, :] = 0.0
    s[:, zero] = 0.0
    idx = np.flatnonzero(~zero)
    s[idx, idx] = 1.0
    return s


@dataclass
class FederationConfig:
    num_clients: int = 10
    rounds: int = 30
    episodes_per_round: int = 100
    aggregation: AggregationStrategy = field(default_factory=AggregationStrategy)
    master_seed: int = 0

    def __post_init__(self):
        if isinstance(self.aggregation, (str, AggregationKind)):
            self.aggregation = AggregationStrategy(self.aggregation)
        elif isinstance(self.aggregation, dict):
            self.aggregation = AggregationStrategy(**self.aggregation)
        self.validate()

    def validate(self) -> None:
        if self.num_clients < 2:
            raise ConfigurationError("num_clients must be >= 2")
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.episodes_per_round < 0:
            raise ConfigurationError("episodes_per_round must be >= 0")
        self.aggregation.check_clients(self.num_clients)


@dataclass
class RoundRecord:
    round_index: int
    global_accuracy_per_malware: dict
    mean_accuracy: float
    per_client_loss: list
    epsilon_snapshot: float
    selected_index: Optional[int] = None
    skipped_episodes: int = 0
    uploads: Optional[np.ndarray] = None  # (K, P), only when the state keeps them
    global_params: Optional[np.ndarray] = None


@dataclass
class Client:
    client_id: int
    agent: Agent
    ad: AdModel
    allowed: frozenset
    rng: np.random.Generator
    hooks: ClientHooks = field(default_factory=ClientHooks)
    upload: Optional[Callable[[np.ndarray], np.ndarray]] = None
    poisoned: bool = False

    def train(self, env: Environment, n_episodes: int) -> tuple[float, int]:
        """Run ``n_episodes`` local episodes; returns (mean TD loss, skipped episodes)."""
        losses, skipped = [], 0
        for _ in range(n_episodes):
            out = run_episode(self.agent, env, self.ad, self.allowed, self.rng, self.hooks)
            if out is None:
                skipped += 1
                continue
            losses.extend(out.losses)
        return (float(np.mean(losses)) if losses else math.nan), skipped

    def upload_params(self) -> np.ndarray:
        flat = self.agent.q_net.params.copy()
        return self.upload(flat) if self.upload is not None else flat


class Evaluator:
    """Greedy first-action effectiveness on fixed clean held-out states."""

    def __init__(self, eval_states: dict, specs):
        self.eval_states = {BehaviorClass(m): np.asarray(s) for m, s in eval_states.items()}
        self._net = MlpModel(specs)

    @classmethod
    def sample(cls, env: Environment, specs, n_per_class: int, rng: np.random.Generator,
               malware=MALWARE) -> "Evaluator":
        if n_per_class < 1:
            raise ConfigurationError("eval_samples_per_class must be >= 1")
        return cls({m: env.sample_many(m, n_per_class, rng) for m in malware}, specs)

    def __call__(self, params: np.ndarray) -> dict:
        self._net.set_params(params)
        return accuracy_on(self._net, self.eval_states)


@dataclass
class FederationState:
    env: Environment
    clients: list
    global_params: np.ndarray
    strategy: AggregationStrategy
    evaluator: Evaluator
    episodes_per_round: int
    round_index: int = 0
    keep_uploads: bool = False
    history: list = field(default_factory=list)

    def broadcast(self) -> None:
        for c in self.clients:
            c.agent.load_weights(self.global_params)


def run_round(state: FederationState) -> RoundRecord:
    """One cycle: local training, upload, aggregation, broadcast, clean evaluation.

    Clients own isolated random streams and optimiser state, so the result does
    not depend on the order they are trained in.
    """
    r = state.round_index + 1
    losses, skipped, uploads = [], 0, []
    for c in state.clients:
        try:
            loss, sk = c.train(state.env, state.episodes_per_round)
        except (FedMtdError, FloatingPointError) as exc:
            raise TrainingError(f"round {r}, client {c.client_id}: {exc}") from exc
        losses.append(loss)
        skipped += sk
        uploads.append(c.upload_params())
    state.global_params, selected = state.strategy.aggregate(uploads)
    if not np.all(np.isfinite(state.global_params)):
        raise TrainingError(f"round {r}: aggregated model has non-finite parameters")
    state.broadcast()
    acc = state.evaluator(state.global_params)
    eps = float(np.mean([epsilon_at(c.agent.hyper, c.agent.episodes_done) for c in state.clients]))
    rec = RoundRecord(
        round_index=r,
        global_accuracy_per_malware=acc,
        mean_accuracy=mean_accuracy(acc),
        per_client_loss=losses,
        epsilon_snapshot=eps,
        selected_index=selected,
        skipped_episodes=skipped,
        uploads=np.stack(uploads) if state.keep_uploads else None,
        global_params=state.global_params.copy() if state.keep_uploads else None,
    )
    state.round_index = r
    state.history.append(rec)
    log.info("round %d: mean accuracy %.4f, epsilon %.3f", r, rec.mean_accuracy, eps)
    return rec


def run_federation(cfg: FederationConfig, state: FederationState,
                   on_round: Optional[Callable[[RoundRecord], None]] = None) -> list:
    """Run ``cfg.rounds`` rounds on a prepared state and return its full history."""
    cfg.validate()
    cfg.aggregation.check_clients(len(state.clients))
    state.broadcast()
    for _ in range(cfg.rounds):
        rec = run_round(state)
        if on_round is not None:
            on_round(rec)
    return state.history
