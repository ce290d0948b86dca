"""Scenarios, experiment wiring, centralized baseline and metrics persistence."""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from .adversary import AdversaryConfig, client_attack, select_poisoned
from .agent import Agent, AgentHyper, ClientHooks, epsilon_at, mean_accuracy, run_episode
from .anomaly import AdHyper, AdModel, train_ad
from .environment import (
    MALWARE,
    BehaviorClass,
    EnvConfig,
    Environment,
    Family,
    child_seed,
    family_members,
)
from .errors import ConfigurationError, ParseError
from .federation import (
    AggregationStrategy,
    Client,
    Evaluator,
    FederationConfig,
    FederationState,
    RoundRecord,
    run_federation,
)
from .numkit import mlp_init

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- scenarios

class ScenarioKind(str, enum.Enum):
    IID = "iid"
    WEAK_NON_IID = "weak_non_iid"
    STRONG_NON_IID = "strong_non_iid"
    FAMILY_ABSENCE = "family_absence"


# member of each family that stays partially visible under FamilyAbsence
_FAMILY_TARGET = {
    Family.CNC: BehaviorClass.JAKORITAR,
    Family.ROOTKIT: BehaviorClass.BDVL,
    Family.RANSOMWARE: BehaviorClass.RANSOMWARE_POC,
}

_SCENARIO_PARAMS = {
    ScenarioKind.IID: set(),
    ScenarioKind.WEAK_NON_IID: {"absent_malware", "missing_ratio"},
    ScenarioKind.STRONG_NON_IID: {"absent_per_client"},
    ScenarioKind.FAMILY_ABSENCE: {"family", "missing_ratio", "target"},
}


@dataclass
class ScenarioSpec:
    """Scenario kind plus its parameters, as written in a config file."""

    kind: ScenarioKind = ScenarioKind.IID
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = ScenarioKind(self.kind)
        unknown = set(self.params) - _SCENARIO_PARAMS[self.kind]
        if unknown:
            raise ConfigurationError(f"scenario {self.kind.value} does not take {sorted(unknown)}")


@dataclass
class Scenario:
    kind: ScenarioKind
    per_client_allowed: list
    absent_malware: Optional[BehaviorClass] = None
    params: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.per_client_allowed)

    def missing_clients(self, m: BehaviorClass) -> list[int]:
        return [i for i, a in enumerate(self.per_client_allowed) if m not in a]


def n_missing(k: int, ratio: float) -> int:
    return int(math.floor(ratio * k + 0.5 + 1e-9))


def _ratio(params: dict) -> float:
    r = float(params.get("missing_ratio", 0.0))
    if not 0.0 <= r <= 1.0:
        raise ConfigurationError(f"missing_ratio must lie in [0, 1], got {r}")
    return r


def make_scenario(kind, params: dict | None, k: int, seed: int) -> Scenario:
    kind = ScenarioKind(kind)
    params = dict(params or {})
    if k < 1:
        raise ConfigurationError("a scenario needs at least one client")
    rng = np.random.default_rng(seed)
    everything = frozenset(MALWARE)

    if kind is ScenarioKind.IID:
        return Scenario(kind, [everything] * k, None, params)

    if kind is ScenarioKind.WEAK_NON_IID:
        absent = BehaviorClass(params.get("absent_malware", BehaviorClass.THE_TICK))
        if not absent.is_malware:
            raise ConfigurationError("absent_malware must be a malware class")
        missing = set(rng.choice(k, size=n_missing(k, _ratio(params)), replace=False).tolist())
        allowed = [everything - {absent} if i in missing else everything for i in range(k)]
        return Scenario(kind, allowed, absent, params)

    if kind is ScenarioKind.STRONG_NON_IID:
        n_abs = int(params.get("absent_per_client", 3))
        if not 0 <= n_abs <= len(MALWARE) - 1:
            raise ConfigurationError(f"absent_per_client must lie in [0, {len(MALWARE) - 1}]")
        allowed = []
        for _ in range(k):
            drop = rng.choice(len(MALWARE), size=n_abs, replace=False)
            allowed.append(everything - {MALWARE[i] for i in drop})
        return Scenario(kind, allowed, None, params)

    family = Family(params.get("family", Family.ROOTKIT))
    target = BehaviorClass(params.get("target", _FAMILY_TARGET[family]))
    if target.family is not family:
        raise ConfigurationError(f"{target.value} is not in family {family.value}")
    # siblings of the target are unseen everywhere; the target is unseen on the missing clients
    unseen = frozenset(family_members(family)) - {target}
    missing = set(rng.choice(k, size=n_missing(k, _ratio(params)), replace=False).tolist())
    allowed = []
    for i in range(k):
        a = everything - unseen - ({target} if i in missing else set())
        if not a:
            raise ConfigurationError("family absence left a client with no malware")
        allowed.append(a)
    return Scenario(kind, allowed, target, params)


# ---------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    ad_hyper: AdHyper = field(default_factory=AdHyper)
    agent_hyper: AgentHyper = field(default_factory=AgentHyper)
    fed: FederationConfig = field(default_factory=FederationConfig)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    eval_samples_per_class: int = 200
    ad_train_samples: int = 1000
    baseline: bool = False
    output_dir: Optional[str] = None

    def validate(self) -> None:
        self.env.validate()
        self.ad_hyper.validate()
        self.agent_hyper.validate()
        self.fed.validate()
        self.adversary.validate()
        if self.eval_samples_per_class < 1:
            raise ConfigurationError("eval_samples_per_class must be >= 1")
        if self.ad_train_samples < 100:
            raise ConfigurationError("ad_train_samples must be >= 100")
        # every agent and detector is sized from the one environment feature_dim
        make_scenario(self.scenario.kind, self.scenario.params, self.fed.num_clients, 0)

    @property
    def seed(self) -> int:
        return self.fed.master_seed


_SECTIONS = {"env", "ad", "agent", "federation", "scenario", "adversary",
             "seed", "eval_samples_per_class", "ad_train_samples", "baseline", "output_dir"}


def _build(cls, data, section: str):
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except ConfigurationError as exc:
        raise ConfigurationError(f"[{section}] {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{section}] {exc}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigurationError("config must be a mapping at the top level")
    unknown = set(d) - _SECTIONS
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {sorted(unknown)}")
    seed = int(d.get("seed", 0))
    fed_d = dict(d.get("federation") or {})
    fed_d.setdefault("master_seed", seed)
    agg = {"kind": fed_d.pop("aggregation", "fedavg")}
    if "trim_fraction" in fed_d:
        agg["trim_fraction"] = float(fed_d.pop("trim_fraction"))
    fed_d["aggregation"] = _build(AggregationStrategy, agg, "federation")
    fed = _build(FederationConfig, fed_d, "federation")

    agent_d = dict(d.get("agent") or {})
    # the epsilon schedule spans the whole local training budget unless stated
    agent_d.setdefault("episodes_per_client", max(1, fed.rounds * fed.episodes_per_round))

    sc = dict(d.get("scenario") or {})
    kind = sc.pop("kind", "iid")
    try:
        scenario = ScenarioSpec(kind, sc)
    except ValueError as exc:
        raise ConfigurationError(f"[scenario] {exc}") from None

    adv = dict(d.get("adversary") or {})
    adv.setdefault("seed", child_seed(fed.master_seed, 0, "adversary"))

    cfg = ExperimentConfig(
        env=_build(EnvConfig, d.get("env"), "env"),
        ad_hyper=_build(AdHyper, d.get("ad"), "ad"),
        agent_hyper=_build(AgentHyper, agent_d, "agent"),
        fed=fed,
        scenario=scenario,
        adversary=_build(AdversaryConfig, adv, "adversary"),
        eval_samples_per_class=int(d.get("eval_samples_per_class", 200)),
        ad_train_samples=int(d.get("ad_train_samples", 1000)),
        baseline=bool(d.get("baseline", False)),
        output_dir=d.get("output_dir"),
    )
    cfg.validate()
    return cfg


def _plain(v):
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, dict):
        return {str(_plain(k)): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def config_to_dict(cfg: ExperimentConfig) -> dict:
    fed = cfg.fed
    return _plain({
        "seed": fed.master_seed,
        "env": dataclasses.asdict(cfg.env),
        "ad": dataclasses.asdict(cfg.ad_hyper),
        "agent": dataclasses.asdict(cfg.agent_hyper),
        "federation": {
            "num_clients": fed.num_clients,
            "rounds": fed.rounds,
            "episodes_per_round": fed.episodes_per_round,
            "aggregation": fed.aggregation.kind,
            "trim_fraction": fed.aggregation.trim_fraction,
        },
        "scenario": {"kind": cfg.scenario.kind, **cfg.scenario.params},
        "adversary": dataclasses.asdict(cfg.adversary),
        "eval_samples_per_class": cfg.eval_samples_per_class,
        "ad_train_samples": cfg.ad_train_samples,
        "baseline": cfg.baseline,
    })


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{p}: {exc}") from None
    return config_from_dict(data or {})


def config_hash(cfg: ExperimentConfig) -> str:
    text = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:10]


# ---------------------------------------------------------------- metrics

CSV_HEADER = ("round,mean_accuracy,acc_the_tick,acc_jakoritar,acc_dataleak,acc_beurk,acc_bdvl,"
              "acc_ransomware_poc,absent_accuracy,epsilon,aggregation,pnr,attack")
COLUMNS = tuple(CSV_HEADER.split(","))
FLOAT_COLUMNS = tuple(c for c in COLUMNS if c not in ("round", "aggregation", "attack"))


def _r6(x: float) -> float:
    return float(f"{x:.6f}")


@dataclass(frozen=True)
class MetricsRow:
    round: int
    mean_accuracy: float
    accuracies: tuple  # ordered as MALWARE
    absent_accuracy: Optional[float]
    epsilon: float
    aggregation: str
    pnr: float
    attack: str

    def __post_init__(self):
        # stored at CSV precision so a write/read cycle is exact
        object.__setattr__(self, "mean_accuracy", _r6(self.mean_accuracy))
        object.__setattr__(self, "accuracies", tuple(_r6(a) for a in self.accuracies))
        if self.absent_accuracy is not None:
            object.__setattr__(self, "absent_accuracy", _r6(self.absent_accuracy))
        object.__setattr__(self, "epsilon", _r6(self.epsilon))
        object.__setattr__(self, "pnr", _r6(self.pnr))
        if len(self.accuracies) != len(MALWARE):
            raise ConfigurationError(f"expected {len(MALWARE)} per-malware accuracies")

    def accuracy(self, m: BehaviorClass) -> float:
        return self.accuracies[MALWARE.index(BehaviorClass(m))]

    def value(self, column: str):
        if column.startswith("acc_"):
            return self.accuracy(BehaviorClass(column[4:]))
        return getattr(self, column)

    def cells(self) -> list[str]:
        f6 = "{:.6f}".format
        return [str(self.round), f6(self.mean_accuracy), *[f6(a) for a in self.accuracies],
                "" if self.absent_accuracy is None else f6(self.absent_accuracy),
                f6(self.epsilon), self.aggregation, f6(self.pnr), self.attack]


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]

    def column(self, name: str) -> list:
        if name not in COLUMNS:
            raise ConfigurationError(f"unknown column {name!r}; columns: {', '.join(COLUMNS)}")
        return [r.value(name) for r in self.rows]


def write_metrics_csv(log_: MetricsLog, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in log_.rows:
            w.writerow(row.cells())


def read_metrics_csv(path) -> MetricsLog:
    with open(path, newline="") as fh:
        lines = list(csv.reader(fh))
    if not lines or ",".join(lines[0]) != CSV_HEADER:
        raise ParseError(f"header must be exactly {CSV_HEADER!r}", line=1)
    rows = []
    for lineno, cells in enumerate(lines[1:], start=2):
        if not cells:
            continue
        if len(cells) != len(COLUMNS):
            raise ParseError(f"expected {len(COLUMNS)} fields, got {len(cells)}", line=lineno)
        try:
            rec = dict(zip(COLUMNS, cells))
            rows.append(MetricsRow(
                round=int(rec["round"]),
                mean_accuracy=float(rec["mean_accuracy"]),
                accuracies=tuple(float(rec[f"acc_{m.value}"]) for m in MALWARE),
                absent_accuracy=float(rec["absent_accuracy"]) if rec["absent_accuracy"] else None,
                epsilon=float(rec["epsilon"]),
                aggregation=rec["aggregation"],
                pnr=float(rec["pnr"]),
                attack=rec["attack"],
            ))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
    return MetricsLog(rows)


def episodes_to_threshold(log_: MetricsLog, threshold: float, episodes_per_round_total: int) -> Optional[int]:
    """First cumulative episode count at which mean accuracy reaches ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigurationError("threshold must lie in [0, 1]")
    for row in log_.rows:
        if row.mean_accuracy >= threshold:
            return row.round * episodes_per_round_total
    return None


# ---------------------------------------------------------------- running

_AD_CACHE: dict = {}


def _ad_key(cfg: ExperimentConfig, env_seed: int, data_seed: int, ad_seed: int):
    return (json.dumps(_plain(dataclasses.asdict(cfg.env)), sort_keys=True), env_seed,
            json.dumps(_plain(dataclasses.asdict(cfg.ad_hyper)), sort_keys=True),
            data_seed, ad_seed, cfg.ad_train_samples)


def client_ad(cfg: ExperimentConfig, env: Environment, env_seed: int, client_id: int) -> AdModel:
    """Detector trained on the client's own clean normal traffic (memoised in-process)."""
    master = cfg.seed
    data_seed = child_seed(master, client_id, "ad_data")
    ad_seed = child_seed(master, client_id, "ad")
    key = _ad_key(cfg, env_seed, data_seed, ad_seed)
    if key not in _AD_CACHE:
        samples = env.sample_many(BehaviorClass.NORMAL, cfg.ad_train_samples, np.random.default_rng(data_seed))
        _AD_CACHE[key] = train_ad(samples, cfg.ad_hyper, ad_seed)
    return _AD_CACHE[key]


def clear_ad_cache() -> None:
    _AD_CACHE.clear()


def _environment(cfg: ExperimentConfig) -> tuple[Environment, int]:
    env_seed = child_seed(cfg.seed, 0, "env")
    return Environment.build(cfg.env, env_seed), env_seed


def _global_init(cfg: ExperimentConfig):
    return mlp_init(cfg.agent_hyper.layer_specs(cfg.env.feature_dim), child_seed(cfg.seed, 0, "global_init"))


def _evaluator(cfg: ExperimentConfig, env: Environment, specs) -> Evaluator:
    return Evaluator.sample(env, specs, cfg.eval_samples_per_class,
                            np.random.default_rng(child_seed(cfg.seed, 0, "eval")))


@dataclass
class ExperimentResult:
    log: MetricsLog
    history: list
    scenario: Scenario
    poisoned: frozenset
    state: FederationState


def _row(cfg: ExperimentConfig, index: int, acc: dict, eps: float, absent: Optional[BehaviorClass]) -> MetricsRow:
    return MetricsRow(
        round=index,
        mean_accuracy=mean_accuracy(acc),
        accuracies=tuple(acc[m] for m in MALWARE),
        absent_accuracy=acc[absent] if absent is not None else None,
        epsilon=eps,
        aggregation=cfg.fed.aggregation.label,
        pnr=cfg.adversary.pnr,
        attack=cfg.adversary.kind.value,
    )


def prepare_federation(cfg: ExperimentConfig, keep_uploads: bool = False) -> tuple[FederationState, Scenario, frozenset]:
    cfg.validate()
    env, env_seed = _environment(cfg)
    k = cfg.fed.num_clients
    scenario = make_scenario(cfg.scenario.kind, cfg.scenario.params, k, child_seed(cfg.seed, 0, "scenario"))
    init = _global_init(cfg)
    adv = cfg.adversary
    poisoned = select_poisoned(k, adv.pnr, adv.seed) if adv.active else frozenset()
    clients = []
    for cid in range(k):
        ad = client_ad(cfg, env, env_seed, cid)
        agent = Agent(init.copy(), cfg.agent_hyper)
        hooks, upload = ClientHooks(), None
        if cid in poisoned:
            attack = client_attack(adv, ad, np.random.default_rng(child_seed(adv.seed, cid, "attack")))
            hooks, upload = attack.hooks, attack.upload
        clients.append(Client(cid, agent, ad, scenario.per_client_allowed[cid],
                              np.random.default_rng(child_seed(cfg.seed, cid, "episodes")),
                              hooks, upload, cid in poisoned))
    state = FederationState(env, clients, init.params.copy(), cfg.fed.aggregation,
                            _evaluator(cfg, env, init.specs), cfg.fed.episodes_per_round,
                            keep_uploads=keep_uploads)
    return state, scenario, poisoned


def run_experiment_detailed(cfg: ExperimentConfig, keep_uploads: bool = False,
                            on_row: Optional[Callable[[MetricsRow], None]] = None) -> ExperimentResult:
    state, scenario, poisoned = prepare_federation(cfg, keep_uploads)
    out = MetricsLog()
    log.info("experiment %s: %s, %d clients, %s, attack %s pnr %.2f (poisoned %s)",
             config_hash(cfg), scenario.kind.value, cfg.fed.num_clients, cfg.fed.aggregation.label,
             cfg.adversary.kind.value, cfg.adversary.pnr, sorted(poisoned))

    def record(rec: RoundRecord):
        row = _row(cfg, rec.round_index, rec.global_accuracy_per_malware, rec.epsilon_snapshot,
                   scenario.absent_malware)
        out.rows.append(row)
        if on_row is not None:
            on_row(row)

    history = run_federation(cfg.fed, state, record)
    return ExperimentResult(out, history, scenario, poisoned, state)


def run_experiment(cfg: ExperimentConfig, on_row: Optional[Callable[[MetricsRow], None]] = None) -> MetricsLog:
    return run_experiment_detailed(cfg, on_row=on_row).log


def run_centralized_baseline(cfg: ExperimentConfig, log_every: Optional[int] = None,
                             total_episodes: Optional[int] = None) -> MetricsLog:
    """One agent in one environment exposed to every malware.

    Runs ``K * rounds * episodes_per_round`` episodes with the federated agents'
    hyperparameters and logs greedy accuracy every ``log_every`` episodes
    (default: ``episodes_per_round``, so rows line up with federated rounds).
    """
    cfg.validate()
    env, env_seed = _environment(cfg)
    init = _global_init(cfg)
    agent = Agent(init.copy(), cfg.agent_hyper)
    ad = client_ad(cfg, env, env_seed, 0)
    rng = np.random.default_rng(child_seed(cfg.seed, 0, "baseline"))
    evaluator = _evaluator(cfg, env, init.specs)
    every = log_every or cfg.fed.episodes_per_round or 100
    total = total_episodes if total_episodes is not None else (
        cfg.fed.num_clients * cfg.fed.rounds * cfg.fed.episodes_per_round)
    out = MetricsLog()
    for ep in range(1, total + 1):
        run_episode(agent, env, ad, MALWARE, rng)
        if ep % every == 0:
            acc = evaluator(agent.q_net.params)
            out.rows.append(_row(cfg, ep // every, acc, epsilon_at(agent.hyper, agent.episodes_done), None))
            log.debug("baseline episode %d: mean accuracy %.4f", ep, out.rows[-1].mean_accuracy)
    return out


def summary_text(cfg: ExperimentConfig, fed_log: MetricsLog, baseline: Optional[MetricsLog] = None,
                 reference: Optional[MetricsLog] = None) -> str:
    e = cfg.fed.episodes_per_round
    lines = [
        f"config hash: {config_hash(cfg)}",
        f"scenario: {cfg.scenario.kind.value} {cfg.scenario.params}",
        f"clients: {cfg.fed.num_clients}  rounds: {cfg.fed.rounds}  episodes/round: {e}",
        f"aggregation: {cfg.fed.aggregation.label}  attack: {cfg.adversary.kind.value}  pnr: {cfg.adversary.pnr}",
        "",
    ]
    if len(fed_log):
        f = fed_log.final
        lines.append(f"final mean accuracy: {f.mean_accuracy:.6f}")
        for m in MALWARE:
            lines.append(f"  {m.value:<15} {f.accuracy(m):.6f}")
        if f.absent_accuracy is not None:
            lines.append(f"absent-malware accuracy: {f.absent_accuracy:.6f}")
        for t in (0.9, 0.96):
            n = episodes_to_threshold(fed_log, t, e)
            lines.append(f"episodes to {t:.2f} (per client): {n if n is not None else 'not reached'}")
    else:
        lines.append("no rounds completed")
    if baseline is not None and len(baseline):
        lines.append("")
        lines.append(f"centralized final mean accuracy: {baseline.final.mean_accuracy:.6f}")
        for t in (0.9, 0.96):
            n = episodes_to_threshold(baseline, t, e)
            lines.append(f"centralized episodes to {t:.2f} (total): {n if n is not None else 'not reached'}")
    if reference is not None and len(reference) and len(fed_log):
        diff = fed_log.final.mean_accuracy - reference.final.mean_accuracy
        flag = "BELOW" if diff < 0 else "not below"
        lines.append("")
        lines.append(f"clean reference final mean accuracy: {reference.final.mean_accuracy:.6f}")
        lines.append(f"this run is {flag} the clean reference ({diff:+.6f})")
    return "\n".join(lines) + "\n"
