import copy

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from fedmtd import DEFAULT_CONFIG
from fedmtd.environment import MALWARE, BehaviorClass, Family, family_members
from fedmtd.errors import ConfigurationError, ParseError
from fedmtd.experiments import (
    CSV_HEADER,
    MetricsLog,
    MetricsRow,
    ScenarioKind,
    ScenarioSpec,
    config_from_dict,
    config_hash,
    config_to_dict,
    episodes_to_threshold,
    load_config,
    make_scenario,
    n_missing,
    read_metrics_csv,
    run_centralized_baseline,
    run_experiment,
    summary_text,
    write_metrics_csv,
)

B = BehaviorClass

SMALL = {
    "seed": 4,
    "env": {"feature_dim": 20},
    "ad": {"max_epochs": 5},
    "federation": {"num_clients": 3, "rounds": 3, "episodes_per_round": 10},
    "eval_samples_per_class": 20,
    "ad_train_samples": 200,
}


def _row(r, acc, absent=None):
    return MetricsRow(r, acc, (acc,) * 6, absent, 1.0 - 0.1 * r, "FedAvg", 0.0, "none")


# ---------------------------------------------------------------- scenarios

def test_iid_scenario():
    sc = make_scenario("iid", {}, 10, 0)
    assert all(a == frozenset(MALWARE) for a in sc.per_client_allowed)


def test_weak_non_iid_example():
    sc = make_scenario("weak_non_iid", {"absent_malware": "the_tick", "missing_ratio": 0.4}, 10, 1)
    missing = sc.missing_clients(B.THE_TICK)
    assert len(missing) == 4
    for i, a in enumerate(sc.per_client_allowed):
        assert a == (frozenset(MALWARE) - {B.THE_TICK} if i in missing else frozenset(MALWARE))


@pytest.mark.parametrize("ratio", [0, 0.1, 0.4, 0.7, 1.0])
@pytest.mark.parametrize("k", [10, 20])
def test_missing_counts_match_rounding(ratio, k):
    sc = make_scenario("weak_non_iid", {"missing_ratio": ratio}, k, 3)
    assert len(sc.missing_clients(B.THE_TICK)) == n_missing(k, ratio) == round(ratio * k)


def test_strong_non_iid():
    sc = make_scenario("strong_non_iid", {}, 10, 2)
    assert all(len(a) == 3 for a in sc.per_client_allowed)
    assert len(set(sc.per_client_allowed)) > 1
    assert make_scenario("strong_non_iid", {}, 10, 2).per_client_allowed == sc.per_client_allowed


def test_family_absence():
    sc = make_scenario("family_absence", {"family": "rootkit", "missing_ratio": 0.1}, 10, 0)
    assert sc.absent_malware is B.BDVL
    assert all(B.BEURK not in a for a in sc.per_client_allowed)
    assert len(sc.missing_clients(B.BDVL)) == 1
    cnc = make_scenario("family_absence", {"family": "cnc", "missing_ratio": 0.7}, 10, 0)
    assert cnc.absent_malware is B.JAKORITAR
    assert all(not (set(family_members(Family.CNC)) - {B.JAKORITAR}) & a for a in cnc.per_client_allowed)
    with pytest.raises(ConfigurationError):
        make_scenario("family_absence", {"family": "rootkit", "target": "the_tick"}, 10, 0)


def test_scenario_errors():
    with pytest.raises(ConfigurationError):
        make_scenario("weak_non_iid", {"missing_ratio": 1.5}, 10, 0)
    with pytest.raises(ConfigurationError):
        ScenarioSpec("iid", {"missing_ratio": 0.1})
    with pytest.raises(ConfigurationError):
        make_scenario("weak_non_iid", {"absent_malware": "normal"}, 10, 0)


@given(st.sampled_from(list(ScenarioKind)), st.integers(1, 25), st.floats(0, 1), st.integers(0, 2**31))
def test_scenario_allowed_sets_nonempty(kind, k, ratio, seed):
    params = {"missing_ratio": ratio} if kind in (ScenarioKind.WEAK_NON_IID, ScenarioKind.FAMILY_ABSENCE) else {}
    sc = make_scenario(kind, params, k, seed)
    assert sc.num_clients == k
    assert all(a and a <= frozenset(MALWARE) for a in sc.per_client_allowed)


# ---------------------------------------------------------------- config

def test_default_config_loads():
    cfg = load_config(DEFAULT_CONFIG)
    assert cfg.fed.num_clients == 10 and cfg.fed.rounds == 30 and cfg.fed.episodes_per_round == 100
    assert cfg.agent_hyper.episodes_per_client == 3000
    assert cfg.agent_hyper.gamma == 0.5 and cfg.ad_hyper.n_std == 2.0


def test_config_roundtrip_and_hash():
    cfg = config_from_dict(SMALL)
    again = config_from_dict(config_to_dict(cfg))
    assert config_hash(again) == config_hash(cfg)
    assert len(config_hash(cfg)) == 10
    other = copy.deepcopy(SMALL)
    other["seed"] = 5
    assert config_hash(config_from_dict(other)) != config_hash(cfg)


@pytest.mark.parametrize("patch,needle", [
    ({"agent": {"gamma": 1.5}}, "gamma"),
    ({"bogus": 1}, "bogus"),
    ({"env": {"feature_dims": 3}}, "env"),
    ({"federation": {"aggregation": "median"}}, "median"),
    ({"scenario": {"kind": "sideways"}}, "scenario"),
    ({"adversary": {"kind": "label_flipping", "pnr": 2}}, "pnr"),
])
def test_config_errors(patch, needle):
    d = {**SMALL, **patch}
    with pytest.raises(ConfigurationError, match=needle):
        config_from_dict(d)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1, 2\n")
    with pytest.raises(ConfigurationError):
        load_config(bad)


# ---------------------------------------------------------------- metrics

def test_episodes_to_threshold():
    log = MetricsLog([_row(1, 0.5), _row(2, 0.8), _row(3, 0.92), _row(4, 0.97), _row(5, 0.96)])
    assert episodes_to_threshold(log, 0.96, 100) == 400
    assert episodes_to_threshold(log, 0.0, 100) == 100
    assert episodes_to_threshold(log, 0.99, 100) is None
    with pytest.raises(ConfigurationError):
        episodes_to_threshold(log, 1.5, 100)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_episodes_to_threshold_monotone(accs, t1, t2):
    log = MetricsLog([_row(i + 1, a) for i, a in enumerate(accs)])
    lo, hi = sorted((t1, t2))
    a, b = episodes_to_threshold(log, lo, 50), episodes_to_threshold(log, hi, 50)
    if a is not None and b is not None:
        assert a <= b


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    log = MetricsLog([MetricsRow(r, rng.random(), tuple(rng.random(6)), rng.random() if r % 2 else None,
                                 rng.random(), "Krum", 0.3, "model_poisoning") for r in range(1, 31)])
    path = tmp_path / "m.csv"
    write_metrics_csv(log, path)
    assert path.read_text().splitlines()[0] == CSV_HEADER
    assert read_metrics_csv(path).rows == log.rows
    empty = tmp_path / "e.csv"
    write_metrics_csv(MetricsLog(), empty)
    assert empty.read_text() == CSV_HEADER + "\n"


def test_csv_header_is_fixed():
    assert CSV_HEADER == ("round,mean_accuracy,acc_the_tick,acc_jakoritar,acc_dataleak,acc_beurk,acc_bdvl,"
                          "acc_ransomware_poc,absent_accuracy,epsilon,aggregation,pnr,attack")


def test_csv_parse_errors(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("round,oops\n")
    with pytest.raises(ParseError):
        read_metrics_csv(path)
    path.write_text(CSV_HEADER + "\n1,0.5,0.5\n")
    with pytest.raises(ParseError, match="line 2"):
        read_metrics_csv(path)
    path.write_text(CSV_HEADER + "\n" + ",".join(["1"] + ["x"] * 12) + "\n")
    with pytest.raises(ParseError, match="line 2"):
        read_metrics_csv(path)


# ---------------------------------------------------------------- running

def test_run_experiment_small_and_deterministic(tmp_path):
    cfg = config_from_dict(SMALL)
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert len(a) == 3 and [r.round for r in a] == [1, 2, 3]
    write_metrics_csv(a, tmp_path / "a.csv")
    write_metrics_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for r in a:
        assert 0 <= r.mean_accuracy <= 1 and r.absent_accuracy is None


def test_absent_accuracy_recorded():
    d = {**SMALL, "scenario": {"kind": "weak_non_iid", "absent_malware": "dataleak", "missing_ratio": 0.4}}
    log = run_experiment(config_from_dict(d))
    assert all(r.absent_accuracy == r.accuracy(B.DATALEAK) for r in log)


def test_centralized_baseline_small():
    cfg = config_from_dict(SMALL)
    a = run_centralized_baseline(cfg)
    # K * rounds * episodes_per_round episodes, logged every episodes_per_round
    assert len(a) == 3 * 3
    assert a.rows == run_centralized_baseline(cfg).rows
    assert len(run_centralized_baseline(cfg, log_every=5, total_episodes=20)) == 4


def test_summary_text():
    cfg = config_from_dict(SMALL)
    log = MetricsLog([_row(1, 0.5), _row(2, 0.95), _row(3, 0.97)])
    ref = MetricsLog([_row(1, 0.99)])
    text = summary_text(cfg, log, baseline=log, reference=ref)
    assert "final mean accuracy: 0.970000" in text
    assert "episodes to 0.90 (per client): 20" in text
    assert "BELOW" in text
    assert "not below" in summary_text(cfg, log, reference=MetricsLog([_row(1, 0.2)]))


def test_default_yaml_is_plain_mapping():
    data = yaml.safe_load(open(DEFAULT_CONFIG))
    assert set(data) >= {"env", "ad", "agent", "federation", "scenario", "adversary", "seed"}
