"""Shared helpers for the demo scripts."""

import copy

import yaml

from fedmtd import DEFAULT_CONFIG
from fedmtd.experiments import config_from_dict

# small enough to finish in seconds; shapes match the full setup
QUICK = {
    "env": {"feature_dim": 20},
    "ad": {"max_epochs": 5},
    "federation": {"rounds": 6, "episodes_per_round": 30},
    "eval_samples_per_class": 40,
    "ad_train_samples": 300,
}


def base_dict(quick: bool) -> dict:
    d = yaml.safe_load(open(DEFAULT_CONFIG))
    if quick:
        d = merge(d, QUICK)
    return d


def merge(d: dict, patch: dict) -> dict:
    out = copy.deepcopy(d)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def make(quick: bool, **sections):
    return config_from_dict(merge(base_dict(quick), sections))
