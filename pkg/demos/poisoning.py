"""Poisoning attacks against each aggregation rule, swept over the poisoned fraction.

    python demos/poisoning.py [--quick] [--attack model_poisoning]
"""

import argparse

from _common import make

from fedmtd.experiments import run_experiment

ap = argparse.ArgumentParser()
ap.add_argument("--quick", action="store_true")
ap.add_argument("--attack", default="model_poisoning",
                choices=["label_flipping", "sample_poisoning", "model_poisoning"])
args = ap.parse_args()

aggs = ("fedavg", "krum", "trimmed_mean")
clean = [run_experiment(make(args.quick, federation={"aggregation": a})).rows[-1].mean_accuracy for a in aggs]
print(f"attack: {args.attack}")
print(f"{'pnr':>5} {'FedAvg':>8} {'Krum':>8} {'TrimMean':>8}")
print(f"{'clean':>5} " + " ".join(f"{a:>8.3f}" for a in clean))
for pnr in (0.1, 0.3, 0.5, 0.7, 0.9):
    accs = [run_experiment(make(args.quick, federation={"aggregation": a},
                                adversary={"kind": args.attack, "pnr": pnr})).rows[-1].mean_accuracy
            for a in aggs]
    print(f"{pnr:>5.1f} " + " ".join(f"{a:>8.3f}" for a in accs))
