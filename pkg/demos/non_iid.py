"""Knowledge transfer: accuracy on a malware some clients never see.

Sweeps the fraction of clients missing the target under each aggregation rule.

    python demos/non_iid.py [--quick] [--malware the_tick]
"""

import argparse

from _common import make

from fedmtd.experiments import run_experiment

ap = argparse.ArgumentParser()
ap.add_argument("--quick", action="store_true")
ap.add_argument("--malware", default="the_tick")
args = ap.parse_args()

print(f"absent malware: {args.malware}")
print(f"{'ratio':>6} {'FedAvg':>8} {'Krum':>8} {'TrimMean':>8}")
for ratio in (0.1, 0.4, 0.7, 1.0):
    accs = []
    for agg in ("fedavg", "krum", "trimmed_mean"):
        cfg = make(args.quick, federation={"aggregation": agg},
                   scenario={"kind": "weak_non_iid", "absent_malware": args.malware, "missing_ratio": ratio})
        accs.append(run_experiment(cfg).rows[-1].absent_accuracy)
    print(f"{ratio:>6.1f} " + " ".join(f"{a:>8.3f}" for a in accs))

# strong non-IID: every client sees only three malware behaviours
for agg in ("fedavg", "krum", "trimmed_mean"):
    cfg = make(args.quick, federation={"aggregation": agg}, scenario={"kind": "strong_non_iid"})
    print(f"strong non-IID {agg:>12}: {run_experiment(cfg).rows[-1].mean_accuracy:.3f}")
