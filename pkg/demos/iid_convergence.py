"""IID federation: per-round accuracy of the global agent versus one centralised agent.

    python demos/iid_convergence.py [--quick]
"""

import argparse

from _common import make

from fedmtd.experiments import episodes_to_threshold, run_centralized_baseline, run_experiment

ap = argparse.ArgumentParser()
ap.add_argument("--quick", action="store_true")
ap.add_argument("--clients", type=int, default=10)
args = ap.parse_args()

cfg = make(args.quick, federation={"num_clients": args.clients})
epr = cfg.fed.episodes_per_round
print(f"{cfg.fed.num_clients} clients, {cfg.fed.rounds} rounds of {epr} episodes each")

fed = run_experiment(cfg, on_row=lambda r: print(f"round {r.round:>3}  acc {r.mean_accuracy:.3f}  eps {r.epsilon:.3f}"))
base = run_centralized_baseline(cfg, total_episodes=cfg.fed.rounds * epr)

for t in (0.90, 0.96):
    print(f"episodes per agent to {t:.2f}: federated {episodes_to_threshold(fed, t, epr)}"
          f"  centralised {episodes_to_threshold(base, t, epr)}")
