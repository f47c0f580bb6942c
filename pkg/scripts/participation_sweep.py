"""Empirical gap and FedAvg bound against the number of active clients.

    python scripts/participation_sweep.py --config configs/logistic_m16.yaml --n 1,4,7,12,16
"""

import argparse
import math

from fedstab import config, experiments
from fedstab.stability import optimal_participation


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/logistic_m16.yaml")
    p.add_argument("--n", default=None, help="comma-separated; default 1, ceil(m^(2/3)), m")
    p.add_argument("--out", default="out/participation")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()

    cfg = config.load(args.config)
    m = cfg.data.m
    n_list = [int(v) for v in args.n.split(",")] if args.n else [1, math.ceil(m ** (2 / 3)), m]
    rows, per_cell = experiments.sweep_participation(cfg, n_list, args.out, args.threads)
    print(f"{'n':>4} {'median gap':>12} {'q10':>10} {'q90':>10} {'bound':>10}")
    for r in rows:
        if r["metric"] == "gen_gap":
            print(f"{r['n']:>4} {r['median']:>12.5f} {r['q_lo']:>10.5f} {r['q_hi']:>10.5f} {r['bound']:>10.4f}")
    mu_l = experiments.prepare(per_cell[0][0]).constants.mu_l
    print(f"n* ~ m^((1+muL)/(1+2muL)) = {optimal_participation(m, mu_l):.2f}  (muL = {mu_l:.3f})")
    print(f"wrote {args.out}/participation.csv")


if __name__ == "__main__":
    main()
