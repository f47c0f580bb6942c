"""Spectral table for the built-in topologies: lambda, kappa and the sqrt(m) collapse check.

    python scripts/topology_table.py --m 9,16,25,64 --alpha 0.5
"""

import argparse

from fedstab.experiments import cmd_topology
from fedstab.topology import TopologyError


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--m", default="8,9,16,25,32,64")
    p.add_argument("--kinds", default="full,exp,grid,star,ring")
    p.add_argument("--alpha", type=float, default=0.5)
    args = p.parse_args()

    print(f"{'kind':>5} {'m':>4} {'lambda':>9} {'kappa':>12} {'sqrt(m)':>8} {'collapse':>9} {'A^t-P':>6}")
    for kind in args.kinds.split(","):
        for m in (int(v) for v in args.m.split(",")):
            try:
                r = cmd_topology(kind, m, args.alpha)
            except TopologyError:
                continue
            print(
                f"{kind:>5} {m:>4} {r['lambda']:>9.4f} {r['kappa_lambda']:>12.3f} {r['collapse_threshold']:>8.2f} "
                f"{r['collapse_check']:>9} {r['contraction_check']:>6}"
            )


if __name__ == "__main__":
    main()
