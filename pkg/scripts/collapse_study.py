"""D-FedAvg at fixed per-client data while the number of clients grows.

    python scripts/collapse_study.py --config configs/logistic_m16.yaml --S 64
"""

import argparse

from fedstab import config, experiments


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/logistic_m16.yaml")
    p.add_argument("--S", type=int, default=64)
    p.add_argument("--out", default="out/collapse")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()

    cfg = config.load(args.config)
    # grid needs squares, exp powers of two
    plan = [("full", [9, 16, 25]), ("ring", [9, 16, 25]), ("grid", [9, 16, 25]), ("exp", [8, 16, 32])]
    for kind, ms in plan:
        _, _, verdicts = experiments.collapse(cfg, ms, args.S, [kind], f"{args.out}/{kind}", args.threads)
        for v in verdicts:
            print(
                f"{kind:>5} m={v['m']:>3} median gap {v['median_gen_gap']:.5f} kappa {v['kappa_lambda']:9.3f} "
                f"collapse check {'pass' if v['passes'] else 'fail'}"
            )
        print(f"{kind:>5} trend: {verdicts[0]['trend']}")


if __name__ == "__main__":
    main()
