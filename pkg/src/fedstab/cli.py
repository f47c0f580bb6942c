"""Command-line entry point: ``fedstab {topology,run,sweep-participation,sweep-topology,collapse}``."""

import argparse
import json
import sys

from . import config as config_mod
from . import experiments as ex
from .engine import DivergenceError
from .topology import NumericalValidationError, TopologyError

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="fedstab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("topology", help="spectral report for one mixing matrix")
    t.add_argument("kind")
    t.add_argument("m", type=int)
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--out", help="write the report as JSON here")

    def common(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--seeds", type=int, help="override stability.seeds")
        sp.add_argument("--threads", type=int, default=1)

    common(sub.add_parser("run", help="one cell of coupled runs"))
    sp = sub.add_parser("sweep-participation", help="FedAvg over active-client counts")
    common(sp)
    sp.add_argument("--n", dest="n_list", type=_int_list, required=True, help="e.g. 1,7,16")
    sp = sub.add_parser("sweep-topology", help="D-FedAvg over topologies")
    common(sp)
    sp.add_argument("--kinds", type=_str_list, default=["full", "exp", "grid", "ring"])
    sp = sub.add_parser("collapse", help="D-FedAvg over client counts at fixed S")
    common(sp)
    sp.add_argument("--m", dest="m_list", type=_int_list, required=True)
    sp.add_argument("--S", dest="fixed_S", type=int, required=True)
    sp.add_argument("--kinds", type=_str_list, default=["full", "ring"])
    return p


def _load(args):
    cfg = config_mod.load(args.config)
    if args.seeds is not None:
        cfg = config_mod.validate(cfg.with_changes(stability={"seeds": args.seeds}))
    if args.threads < 1:
        raise config_mod.ConfigError("--threads must be >= 1")
    return cfg


def _print_rows(rows, metric="gen_gap"):
    for r in rows:
        if r["metric"] != metric:
            continue
        bound = "" if r["bound"] is None else f" bound={r['bound']:.4g}"
        print(
            f"{r['algo']} n={r['n']} topology={r['topology']} m={r['m']} S={r['S']}: "
            f"median {metric}={r['median']:.6g} [{r['q_lo']:.3g}, {r['q_hi']:.3g}]{bound}"
        )


def dispatch(args):
    if args.command == "topology":
        rep = ex.cmd_topology(args.kind, args.m, args.alpha)
        text = json.dumps(rep, indent=2, sort_keys=True)
        print(text)
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text + "\n")
        return EXIT_OK
    cfg = _load(args)
    if args.command == "run":
        out = args.out or cfg.output.directory
        _, rows, _ = ex.cmd_run(cfg, out, args.threads)
        _print_rows(rows)
        print(f"wrote {out}")
    elif args.command == "sweep-participation":
        rows, _ = ex.sweep_participation(cfg, args.n_list, args.out or cfg.output.directory, args.threads)
        _print_rows(rows)
    elif args.command == "sweep-topology":
        rows, _ = ex.sweep_topology(cfg, args.kinds, args.out or cfg.output.directory, args.threads)
        _print_rows(rows)
    elif args.command == "collapse":
        rows, _, verdicts = ex.collapse(
            cfg, args.m_list, args.fixed_S, args.kinds, args.out or cfg.output.directory, args.threads
        )
        _print_rows(rows)
        for v in verdicts:
            print(
                f"{v['topology']} m={v['m']}: kappa={v['kappa_lambda']:.4g} "
                f"threshold={v['threshold']:.4g} collapse_check={'pass' if v['passes'] else 'fail'} trend={v['trend']}"
            )
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except DivergenceError as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (NumericalValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (config_mod.ConfigError, TopologyError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
