"""Experiment orchestration: cells of seeded coupled runs, sweeps, and on-disk artifacts."""

import csv
import dataclasses
import functools
import json
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .config import ConfigError, validate
from .data import dirichlet_partition, draw_probes, generate_synthetic, make_neighbor
from .engine import TrainConfig, export_trace_csv, run_coupled
from .models import build_model, estimate_constants
from .rng import stream
from .stability import band, bound_theorem1, bound_theorem2, collapse_check, collapse_threshold, empirical_gen_gap
from .topology import alpha_from_mu_l, build_topology, kappa_lambda, mixing_contraction_check, spectral_lambda

METRICS = ("delta_over_m", "gen_gap", "proxy_gap")
FACTORS = ("algo", "n", "topology", "m", "S", "K", "T")
SUMMARY_COLUMNS = FACTORS + (
    "metric", "mean", "median", "q_lo", "q_hi", "mean_lo", "mean_hi", "count", "lambda", "kappa_lambda", "bound",
)


@dataclass
class Context:
    fed: object
    model: object
    constants: object
    mu: float
    probes: tuple
    mixing: object
    lam: float
    kappa: float
    alpha: float


@dataclass
class JobResult:
    seed: int
    position: int
    client: int
    index: int
    tau_hat: int
    delta_over_m: float
    gen_gap: float
    proxy_gap: float
    final_distance: float
    trace: object = None


@functools.lru_cache(maxsize=16)
def prepare(cfg):
    """Federation, model, measured constants and probes for one cell."""
    d, mo, tr, sb = cfg.data, cfg.model, cfg.train, cfg.stability
    pool = generate_synthetic(d.d, d.C, d.samples, d.seed, d.noise)
    fed = dirichlet_partition(pool, d.m, d.beta, d.seed)
    model = build_model(mo.family, d.d, d.C, mo.hidden, mo.weight_decay, mo.curvature)
    c = estimate_constants(model, fed, sb.probe_count, seed=d.seed)
    mu = c.mu if tr.mu == "auto" else float(tr.mu)
    if tr.schedule == "inverse_iteration" and mu * c.L > 1.0 + 1e-12:
        raise ConfigError(f"mu*L = {mu * c.L:.4g} exceeds 1 for the inverse-iteration schedule")
    if tr.schedule == "inverse_iteration" and mu != c.mu:
        # the bounds are evaluated at the step-size scale actually used
        c = dataclasses.replace(c, mu=mu)
    probes = draw_probes(fed, sb.probe_size, d.seed + 1)
    mixing = None if tr.topology is None else build_topology(tr.topology, d.m)
    alpha = alpha_from_mu_l(c.mu * c.L) if sb.alpha == "auto" else float(sb.alpha)
    lam = kappa = None
    if mixing is not None:
        lam = spectral_lambda(mixing)
        kappa = kappa_lambda(lam, alpha)
    return Context(fed, model, c, mu, probes, mixing, lam, kappa, alpha)


def perturbation_positions(cfg, seed):
    rng = stream(cfg.data.seed, "position", seed)
    fed_m, S = cfg.data.m, cfg.data.samples // cfg.data.m
    return [(int(rng.integers(fed_m)), int(rng.integers(S))) for _ in range(cfg.stability.positions)]


def train_config(cfg, ctx, seed, track_loss=False):
    tr = cfg.train
    return TrainConfig(
        T=tr.T,
        K=tr.K,
        n=tr.n,
        batch=tr.batch,
        mu=ctx.mu,
        schedule=tr.schedule,
        master_seed=tr.seed + seed,
        sampling=tr.sampling,
        thin=0,
        track_loss=track_loss,
    )


def run_job(cfg, seed, position, keep_trace=False):
    ctx = prepare(cfg)
    client, index = perturbation_positions(cfg, seed)[position]
    fed = ctx.fed
    forced = (fed.X[client, index], fed.y[client, index]) if cfg.stability.zero_perturbation else None
    neighbor, pert = make_neighbor(fed, client, index, seed, replacement=forced)
    tcfg = train_config(cfg, ctx, seed, track_loss=keep_trace)
    ta, tb, ct = run_coupled(fed, neighbor, pert, ctx.model, tcfg, mixing=ctx.mixing)
    gap = empirical_gen_gap(ct.final_pair, ctx.model, ctx.probes, G=ctx.constants.G)
    return JobResult(
        seed=seed,
        position=position,
        client=client,
        index=index,
        tau_hat=ct.tau_hat,
        delta_over_m=float(ct.delta[-1]) / fed.m,
        gen_gap=gap.loss_gap,
        proxy_gap=gap.proxy,
        final_distance=ct.final_distance(),
        trace=(ta, tb, ct) if keep_trace else None,
    )


def _job(args):
    return run_job(*args)


def run_cell(cfg, threads=1, keep_traces=False):
    """All (seed, position) jobs of one cell, in deterministic order."""
    prepare(cfg)
    jobs = [(cfg, s, q, keep_traces) for s in range(cfg.stability.seeds) for q in range(cfg.stability.positions)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_job, jobs))
    return [_job(j) for j in jobs]


def cell_factors(cfg):
    tr = cfg.train
    return {
        "algo": tr.algo,
        "n": tr.n if tr.n is not None else cfg.data.m,
        "topology": tr.topology if tr.topology is not None else "server",
        "m": cfg.data.m,
        "S": cfg.data.samples // cfg.data.m,
        "K": tr.K,
        "T": tr.T,
    }


def cell_bound(cfg, ctx):
    if cfg.train.schedule != "inverse_iteration":
        return None
    f = cell_factors(cfg)
    if ctx.mixing is None:
        return bound_theorem1(ctx.constants, f["m"], f["n"], f["S"], f["T"], f["K"])
    return bound_theorem2(ctx.constants, f["m"], ctx.kappa, f["S"], f["T"], f["K"])


def summarize(cfg, jobs):
    ctx = prepare(cfg)
    f = cell_factors(cfg)
    bound = cell_bound(cfg, ctx)
    rows = []
    for metric in METRICS:
        b = band([getattr(j, metric) for j in jobs])
        rows.append(
            {
                **f,
                "metric": metric,
                "mean": b.mean,
                "median": b.median,
                "q_lo": b.q_lo,
                "q_hi": b.q_hi,
                "mean_lo": b.mean_lo,
                "mean_hi": b.mean_hi,
                "count": b.count,
                "lambda": ctx.lam,
                "kappa_lambda": ctx.kappa,
                "bound": None if bound is None else bound.epsilon_theorem,
            }
        )
    return rows, bound


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def write_manifest(directory, cfg, files, extra=None):
    manifest = {
        "config_hash": cfg.content_hash(),
        "config": cfg.to_dict(),
        "seeds": {
            "data": cfg.data.seed,
            "train": [cfg.train.seed + s for s in range(cfg.stability.seeds)],
            "positions": cfg.stability.positions,
        },
        "versions": {"fedstab": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "files": sorted(files),
    }
    if extra:
        manifest.update(extra)
    write_json(os.path.join(directory, "manifest.json"), manifest)


JOB_COLUMNS = ("seed", "position", "client", "index", "tau_hat", "delta_over_m", "gen_gap", "proxy_gap", "final_distance")


def cmd_run(cfg, out=None, threads=1):
    """Run one cell and write traces, job table, summary, bound report and manifest."""
    out = out or cfg.output.directory
    os.makedirs(os.path.join(out, "traces"), exist_ok=True)
    jobs = run_cell(cfg, threads, keep_traces=True)
    files = []
    for j in jobs:
        name = os.path.join("traces", f"seed{j.seed:03d}_pos{j.position:02d}.csv")
        ta, tb, ct = j.trace
        export_trace_csv(ct, os.path.join(out, name), ta, tb)
        files.append(name)
    rows, bound = summarize(cfg, jobs)
    if "csv" in cfg.output.formats:
        write_csv(os.path.join(out, "jobs.csv"), [j.__dict__ for j in jobs], JOB_COLUMNS)
        write_csv(os.path.join(out, "summary.csv"), rows, SUMMARY_COLUMNS)
        files += ["jobs.csv", "summary.csv"]
    if "json" in cfg.output.formats:
        ctx = prepare(cfg)
        report = {"factors": cell_factors(cfg), "bound": None if bound is None else bound.to_dict()}
        if bound is not None:
            report["bound"]["empirical_gap"] = float(np.mean([j.proxy_gap for j in jobs]))
        report["lambda"], report["kappa_lambda"], report["alpha"] = ctx.lam, ctx.kappa, ctx.alpha
        write_json(os.path.join(out, "bound_report.json"), report)
        files.append("bound_report.json")
    write_manifest(out, cfg, files)
    return jobs, rows, bound


def _sweep(cells, threads):
    rows = []
    per_cell = []
    for cfg in cells:
        jobs = run_cell(cfg, threads)
        r, bound = summarize(cfg, jobs)
        rows += r
        per_cell.append((cfg, jobs, bound))
    return rows, per_cell


def _write_sweep(out, name, base, rows, extra=None):
    if out is None:
        return
    os.makedirs(out, exist_ok=True)
    write_csv(os.path.join(out, name), rows, SUMMARY_COLUMNS)
    write_manifest(out, base, [name], extra)


def sweep_participation(cfg, n_list, out=None, threads=1):
    """FedAvg cells over the number of active clients."""
    n_list = list(n_list)
    if not n_list:
        raise ConfigError("n_list is empty")
    for n in n_list:
        if not 1 <= n <= cfg.data.m:
            raise ConfigError(f"n={n} outside [1, {cfg.data.m}]")
    cells = [cfg.with_changes(train={"n": int(n), "topology": None}) for n in n_list]
    rows, per_cell = _sweep(cells, threads)
    _write_sweep(out, "participation.csv", cfg, rows, {"n_list": n_list})
    return rows, per_cell


def sweep_topology(cfg, kinds, out=None, threads=1):
    """D-FedAvg cells over topologies at fixed m."""
    kinds = list(kinds)
    if not kinds:
        raise ConfigError("kinds is empty")
    cells = []
    for k in kinds:
        c = cfg.with_changes(train={"n": None, "topology": k})
        validate(c)
        cells.append(c)
    rows, per_cell = _sweep(cells, threads)
    _write_sweep(out, "topology.csv", cfg, rows, {"kinds": kinds})
    return rows, per_cell


def trend(values):
    """'down', 'up', 'flat' or 'mixed' for a sequence; 'undefined' below two points."""
    if len(values) < 2:
        return "undefined"
    diffs = np.diff(values)
    if np.all(diffs < 0):
        return "down"
    if np.all(diffs > 0):
        return "up"
    if np.all(diffs == 0):
        return "flat"
    return "mixed"


def collapse(cfg, m_list, S, kinds, out=None, threads=1, metric="gen_gap"):
    """D-FedAvg cells over (topology, m) at a fixed per-client sample count S."""
    m_list = [int(m) for m in m_list]
    kinds = list(kinds)
    if not m_list or not kinds:
        raise ConfigError("m_list and kinds must be non-empty")
    cells = []
    for k in kinds:
        for m in m_list:
            c = cfg.with_changes(data={"m": m, "S": int(S), "total": None}, train={"n": None, "topology": k})
            validate(c)
            cells.append(c)
    rows, per_cell = _sweep(cells, threads)
    verdicts = []
    for k in kinds:
        med = []
        for c, jobs, _ in per_cell:
            if c.train.topology != k:
                continue
            ctx = prepare(c)
            med.append(float(np.median([getattr(j, metric) for j in jobs])))
            verdicts.append(
                {
                    "topology": k,
                    "m": c.data.m,
                    "kappa_lambda": ctx.kappa,
                    "threshold": collapse_threshold(c.data.m),
                    "passes": collapse_check(ctx.kappa, c.data.m),
                    "median_" + metric: med[-1],
                }
            )
        for v in verdicts:
            if v["topology"] == k:
                v["trend"] = trend(med)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        write_csv(os.path.join(out, "collapse.csv"), rows, SUMMARY_COLUMNS)
        write_json(os.path.join(out, "collapse_verdicts.json"), verdicts)
        write_manifest(out, cfg, ["collapse.csv", "collapse_verdicts.json"], {"m_list": m_list, "S": S, "kinds": kinds})
    return rows, per_cell, verdicts


def cmd_topology(kind, m, alpha=0.5, t_max=50):
    """lambda, kappa, collapse verdict and the ||A^t - P|| <= lambda^t check for one graph."""
    A = build_topology(kind, m)
    lam = spectral_lambda(A)
    kappa = kappa_lambda(lam, alpha)
    steps = mixing_contraction_check(A, t_max)
    return {
        "kind": kind,
        "m": m,
        "alpha": alpha,
        "lambda": lam,
        "kappa_lambda": kappa,
        "collapse_threshold": collapse_threshold(m),
        "collapse_check": "pass" if collapse_check(kappa, m) else "fail",
        "contraction_check": "pass" if all(s.ok for s in steps) else "fail",
        "contraction_steps": t_max,
    }
