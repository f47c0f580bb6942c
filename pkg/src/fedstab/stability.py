"""Empirical stability estimates and the topology-aware generalization bounds."""

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import stream


@dataclass(frozen=True)
class GenGap:
    loss_gap: float
    proxy: float = None


def empirical_gen_gap(final_pair, model, probes, G=None):
    """max_z |f(w, z) - f(w~, z)| over the probe set.

    With ``G`` given, ``proxy`` is G * ||w - w~|| (the Lipschitz proxy).
    """
    X, y = probes
    if len(X) == 0:
        raise ValueError("probe set is empty")
    w, wt = (np.asarray(v, dtype=float) for v in final_pair)
    f = model.losses(np.stack([w, wt]), np.stack([X, X]), np.stack([y, y]))
    gap = float(np.max(np.abs(f[0] - f[1])))
    proxy = None if G is None else float(G * np.linalg.norm(w - wt))
    return GenGap(gap, proxy)


def measure_G(model, pairs, probes):
    """Largest |f(w, z) - f(w~, z)| / ||w - w~|| over parameter pairs and probes."""
    X, y = probes
    best = 0.0
    for w, wt in pairs:
        dist = float(np.linalg.norm(np.asarray(w) - np.asarray(wt)))
        if dist == 0.0:
            continue
        f = model.losses(np.stack([w, wt]), np.stack([X, X]), np.stack([y, y]))
        best = max(best, float(np.max(np.abs(f[0] - f[1]))) / dist)
    return best


@dataclass
class BoundReport:
    epsilon_theorem: float
    tau0_star: float
    tau0_raw: float
    clamped: bool
    closed_form: float
    inputs: dict
    empirical_gap: float = None

    def to_dict(self):
        return {
            "epsilon_theorem": self.epsilon_theorem,
            "tau0_star": self.tau0_star,
            "tau0_raw": self.tau0_raw,
            "clamped": self.clamped,
            "closed_form": self.closed_form,
            "inputs": self.inputs,
            "empirical_gap": self.empirical_gap,
        }


def _check_constants(c):
    for name in ("L", "sigma_l", "G", "U", "mu"):
        if not getattr(c, name) > 0:
            raise ValueError(f"{name} must be positive, got {getattr(c, name)}")
    if c.mu * c.L > 1.0 + 1e-12:
        raise ValueError(f"mu*L = {c.mu * c.L} exceeds 1")


def _finish(c, topo_factor, prob_scale, S, T, K, inputs):
    """Shared tail of both theorems.

    The bound reads  (2 sigma G / (S L)) * topo * (TK / tau0)^(mu L) + prob * U tau0 / S,
    with topo = 1/m, prob = n/m for FedAvg and topo = (1 + 6 sqrt(m) kappa)/m,
    prob = 1 for D-FedAvg. ``closed_form`` is the optimised expression; once
    tau0 has to be clamped the two-term value at the clamped tau0 takes over
    whenever it is larger, which keeps the result a valid and monotone bound.
    """
    muL = c.mu * c.L
    TK = T * K
    e = 1.0 / (1.0 + muL)
    ratio = topo_factor / prob_scale
    tau0 = (2.0 * c.sigma_l * c.G / (c.U * c.L) * ratio) ** e * TK ** (muL * e)
    closed = 4.0 / S * (c.sigma_l * c.G / c.L) ** e * topo_factor**e * prob_scale ** (muL * e) * (c.U * TK) ** (muL * e)
    tau0_c = min(max(tau0, 1.0), float(TK))
    clamped = tau0_c != tau0

    def two_term(t0):
        return 2.0 * c.sigma_l * c.G / (S * c.L) * topo_factor * (TK / t0) ** muL + prob_scale * c.U * t0 / S

    eps = max(closed, two_term(tau0_c)) if clamped else closed
    return BoundReport(eps, tau0_c, tau0, clamped, closed, inputs)


def _inputs(c, **kw):
    return {"L": c.L, "sigma_l": c.sigma_l, "G": c.G, "U": c.U, "mu": c.mu, **kw}


def bound_theorem1(c, m, n, S, T, K):
    """FedAvg bound: (4/S)(sigma G/L)^(1/(1+muL)) (n^(muL/(1+muL))/m) (U T K)^(muL/(1+muL))."""
    _check_constants(c)
    if not 1 <= n <= m:
        raise ValueError(f"need 1 <= n <= m, got n={n}, m={m}")
    return _finish(c, 1.0 / m, n / m, S, T, K, _inputs(c, m=m, n=n, S=S, T=T, K=K))


def bound_theorem2(c, m, kappa, S, T, K):
    """D-FedAvg bound with topology factor (1 + 6 sqrt(m) kappa)/m."""
    _check_constants(c)
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    topo = (1.0 + 6.0 * math.sqrt(m) * kappa) / m
    return _finish(c, topo, 1.0, S, T, K, _inputs(c, m=m, kappa=kappa, S=S, T=T, K=K))


def optimal_participation(m, mu_l):
    """n* ~ m^((1+muL)/(1+2muL)), unrounded."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0.0 < mu_l <= 1.0:
        raise ValueError(f"mu*L must lie in (0, 1], got {mu_l}")
    return float(m) ** ((1.0 + mu_l) / (1.0 + 2.0 * mu_l))


def collapse_threshold(m):
    """sqrt(m); the hidden constant in kappa <= O(sqrt(m)) is taken as 1."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return math.sqrt(m)


def collapse_check(kappa, m):
    """True when the topology coefficient stays within the threshold."""
    return kappa <= collapse_threshold(m)


@dataclass(frozen=True)
class Band:
    mean: float
    median: float
    q_lo: float
    q_hi: float
    mean_lo: float
    mean_hi: float
    count: int


@dataclass
class CurvePoint:
    factors: dict
    delta: Band
    gap: Band = None
    extra: dict = field(default_factory=dict)


def band(values, quantiles=(0.1, 0.9), n_boot=200, seed=0):
    """Mean, median, quantile band of the values, and a bootstrap band of the mean."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        raise ValueError("no values to aggregate")
    if np.all(v == v[0]):
        c = float(v[0])
        return Band(c, c, c, c, c, c, len(v))
    lo, hi = np.quantile(v, quantiles)
    rng = stream(seed, "bootstrap", len(v))
    boots = v[rng.integers(0, len(v), size=(n_boot, len(v)))].mean(axis=1)
    mlo, mhi = (float(q) for q in np.quantile(boots, quantiles))
    return Band(float(v.mean()), float(np.median(v)), float(lo), float(hi), mlo, mhi, len(v))


def final_delta_over_m(ct):
    return float(ct.delta[-1]) / ct.m


def stability_curve(traces, gaps=None, group_by=("algo", "n", "topology", "m", "K"), min_traces=10, quantiles=(0.1, 0.9)):
    """Aggregate coupled traces into one point per group of experimental factors.

    ``gaps`` optionally gives the empirical generalization gap of each trace
    (same order). Groups appear in order of first occurrence.
    """
    traces = list(traces)
    if len(traces) < min_traces:
        raise ValueError(f"need at least {min_traces} traces, got {len(traces)}")
    if gaps is not None and len(gaps) != len(traces):
        raise ValueError("gaps and traces differ in length")
    groups = {}
    for i, ct in enumerate(traces):
        key = tuple(ct.factors.get(f) for f in group_by)
        groups.setdefault(key, []).append(i)
    points = []
    for key, members in groups.items():
        deltas = [final_delta_over_m(traces[i]) for i in members]
        gap_band = None if gaps is None else band([gaps[i] for i in members], quantiles)
        points.append(CurvePoint(dict(zip(group_by, key)), band(deltas, quantiles), gap_band))
    return points
