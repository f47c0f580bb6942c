"""Gossip topologies, their mixing matrices and spectral profile."""

import json
import math
from dataclasses import dataclass

import numpy as np

KINDS = ("ring", "grid", "star", "exp", "full", "custom")

# Eigenvalues this close to zero are treated as exactly zero, so that the
# rank-one ``full`` matrix gets lambda == 0 (and kappa == 0) instead of 1e-17.
LAMBDA_SNAP = 1e-12
STOCHASTIC_TOL = 1e-12
UNIT_EIG_TOL = 1e-8


class TopologyError(ValueError):
    pass


class NumericalValidationError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    m: int
    weights: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        validate_mixing(self)

    @property
    def P(self):
        return np.full((self.m, self.m), 1.0 / self.m)


@dataclass(frozen=True)
class SpectralProfile:
    lambda_: float
    kappa_lambda: float
    alpha: float


def validate_mixing(A):
    """Raise TopologyError unless A is a connected symmetric doubly stochastic matrix."""
    w = A.weights
    if A.kind not in KINDS:
        raise TopologyError(f"unknown topology kind {A.kind!r}")
    if w.shape != (A.m, A.m):
        raise TopologyError(f"weights have shape {w.shape}, expected ({A.m}, {A.m})")
    if not np.all(np.isfinite(w)):
        raise TopologyError("weights must be finite")
    if np.any(w < 0):
        raise TopologyError("weights must be non-negative")
    if not np.array_equal(w, w.T):
        raise TopologyError("weights must be exactly symmetric")
    if np.max(np.abs(w.sum(axis=1) - 1.0)) > STOCHASTIC_TOL:
        raise TopologyError("rows must sum to 1")
    if np.max(np.abs(w.sum(axis=0) - 1.0)) > STOCHASTIC_TOL:
        raise TopologyError("columns must sum to 1")
    eig = np.linalg.eigvalsh(w)
    if eig[0] <= -1.0 + UNIT_EIG_TOL:
        raise TopologyError("smallest eigenvalue must be > -1 (graph is bipartite without self-loops)")
    if A.m > 1 and eig[-2] >= 1.0 - UNIT_EIG_TOL:
        raise TopologyError("graph is disconnected: eigenvalue 1 is repeated")


def _adjacency(kind, m):
    adj = np.zeros((m, m), dtype=bool)
    if kind == "ring":
        if m < 3:
            raise TopologyError(f"ring needs m >= 3, got {m}")
        for i in range(m):
            adj[i, (i + 1) % m] = adj[i, (i - 1) % m] = True
    elif kind == "grid":
        side = math.isqrt(m)
        if side * side != m or m < 4:
            raise TopologyError(f"grid needs m to be a perfect square >= 4, got {m}")
        for i in range(m):
            r, c = divmod(i, side)
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                j = ((r + dr) % side) * side + (c + dc) % side
                if j != i:
                    adj[i, j] = True
    elif kind == "star":
        if m < 3:
            raise TopologyError(f"star needs m >= 3, got {m}")
        adj[0, 1:] = adj[1:, 0] = True
    elif kind == "exp":
        if m < 2 or m & (m - 1):
            raise TopologyError(f"exp needs m to be a power of two >= 2, got {m}")
        hop = 1
        while hop < m:
            for i in range(m):
                adj[i, (i + hop) % m] = adj[i, (i - hop) % m] = True
            hop *= 2
        np.fill_diagonal(adj, False)
    else:
        raise TopologyError(f"no builder for kind {kind!r}")
    return adj


def metropolis_hastings(adj):
    """a_ij = 1/(1 + max(d_i, d_j)) on edges, remaining mass on the diagonal."""
    adj = np.asarray(adj, dtype=bool)
    deg = adj.sum(axis=1)
    m = adj.shape[0]
    w = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            if adj[i, j]:
                w[i, j] = w[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    for i in range(m):
        w[i, i] = 1.0 - w[i].sum()
    return w


def build_topology(kind, m):
    """Build the mixing matrix for a named topology on ``m`` clients.

    ``full`` is exactly ``11^T/m``; every other kind gets Metropolis-Hastings
    weights, ``grid`` is a 2-D torus and ``exp`` links hops of +-2^j.
    """
    m = int(m)
    if m < 2:
        raise TopologyError(f"m must be >= 2, got {m}")
    if kind == "full":
        return MixingMatrix(m, np.full((m, m), 1.0 / m), "full")
    if kind not in KINDS or kind == "custom":
        raise TopologyError(f"unknown topology kind {kind!r}")
    return MixingMatrix(m, metropolis_hastings(_adjacency(kind, m)), kind)


def spectral_lambda(A):
    """max(|lambda_2|, |lambda_m|) of a validated mixing matrix."""
    eig = np.linalg.eigvalsh(A.weights)
    top = eig[-1]
    if abs(top - 1.0) > UNIT_EIG_TOL:
        raise NumericalValidationError(f"top eigenvalue {top!r} is not 1")
    if A.m == 1:
        return 0.0
    lam = float(max(abs(eig[0]), abs(eig[-2])))
    return 0.0 if lam < LAMBDA_SNAP else lam


def kappa_lambda(lam, alpha):
    """Topology coefficient bounding sum_s lam^(t-s-1)/(s+1)^alpha by kappa/t^alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lambda must lie in [0, 1), got {lam}")
    if lam == 0.0:
        return 0.0
    log_inv = math.log(1.0 / lam)
    return (
        (alpha / math.e) ** alpha / (lam * log_inv**alpha)
        + 2.0**alpha / ((1.0 - alpha) * math.e * lam * log_inv)
        + 2.0**alpha / (lam * log_inv)
    )


def alpha_from_mu_l(mu_l, floor=1e-3):
    """The exponent 1 - mu*L, kept inside the open interval (0, 1)."""
    return min(max(1.0 - mu_l, floor), 1.0 - floor)


def spectral_profile(A, alpha=0.5):
    lam = spectral_lambda(A)
    return SpectralProfile(lam, kappa_lambda(lam, alpha), alpha)


@dataclass(frozen=True)
class ContractionStep:
    t: int
    norm: float
    bound: float

    @property
    def ok(self):
        return self.norm <= self.bound + 1e-10


def mixing_contraction_check(A, t_max):
    """||A^t - P||_op against lambda^t for t = 1..t_max."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    lam = spectral_lambda(A)
    P = A.P
    power = np.eye(A.m)
    steps = []
    for t in range(1, t_max + 1):
        power = power @ A.weights
        steps.append(ContractionStep(t, float(np.linalg.norm(power - P, 2)), lam**t))
    return steps


def to_csv(A, path):
    with open(path, "w") as fh:
        for row in A.weights:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def from_csv(path, kind="custom"):
    w = np.loadtxt(path, delimiter=",", ndmin=2)
    return MixingMatrix(w.shape[0], w, kind)


def report(A, alpha=0.5):
    prof = spectral_profile(A, alpha)
    return {
        "kind": A.kind,
        "m": A.m,
        "lambda": prof.lambda_,
        "kappa_lambda": prof.kappa_lambda,
        "alpha": alpha,
    }


def report_json(A, alpha=0.5):
    return json.dumps(report(A, alpha), indent=2, sort_keys=True)
