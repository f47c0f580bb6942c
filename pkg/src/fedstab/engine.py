"""FedAvg and D-FedAvg, single and coupled.

Both algorithms run through one lockstep loop that advances one or two
"arms" (a federation and optionally its neighbour) with the same random
draws: same initial model, same client selection, same minibatch indices.
Randomness comes from counter-based streams keyed by (seed, purpose, t,
client), so nothing depends on evaluation order or thread count.

Aggregation is an explicit client-ordered sum, which keeps CFL with n = m
and DFL on the ``full`` topology bitwise identical.
"""

from dataclasses import dataclass, field

import numpy as np

from .rng import stream


class DivergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    T: int
    K: int
    n: int = None
    batch: int = 1
    mu: float = 1.0
    schedule: str = "inverse_iteration"
    master_seed: int = 0
    sampling: str = "with_replacement"
    thin: int = 1
    track_loss: bool = True

    def __post_init__(self):
        if self.T < 1 or self.K < 1:
            raise ValueError("T and K must be >= 1")
        if self.n is not None and self.n < 1:
            raise ValueError("n must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.schedule not in ("inverse_iteration", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.sampling not in ("with_replacement", "shuffle"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.thin < 0:
            raise ValueError("thin must be >= 0")

    def eta(self, tau):
        """Step size at 1-indexed iteration tau = tK + k + 1."""
        return self.mu / tau if self.schedule == "inverse_iteration" else self.mu


@dataclass
class RunTrace:
    """Parameters of one arm.

    ``params[s]`` holds all client models after global step ``steps[s]``
    (step 0 is the initial state, step tau = tK + k + 1 the state after local
    step k of round t). ``round_start[t]`` holds w_{i,0}^t after the
    broadcast/gossip, ``global_models[t]`` the reported average w^t.
    """

    params: np.ndarray
    steps: np.ndarray
    round_start: np.ndarray
    global_models: np.ndarray
    step_loss: np.ndarray
    round_loss: np.ndarray
    max_loss: float

    @property
    def final(self):
        return self.global_models[-1]


@dataclass
class CoupledTrace:
    """Per-iteration distance bookkeeping of a twin run.

    ``delta[tau]`` is sum_i ||w_i - w~_i|| after global step tau (index 0 is
    the initial state); ``client_dist`` has the per-client terms.
    ``delta_start[t]`` / ``delta_end[t]`` are Delta_0^t and Delta_K^t.
    """

    delta: np.ndarray
    client_dist: np.ndarray
    start_dist: np.ndarray
    delta_start: np.ndarray
    delta_end: np.ndarray
    eta: np.ndarray
    active: np.ndarray
    hit: np.ndarray
    hit_grad_gap: np.ndarray
    tau_hat: int
    final_pair: tuple
    K: int
    perturbation: object = None
    factors: dict = field(default_factory=dict)

    @property
    def m(self):
        return self.client_dist.shape[1]

    def final_distance(self):
        w, wt = self.final_pair
        return float(np.linalg.norm(w - wt))


def _select(cfg, m, t):
    n = m if cfg.n is None else cfg.n
    if n == m:
        return np.arange(m)
    return np.sort(stream(cfg.master_seed, "select", t).choice(m, size=n, replace=False))


def _batches(cfg, S, t, m):
    """Sample indices of shape (m, K, batch) for round t, drawn for every client."""
    out = np.empty((m, cfg.K, cfg.batch), dtype=np.int64)
    for i in range(m):
        rng = stream(cfg.master_seed, "batch", t, i)
        if cfg.sampling == "with_replacement":
            out[i] = rng.integers(0, S, size=(cfg.K, cfg.batch))
        else:
            need = cfg.K * cfg.batch
            perm = np.concatenate([rng.permutation(S) for _ in range(-(-need // S))])
            out[i] = perm[:need].reshape(cfg.K, cfg.batch)
    return out


def _ordered_average(W, idx):
    inv = 1.0 / len(idx)
    acc = np.zeros(W.shape[1])
    for i in idx:
        acc += inv * W[i]
    return acc


def _gossip(A, W):
    out = np.zeros_like(W)
    for j in range(W.shape[0]):
        out += A[:, j : j + 1] * W[j]
    return out


def _client_dist(Wa, Wb):
    diff = Wa - Wb
    return np.sqrt(np.einsum("mp,mp->m", diff, diff))


def _check_finite(W, t, k, arm):
    if not np.all(np.isfinite(W)):
        raise DivergenceError(f"non-finite parameters in arm {arm} at round {t}, step {k}")


def _mean_loss(model, W, fed):
    return float(model.losses(W, fed.X, fed.y).mean())


def _simulate(feds, model, cfg, mixing=None, pert=None, coupled=False):
    fed0 = feds[0]
    m, S = fed0.m, fed0.S
    T, K = cfg.T, cfg.K
    n = m if cfg.n is None else cfg.n
    if mixing is None and n > m:
        raise ValueError(f"n={n} exceeds m={m}")
    if mixing is not None and mixing.m != m:
        raise ValueError(f"mixing matrix is for {mixing.m} clients, federation has {m}")
    A = None if mixing is None else mixing.weights
    arms = len(feds)

    w0 = model.init(stream(cfg.master_seed, "init"))
    W = [np.repeat(w0[None], m, axis=0) for _ in range(arms)]

    keep = cfg.thin > 0
    snap_steps = [0]
    snaps = [[Wa.copy()] for Wa in W] if keep else None
    round_start = [np.empty((T, m, model.p)) for _ in range(arms)]
    global_models = [np.empty((T + 1, model.p)) for _ in range(arms)]
    for a in range(arms):
        global_models[a][0] = w0
    step_loss = np.full((arms, T * K + 1), np.nan)
    round_loss = np.full((arms, T), np.nan)
    max_loss = [-np.inf] * arms
    if cfg.track_loss:
        for a in range(arms):
            step_loss[a, 0] = _mean_loss(model, W[a], feds[a])

    if coupled:
        client_dist = np.zeros((T * K + 1, m))
        start_dist = np.zeros((T, m))
        eta_log = np.empty(T * K)
        active_log = np.zeros((T, m), dtype=bool)
        hit = np.zeros((T * K, m), dtype=bool)
        hit_gap = np.full(T * K, np.nan)
        tau_hat = None
        pi, pj = (pert.client, pert.index) if pert is not None else (-1, -1)

    for t in range(T):
        if A is None:
            if t > 0:
                for a in range(arms):
                    W[a][:] = global_models[a][t]
            active = _select(cfg, m, t)
        else:
            # every client starts from w0, so the round-0 gossip is the identity
            if t > 0:
                for a in range(arms):
                    W[a] = _gossip(A, W[a])
            active = np.arange(m)
        for a in range(arms):
            round_start[a][t] = W[a]
        batches = _batches(cfg, S, t, m)
        if coupled:
            active_log[t, active] = True
            start_dist[t] = _client_dist(W[0], W[1])
        rows = batches[active]
        for k in range(K):
            tau = t * K + k + 1
            eta = cfg.eta(tau)
            idx = rows[:, k, :]
            if coupled:
                where = np.flatnonzero(active == pi)
                if where.size and np.any(idx[where[0]] == pj):
                    hit[tau - 1, pi] = True
                    if tau_hat is None:
                        tau_hat = tau
                    w_before = W[1][pi].copy()
                    gz = model.grad(w_before, pert.original_x, pert.original_y)
                    gzt = model.grad(w_before, pert.replacement_x, pert.replacement_y)
                    hit_gap[tau - 1] = float(np.linalg.norm(gz - gzt))
            for a in range(arms):
                fed = feds[a]
                Xb = fed.X[active[:, None], idx]
                yb = fed.y[active[:, None], idx]
                if cfg.track_loss:
                    max_loss[a] = max(max_loss[a], float(model.losses(W[a][active], Xb, yb).max()))
                # overflow is reported as DivergenceError just below
                with np.errstate(over="ignore", invalid="ignore"):
                    g = model.mean_grad(W[a][active], Xb, yb)
                    W[a][active] = W[a][active] - eta * g
                _check_finite(W[a], t, k, a)
            if coupled:
                eta_log[tau - 1] = eta
                client_dist[tau] = _client_dist(W[0], W[1])
            if cfg.track_loss:
                for a in range(arms):
                    step_loss[a, tau] = _mean_loss(model, W[a], feds[a])
            if keep and (tau % cfg.thin == 0 or tau == T * K):
                snap_steps.append(tau)
                for a in range(arms):
                    snaps[a].append(W[a].copy())
        for a in range(arms):
            if A is None:
                global_models[a][t + 1] = _ordered_average(W[a], active)
            else:
                global_models[a][t + 1] = _ordered_average(W[a], range(m))
            if cfg.track_loss:
                g_rep = np.repeat(global_models[a][t + 1][None], m, axis=0)
                round_loss[a, t] = _mean_loss(model, g_rep, feds[a])

    traces = []
    for a in range(arms):
        traces.append(
            RunTrace(
                params=np.stack(snaps[a]) if keep else np.empty((0, m, model.p)),
                steps=np.array(snap_steps if keep else [], dtype=int),
                round_start=round_start[a],
                global_models=global_models[a],
                step_loss=step_loss[a],
                round_loss=round_loss[a],
                max_loss=max_loss[a],
            )
        )
    if not coupled:
        return traces
    # Delta_0^t after the broadcast/gossip of round t
    ct = CoupledTrace(
        delta=client_dist.sum(axis=1),
        client_dist=client_dist,
        start_dist=start_dist,
        delta_start=start_dist.sum(axis=1),
        delta_end=client_dist[K::K].sum(axis=1),
        eta=eta_log,
        active=active_log,
        hit=hit,
        hit_grad_gap=hit_gap,
        tau_hat=tau_hat,
        final_pair=(traces[0].final.copy(), traces[1].final.copy()),
        K=K,
        perturbation=pert,
    )
    return traces, ct


def run_cfl(fed, model, cfg):
    """FedAvg: n random clients per round train K SGD steps from w^t and are averaged."""
    n = fed.m if cfg.n is None else cfg.n
    if n > fed.m:
        raise ValueError(f"n={n} exceeds m={fed.m}")
    return _simulate([fed], model, cfg)[0]


def run_dfl(fed, model, mixing, cfg):
    """D-FedAvg: gossip with the mixing matrix, then K local SGD steps on every client."""
    return _simulate([fed], model, cfg, mixing=mixing)[0]


def run_coupled(fed, neighbor, perturbation, model, cfg, mixing=None):
    """Run ``fed`` and ``neighbor`` with identical randomness.

    ``mixing=None`` selects FedAvg, a MixingMatrix selects D-FedAvg. Returns
    (trace, neighbor_trace, coupled_trace).
    """
    if fed.X.shape != neighbor.X.shape:
        raise ValueError("federations have different shapes")
    diff = np.any(fed.X != neighbor.X, axis=2) | (fed.y != neighbor.y)
    where = {tuple(p) for p in np.argwhere(diff).tolist()}
    if perturbation is not None and not where <= {(perturbation.client, perturbation.index)}:
        raise ValueError(f"federations differ at {sorted(where)}, not only at the perturbation")
    if perturbation is None and where:
        raise ValueError("federations differ but no perturbation was given")
    if mixing is None:
        n = fed.m if cfg.n is None else cfg.n
        if n > fed.m:
            raise ValueError(f"n={n} exceeds m={fed.m}")
    traces, ct = _simulate([fed, neighbor], model, cfg, mixing=mixing, pert=perturbation, coupled=True)
    return traces[0], traces[1], ct


def export_trace_csv(ct, path, trace=None, neighbor_trace=None):
    """One row per global step: t, k, tau, delta, mean_loss_C, mean_loss_Ctilde."""
    K = ct.K
    loss_a = trace.step_loss if trace is not None else np.full(ct.delta.shape, np.nan)
    loss_b = neighbor_trace.step_loss if neighbor_trace is not None else np.full(ct.delta.shape, np.nan)
    with open(path, "w") as fh:
        fh.write("t,k,tau,delta,mean_loss_C,mean_loss_Ctilde\n")
        for tau in range(ct.delta.shape[0]):
            if tau == 0:
                t, k = 0, 0
            else:
                t, k = divmod(tau - 1, K)
                k += 1
            fh.write(f"{t},{k},{tau},{float(ct.delta[tau])!r},{float(loss_a[tau])!r},{float(loss_b[tau])!r}\n")
