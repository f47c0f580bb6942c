"""Smooth local objectives with hand-derived per-sample gradients.

All batched methods take parameters ``W`` of shape (n, p), features ``X`` of
shape (n, b, d) and labels ``y`` of shape (n, b): n independent parameter
vectors, each evaluated on its own b samples. Only elementwise numpy and
``einsum`` are used (no BLAS), so results do not depend on thread count.
"""

from dataclasses import dataclass

import numpy as np

from .rng import stream


SMOOTHNESS_PAIRS = 20


class DimensionError(ValueError):
    pass


def _onehot(y, C):
    return (y[..., None] == np.arange(C)).astype(float)


class Model:
    family = "base"
    exact_smoothness = True

    def __init__(self, d, C, weight_decay=0.0):
        self.d = int(d)
        self.C = int(C)
        self.weight_decay = float(weight_decay)

    # -- batched interface -------------------------------------------------
    def losses(self, W, X, y):
        raise NotImplementedError

    def grads(self, W, X, y):
        """Per-sample gradients, shape (n, b, p)."""
        raise NotImplementedError

    def mean_grad(self, W, X, y):
        return self.grads(W, X, y).mean(axis=1)

    # -- single-sample interface -------------------------------------------
    def _check(self, w, x):
        w = np.asarray(w, dtype=float)
        x = np.asarray(x, dtype=float)
        if w.shape != (self.p,):
            raise DimensionError(f"parameter vector has shape {w.shape}, expected ({self.p},)")
        if x.shape[-1] != self.d:
            raise DimensionError(f"feature dimension {x.shape[-1]} does not match d={self.d}")
        return w, x

    def loss(self, w, x, y):
        w, x = self._check(w, x)
        return float(self.losses(w[None], x.reshape(1, 1, -1), np.array([[y]]))[0, 0])

    def grad(self, w, x, y):
        w, x = self._check(w, x)
        return self.grads(w[None], x.reshape(1, 1, -1), np.array([[y]]))[0, 0]

    def shard_loss(self, w, X, y):
        w, X = self._check(w, X)
        return float(self.losses(w[None], X[None], np.asarray(y)[None]).mean())

    def shard_grad(self, w, X, y):
        w, X = self._check(w, X)
        return self.mean_grad(w[None], X[None], np.asarray(y)[None])[0]

    def init(self, rng):
        return np.zeros(self.p)

    def smoothness(self, shards_X):
        """Smoothness of each shard-average objective, maximised over shards."""
        return None

    def sample_smoothness(self, X):
        """Smoothness valid for every single-sample loss in X."""
        return None

    def config(self):
        return {"family": self.family, "d": self.d, "C": self.C, "weight_decay": self.weight_decay}

    def _decay(self, W, n_b):
        return 0.5 * self.weight_decay * np.einsum("np,np->n", W, W)[:, None] * np.ones(n_b)


def _max_gram_eig(X):
    """Largest eigenvalue of X^T X / len(X) for a (S, d) block."""
    return float(np.linalg.eigvalsh(X.T @ X / X.shape[0])[-1])


class Quadratic(Model):
    """f(w, z) = (w - x)^T H (w - x) / 2; the label is ignored."""

    family = "quadratic"

    def __init__(self, d, C=2, H=None, curvature=1.0):
        super().__init__(d, C, 0.0)
        H = curvature * np.eye(self.d) if H is None else np.asarray(H, dtype=float)
        if H.shape != (self.d, self.d) or not np.array_equal(H, H.T):
            raise DimensionError("H must be a symmetric d x d matrix")
        self.H = H
        self.p = self.d

    def losses(self, W, X, y):
        diff = W[:, None, :] - X
        return 0.5 * np.einsum("nbi,ij,nbj->nb", diff, self.H, diff)

    def grads(self, W, X, y):
        diff = W[:, None, :] - X
        return np.einsum("ij,nbj->nbi", self.H, diff)

    def smoothness(self, shards_X):
        return float(np.linalg.eigvalsh(self.H)[-1])

    def sample_smoothness(self, X):
        return float(np.linalg.eigvalsh(self.H)[-1])

    def config(self):
        return {**super().config(), "H": self.H.tolist()}


class Ridge(Model):
    """Least squares onto one-hot targets with an L2 penalty."""

    family = "ridge"

    def __init__(self, d, C, weight_decay=0.0):
        super().__init__(d, C, weight_decay)
        self.p = self.d * self.C

    def _resid(self, W, X, y):
        Wm = W.reshape(-1, self.d, self.C)
        return np.einsum("nbd,ndc->nbc", X, Wm) - _onehot(y, self.C)

    def losses(self, W, X, y):
        r = self._resid(W, X, y)
        return 0.5 * np.einsum("nbc,nbc->nb", r, r) + self._decay(W, X.shape[1])

    def grads(self, W, X, y):
        r = self._resid(W, X, y)
        g = np.einsum("nbd,nbc->nbdc", X, r).reshape(X.shape[0], X.shape[1], self.p)
        return g + self.weight_decay * W[:, None, :]

    def smoothness(self, shards_X):
        return max(_max_gram_eig(Xi) for Xi in shards_X) + self.weight_decay

    def sample_smoothness(self, X):
        X = X.reshape(-1, self.d)
        return float(np.max(np.einsum("nd,nd->n", X, X))) + self.weight_decay


class Logistic(Model):
    """Logistic regression with weight decay.

    C == 2 uses a single weight vector and the sigmoid link, larger C the
    softmax over a d x C weight matrix. No bias term.
    """

    family = "logistic"

    def __init__(self, d, C, weight_decay=0.0):
        super().__init__(d, C, weight_decay)
        self.binary = self.C == 2
        self.p = self.d if self.binary else self.d * self.C
        # sup of the link's curvature: p(1-p) <= 1/4, softmax Jacobian <= 1/2
        self._curv = 0.25 if self.binary else 0.5

    def _logits(self, W, X):
        if self.binary:
            return np.einsum("nbd,nd->nb", X, W)
        return np.einsum("nbd,ndc->nbc", X, W.reshape(-1, self.d, self.C))

    def losses(self, W, X, y):
        s = self._logits(W, X)
        if self.binary:
            sign = 2.0 * y - 1.0
            data = np.logaddexp(0.0, -sign * s)
        else:
            top = s.max(axis=-1, keepdims=True)
            lse = top[..., 0] + np.log(np.exp(s - top).sum(axis=-1))
            data = lse - np.take_along_axis(s, y[..., None], axis=-1)[..., 0]
        return data + self._decay(W, X.shape[1])

    def grads(self, W, X, y):
        s = self._logits(W, X)
        if self.binary:
            sign = 2.0 * y - 1.0
            coef = -sign * (0.5 * (1.0 + np.tanh(-0.5 * sign * s)))
            g = coef[..., None] * X
        else:
            top = s.max(axis=-1, keepdims=True)
            e = np.exp(s - top)
            prob = e / e.sum(axis=-1, keepdims=True)
            g = np.einsum("nbd,nbc->nbdc", X, prob - _onehot(y, self.C))
            g = g.reshape(X.shape[0], X.shape[1], self.p)
        return g + self.weight_decay * W[:, None, :]

    def smoothness(self, shards_X):
        return self._curv * max(_max_gram_eig(Xi) for Xi in shards_X) + self.weight_decay

    def sample_smoothness(self, X):
        X = X.reshape(-1, self.d)
        return self._curv * float(np.max(np.einsum("nd,nd->n", X, X))) + self.weight_decay


class MLP(Model):
    """One tanh hidden layer followed by softmax cross-entropy."""

    family = "mlp"
    exact_smoothness = False

    def __init__(self, d, C, hidden=16, weight_decay=0.0, init_scale=0.5):
        super().__init__(d, C, weight_decay)
        self.hidden = int(hidden)
        self.init_scale = float(init_scale)
        h = self.hidden
        self._shapes = [(self.d, h), (h,), (h, self.C), (self.C,)]
        self._sizes = [int(np.prod(s)) for s in self._shapes]
        self.p = sum(self._sizes)

    def _unpack(self, W):
        out, at = [], 0
        for shape, size in zip(self._shapes, self._sizes):
            out.append(W[:, at : at + size].reshape(W.shape[0], *shape))
            at += size
        return out

    def _forward(self, W, X):
        W1, b1, W2, b2 = self._unpack(W)
        a = np.tanh(np.einsum("nbd,ndh->nbh", X, W1) + b1[:, None, :])
        s = np.einsum("nbh,nhc->nbc", a, W2) + b2[:, None, :]
        return a, s

    def losses(self, W, X, y):
        _, s = self._forward(W, X)
        top = s.max(axis=-1, keepdims=True)
        lse = top[..., 0] + np.log(np.exp(s - top).sum(axis=-1))
        data = lse - np.take_along_axis(s, y[..., None], axis=-1)[..., 0]
        return data + self._decay(W, X.shape[1])

    def grads(self, W, X, y):
        _, _, W2, _ = self._unpack(W)
        a, s = self._forward(W, X)
        top = s.max(axis=-1, keepdims=True)
        e = np.exp(s - top)
        d2 = e / e.sum(axis=-1, keepdims=True) - _onehot(y, self.C)
        d1 = np.einsum("nbc,nhc->nbh", d2, W2) * (1.0 - a * a)
        n, b = X.shape[:2]
        parts = [
            np.einsum("nbd,nbh->nbdh", X, d1).reshape(n, b, -1),
            d1,
            np.einsum("nbh,nbc->nbhc", a, d2).reshape(n, b, -1),
            d2,
        ]
        return np.concatenate(parts, axis=-1) + self.weight_decay * W[:, None, :]

    def init(self, rng):
        w = np.zeros(self.p)
        n1 = self._sizes[0]
        w[:n1] = rng.standard_normal(n1) * self.init_scale / np.sqrt(self.d)
        at = n1 + self._sizes[1]
        w[at : at + self._sizes[2]] = rng.standard_normal(self._sizes[2]) * self.init_scale / np.sqrt(self.hidden)
        return w

    def config(self):
        return {**super().config(), "hidden": self.hidden}


FAMILIES = {"quadratic": Quadratic, "ridge": Ridge, "logistic": Logistic, "mlp": MLP}


def build_model(family, d, C, hidden=16, weight_decay=0.0, curvature=1.0):
    if family == "quadratic":
        return Quadratic(d, C, curvature=curvature)
    if family == "ridge":
        return Ridge(d, C, weight_decay)
    if family == "logistic":
        return Logistic(d, C, weight_decay)
    if family == "mlp":
        return MLP(d, C, hidden, weight_decay)
    raise ValueError(f"unknown model family {family!r}")


@dataclass(frozen=True)
class AssumptionConstants:
    L: float
    sigma_l: float
    G: float
    U: float
    mu: float
    L_sample: float = None
    probes: int = 0

    def __post_init__(self):
        for name in ("L", "sigma_l", "G", "U", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.mu * self.L > 1.0 + 1e-12:
            raise ValueError(f"mu*L = {self.mu * self.L} exceeds 1")

    @property
    def mu_l(self):
        return self.mu * self.L


def reference_solution(model, fed, steps=200, lr=None, seed=0):
    """Full-batch gradient descent on the pooled data, used as a probe anchor."""
    X = fed.X.reshape(1, -1, fed.d)
    y = fed.y.reshape(1, -1)
    w = model.init(stream(seed, "init"))[None]
    if lr is None:
        L = model.smoothness([X[0]]) if model.exact_smoothness else None
        lr = 1.0 / L if L else 0.5
    for _ in range(steps):
        w = w - lr * model.mean_grad(w, X, y)
    return w[0]


def _empirical_smoothness(model, fed, anchors, rng, count, radius):
    best = 0.0
    for q in range(count):
        a = anchors[q % len(anchors)]
        w = a + radius * rng.standard_normal(model.p) / np.sqrt(model.p)
        w2 = w + radius * rng.standard_normal(model.p) / np.sqrt(model.p)
        i = int(rng.integers(fed.m))
        g = model.mean_grad(np.stack([w, w2]), np.stack([fed.X[i]] * 2), np.stack([fed.y[i]] * 2))
        best = max(best, float(np.linalg.norm(g[0] - g[1]) / np.linalg.norm(w - w2)))
    return best


def estimate_constants(model, fed, probe_count=200, anchors=None, radius=0.5, seed=0):
    """Estimate L, sigma_l, G and U for ``model`` on ``fed``; mu is set to 1/L.

    L is exact for the convex families and probed for the MLP. sigma_l is the
    largest per-sample deviation from the shard gradient seen at any probe;
    G and U are maxima over probes scattered around the anchors (the initial
    point and a full-batch reference solution unless given).
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    rng = stream(seed, "constants", 0)
    if anchors is None:
        anchors = [model.init(stream(seed, "init")), reference_solution(model, fed, seed=seed)]
    anchors = [np.asarray(a, dtype=float) for a in anchors]
    flat_X = fed.X.reshape(-1, fed.d)
    if model.exact_smoothness:
        L = model.smoothness(list(fed.X))
        L_sample = model.sample_smoothness(flat_X)
    else:
        # a max over n pairs covers about n/(n+1) of fresh pairs; 20 pairs per
        # probe keeps the 99% smoothness coverage with margin
        L = _empirical_smoothness(model, fed, anchors, rng, SMOOTHNESS_PAIRS * probe_count, radius)
        L_sample = L
    sigma = G = U = 0.0
    for q in range(probe_count):
        a = anchors[q % len(anchors)]
        w = a + radius * rng.standard_normal(model.p) / np.sqrt(model.p)
        w2 = w + 0.1 * radius * rng.standard_normal(model.p) / np.sqrt(model.p)
        Wq = np.repeat(w[None], fed.m, axis=0)
        g = model.grads(Wq, fed.X, fed.y)
        dev = np.linalg.norm(g - g.mean(axis=1, keepdims=True), axis=-1)
        sigma = max(sigma, float(dev.max()))
        both = model.losses(np.stack([w, w2]), np.stack([flat_X] * 2), np.stack([fed.y.reshape(-1)] * 2))
        U = max(U, float(both.max()))
        G = max(G, float(np.max(np.abs(both[0] - both[1]))) / float(np.linalg.norm(w - w2)))
    for a in anchors:
        U = max(U, float(model.losses(a[None], flat_X[None], fed.y.reshape(1, -1)).max()))
    mu = 1.0 / L if L > 0 else 0.0
    return AssumptionConstants(L=L, sigma_l=sigma, G=G, U=U, mu=mu, L_sample=L_sample, probes=probe_count)
