"""Synthetic pools, Dirichlet client partitions and one-sample neighbours."""

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .rng import stream


@dataclass(frozen=True, eq=False)
class Pool:
    X: np.ndarray
    y: np.ndarray
    means: np.ndarray
    noise: float
    seed: int

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def C(self):
        return self.means.shape[0]

    def __len__(self):
        return self.X.shape[0]


@dataclass(frozen=True, eq=False)
class Federation:
    """m client shards of exactly S samples each.

    ``X`` has shape (m, S, d) and ``y`` shape (m, S). ``proportions`` holds the
    Dirichlet draw per client, ``class_counts`` what the shard actually got.
    """

    X: np.ndarray
    y: np.ndarray
    C: int
    means: np.ndarray
    noise: float
    proportions: np.ndarray
    class_counts: np.ndarray
    beta: float
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.ndim != 3 or self.y.shape != self.X.shape[:2]:
            raise ValueError(f"bad shard shapes {self.X.shape} / {self.y.shape}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.C):
            raise ValueError("labels out of range")

    @property
    def m(self):
        return self.X.shape[0]

    @property
    def S(self):
        return self.X.shape[1]

    @property
    def d(self):
        return self.X.shape[2]


@dataclass(frozen=True, eq=False)
class Perturbation:
    client: int
    index: int
    original_x: np.ndarray
    original_y: int
    replacement_x: np.ndarray
    replacement_y: int

    @property
    def is_null(self):
        return self.original_y == self.replacement_y and np.array_equal(self.original_x, self.replacement_x)


def class_means(d, C, seed):
    rng = stream(seed, "data", 0)
    means = rng.standard_normal((C, d))
    return means / np.linalg.norm(means, axis=1, keepdims=True)


def generate_synthetic(d, C, total, seed, noise=0.5):
    """Balanced Gaussian mixture with unit-norm class means."""
    if d < 1 or C < 2:
        raise ValueError(f"need d >= 1 and C >= 2, got d={d}, C={C}")
    if total < C:
        raise ValueError(f"total={total} is smaller than the number of classes C={C}")
    means = class_means(d, C, seed)
    rng = stream(seed, "data", 1)
    counts = np.full(C, total // C)
    counts[: total % C] += 1
    y = np.repeat(np.arange(C), counts)
    rng.shuffle(y)
    X = means[y] + noise * rng.standard_normal((total, d))
    return Pool(X, y, means, float(noise), int(seed))


def _largest_remainder(p, S):
    raw = p * S
    counts = np.floor(raw).astype(int)
    short = S - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def dirichlet_partition(pool, m, beta, seed):
    """Split ``pool`` into m equal shards with Dirichlet(beta) class mixes.

    Each client draws proportions p_i ~ Dir(beta * 1_C) and takes the
    corresponding class counts from what is still unassigned; any shortfall
    (class exhausted) is padded with unassigned samples drawn without
    replacement. Every pool index lands in at most one shard.
    """
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    m = int(m)
    if m < 1 or len(pool) < m:
        raise ValueError(f"pool of {len(pool)} samples cannot feed {m} clients")
    S = len(pool) // m
    C = pool.C
    rng = stream(seed, "partition", 0)
    by_class = []
    for c in range(C):
        idx = np.flatnonzero(pool.y == c)
        rng.shuffle(idx)
        by_class.append(list(idx))
    alpha = np.full(C, float(beta))
    proportions = np.empty((m, C))
    shards = []
    for i in range(m):
        crng = stream(seed, "partition", 1, i)
        p = crng.dirichlet(alpha)
        proportions[i] = p
        want = _largest_remainder(p, S)
        take = []
        for c in range(C):
            k = min(want[c], len(by_class[c]))
            take.extend(by_class[c][:k])
            del by_class[c][:k]
        short = S - len(take)
        if short:
            rest = np.array([j for c in range(C) for j in by_class[c]])
            pick = set(crng.choice(rest, size=short, replace=False).tolist())
            take.extend(sorted(pick))
            for c in range(C):
                by_class[c] = [j for j in by_class[c] if j not in pick]
        take = np.array(take)
        crng.shuffle(take)
        shards.append(take)
    index = np.stack(shards)
    y = pool.y[index]
    counts = np.stack([np.bincount(row, minlength=C) for row in y])
    return Federation(
        X=pool.X[index],
        y=y,
        C=C,
        means=pool.means,
        noise=pool.noise,
        proportions=proportions,
        class_counts=counts,
        beta=float(beta),
        seed=int(seed),
        meta={"pool_index": index, "pool_seed": pool.seed},
    )


def draw_class_sample(fed, label, rng):
    return fed.means[label] + fed.noise * rng.standard_normal(fed.d)


def make_neighbor(fed, client, index, seed, replacement=None):
    """Copy of ``fed`` whose sample (client, index) is replaced.

    By default the replacement keeps the label and redraws the features from
    the same class-conditional Gaussian. Pass ``replacement=(x, y)`` to force
    a specific sample (the original itself gives a null perturbation).
    """
    if not (0 <= client < fed.m and 0 <= index < fed.S):
        raise IndexError(f"position ({client}, {index}) outside {fed.m}x{fed.S}")
    x0 = fed.X[client, index].copy()
    y0 = int(fed.y[client, index])
    if replacement is None:
        rng = stream(seed, "perturb", client, index)
        x1, y1 = draw_class_sample(fed, y0, rng), y0
    else:
        x1, y1 = np.asarray(replacement[0], dtype=float), int(replacement[1])
        if x1.shape != (fed.d,) or not 0 <= y1 < fed.C:
            raise ValueError("replacement sample does not match the federation")
    X = fed.X.copy()
    y = fed.y.copy()
    X[client, index] = x1
    y[client, index] = y1
    counts = fed.class_counts.copy()
    counts[client, y0] -= 1
    counts[client, y1] += 1
    neighbor = replace(fed, X=X, y=y, class_counts=counts, meta={**fed.meta, "perturbed": (client, index)})
    return neighbor, Perturbation(client, index, x0, y0, x1, y1)


def differing_positions(a, b):
    if a.X.shape != b.X.shape:
        raise ValueError("federations have different shapes")
    diff = np.any(a.X != b.X, axis=2) | (a.y != b.y)
    return [tuple(int(v) for v in p) for p in np.argwhere(diff)]


def draw_probes(fed, size, seed):
    """Fresh samples from the union of the client distributions."""
    if size < 1:
        raise ValueError("probe size must be >= 1")
    rng = stream(seed, "probe", 0)
    clients = rng.integers(0, fed.m, size=size)
    mix = fed.class_counts / fed.S
    labels = np.array([rng.choice(fed.C, p=mix[i]) for i in clients])
    X = fed.means[labels] + fed.noise * rng.standard_normal((size, fed.d))
    return X, labels


def save_federation(fed, directory):
    os.makedirs(directory, exist_ok=True)
    for i in range(fed.m):
        with open(os.path.join(directory, f"client_{i:04d}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(fed.d)] + ["label"])
            for x, lab in zip(fed.X[i], fed.y[i]):
                w.writerow([repr(float(v)) for v in x] + [int(lab)])
    manifest = {
        "m": fed.m,
        "S": fed.S,
        "d": fed.d,
        "C": fed.C,
        "beta": fed.beta,
        "seed": fed.seed,
        "noise": fed.noise,
        "means": fed.means.tolist(),
        "proportions": fed.proportions.tolist(),
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_federation(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        man = json.load(fh)
    X = np.empty((man["m"], man["S"], man["d"]))
    y = np.empty((man["m"], man["S"]), dtype=int)
    for i in range(man["m"]):
        rows = np.loadtxt(os.path.join(directory, f"client_{i:04d}.csv"), delimiter=",", skiprows=1, ndmin=2)
        X[i] = rows[:, :-1]
        y[i] = rows[:, -1].astype(int)
    C = man["C"]
    return Federation(
        X=X,
        y=y,
        C=C,
        means=np.array(man["means"]),
        noise=man["noise"],
        proportions=np.array(man["proportions"]),
        class_counts=np.stack([np.bincount(row, minlength=C) for row in y]),
        beta=man["beta"],
        seed=man["seed"],
    )
