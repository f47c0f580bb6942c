import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstab.data import Federation, dirichlet_partition, generate_synthetic, make_neighbor
from fedstab.engine import DivergenceError, TrainConfig, export_trace_csv, run_cfl, run_coupled, run_dfl
from fedstab.models import Logistic, Quadratic
from fedstab.rng import stream
from fedstab.topology import build_topology


def make_fed(X, y=None, C=2):
    X = np.asarray(X, dtype=float)
    y = np.zeros(X.shape[:2], dtype=int) if y is None else np.asarray(y)
    counts = np.stack([np.bincount(r, minlength=C) for r in y])
    return Federation(X, y, C, np.eye(C, X.shape[2]), 0.5, counts / counts.sum(1, keepdims=True), counts, 1.0, 0)


@pytest.fixture(scope="module")
def setup():
    fed = dirichlet_partition(generate_synthetic(5, 3, 8 * 16, 0), 8, 0.1, 0)
    return fed, Logistic(5, 3, 0.01)


def test_dfl_two_clients_by_hand():
    # client 0 holds x=1, client 1 holds x=3; f = (w - x)^2 / 2, mu = 1, K = 1
    fed = make_fed([[[1.0]], [[3.0]]])
    cfg = TrainConfig(T=2, K=1, mu=1.0)
    tr = run_dfl(fed, Quadratic(1), build_topology("full", 2), cfg)
    # round 0 (eta=1): each client jumps onto its sample
    np.testing.assert_array_equal(tr.global_models[1], [2.0])
    # round 1: gossip to (2, 2), then eta=1/2 -> (1.5, 2.5)
    np.testing.assert_array_equal(tr.round_start[1][:, 0], [2.0, 2.0])
    np.testing.assert_array_equal(tr.global_models[2], [2.0])
    tr_thin = run_dfl(fed, Quadratic(1), build_topology("full", 2), TrainConfig(T=2, K=1, mu=1.0, thin=1))
    np.testing.assert_array_equal(tr_thin.params[1][:, 0], [1.0, 3.0])
    np.testing.assert_array_equal(tr_thin.params[2][:, 0], [1.5, 2.5])


def test_cfl_single_client_is_sgd(setup):
    fed, model = setup
    one = make_fed(fed.X[:1], fed.y[:1], C=3)
    cfg = TrainConfig(T=12, K=1, n=1, mu=0.5, master_seed=4)
    tr = run_cfl(one, model, cfg)
    w = model.init(stream(4, "init"))
    for t in range(12):
        j = stream(4, "batch", t, 0).integers(0, one.S, size=(1, 1))[0, 0]
        w = w - cfg.eta(t + 1) * model.grad(w, one.X[0, j], one.y[0, j])
    np.testing.assert_array_equal(tr.final, w)


def test_zero_mu_keeps_init(setup):
    fed, model = setup
    tr = run_cfl(fed, model, TrainConfig(T=3, K=2, n=4, mu=0.0))
    np.testing.assert_array_equal(tr.final, model.init(None))


@pytest.mark.parametrize("K", [1, 3])
def test_cfl_full_participation_equals_dfl_full(setup, K):
    fed, model = setup
    cfg = TrainConfig(T=6, K=K, mu=0.7, master_seed=11)
    a = run_cfl(fed, model, cfg)
    b = run_dfl(fed, model, build_topology("full", fed.m), cfg)
    assert np.array_equal(a.global_models, b.global_models)


def test_trace_length_unthinned(setup):
    fed, model = setup
    tr = run_cfl(fed, model, TrainConfig(T=4, K=3, n=2, thin=1))
    assert tr.params.shape[0] == 4 * 3 + 1
    assert tr.steps.tolist() == list(range(13))


def test_inactive_clients_do_not_move(setup):
    fed, model = setup
    tr = run_cfl(fed, model, TrainConfig(T=3, K=2, n=3, master_seed=2, thin=1))
    for t in range(3):
        start = tr.params[t * 2]
        end = tr.params[t * 2 + 2]
        moved = np.flatnonzero(np.any(start != end, axis=1) if t == 0 else np.any(tr.round_start[t] != end, axis=1))
        assert len(moved) <= 3


def test_deterministic(setup):
    fed, model = setup
    cfg = TrainConfig(T=5, K=2, n=3, master_seed=9)
    assert np.array_equal(run_cfl(fed, model, cfg).global_models, run_cfl(fed, model, cfg).global_models)


def test_divergence_detected():
    fed = make_fed([[[1.0], [2.0]]])
    with pytest.raises(DivergenceError):
        run_cfl(fed, Quadratic(1, curvature=1.0), TrainConfig(T=200, K=5, mu=5.0, schedule="constant"))


def test_config_rejects():
    for kw in [dict(T=0, K=1), dict(T=1, K=0), dict(T=1, K=1, n=0), dict(T=1, K=1, mu=-1.0),
               dict(T=1, K=1, schedule="cosine"), dict(T=1, K=1, sampling="epoch")]:
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_n_exceeding_m_rejected(setup):
    fed, model = setup
    with pytest.raises(ValueError):
        run_cfl(fed, model, TrainConfig(T=1, K=1, n=fed.m + 1))


def test_mixing_size_mismatch(setup):
    fed, model = setup
    with pytest.raises(ValueError):
        run_dfl(fed, model, build_topology("ring", 5), TrainConfig(T=1, K=1))


@pytest.mark.parametrize("algo", ["cfl", "dfl"])
def test_zero_perturbation_delta_is_zero(setup, algo):
    fed, model = setup
    nb, pert = make_neighbor(fed, 2, 3, 0, replacement=(fed.X[2, 3], fed.y[2, 3]))
    mix = build_topology("ring", fed.m) if algo == "dfl" else None
    a, b, ct = run_coupled(fed, nb, pert, model, TrainConfig(T=5, K=3, n=None if mix else 4), mixing=mix)
    assert np.all(ct.delta == 0.0)
    assert np.array_equal(a.global_models, b.global_models)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 500), client=st.integers(0, 7), index=st.integers(0, 15), algo=st.sampled_from(["cfl", "dfl"]))
def test_delta_zero_before_first_hit(setup, seed, client, index, algo):
    fed, model = setup
    nb, pert = make_neighbor(fed, client, index, seed)
    mix = build_topology("exp", fed.m) if algo == "dfl" else None
    cfg = TrainConfig(T=6, K=4, n=None if mix else 3, master_seed=seed, track_loss=False)
    _, _, ct = run_coupled(fed, nb, pert, model, cfg, mixing=mix)
    assert np.all(ct.delta >= 0)
    stop = ct.delta.shape[0] if ct.tau_hat is None else ct.tau_hat
    assert np.all(ct.delta[:stop] == 0.0)
    if ct.tau_hat is not None:
        assert ct.delta[ct.tau_hat] > 0
        assert ct.hit[ct.tau_hat - 1, client]


def test_one_step_quadratic_delta():
    rng = stream(0, "data", 9)
    fed = make_fed(rng.standard_normal((1, 4, 3)))
    model = Quadratic(3, H=np.diag([0.5, 1.0, 0.8]))
    for seed in range(5):
        nb, pert = make_neighbor(fed, 0, 1, seed)
        cfg = TrainConfig(T=10, K=1, n=1, mu=1.0, master_seed=seed)
        _, _, ct = run_coupled(fed, nb, pert, model, cfg)
        if ct.tau_hat is None:
            continue
        th = ct.tau_hat
        expected = ct.eta[th - 1] * np.linalg.norm(model.H @ (pert.replacement_x - pert.original_x))
        assert ct.delta[th] == pytest.approx(expected, rel=1e-12)
        assert ct.hit_grad_gap[th - 1] == pytest.approx(expected / ct.eta[th - 1], rel=1e-12)


def test_final_distance_bounded_by_delta_over_m(setup):
    fed, model = setup
    mix = build_topology("ring", fed.m)
    for algo in ("cfl", "dfl"):
        for seed in range(5):
            nb, pert = make_neighbor(fed, seed % fed.m, 0, seed)
            cfg = TrainConfig(T=8, K=3, master_seed=seed, track_loss=False)
            _, _, ct = run_coupled(fed, nb, pert, model, cfg, mixing=mix if algo == "dfl" else None)
            assert ct.final_distance() <= ct.delta_end[-1] / fed.m + 1e-12


def test_coupled_rejects_mismatch(setup):
    fed, model = setup
    nb, pert = make_neighbor(fed, 0, 0, 1)
    nb2, _ = make_neighbor(nb, 1, 1, 2)
    with pytest.raises(ValueError):
        run_coupled(fed, nb2, pert, model, TrainConfig(T=1, K=1))
    with pytest.raises(ValueError):
        run_coupled(fed, nb, None, model, TrainConfig(T=1, K=1))


def test_shuffle_sampling_covers_shard(setup):
    fed, model = setup
    nb, pert = make_neighbor(fed, 0, 5, 0)
    cfg = TrainConfig(T=1, K=fed.S, sampling="shuffle", track_loss=False)
    _, _, ct = run_coupled(fed, nb, pert, model, cfg)
    # one pass over the shard touches every index exactly once
    assert ct.hit[:, 0].sum() == 1


def test_export_csv(setup, tmp_path):
    fed, model = setup
    nb, pert = make_neighbor(fed, 0, 0, 0)
    a, b, ct = run_coupled(fed, nb, pert, model, TrainConfig(T=2, K=2))
    export_trace_csv(ct, tmp_path / "t.csv", a, b)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,k,tau,delta,mean_loss_C,mean_loss_Ctilde"
    assert len(lines) == 1 + 2 * 2 + 1
    assert lines[1].startswith("0,0,0,0.0,")
    assert lines[-1].startswith("1,2,4,")


def _aggregation_slack(ct):
    # Delta_0^{t+1} - Delta_K^t for every round boundary
    return ct.delta_start[1:] - ct.delta_end[:-1]


@pytest.mark.parametrize("kind", ["ring", "exp", "star", "full"])
def test_gossip_is_non_expansive(setup, kind):
    fed, model = setup
    mix = build_topology(kind, fed.m)
    for seed in range(5):
        nb, pert = make_neighbor(fed, seed, seed, seed)
        _, _, ct = run_coupled(fed, nb, pert, model, TrainConfig(T=8, K=2, master_seed=seed, track_loss=False), mixing=mix)
        assert np.all(_aggregation_slack(ct) <= 1e-10)


def test_full_participation_aggregation_is_non_expansive(setup):
    fed, model = setup
    for seed in range(5):
        nb, pert = make_neighbor(fed, seed, seed, seed)
        _, _, ct = run_coupled(fed, nb, pert, model, TrainConfig(T=8, K=2, master_seed=seed, track_loss=False))
        assert np.all(_aggregation_slack(ct) <= 1e-10)


def test_partial_participation_can_expand_pathwise(setup):
    # with n < m the broadcast copies the averaged gap to all m clients, so
    # Delta_0^{t+1} = m ||w - w~|| can exceed Delta_K^t on a single path
    fed, model = setup
    worst = -np.inf
    for seed in range(20):
        nb, pert = make_neighbor(fed, seed % fed.m, 0, seed)
        _, _, ct = run_coupled(fed, nb, pert, model, TrainConfig(T=6, K=2, n=1, master_seed=seed, track_loss=False))
        worst = max(worst, float(np.max(_aggregation_slack(ct))))
    assert worst > 1e-10
