import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedlppa.model import build_model
from fedlppa.protocol import (
    Client, FedConfig, LAPair, Upload, aggregate_sample_weighted, aux_params_for_client, blend,
    client_local_round, compute_affinity, derangement, evaluate_model, learnable_aggregation,
    local_baseline, fedavg_baseline, psa_weights, round_assignment, run_federation, augment_batch,
)
from fedlppa.weak_labels import UNLABELED

TINY = dict(channels_base=4, depth=3, batch=4, local_iters=2, eval_every=1)


def tiny_cfg(**kw):
    return FedConfig(**{**TINY, **kw})


# -- aggregation ------------------------------------------------------------------

def test_aggregation_examples():
    v0, v1 = np.zeros(4), np.full(4, 4.0)
    np.testing.assert_array_equal(aggregate_sample_weighted([(v0, 1), (v1, 3)]), np.full(4, 3.0))
    np.testing.assert_array_equal(aggregate_sample_weighted([(v1, 7)]), v1)
    a, b = np.arange(5.0), np.arange(5.0) * 3
    np.testing.assert_allclose(aggregate_sample_weighted([(a, 2), (b, 2)]), (a + b) / 2)


def test_aggregation_errors():
    with pytest.raises(ValueError):
        aggregate_sample_weighted([])
    with pytest.raises(ValueError):
        aggregate_sample_weighted([(np.zeros(2), 0)])
    with pytest.raises(ValueError):
        aggregate_sample_weighted([(np.zeros(2), 1), (np.zeros(3), 1)])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 100), min_size=1, max_size=6), st.integers(0, 2 ** 32 - 1))
def test_aggregation_matches_weighted_sum(sizes, seed):
    rng = np.random.default_rng(seed)
    vecs = [rng.standard_normal(7) for _ in sizes]
    expect = sum(n * v for n, v in zip(sizes, vecs)) / sum(sizes)
    np.testing.assert_allclose(aggregate_sample_weighted(list(zip(vecs, sizes))), expect, atol=1e-12)


# -- affinity -----------------------------------------------------------------------

def test_affinity_examples():
    u = np.array([1.0, 0.0])
    a = compute_affinity([(u, np.array([1.0, 0.0])), (u, np.array([0.0, 1.0])), (u, np.array([1.0, 0.0]))])
    assert a[0, 1] == pytest.approx(0.5, abs=1e-12)
    assert a[0, 2] == pytest.approx(1.0, abs=1e-12)
    anti = compute_affinity([(np.zeros(1), np.array([1.0, 2.0])), (np.zeros(1), np.array([-1.0, -2.0]))])
    assert anti[0, 1] == 0.0


def test_affinity_zero_norm_rejected():
    with pytest.raises(ValueError):
        compute_affinity([(np.zeros(2), np.zeros(2)), (np.ones(2), np.ones(2))])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_affinity_properties(n, seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((1, 3, 3))
    a = compute_affinity([(u, rng.standard_normal((3, 3))) for _ in range(n)])
    assert a.shape == (n, n)
    np.testing.assert_allclose(a, a.T, atol=1e-6)
    np.testing.assert_array_equal(np.diag(a), 1.0)
    assert a.min() >= 0 and a.max() <= 1
    np.testing.assert_allclose(psa_weights(a).sum(axis=1), 1, atol=1e-6)


# -- auxiliary-decoder strategies ---------------------------------------------------

PHIS = [np.full(3, 10.0), np.full(3, 20.0), np.full(3, 30.0)]


def test_fixed_order_cycle():
    got = [aux_params_for_client(i, PHIS, None, "fixed_order")[0] for i in range(3)]
    assert got == [20.0, 30.0, 10.0]


def test_psa_examples():
    np.testing.assert_array_equal(aux_params_for_client(1, PHIS, np.eye(3), "psa"), PHIS[1])
    a = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 1.0]])
    np.testing.assert_allclose(psa_weights(a)[0], [2 / 3, 1 / 3, 0.0])
    np.testing.assert_allclose(aux_params_for_client(0, PHIS, a, "psa"), 2 / 3 * PHIS[0] + 1 / 3 * PHIS[1])


def test_hps_picks_most_similar_other_client():
    a = np.array([[1.0, 0.2, 0.7], [0.2, 1.0, 0.0], [0.7, 0.0, 1.0]])
    np.testing.assert_array_equal(aux_params_for_client(0, PHIS, a, "hps"), PHIS[2])
    np.testing.assert_array_equal(aux_params_for_client(1, PHIS, a, "hps"), PHIS[0])
    np.testing.assert_array_equal(aux_params_for_client(1, PHIS, np.eye(3), "hps"), PHIS[1])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2 ** 31), st.integers(1, 500))
def test_random_strategy_is_a_derangement(n, seed, t):
    perm = round_assignment(n, seed, t)
    assert sorted(perm) == list(range(n))
    assert not np.any(perm == np.arange(n))
    np.testing.assert_array_equal(perm, round_assignment(n, seed, t))
    phis = [np.full(2, float(i)) for i in range(n)]
    for i in range(n):
        assert aux_params_for_client(i, phis, None, "random", seed, t)[0] != i


def test_derangements_vary_across_rounds():
    seen = {tuple(round_assignment(4, 0, t)) for t in range(1, 60)}
    assert len(seen) > 3
    with pytest.raises(ValueError):
        derangement(1, np.random.default_rng(0))


@pytest.mark.parametrize("strategy", ["random", "fixed_order", "hps", "psa"])
def test_single_client_gets_its_own_decoder(strategy):
    got = aux_params_for_client(0, [np.arange(3.0)], np.ones((1, 1)), strategy)
    np.testing.assert_array_equal(got, np.arange(3.0))


# -- learnable aggregation ----------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, 16, elements=st.floats(-1e3, 1e3, width=32)),
       arrays(np.float32, 16, elements=st.floats(-1e3, 1e3, width=32)))
def test_blend_endpoints_are_bitwise(prev, inc):
    assert blend(prev, inc, np.ones(16, np.float32)).tobytes() == inc.tobytes()
    assert blend(prev, inc, np.zeros(16, np.float32)).tobytes() == prev.tobytes()
    np.testing.assert_allclose(blend(prev, inc, np.full(16, 0.5, np.float32)), (prev + inc) / 2,
                               rtol=1e-6, atol=1e-4)


def test_zero_iterations_returns_initial_blend():
    prev, inc = np.zeros(4, np.float32), np.ones(4, np.float32)
    hats, ws, done = learnable_aggregation([LAPair(prev, inc, np.ones(4, np.float32))],
                                           lambda h: (0.0, [np.zeros(4)]), 0.1, 0)
    assert done == 0 and hats[0].tobytes() == inc.tobytes()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-4, 10.0))
def test_weights_stay_in_unit_interval_under_fuzzed_gradients(seed, lr):
    rng = np.random.default_rng(seed)
    pairs = [LAPair(rng.standard_normal(20).astype(np.float32), rng.standard_normal(20).astype(np.float32),
                    rng.random(20).astype(np.float32)) for _ in range(2)]
    seen = []

    def objective(hats):
        return float(rng.random()), [rng.standard_normal(20) * 100 for _ in hats]

    for _ in range(5):
        hats, ws, _ = learnable_aggregation(pairs, objective, lr, 3)
        seen.extend(ws)
        pairs = [LAPair(p.prev, p.incoming, w) for p, w in zip(pairs, ws)]
    for w in seen:
        assert w.min() >= 0.0 and w.max() <= 1.0


def test_la_gradient_step_matches_chain_rule():
    prev, inc = np.array([0.0, 1.0]), np.array([2.0, -1.0])
    w0 = np.array([0.5, 0.5])
    g = np.array([0.3, -0.4])
    _, ws, _ = learnable_aggregation([LAPair(prev, inc, w0)], lambda h: (1.0, [g]), 0.1, 1)
    # d loss / d w = g * (incoming - prev)
    np.testing.assert_allclose(ws[0], w0 - 0.1 * g * (inc - prev))


def test_la_convergence_rule_stops_early():
    calls = []

    def objective(h):
        calls.append(1)
        return 1.0, [np.zeros(2)]

    _, _, done = learnable_aggregation([LAPair(np.zeros(2), np.ones(2), np.ones(2))], objective, 0.1, 10, tol=1e-3)
    assert done == 2 == len(calls)


# -- clients ------------------------------------------------------------------------------

def _client(sites, cfg, k=0, seed=0):
    train = sites[k][0]
    model = build_model(num_clients=len(sites), image_size=32, channels_base=cfg.channels_base,
                        depth=cfg.depth, rng_seed=seed, tdf=cfg.uses_tdf, dual=cfg.uses_pd)
    return Client(k, train, model, cfg, np.random.default_rng(seed))


def test_upload_payload_is_theta_and_phi_only(tiny_sites):
    cfg = tiny_cfg(rounds=3)
    c = _client(tiny_sites, cfg)
    theta, phi, phi_bar = c.model.partition()
    up = client_local_round(c, theta, phi, phi_bar, 1, 3, cfg)
    assert set(up.payload()) == {"theta", "phi"}
    assert up.payload()["theta"].nbytes == 4 * c.model.state_size("theta")
    assert up.payload()["phi"].nbytes == 4 * c.model.state_size("phi")


def test_zero_iterations_upload_received_parameters(tiny_sites):
    cfg = tiny_cfg(rounds=5, local_iters=0)
    c = _client(tiny_sites, cfg)
    donor = build_model(num_clients=4, image_size=32, channels_base=4, depth=3, rng_seed=7)
    theta_g, phi_g, phi_bar_g = donor.partition()
    up = client_local_round(c, theta_g, phi_g, phi_bar_g, 1, 5, cfg)
    assert up.theta.tobytes() == theta_g.tobytes() and up.phi.tobytes() == phi_g.tobytes()
    # later rounds upload the learnably aggregated decoder
    up = client_local_round(c, theta_g, phi_g, phi_bar_g, 3, 5, cfg)
    assert up.theta.tobytes() == theta_g.tobytes()
    assert up.phi.tobytes() == c.model.flat("phi").tobytes()
    assert c.la_iterations == [2]
    assert c.w_main.min() >= 0 and c.w_main.max() <= 1


def test_la_step_size_option(tiny_sites):
    donor = build_model(num_clients=4, image_size=32, channels_base=4, depth=3, rng_seed=7)
    theta_g, phi_g, phi_bar_g = donor.partition()
    moved = {}
    for la_lr in (0.0, None, 1e4):
        cfg = tiny_cfg(rounds=5, local_iters=0, la_lr=la_lr)
        c = _client(tiny_sites, cfg)
        up = client_local_round(c, theta_g, phi_g, phi_bar_g, 3, 5, cfg)
        moved[la_lr] = float(np.abs(1 - c.w_main).sum())
        if la_lr == 0.0:
            assert up.phi.tobytes() == phi_g.tobytes()
    assert moved[0.0] == 0 and moved[1e4] > moved[None]
    with pytest.raises(ValueError):
        tiny_cfg(la_lr=-1.0).validate()


def test_la_early_rounds_use_convergence_rule(tiny_sites):
    cfg = tiny_cfg(rounds=5, local_iters=0)
    c = _client(tiny_sites, cfg)
    theta, phi, phi_bar = c.model.partition()
    client_local_round(c, theta, phi + 0.01, phi_bar - 0.01, 2, 5, cfg)
    assert 1 <= c.la_iterations[0] <= 10


def test_local_training_decreases_loss(tiny_sites):
    wins = 0
    for trial in range(10):
        cfg = tiny_cfg(local_iters=10, augment=False, batch=6)
        c = _client(tiny_sites, cfg, k=trial % 4, seed=trial)
        images, labels = c.sample_batch()
        fixed = np.random.default_rng(99)
        c.rng, saved = fixed, c.rng
        before = c.loss(images, labels).item()
        c.rng = saved
        c.train(10, 1e-2)
        c.rng = np.random.default_rng(99)
        after = c.loss(images, labels).item()
        wins += after < before
    assert wins >= 8


def test_empty_dataset_rejected(tiny_sites):
    from fedlppa.synth import SiteData
    empty = SiteData(0, "train", np.zeros((0, 32, 32), np.float32), np.zeros((0, 32, 32), np.uint8),
                     np.zeros((0, 32, 32), np.uint8), {"sparsity": "sparse"})
    model = build_model(image_size=32, channels_base=4, depth=3)
    with pytest.raises(ValueError):
        Client(0, empty, model, tiny_cfg(), np.random.default_rng(0))


def test_augmentation_keeps_labels_noise_free():
    rng = np.random.default_rng(0)
    img = rng.random((3, 32, 32)).astype(np.float32)
    mask = np.zeros((3, 32, 32), np.uint8)
    mask[:, 8:20, 10:24] = 1
    imgs, labs = augment_batch(img, mask, rng)
    assert set(np.unique(labs)) <= {0, 1, UNLABELED}
    assert imgs.shape == img.shape and labs.dtype == np.uint8


# -- federation ----------------------------------------------------------------------------

def test_zero_rounds_returns_initial_models(tiny_sites):
    cfg = tiny_cfg(rounds=0)
    res = run_federation(cfg, tiny_sites)
    assert res.rows == []
    fresh = build_model(num_clients=4, image_size=32, channels_base=4, depth=3, rng_seed=0)
    for c in res.clients:
        for a, b in zip(c.model.partition(), fresh.partition()):
            assert a.tobytes() == b.tobytes()


def test_single_site_federation_degenerates(tiny_sites):
    res = run_federation(tiny_cfg(rounds=2), tiny_sites[:1])
    np.testing.assert_array_equal(res.affinity[2], [[1.0]])
    assert len(res.rows) == 2


def test_fedavg_single_site_equals_local_training(tiny_sites):
    cfg = tiny_cfg(rounds=3)
    a = fedavg_baseline(cfg, tiny_sites[:1])
    b = local_baseline(cfg, tiny_sites[:1])
    assert [(r.dsc, r.hd95, r.loss) for r in a.rows] == [(r.dsc, r.hd95, r.loss) for r in b.rows]


def test_single_worker_runs_are_deterministic(tiny_sites):
    cfg = tiny_cfg(rounds=3, strategy="random")
    a, b = run_federation(cfg, tiny_sites), run_federation(cfg, tiny_sites)
    assert [(r.dsc, r.hd95, r.loss) for r in a.rows] == [(r.dsc, r.hd95, r.loss) for r in b.rows]


def test_parallel_workers_run(tiny_sites):
    res = run_federation(tiny_cfg(rounds=2), tiny_sites, workers=4)
    assert len(res.rows) == 8 and all(np.isfinite(r.loss) for r in res.rows)


def test_message_trace_sizes(tiny_sites, tmp_path):
    cfg = tiny_cfg(rounds=2)
    res = run_federation(cfg, tiny_sites, run_dir=tmp_path)
    model = res.clients[0].model
    ups = [m for m in res.messages if m["direction"] == "up"]
    downs = [m for m in res.messages if m["direction"] == "down"]
    assert len(ups) == len(downs) == 8
    assert all(m["bytes"] == {"theta": 4 * model.state_size("theta"), "phi": 4 * model.state_size("phi")}
               for m in ups)
    assert all("phi_bar" in m["bytes"] for m in downs)
    assert len((tmp_path / "messages.jsonl").read_text().splitlines()) == 16


@pytest.mark.parametrize("method,personal", [("fedlppa", True), ("fedavg", False), ("local", True)])
def test_evaluation_policy(tiny_sites, method, personal):
    res = run_federation(tiny_cfg(rounds=1, method=method, pd=method == "fedlppa",
                                  tdf=method == "fedlppa"), tiny_sites)
    models = {id(m) for m, _, _ in res.eval_models.values()}
    assert (len(models) == 4) == personal


def test_ablation_variants_without_pd_and_la_use_global_model(tiny_sites):
    cfg = tiny_cfg(rounds=1, pd=False, la=False)
    assert not cfg.personalized and cfg.uses_tdf
    res = run_federation(cfg, tiny_sites)
    assert len({id(m) for m, _, _ in res.eval_models.values()}) == 1
    assert res.clients[0].model.aux is None


@pytest.mark.parametrize("method", ["centralized_weak", "centralized_full"])
def test_centralized_methods(tiny_sites, method):
    res = run_federation(tiny_cfg(rounds=1, method=method), tiny_sites)
    assert len(res.rows) == 4 and len(res.clients) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        FedConfig(pd=True, tdf=False).validate()
    with pytest.raises(ValueError):
        FedConfig(method="fedprox").validate()
    with pytest.raises(ValueError):
        FedConfig(strategy="best").validate()
    with pytest.raises(ValueError):
        FedConfig(rounds=-1).validate()


def test_evaluate_model_matches_metrics(tiny_sites):
    from fedlppa.metrics import per_class_scores
    from fedlppa.protocol import predict
    model = build_model(image_size=32, channels_base=4, depth=3)
    test = tiny_sites[0][1]
    dsc, hd = evaluate_model(model, test)
    preds = predict(model, test.images)
    scores = [per_class_scores(p, g, 2) for p, g in zip(preds, test.masks)]
    assert dsc[0] == pytest.approx(np.mean([s[0][0] for s in scores]), abs=1e-12)
    assert hd[0] == pytest.approx(np.mean([s[1][0] for s in scores]), abs=1e-12)
