import itertools

import numpy as np
import pytest

from egnn_mimo.detectors import (
    EgnnParams,
    GnnArchitecture,
    bp_detect,
    edge_messages,
    gnn_forward,
    hard_decision,
    loss_and_grad,
    map_detect_bruteforce,
    mmse_detect,
    ser,
    wilson_interval,
)
from egnn_mimo.detectors.gnn import edge_batch
from egnn_mimo.graph import build_graph, build_potentials, edge_drop
from egnn_mimo.mimo_model import ChannelSample, MimoConfig, build_alphabet, generate_split
from egnn_mimo.nn_core import softmax


def _sample(H, labels, alphabet, sigma2, noise=None):
    x = alphabet.symbols[labels]
    y = H @ x + (0 if noise is None else noise)
    return ChannelSample(H, np.asarray(labels), y, sigma2)


def _brute_marginals(H, y, sigma2, alphabet):
    """Straight enumeration with explicit norms, independent of the detector code."""
    n, K = H.shape[1], alphabet.K
    logw, combos = [], []
    for combo in itertools.product(range(K), repeat=n):
        x = alphabet.symbols[list(combo)]
        logw.append(-np.sum((H @ x - y) ** 2) / (2 * sigma2))
        combos.append(combo)
    logw = np.array(logw)
    w = np.exp(logw - logw.max())
    marg = np.zeros((n, K))
    for wk, combo in zip(w, combos):
        for i, a in enumerate(combo):
            marg[i, a] += wk
    return marg / marg.sum(axis=1, keepdims=True), np.array(combos[int(np.argmax(logw))])


# -- decisions and error rates ------------------------------------------------

def test_hard_decision_tie_break():
    assert hard_decision([0.5, 0.5]) == 0
    assert hard_decision([0.2, 0.3, 0.3, 0.2]) == 1
    np.testing.assert_array_equal(hard_decision(np.eye(3)[[2, 0, 1]]), [2, 0, 1])


def test_ser_examples():
    assert ser([1, 2, 3], [1, 2, 3]) == 0
    assert ser([0, 0], [1, 1]) == 1
    assert ser([0] * 7 + [1], [0] * 8) == 0.125
    with pytest.raises(ValueError):
        ser([1, 2], [1])


def test_wilson_interval_contains_estimate():
    lo, hi = wilson_interval(5, 100)
    assert lo < 0.05 < hi
    assert abs(wilson_interval(0, 10**4)[0]) < 1e-15
    # reference value for 0 successes: z^2 / (n + z^2)
    z = 1.959963984540054
    assert wilson_interval(0, 100)[1] == pytest.approx(z * z / (100 + z * z), rel=1e-12)


# -- MMSE -------------------------------------------------------------------------

def test_mmse_diagonal_example():
    a = build_alphabet("qpsk")
    s = ChannelSample(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([1, 1]), np.array([0.6, 1.8]), 0.5)
    out = mmse_detect(s, a)
    np.testing.assert_allclose(out.metadata["x_hat"], [0.3, 0.72], atol=1e-14)
    np.testing.assert_array_equal(out.hard_labels, [1, 1])
    np.testing.assert_allclose(out.posteriors.sum(axis=1), 1.0)


def test_mmse_noiseless_orthonormal_recovers_symbols():
    a = build_alphabet("qam16")
    rng = np.random.default_rng(0)
    H = np.linalg.qr(rng.normal(size=(8, 6)))[0]
    labels = rng.integers(0, 4, size=6)
    out = mmse_detect(_sample(H, labels, a, 1e-14), a)
    np.testing.assert_allclose(out.metadata["x_hat"], a.symbols[labels], atol=1e-10)
    assert ser(out.hard_labels, labels) == 0


def test_mmse_heavy_noise_shrinks_to_zero():
    a = build_alphabet("qam16")
    H = np.random.default_rng(1).normal(size=(6, 4))
    s = ChannelSample(H, np.zeros(4, int), np.zeros(6), 1e12)
    out = mmse_detect(s, a)
    assert np.all(out.metadata["x_hat"] == 0)
    # exact tie between -1/sqrt(10) and +1/sqrt(10) resolves to the lower index
    np.testing.assert_array_equal(out.hard_labels, [1, 1, 1, 1])
    s2 = ChannelSample(H, np.zeros(4, int), np.ones(6), 1e12)
    assert np.max(np.abs(mmse_detect(s2, a).metadata["x_hat"])) < 1e-10


def test_mmse_singular_raises():
    a = build_alphabet("qpsk")
    s = ChannelSample(np.ones((2, 2)), np.zeros(2, int), np.ones(2), 0.0)
    with pytest.raises(np.linalg.LinAlgError):
        mmse_detect(s, a)


# -- MAP ------------------------------------------------------------------------

@pytest.mark.parametrize("scheme,Nt", [("qpsk", 2), ("qam16", 1), ("qpsk", 3)])
def test_map_matches_independent_enumeration(scheme, Nt):
    a = build_alphabet(scheme)
    ds = generate_split(MimoConfig(Nt, Nt + 1, scheme, (0, 8), seed=4), 5, "test")
    for s in ds.samples:
        out = map_detect_bruteforce(s, a)
        marg, best = _brute_marginals(s.H, s.y, s.sigma2, a)
        np.testing.assert_allclose(out.posteriors, marg, rtol=1e-10, atol=1e-14)
        np.testing.assert_array_equal(out.hard_labels, best)
        np.testing.assert_allclose(out.posteriors.sum(axis=1), 1.0, atol=1e-12)


def test_map_noiseless_recovers_truth():
    a = build_alphabet("qam16")
    rng = np.random.default_rng(3)
    H = rng.normal(size=(8, 4))
    labels = rng.integers(0, 4, size=4)
    assert np.array_equal(map_detect_bruteforce(_sample(H, labels, a, 0.01), a).hard_labels, labels)


def test_map_single_antenna_qpsk_likelihood_ratio():
    # Nt=1: each real dimension decouples; the decision is the sign of h_i^T y
    # adjusted for cross-coupling, so compare against a direct two-hypothesis test.
    a = build_alphabet("qpsk")
    rng = np.random.default_rng(7)
    for _ in range(20):
        H = rng.normal(size=(4, 2))
        y = rng.normal(size=4)
        s = ChannelSample(H, np.zeros(2, int), y, 0.3)
        out = map_detect_bruteforce(s, a)
        best = min(
            itertools.product(range(2), repeat=2),
            key=lambda c: np.sum((H @ a.symbols[list(c)] - y) ** 2),
        )
        np.testing.assert_array_equal(out.hard_labels, best)


def test_map_budget_refusal():
    a = build_alphabet("qam16")
    s = ChannelSample(np.ones((16, 16)), np.zeros(16, int), np.ones(16), 1.0)
    with pytest.raises(ValueError, match="4294967296"):
        map_detect_bruteforce(s, a)


# -- BP ---------------------------------------------------------------------------

def _mrf_marginals(pot, mask):
    """Enumerate the MRF restricted to active edges."""
    n, K = pot.phi_i.shape
    logw, combos = [], list(itertools.product(range(K), repeat=n))
    for c in combos:
        v = sum(pot.phi_i[i, c[i]] for i in range(n))
        v += sum(pot.phi_ij[i, j, c[i], c[j]] for i in range(n) for j in range(i + 1, n) if mask[i, j])
        logw.append(v)
    logw = np.array(logw)
    w = np.exp(logw - logw.max())
    marg = np.zeros((n, K))
    for wk, c in zip(w, combos):
        for i, a in enumerate(c):
            marg[i, a] += wk
    return marg / marg.sum(axis=1, keepdims=True)


def test_bp_exact_on_two_nodes():
    a = build_alphabet("qam16")
    ds = generate_split(MimoConfig(1, 2, "qam16", (0, 15), seed=1), 10, "test")
    for s in ds.samples:
        pot = build_potentials(s.H, s.y, s.sigma2, a)
        out = bp_detect(pot, build_graph(s.H, s.y, s.sigma2))
        marg = map_detect_bruteforce(s, a).posteriors
        np.testing.assert_allclose(out.posteriors, marg, atol=1e-8)


def test_bp_orthogonal_channel_is_factorized():
    a = build_alphabet("qpsk")
    H = np.linalg.qr(np.random.default_rng(2).normal(size=(6, 4)))[0]
    s = _sample(H, [0, 1, 1, 0], a, 0.5, noise=np.random.default_rng(3).normal(size=6) * 0.5)
    pot = build_potentials(s.H, s.y, s.sigma2, a)
    out = bp_detect(pot, build_graph(s.H, s.y, s.sigma2), iters=1, damping=0.0)
    np.testing.assert_allclose(out.posteriors, softmax(pot.phi_i), atol=1e-12)


def test_bp_tree_converges_in_diameter_steps():
    a = build_alphabet("qpsk")
    rng = np.random.default_rng(5)
    H = rng.normal(size=(5, 3))
    y = rng.normal(size=5)
    pot = build_potentials(H, y, 0.4, a)
    g = build_graph(H, y, 0.4)
    # chain 0 - 1 - 2
    mask = g.active_mask.copy()
    mask[0, 2] = mask[2, 0] = False
    chain = type(g)(g.raw_node_features, g.edge_attr, mask, g.sigma2, g.variant)
    two = bp_detect(pot, chain, iters=2, damping=0.0).posteriors
    three = bp_detect(pot, chain, iters=3, damping=0.0).posteriors
    np.testing.assert_allclose(two, three, atol=1e-14)
    np.testing.assert_allclose(two, _mrf_marginals(pot, mask), atol=1e-12)


def test_bp_argument_checks_and_metadata():
    a = build_alphabet("qpsk")
    H = np.eye(2)
    pot = build_potentials(H, np.ones(2), 1.0, a)
    g = build_graph(H, np.ones(2), 1.0)
    with pytest.raises(ValueError):
        bp_detect(pot, g, iters=0)
    with pytest.raises(ValueError):
        bp_detect(pot, g, damping=1.0)
    out = bp_detect(pot, g)
    assert out.metadata["converged"]


# -- GNN ------------------------------------------------------------------------

TINY = dict(node_dim=4, gru_hidden=6, readout_hidden=5, steps=2, K=2)


def _random_params(variant, seed, **kw):
    arch = GnnArchitecture(variant, **{**TINY, **kw})
    p = EgnnParams.initialize(arch, seed)
    p.vector.flat[:] += np.random.default_rng(seed).normal(scale=0.3, size=p.vector.size)
    return p


def _tiny_batch(seed, n_samples=3, Nt=2, Nr=3, variant="egnn"):
    ds = generate_split(MimoConfig(Nt, Nr, "qpsk", (0, 10), seed=seed), n_samples, "train")
    return ds, build_graph(ds.H, ds.y, ds.sigma2, variant)


def test_gnn_posteriors_are_distributions():
    for variant in ("egnn", "naive"):
        ds, g = _tiny_batch(0, variant=variant)
        out = gnn_forward(g, _random_params(variant, 1), variant)
        assert out.posteriors.shape == (3, 4, 2)
        np.testing.assert_allclose(out.posteriors.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(out.hard_labels, out.posteriors.argmax(-1))


def test_gnn_variant_mismatch():
    _, g = _tiny_batch(0, variant="naive")
    with pytest.raises(ValueError):
        gnn_forward(g, _random_params("egnn", 0))


def test_egnn_zero_edges_only_self_information():
    ds, g = _tiny_batch(2)
    p = _random_params("egnn", 3)
    flat = type(g)(g.raw_node_features, np.zeros_like(g.edge_attr), g.active_mask, g.sigma2, "egnn")
    isolated = edge_drop(g, 12)
    np.testing.assert_allclose(gnn_forward(flat, p).posteriors, gnn_forward(isolated, p).posteriors, atol=1e-14)
    # node output depends only on its own features: perturbing another node leaves it unchanged
    raw = flat.raw_node_features.copy()
    raw[:, 1] += 1.0
    moved = type(g)(raw, flat.edge_attr, flat.active_mask, flat.sigma2, "egnn")
    a, b = gnn_forward(flat, p).posteriors, gnn_forward(moved, p).posteriors
    np.testing.assert_array_equal(np.delete(a, 1, axis=1), np.delete(b, 1, axis=1))


def test_egnn_message_linear_in_edge_weight():
    ds, g = _tiny_batch(4, n_samples=1)
    p = _random_params("egnn", 5)
    z = np.random.default_rng(6).normal(size=(4, TINY["node_dim"]))
    edges = edge_batch(g)
    base = edge_messages(p, z, edges)
    for e in range(edges.n_edges):
        for c in (-2.5, 0.0, 3.0):
            eps = edges.eps.copy()
            eps[e] *= c
            scaled = edge_messages(p, z, type(edges)(**{**edges.__dict__, "eps": eps}))
            np.testing.assert_allclose(scaled[e], c * base[e], rtol=0, atol=1e-12)
            np.testing.assert_array_equal(np.delete(scaled, e, 0), np.delete(base, e, 0))


def test_dense_and_identity_drop_bit_identical():
    for variant in ("egnn", "naive"):
        _, g = _tiny_batch(7, variant=variant)
        p = _random_params(variant, 8)
        assert np.array_equal(gnn_forward(g, p).posteriors, gnn_forward(edge_drop(g, 0), p).posteriors)


def test_drop_equals_zeroed_edges():
    _, g = _tiny_batch(9, n_samples=4, Nt=3, Nr=4)
    p = _random_params("egnn", 10)
    for k in (2, 6, 14, 30):
        d = edge_drop(g, k)
        zeroed = np.where(d.active_mask, g.edge_attr, 0.0)
        dense = type(g)(g.raw_node_features, zeroed, g.active_mask, g.sigma2, "egnn")
        np.testing.assert_allclose(gnn_forward(d, p).posteriors, gnn_forward(dense, p).posteriors, atol=1e-12)


@pytest.mark.parametrize("variant", ["egnn", "naive"])
def test_gnn_permutation_equivariance(variant):
    rng = np.random.default_rng(11)
    ds, _ = _tiny_batch(12, n_samples=2, Nt=3, Nr=4)
    p = _random_params(variant, 13)
    perm = rng.permutation(6)
    g = build_graph(ds.H, ds.y, ds.sigma2, variant)
    gp = build_graph(ds.H[:, :, perm], ds.y, ds.sigma2, variant)
    np.testing.assert_allclose(gnn_forward(gp, p).posteriors, gnn_forward(g, p).posteriors[:, perm], atol=1e-10)


@pytest.mark.parametrize("variant", ["egnn", "naive"])
def test_gnn_gradient_matches_finite_differences(variant):
    from egnn_mimo.detectors.gnn import loss_only
    from egnn_mimo.nn_core import fd_gradient

    ds, g = _tiny_batch(14, variant=variant)
    p = _random_params(variant, 15)
    _, grad = loss_and_grad(p, g, ds.labels)
    coords = np.random.default_rng(16).choice(p.vector.size, size=100, replace=False)
    fd = fd_gradient(lambda v: loss_only(EgnnParams(p.arch, v), g, ds.labels), p.vector, 1e-5, coords)
    a, f = grad.flat[coords], fd.flat[coords]
    assert np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f)) < 1e-5
    big = np.abs(a) > 1e-4
    assert np.all(np.abs(a - f)[big] / np.maximum(np.abs(a), np.abs(f))[big] < 1e-5)


def test_zero_readout_bias_gradient_closed_form():
    ds, g = _tiny_batch(17)
    p = _random_params("egnn", 18)
    p.vector["readout2.W"][...] = 0.0
    p.vector["readout2.b"][...] = 0.0
    _, grad = loss_and_grad(p, g, ds.labels)
    onehot = np.eye(2)[ds.labels.reshape(-1)]
    np.testing.assert_allclose(grad["readout2.b"], (0.5 - onehot).mean(axis=0), atol=1e-15)


def test_checkpoint_round_trip_params(tmp_path):
    from egnn_mimo.nn_core import load_checkpoint, save_checkpoint

    for variant in ("egnn", "naive"):
        p = _random_params(variant, 19)
        save_checkpoint(p.to_checkpoint(), tmp_path / "p.ck")
        back = EgnnParams.from_checkpoint(load_checkpoint(tmp_path / "p.ck"))
        assert back.arch == p.arch
        assert back.vector.flat.tobytes() == p.vector.flat.tobytes()


def test_message_only_gru_gradient():
    from egnn_mimo.detectors.gnn import loss_only
    from egnn_mimo.nn_core import fd_gradient

    ds, g = _tiny_batch(20)
    p = _random_params("egnn", 21, gru_self_input=False)
    assert p.vector["gru.Wz"].shape == (6, 4 + 6)
    _, grad = loss_and_grad(p, g, ds.labels)
    fd = fd_gradient(lambda v: loss_only(EgnnParams(p.arch, v), g, ds.labels), p.vector, 1e-5)
    assert np.linalg.norm(grad.flat - fd.flat) / np.linalg.norm(fd.flat) < 1e-5


def test_message_only_gru_ignores_isolated_node_observation():
    # with the message-only wiring a node without active edges never sees its own features
    ds, g = _tiny_batch(22)
    isolated = edge_drop(g, 12)
    raw = isolated.raw_node_features.copy()
    raw[..., 0] *= -5.0
    moved = type(g)(raw, isolated.edge_attr, isolated.active_mask, isolated.sigma2, "egnn")
    only = _random_params("egnn", 23, gru_self_input=False)
    np.testing.assert_array_equal(gnn_forward(isolated, only).posteriors, gnn_forward(moved, only).posteriors)
    fed = _random_params("egnn", 23)
    assert not np.allclose(gnn_forward(isolated, fed).posteriors, gnn_forward(moved, fed).posteriors)


def test_checkpoint_keeps_gru_wiring():
    p = _random_params("naive", 24, gru_self_input=False)
    back = EgnnParams.from_checkpoint(p.to_checkpoint())
    assert back.arch.gru_self_input is False and back.arch == p.arch
