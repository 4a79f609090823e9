import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointguard import gradcore
from pointguard.errors import ConfigError, InputError
from pointguard.model import Architecture, ModelParams

from conftest import TINY, random_cloud, random_params


def naive_forward(params, cloud):
    """Point-by-point loop with no sorting or vectorised pooling."""
    n_point = len(params.arch.point_mlp_dims) - 1
    feats = []
    for p in cloud:
        h = np.asarray(p, dtype=np.float64)
        for w, b in zip(params.weights[:n_point], params.biases[:n_point]):
            h = np.maximum(h @ w + b, 0.0)
        feats.append(h)
    g = np.max(feats, axis=0)
    head = list(zip(params.weights[n_point:], params.biases[n_point:]))
    for i, (w, b) in enumerate(head):
        g = g @ w + b
        if i < len(head) - 1:
            g = np.maximum(g, 0.0)
    return g


def test_two_point_toy_net_by_hand():
    # one point layer 3->2, one head layer 2->2
    arch = Architecture((3, 2), (2, 2))
    w1 = np.array([[1.0, -1.0], [0.5, 0.0], [0.0, 2.0]])
    w2 = np.array([[1.0, 0.0], [0.0, -1.0]])
    p = ModelParams(arch, (w1, w2), (np.zeros(2), np.array([0.0, 1.0])))
    cloud = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
    # point 0 -> relu(1+1, -1) = (2, 0); point 1 -> relu(0, 2) = (0, 2); pooled (2, 2)
    logits, cache = gradcore.forward(p, cloud)
    np.testing.assert_array_equal(logits, [2.0, -1.0])
    np.testing.assert_array_equal(cache.argmax[0], [0, 1])
    # dlogit0/dx: only point 0 channel 0 matters -> w1[:, 0]
    _, dl = gradcore.loss_and_dlogits(logits, [0], "margin")
    g, _ = gradcore.backward(p, cache, dl)
    # margin = z1 - z0, dz1/dpool1 = -1 -> point 1 grad = -w1[:,1]; dz0/dpool0 = 1 -> point 0 grad = -w1[:,0]
    np.testing.assert_array_equal(g[0, 0], -w1[:, 0])
    np.testing.assert_array_equal(g[0, 1], -w1[:, 1])


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_naive_loop(seed):
    rng = np.random.default_rng(seed)
    p = random_params(seed)
    clouds = rng.random((3, 20, 3))
    logits, _ = gradcore.forward(p, clouds)
    for b in range(3):
        np.testing.assert_allclose(logits[b], naive_forward(p, clouds[b]), rtol=1e-12, atol=1e-12)


def test_single_and_batch_agree(rng):
    p = random_params(0)
    clouds = rng.random((4, 10, 3))
    batch, _ = gradcore.forward(p, clouds)
    for b in range(4):
        one, _ = gradcore.forward(p, clouds[b])
        # BLAS blocking may differ with batch size, so only rounding-level equality
        np.testing.assert_allclose(one, batch[b], rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("loss", ["ce", "margin"])
@pytest.mark.parametrize("seed", range(4))
def test_input_grad_matches_finite_differences(seed, loss):
    rng = np.random.default_rng(seed)
    p = random_params(seed)
    cloud = random_cloud(rng, 12)
    label = int(rng.integers(4))
    _, g = gradcore.loss_and_input_grad(p, cloud, label, loss)
    fd = gradcore.finite_difference_grad(p, cloud, label, h=1e-6, loss=loss)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_param_grads_match_finite_differences(rng):
    p = random_params(7)
    clouds = rng.random((3, 8, 3))
    labels = np.array([0, 2, 3])
    _, dW, db = gradcore.param_grads(p, clouds, labels)
    h = 1e-6
    for layer in range(len(p.weights)):
        for idx in [(0, 0), (1, 2), (2, 1)]:
            if idx[0] >= p.weights[layer].shape[0] or idx[1] >= p.weights[layer].shape[1]:
                continue
            ws = [w.copy() for w in p.weights]

            def loss_at(delta):
                ws[layer] = p.weights[layer].copy()
                ws[layer][idx] += delta
                raw = _Raw(p.arch, ws, list(p.biases))
                logits, _ = gradcore.forward(raw, clouds)
                return gradcore.cross_entropy(logits, labels).sum()

            fd = (loss_at(h) - loss_at(-h)) / (2 * h)
            assert abs(dW[layer][idx] - fd) < 1e-6 * max(1.0, abs(fd))
        assert db[layer].shape == p.biases[layer].shape


class _Raw:
    def __init__(self, arch, weights, biases):
        self.arch, self.weights, self.biases = arch, weights, biases


def test_only_pooled_winners_get_gradient(rng):
    p = random_params(1)
    cloud = random_cloud(rng, 30)
    logits, cache = gradcore.forward(p, cloud)
    _, dl = gradcore.loss_and_dlogits(logits, [1])
    g, _ = gradcore.backward(p, cache, dl)
    winners = set(cache.argmax[0].tolist())
    for k in range(30):
        if k not in winners:
            assert np.all(g[0, k] == 0)


def test_argmax_ties_go_to_lowest_index():
    p = random_params(2)
    cloud = np.array([[0.2, 0.3, 0.4], [0.9, 0.1, 0.5], [0.2, 0.3, 0.4]])
    _, cache = gradcore.forward(p, cloud)
    assert 2 not in cache.argmax[0]
    # duplicates win with the lower index even when the duplicate is listed first
    _, cache2 = gradcore.forward(p, cloud[[2, 1, 0]])
    assert 2 not in cache2.argmax[0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
def test_permutation_invariance_is_bit_exact(seed, n):
    rng = np.random.default_rng(seed)
    p = random_params(seed % 17)
    cloud = random_cloud(rng, n)
    perm = rng.permutation(n)
    a, _ = gradcore.forward(p, cloud)
    b, _ = gradcore.forward(p, cloud[perm])
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradient_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    p = random_params(seed % 11)
    cloud = random_cloud(rng, 15)
    perm = rng.permutation(15)
    _, g = gradcore.loss_and_input_grad(p, cloud, 1)
    _, gp = gradcore.loss_and_input_grad(p, cloud[perm], 1)
    assert np.array_equal(gp, g[perm])


def test_cross_entropy_and_margin_values():
    z = np.array([[1.0, 3.0, 2.0], [0.0, 0.0, 0.0]])
    ce = gradcore.cross_entropy(z, [1, 0])
    np.testing.assert_allclose(ce[0], -np.log(np.exp(3) / np.exp([1, 3, 2]).sum()))
    np.testing.assert_allclose(ce[1], np.log(3))
    np.testing.assert_array_equal(gradcore.margin(z, [1, 0]), [-1.0, 0.0])


def test_ce_is_stable_for_huge_logits():
    value, d = gradcore.loss_and_dlogits(np.array([[1e4, 0.0, -1e4]]), [0])
    assert np.isfinite(value).all() and np.isfinite(d).all()
    assert value[0] == 0.0


def test_dlogits_rows_sum_to_zero(rng):
    z = rng.normal(size=(5, 4))
    for loss in ("ce", "margin"):
        _, d = gradcore.loss_and_dlogits(z, [0, 1, 2, 3, 0], loss)
        np.testing.assert_allclose(d.sum(axis=1), 0, atol=1e-12)


def test_shape_and_value_errors():
    p = random_params(0)
    with pytest.raises(ConfigError):
        gradcore.forward(p, np.zeros((4, 2)))
    with pytest.raises(InputError):
        gradcore.forward(p, np.zeros((0, 3)))
    with pytest.raises(InputError):
        gradcore.forward(p, np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(InputError):
        gradcore.loss_and_input_grad(p, np.zeros((3, 3)), 9)
    with pytest.raises(ConfigError):
        gradcore.loss_and_dlogits(np.zeros((1, 4)), [0], "hinge")
    with pytest.raises(ConfigError):
        gradcore.finite_difference_grad(p, np.zeros((3, 3)), 0, h=0)


def test_single_point_cloud(rng):
    p = random_params(3)
    cloud = rng.random((1, 3))
    _, g = gradcore.loss_and_input_grad(p, cloud, 0)
    fd = gradcore.finite_difference_grad(p, cloud, 0)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_make_rng_streams():
    a = gradcore.make_rng(1, 2, 3).random(4)
    b = gradcore.make_rng(1, 2, 3).random(4)
    c = gradcore.make_rng(1, 2, 4).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_mismatched_params_rejected():
    p = random_params(0)
    bad = _Raw(Architecture((3, 8, 16), (16, 12, 5)), p.weights, p.biases)
    with pytest.raises(ConfigError):
        gradcore.forward(bad, np.zeros((2, 3)))
    assert TINY.num_classes == 4
