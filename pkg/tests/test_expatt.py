import numpy as np
import pytest

from geoatt import expatt as ea
from geoatt import grid_kernels as gk
from geoatt.gradchecks import check_tensors
from geoatt.grid_kernels import GridShape
from geoatt.numcore import NonFiniteError, ShapeError, make_rng


def make_layer(kind="gaussian", c=5, d_v=4, heads=2, seed=0, **kw):
    return ea.ExpAttLayer.create(c, d_v, heads, kind, rng=make_rng(seed), **kw)


def test_param_counts():
    assert make_layer("gaussian", 6, 4).n_params() == 6 * 4 + 16 + 1
    assert make_layer("cosine", 6, 4).n_params() == 6 * 4 + 16
    assert make_layer("gaussian", 6, 4, heads=4, share_across_heads=False).sigma.size == 4
    with pytest.raises(ShapeError):
        ea.ExpAttLayer.create(3, 5, 2)


def test_single_pixel_is_plain_projection():
    layer = make_layer()
    x = make_rng(1).standard_normal((1, 5))
    y, _ = ea.expatt_forward(layer, x, GridShape(1, 1))
    np.testing.assert_allclose(y, x @ layer.w_v @ layer.w_o, rtol=1e-14, atol=1e-15)


def test_constant_kernel_rows_identical():
    layer = make_layer("constant")
    shape = GridShape(3, 4)
    x = make_rng(2).standard_normal((12, 5))
    y, _ = ea.expatt_forward(layer, x, shape)
    expected = (x @ layer.w_v).mean(axis=0) @ layer.w_o
    np.testing.assert_allclose(y, np.tile(expected, (12, 1)), atol=1e-14)


def test_constant_kernel_ignores_spatial_order():
    layer = make_layer("constant", offset=0)
    shape = GridShape(3, 3)
    x = make_rng(3).standard_normal((9, 5))
    perm = make_rng(4).permutation(9)
    y1, _ = ea.expatt_forward(layer, x, shape)
    y2, _ = ea.expatt_forward(layer, x[perm], shape)
    np.testing.assert_allclose(y1, y2, atol=1e-14)


@pytest.mark.parametrize("kind", [k.value for k in gk.KernelKind])
def test_forward_matches_brute_force(kind):
    layer = make_layer(kind)
    shape = GridShape(3, 4)
    x = make_rng(5).standard_normal((12, 5))
    y, cache = ea.expatt_forward(layer, x, shape)
    a = cache.maps[0][1].a
    v = x @ layer.w_v
    for i in range(shape.size):
        assert np.max(np.abs(y[i] - ea.brute_force_pixel_attention(a[i], v, layer.w_o))) < 1e-12


def test_brute_force_examples():
    rng = make_rng(6)
    v, w_o = rng.standard_normal((4, 3)), rng.standard_normal((3, 3))
    onehot = np.array([0.0, 0.0, 1.0, 0.0])
    np.testing.assert_allclose(ea.brute_force_pixel_attention(onehot, v, w_o), v[2] @ w_o, atol=1e-15)
    np.testing.assert_allclose(ea.brute_force_pixel_attention(np.full(4, 0.25), v, w_o),
                               v.mean(axis=0) @ w_o, atol=1e-14)
    with pytest.raises(ValueError):
        ea.brute_force_pixel_attention(np.full(4, 0.3), v, w_o)


def test_shared_equals_per_head_with_equal_sigma():
    shared = make_layer("exp-euclid", c=4, d_v=6, heads=3, seed=7)
    per_head = ea.ExpAttLayer(shared.w_v.copy(), shared.w_o.copy(), "exp-euclid",
                              np.full(3, shared.sigma[0]), n_heads=3, share_across_heads=False)
    shape = GridShape(4, 3)
    x = make_rng(8).standard_normal((12, 4))
    y1, _ = ea.expatt_forward(shared, x, shape)
    y2, _ = ea.expatt_forward(per_head, x, shape)
    assert np.max(np.abs(y1 - y2)) <= 1e-12


def test_channel_relabeling_invariance():
    layer = make_layer("gaussian")
    shape = GridShape(2, 3)
    x = make_rng(9).standard_normal((6, 5))
    perm = make_rng(10).permutation(5)
    permuted = ea.ExpAttLayer(layer.w_v[perm], layer.w_o, "gaussian", layer.sigma, n_heads=2)
    y1, _ = ea.expatt_forward(layer, x, shape)
    y2, _ = ea.expatt_forward(permuted, x[:, perm], shape)
    np.testing.assert_allclose(y1, y2, atol=1e-14)


def test_forward_errors():
    layer = make_layer()
    with pytest.raises(ShapeError):
        ea.expatt_forward(layer, np.zeros((5, 5)), GridShape(2, 3))
    x = np.zeros((6, 5))
    x[0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        ea.expatt_forward(layer, x, GridShape(2, 3))


def test_backward_zero_dy_and_cache_mismatch():
    layer = make_layer()
    shape = GridShape(2, 2)
    x = make_rng(11).standard_normal((4, 5))
    y, cache = ea.expatt_forward(layer, x, shape)
    grads = ea.expatt_backward(layer, cache, np.zeros_like(y))
    assert set(grads) == {"x", "w_v", "w_o", "sigma"}
    assert all(np.all(g == 0) for g in grads.values())
    with pytest.raises(ValueError):
        ea.expatt_backward(make_layer(), cache, y)


@pytest.mark.parametrize("kind", [k.value for k in gk.KernelKind])
@pytest.mark.parametrize("offset", [0, 1])
@pytest.mark.parametrize("share", [True, False])
def test_backward_matches_finite_differences(kind, offset, share):
    rng = make_rng(12)
    layer = ea.ExpAttLayer.create(4, 4, 2, kind, offset=offset, share_across_heads=share, rng=rng)
    if layer.learnable:
        layer.sigma[...] = rng.uniform(0.3, 1.2, size=layer.sigma.shape)
    shape = GridShape(4, 3)
    x = rng.standard_normal((shape.size, 4))
    state = {}

    def forward():
        y, state["c"] = ea.expatt_forward(layer, x, shape)
        return y

    err = check_tensors({"x": x, **layer.params()}, forward,
                        lambda dy: ea.expatt_backward(layer, state["c"], dy))
    assert err < 1e-6


def test_constant_kernel_dx_is_mean_pool_adjoint():
    layer = make_layer("constant", c=3, d_v=2, heads=1)
    shape = GridShape(2, 3)
    rng = make_rng(13)
    x = rng.standard_normal((6, 3))
    dy = rng.standard_normal((6, 2))
    _, cache = ea.expatt_forward(layer, x, shape)
    grads = ea.expatt_backward(layer, cache, dy)
    assert "sigma" not in grads
    # A is uniform, so dV is the column mean of dP broadcast back to every pixel
    dp = dy @ layer.w_o.T
    dv = np.tile(dp.mean(axis=0), (6, 1))
    np.testing.assert_allclose(grads["x"], dv @ layer.w_v.T, atol=1e-14)


def test_batched_forward_matches_per_sample():
    layer = make_layer("exp-manhattan")
    shape = GridShape(3, 3)
    x = make_rng(14).standard_normal((3, 9, 5))
    yb, _ = ea.expatt_forward(layer, x, shape)
    for b in range(3):
        yi, _ = ea.expatt_forward(layer, x[b], shape)
        np.testing.assert_allclose(yb[b], yi, atol=1e-14)


# ---------------------------------------------------------------------------
# key-query baseline

def test_kq_param_count():
    layer = ea.KqAttnLayer.create(6, 3, 4, 2)
    assert layer.n_params() == 3 * (2 * 6 * 4 + 6 * 2) + 6 * 6


def test_kq_zero_logits_mean_pool():
    rng = make_rng(15)
    layer = ea.KqAttnLayer.create(3, 2, 1, 2, rng=rng)
    layer.w_k[...] = 0.0
    layer.w_q[...] = 0.0
    shape = GridShape(2, 3)
    x = rng.standard_normal((6, 3))
    y, cache = ea.kq_attention_forward(layer, x, shape)
    for s in cache.s:
        np.testing.assert_allclose(s, 1 / 6, atol=1e-15)
    heads = np.concatenate([(x @ layer.w_v[h]).mean(axis=0) for h in range(2)])
    np.testing.assert_allclose(y, np.tile(heads @ layer.w_o, (6, 1)), atol=1e-14)


def test_kq_softmax_rows_sum_to_one():
    rng = make_rng(16)
    layer = ea.KqAttnLayer.create(4, 3, 5, 2, rng=rng)
    _, cache = ea.kq_attention_forward(layer, 10 * rng.standard_normal((12, 4)), GridShape(3, 4))
    for s in cache.s:
        assert np.max(np.abs(s.sum(axis=1) - 1)) < 1e-12


@pytest.mark.parametrize("hw", [(1, 1), (2, 3), (4, 4)])
def test_kq_matches_brute_force(hw):
    rng = make_rng(17)
    layer = ea.KqAttnLayer.create(3, 2, 3, 2, rng=rng)
    shape = GridShape(*hw)
    x = rng.standard_normal((shape.size, 3))
    y, _ = ea.kq_attention_forward(layer, x, shape)
    for i in range(shape.size):
        assert np.max(np.abs(y[i] - ea.brute_force_kq_output(layer, x, i))) < 1e-12


def test_kq_backward_matches_finite_differences():
    rng = make_rng(18)
    layer = ea.KqAttnLayer.create(4, 2, 3, 2, rng=rng)
    shape = GridShape(3, 3)
    x = rng.standard_normal((2, shape.size, 4))
    state = {}

    def forward():
        y, state["c"] = ea.kq_attention_forward(layer, x, shape)
        return y

    err = check_tensors({"x": x, **layer.params()}, forward,
                        lambda dy: ea.kq_attention_backward(layer, state["c"], dy))
    assert err < 1e-6


# ---------------------------------------------------------------------------
# interplay

def test_concat_interplay():
    rng = make_rng(19)
    exp_layer = ea.ExpAttLayer.create(4, 6, 3, "gaussian", rng=rng)
    kq_layer = ea.KqAttnLayer.create(4, 2, 2, 3, rng=rng)
    shape = GridShape(3, 2)
    x = rng.standard_normal((6, 4))
    out = ea.concat_interplay_forward(exp_layer, kq_layer, x, shape)
    assert out.shape == (6, 6 + 2 * 3)
    y1, _ = ea.expatt_forward(exp_layer, x, shape)
    y2, _ = ea.kq_attention_forward(kq_layer, x, shape)
    assert np.array_equal(out[:, :6], y1)
    assert np.array_equal(out, np.hstack([y1, y2]))
    with pytest.raises(ShapeError):
        ea.concat_interplay_forward(exp_layer, ea.KqAttnLayer.create(5, 2, 2, 3), x, shape)
