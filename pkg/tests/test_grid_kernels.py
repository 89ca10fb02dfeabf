import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoatt import grid_kernels as gk
from geoatt.grid_kernels import GridShape, KernelKind, KernelSpec
from geoatt.numcore import finite_diff_grad, rel_error

LEARNABLE = [KernelKind.GAUSSIAN, KernelKind.EXP_EUCLID, KernelKind.EXP_MANHATTAN]


def spec_for(kind, sigma=0.75):
    kind = KernelKind(kind)
    return KernelSpec(kind, sigma if kind.learnable else None)


def scalar_kernel(kind, h, w, i, j, sigma):
    """Per-entry formula written out with ``math`` only."""
    ix, iy = i % w, i // w
    jx, jy = j % w, j // w
    dx, dy = ix - jx, iy - jy
    diag = math.sqrt(h * h + w * w)
    if kind == "constant":
        return 1.0
    if kind == "linear":
        return 1 - math.sqrt(dx * dx + dy * dy) / diag
    if kind == "cosine":
        return 0.5 * (1 + math.cos(math.pi * math.sqrt(dx * dx + dy * dy) / diag))
    if kind == "gaussian":
        return math.exp(-((dx / w) ** 2 + (dy / h) ** 2) / (2 * sigma**2))
    if kind == "exp-euclid":
        return math.exp(-math.sqrt((dx / w) ** 2 + (dy / h) ** 2) / sigma)
    return math.exp(-(abs(dx) / w + abs(dy) / h) / sigma)


def test_pixel_coords():
    assert gk.pixel_coords(GridShape(2, 3), 0) == (0, 0)
    assert gk.pixel_coords(GridShape(2, 3), 5) == (2, 1)
    assert gk.pixel_coords(GridShape(4, 4), 6) == (2, 1)
    with pytest.raises(IndexError):
        gk.pixel_coords(GridShape(2, 3), 6)


def test_pixel_coords_bijection():
    shape = GridShape(3, 5)
    coords = {gk.pixel_coords(shape, i) for i in range(shape.size)}
    assert coords == {(x, y) for x in range(5) for y in range(3)}


def test_spec_validation():
    with pytest.raises(gk.KernelError):
        KernelSpec("gaussian", 1e-4)
    with pytest.raises(gk.KernelError):
        KernelSpec("gaussian")
    with pytest.raises(gk.KernelError):
        KernelSpec("cosine", 0.5)
    assert KernelSpec("exp-euclid", gk.SIGMA_FLOOR).sigma == gk.SIGMA_FLOOR


def test_worked_entries():
    s22 = GridShape(2, 2)
    # pixel (0,0) is index 0, (1,1) is index 3
    assert gk.build_raw_kernel(s22, spec_for("linear")).g[0, 3] == pytest.approx(0.5, abs=1e-15)
    assert gk.build_raw_kernel(s22, spec_for("cosine")).g[0, 3] == pytest.approx(0.5, abs=1e-15)
    g = gk.build_raw_kernel(s22, KernelSpec("exp-manhattan", 1.0)).g
    assert g[0, 3] == pytest.approx(math.exp(-1), abs=1e-15)
    # 3x3 grid: pixel (1,1) is index 4, (0,0) is index 0
    g = gk.build_raw_kernel(GridShape(3, 3), KernelSpec("gaussian", 0.75)).g
    assert g[4, 0] == pytest.approx(0.8207548082982681, abs=1e-12)


@pytest.mark.parametrize("kind", [k.value for k in KernelKind])
@pytest.mark.parametrize("hw", [(1, 1), (2, 3), (4, 2), (3, 3)])
def test_matches_scalar_formula(kind, hw):
    shape = GridShape(*hw)
    g = gk.build_raw_kernel(shape, spec_for(kind, 0.6)).g
    for i in range(shape.size):
        for j in range(shape.size):
            assert g[i, j] == pytest.approx(scalar_kernel(kind, *hw, i, j, 0.6), rel=1e-13, abs=1e-15)


def test_normalize_examples():
    att = gk.normalize_with_offset(gk.build_raw_kernel(GridShape(2, 2), spec_for("constant")), 1)
    assert np.all(att.a == 0.25)
    for kind in KernelKind:
        att = gk.normalize_with_offset(gk.build_raw_kernel(GridShape(1, 1), spec_for(kind)), 0)
        assert att.a.tolist() == [[1.0]]
    with pytest.raises(gk.KernelError):
        gk.normalize_with_offset(gk.build_raw_kernel(GridShape(1, 1), spec_for("constant")), 2)


def test_gaussian_3x3_rows_and_center():
    att = gk.normalize_with_offset(gk.build_raw_kernel(GridShape(3, 3), KernelSpec("gaussian", 0.75)), 1)
    for row in att.a:
        total = 0.0
        for v in row:
            total += v
        assert abs(total - 1.0) < 1e-12
    assert np.argmax(att.a[4]) == 4
    assert np.all(att.a > 0)


def test_kernel_sigma_grad_worked_value_and_diagonal():
    spec = KernelSpec("gaussian", 0.75)
    dg = gk.kernel_sigma_grad(GridShape(3, 3), spec)
    assert dg[4, 0] == pytest.approx(0.4323317508731617, abs=1e-12)
    for kind in LEARNABLE:
        dg = gk.kernel_sigma_grad(GridShape(3, 4), KernelSpec(kind, 0.9))
        assert np.all(np.diag(dg) == 0)
    with pytest.raises(gk.KernelError, match="no sigma"):
        gk.kernel_sigma_grad(GridShape(2, 2), spec_for("linear"))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(LEARNABLE), st.integers(1, 6), st.integers(1, 6),
       st.floats(0.05, 3.0), st.sampled_from([0, 1]))
def test_sigma_grads_match_finite_differences(kind, h, w, sigma, offset):
    shape = GridShape(h, w)
    spec = KernelSpec(kind, sigma)
    raw = gk.build_raw_kernel(shape, spec)
    dg = gk.kernel_sigma_grad(shape, spec, raw)
    da = gk.attention_sigma_grad(raw, dg, offset)
    n = shape.size

    def entry_g(k):
        return lambda s: gk.build_raw_kernel(shape, KernelSpec(kind, float(s[0]))).g.ravel()[k]

    def entry_a(k):
        return lambda s: gk.normalize_with_offset(
            gk.build_raw_kernel(shape, KernelSpec(kind, float(s[0]))), offset).a.ravel()[k]

    num_g = np.array([finite_diff_grad(entry_g(k), [sigma], 1e-6)[0] for k in range(n * n)])
    num_a = np.array([finite_diff_grad(entry_a(k), [sigma], 1e-6)[0] for k in range(n * n)])
    assert rel_error(dg.ravel(), num_g) < 1e-6
    assert rel_error(da.ravel(), num_a) < 1e-6
    np.testing.assert_allclose(da.sum(axis=1), 0.0, atol=1e-12 * max(1.0, np.abs(da).max()))


def test_attention_sigma_grad_zero_and_shape_check():
    raw = gk.build_raw_kernel(GridShape(2, 3), KernelSpec("gaussian", 0.5))
    assert np.all(gk.attention_sigma_grad(raw, np.zeros((6, 6)), 1) == 0)
    with pytest.raises(gk.ShapeError):
        gk.attention_sigma_grad(raw, np.zeros((5, 6)), 1)


def test_large_sigma_approaches_constant():
    shape = GridShape(5, 5)
    a = gk.normalize_with_offset(gk.build_raw_kernel(shape, KernelSpec("gaussian", 1e6)), 1).a
    c = gk.normalize_with_offset(gk.build_raw_kernel(shape, spec_for("constant")), 1).a
    assert np.max(np.abs(a - c)) < 1e-6


def test_fixed_kernel_eval_counter():
    shape = GridShape(3, 4)
    gk.EVAL_COUNTER.reset()
    gk.build_raw_kernel(shape, spec_for("cosine"))
    assert gk.EVAL_COUNTER.count == shape.size**2


def test_built_arrays_are_read_only():
    raw = gk.build_raw_kernel(GridShape(2, 2), spec_for("linear"))
    with pytest.raises(ValueError):
        raw.g[0, 0] = 3.0
