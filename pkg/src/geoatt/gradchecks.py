"""Registry of analytic-vs-central-difference gradient checks.

Each check builds a small randomly initialised layer, uses the loss
``L = sum(y**2) / 2`` (so ``dL/dy = y``), and compares every analytic
gradient with :func:`geoatt.numcore.finite_diff_grad`. The reported number is
the largest :func:`geoatt.numcore.rel_error` over the checked tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import expatt as ea
from . import grid_kernels as gk
from . import netblocks as nb
from .numcore import finite_diff_grad, make_rng, rel_error

__all__ = ["TOLERANCE", "EPS", "GradCheck", "CHECKS", "run_checks", "check_tensors"]

TOLERANCE = 1e-6
EPS = 1e-6


@dataclass(frozen=True)
class GradCheck:
    name: str
    fn: Callable[[np.random.Generator, Callable], float]


def _identity(name: str, g: np.ndarray) -> np.ndarray:
    return g


def check_tensors(tensors: dict[str, np.ndarray], forward: Callable[[], np.ndarray],
                  backward: Callable[[np.ndarray], dict[str, np.ndarray]],
                  hook: Callable = _identity, eps: float = EPS) -> float:
    """Max relative error between analytic and numeric gradients.

    ``tensors`` are the live arrays the forward reads; they are perturbed in
    place and restored. ``backward(dy)`` must return gradients keyed like
    ``tensors``.
    """
    y = forward()
    analytic = backward(y.copy())
    worst = 0.0
    for name, arr in tensors.items():
        base = arr.copy()

        def loss(flat, arr=arr, base=base):
            arr[...] = flat.reshape(base.shape)
            return 0.5 * float(np.sum(forward() ** 2))

        numeric = finite_diff_grad(loss, base.ravel(), eps).reshape(base.shape)
        arr[...] = base
        worst = max(worst, rel_error(hook(name, analytic[name]), numeric))
    return worst


# ---------------------------------------------------------------------------
# grid kernels

def _kernel_check(kind: str, offset: int | None):
    def run(rng: np.random.Generator, hook: Callable) -> float:
        worst = 0.0
        for h, w in ((1, 3), (3, 4), (6, 6), (5, 2)):
            shape = gk.GridShape(h, w)
            sigma = float(rng.uniform(0.2, 2.0))

            def entries(s):
                raw = gk.build_raw_kernel(shape, gk.KernelSpec(kind, float(s[0])))
                if offset is None:
                    return raw.g
                return gk.normalize_with_offset(raw, offset).a

            spec = gk.KernelSpec(kind, sigma)
            raw = gk.build_raw_kernel(shape, spec)
            d_g = gk.kernel_sigma_grad(shape, spec, raw)
            analytic = d_g if offset is None else gk.attention_sigma_grad(raw, d_g, offset)
            analytic = hook("sigma", analytic)
            n = shape.size * shape.size
            numeric = np.empty(n)
            for k in range(n):
                numeric[k] = finite_diff_grad(lambda s: entries(s).ravel()[k], [sigma], EPS)[0]
            worst = max(worst, rel_error(analytic.ravel(), numeric))
        return worst
    return run


# ---------------------------------------------------------------------------
# attention layers

def _expatt_check(kind: str, offset: int = 1, share: bool = True, n_heads: int = 2,
                  batch: int | None = None):
    def run(rng: np.random.Generator, hook: Callable) -> float:
        shape = gk.GridShape(3, 4)
        c, d_v = 5, 4
        layer = ea.ExpAttLayer.create(c, d_v, n_heads, kind, offset=offset,
                                      share_across_heads=share, rng=rng)
        if layer.learnable:
            layer.sigma[...] = rng.uniform(0.3, 1.5, size=layer.sigma.shape)
        lead = () if batch is None else (batch,)
        x = rng.standard_normal(lead + (shape.size, c))
        state = {}

        def forward():
            y, state["cache"] = ea.expatt_forward(layer, x, shape)
            return y

        def backward(dy):
            return ea.expatt_backward(layer, state["cache"], dy)

        return check_tensors({"x": x, **layer.params()}, forward, backward, hook)
    return run


def _kq_check(rng: np.random.Generator, hook: Callable) -> float:
    shape = gk.GridShape(2, 3)
    layer = ea.KqAttnLayer.create(4, 2, 3, 2, rng=rng)
    x = rng.standard_normal((shape.size, 4))
    state = {}

    def forward():
        y, state["cache"] = ea.kq_attention_forward(layer, x, shape)
        return y

    def backward(dy):
        return ea.kq_attention_backward(layer, state["cache"], dy)

    return check_tensors({"x": x, **layer.params()}, forward, backward, hook)


def _interplay_check(rng: np.random.Generator, hook: Callable) -> float:
    shape = gk.GridShape(3, 3)
    exp_layer = ea.ExpAttLayer.create(4, 4, 2, "gaussian", rng=rng)
    kq_layer = ea.KqAttnLayer.create(4, 2, 2, 2, rng=rng)
    # narrow radius keeps dL/dsigma well above central-difference roundoff
    exp_layer.sigma[...] = rng.uniform(0.2, 0.4)
    x = rng.standard_normal((shape.size, 4))
    state = {}

    def forward():
        y1, state["c1"] = ea.expatt_forward(exp_layer, x, shape)
        y2, state["c2"] = ea.kq_attention_forward(kq_layer, x, shape)
        out = np.concatenate([y1, y2], axis=-1)
        assert np.array_equal(out, ea.concat_interplay_forward(exp_layer, kq_layer, x, shape))
        return out

    def backward(dy):
        g1 = ea.expatt_backward(exp_layer, state["c1"], dy[:, :exp_layer.d_v])
        g2 = ea.kq_attention_backward(kq_layer, state["c2"], dy[:, exp_layer.d_v:])
        out = {f"exp.{k}": v for k, v in g1.items() if k != "x"}
        out.update({f"kq.{k}": v for k, v in g2.items() if k != "x"})
        out["x"] = g1["x"] + g2["x"]
        return out

    tensors = {"x": x}
    tensors.update({f"exp.{k}": v for k, v in exp_layer.params().items()})
    tensors.update({f"kq.{k}": v for k, v in kq_layer.params().items()})
    return check_tensors(tensors, forward, backward, _prefixed(hook))


def _prefixed(hook: Callable) -> Callable:
    return lambda name, g: hook(name.rsplit(".", 1)[-1], g)


# ---------------------------------------------------------------------------
# network blocks

def _conv_check(k: int, stride: int):
    def run(rng: np.random.Generator, hook: Callable) -> float:
        layer = nb.Conv2dLayer.create(1, 3, k, stride, rng)
        layer.bias[...] = rng.standard_normal(layer.bias.shape)
        x = rng.standard_normal((1, 5, 5))
        state = {}

        def forward():
            y, state["cache"] = nb.conv2d_forward(layer, x)
            return y

        def backward(dy):
            return nb.conv2d_backward(layer, state["cache"], dy)

        return check_tensors({"x": x, **layer.params()}, forward, backward, hook)
    return run


def _pool_check(rng: np.random.Generator, hook: Callable) -> float:
    x = rng.standard_normal((2, 5, 6))

    def backward(dy):
        return {"x": nb.avgpool3x3s2_backward(dy, x.shape)}

    return check_tensors({"x": x}, lambda: nb.avgpool3x3s2(x), backward, hook)


def _block_check(stride: int, share: bool = True, offset: int = 1):
    def run(rng: np.random.Generator, hook: Callable) -> float:
        # half the channels on the attention branch so the radius gradient is
        # not swamped by the convolution's share of the loss
        block = nb.AugmentedConvBlock.create(3, 8, ratio=0.5, n_heads=2, stride=stride,
                                             offset=offset, share_across_heads=share, rng=rng)
        block.attn.sigma[...] = rng.uniform(0.2, 0.4, size=block.attn.sigma.shape)
        x = rng.standard_normal((3, 6, 6))
        state = {}

        def forward():
            y, state["cache"] = nb.augmented_forward(block, x)
            return y

        def backward(dy):
            return nb.augmented_backward(block, state["cache"], dy)

        return check_tensors({"x": x, **block.params()}, forward, backward, _prefixed(hook))
    return run


CHECKS: list[GradCheck] = [
    GradCheck("kernel_dsigma/gaussian", _kernel_check("gaussian", None)),
    GradCheck("kernel_dsigma/exp-euclid", _kernel_check("exp-euclid", None)),
    GradCheck("kernel_dsigma/exp-manhattan", _kernel_check("exp-manhattan", None)),
    GradCheck("attention_dsigma/gaussian/offset1", _kernel_check("gaussian", 1)),
    GradCheck("attention_dsigma/gaussian/offset0", _kernel_check("gaussian", 0)),
    GradCheck("attention_dsigma/exp-euclid/offset1", _kernel_check("exp-euclid", 1)),
    GradCheck("attention_dsigma/exp-manhattan/offset0", _kernel_check("exp-manhattan", 0)),
    GradCheck("expatt/constant", _expatt_check("constant")),
    GradCheck("expatt/linear", _expatt_check("linear")),
    GradCheck("expatt/cosine/offset0", _expatt_check("cosine", offset=0)),
    GradCheck("expatt/gaussian", _expatt_check("gaussian")),
    GradCheck("expatt/gaussian/offset0", _expatt_check("gaussian", offset=0)),
    GradCheck("expatt/gaussian/per-head", _expatt_check("gaussian", share=False)),
    GradCheck("expatt/exp-euclid/per-head/batched", _expatt_check("exp-euclid", share=False, batch=2)),
    GradCheck("expatt/exp-manhattan", _expatt_check("exp-manhattan", n_heads=4)),
    GradCheck("kq_baseline", _kq_check),
    GradCheck("interplay_concat", _interplay_check),
    GradCheck("conv2d/k3s1", _conv_check(3, 1)),
    GradCheck("conv2d/k3s2", _conv_check(3, 2)),
    GradCheck("conv2d/k1s1", _conv_check(1, 1)),
    GradCheck("avgpool3x3s2", _pool_check),
    GradCheck("augmented_block/s1", _block_check(1)),
    GradCheck("augmented_block/s2/per-head", _block_check(2, share=False)),
    GradCheck("augmented_block/s2/offset0", _block_check(2, offset=0)),
]


def run_checks(seed: int = 0, hook: Callable = _identity,
               names: list[str] | None = None) -> dict[str, float]:
    """Run registered checks; returns ``{name: max relative error}``.

    ``hook(param_name, grad)`` sees every analytic gradient before comparison
    and exists so negative controls can corrupt one on purpose.
    """
    results = {}
    for i, check in enumerate(CHECKS):
        if names is not None and check.name not in names:
            continue
        results[check.name] = check.fn(make_rng(seed * 1000 + i), hook)
    return results


def corrupt_sigma(name: str, g: np.ndarray) -> np.ndarray:
    """Negative-control hook: skews every radius gradient by 1%."""
    return g * 1.01 if name == "sigma" else g
