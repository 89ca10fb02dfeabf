"""Self-attention layers: explicit geometric maps and the key-query baseline.

``ExpAttLayer`` computes ``y = Norm(G + offset) (x W_v) W_o`` where ``G`` comes
from :mod:`geoatt.grid_kernels` and does not depend on ``x``. With head
sharing (the default) one map serves all heads, so the value columns never
need to be split. Without sharing each head owns its own radius.

``KqAttnLayer`` is the content-dependent reference: per head
``softmax(K Q^T / sqrt(d)) V`` followed by the output projection. There is no
positional-encoding term.

Inputs are flattened feature maps of shape ``(HW, C)``; an optional leading
batch axis is accepted by every forward/backward pair here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid_kernels import (
    AttentionMatrix,
    GridShape,
    KernelKind,
    KernelSpec,
    RawKernel,
    attention_sigma_grad,
    build_raw_kernel,
    kernel_sigma_grad,
    normalize_with_offset,
)
from .numcore import ShapeError, as_tensor, init_uniform, make_rng, matmul, record_multiplies

__all__ = [
    "ExpAttLayer",
    "KqAttnLayer",
    "ForwardCache",
    "KqCache",
    "expatt_forward",
    "expatt_backward",
    "kq_attention_forward",
    "kq_attention_backward",
    "brute_force_pixel_attention",
    "brute_force_kq_output",
    "concat_interplay_forward",
]


# ---------------------------------------------------------------------------
# explicit attention

@dataclass(eq=False)
class ExpAttLayer:
    """Learnable state of one explicit-attention layer.

    ``sigma`` holds one radius when heads share their map, one per head
    otherwise, and is empty for the fixed kernel kinds.
    """

    w_v: np.ndarray
    w_o: np.ndarray
    kernel: KernelKind
    sigma: np.ndarray
    n_heads: int = 1
    offset: int = 1
    share_across_heads: bool = True
    _fixed_maps: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.kernel = KernelKind(self.kernel)
        self.w_v = as_tensor(self.w_v, name="w_v")
        self.w_o = as_tensor(self.w_o, name="w_o")
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        d_v = self.w_v.shape[1]
        if self.w_o.shape != (d_v, d_v):
            raise ShapeError(f"w_o must be {d_v}x{d_v}, got {self.w_o.shape}", self.w_o.shape)
        if self.n_heads < 1 or d_v % self.n_heads:
            raise ShapeError(f"d_v={d_v} is not divisible by n_heads={self.n_heads}")
        if self.offset not in (0, 1):
            raise ValueError(f"offset must be 0 or 1, got {self.offset!r}")
        want = self.n_sigmas
        if self.sigma.size != want:
            raise ValueError(f"expected {want} sigma value(s), got {self.sigma.size}")

    @classmethod
    def create(
        cls,
        c_in: int,
        d_v: int,
        n_heads: int = 1,
        kernel: KernelKind | str = KernelKind.GAUSSIAN,
        *,
        sigma: float = 0.75,
        offset: int = 1,
        share_across_heads: bool = True,
        rng: np.random.Generator | None = None,
    ) -> "ExpAttLayer":
        rng = make_rng(0) if rng is None else rng
        kernel = KernelKind(kernel)
        if not kernel.learnable:
            sigmas = np.zeros(0)
        else:
            sigmas = np.full(1 if share_across_heads else n_heads, float(sigma))
        return cls(
            w_v=init_uniform(c_in, d_v, rng),
            w_o=init_uniform(d_v, d_v, rng),
            kernel=kernel,
            sigma=sigmas,
            n_heads=n_heads,
            offset=offset,
            share_across_heads=share_across_heads,
        )

    @property
    def c_in(self) -> int:
        return self.w_v.shape[0]

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1]

    @property
    def d_v_head(self) -> int:
        return self.d_v // self.n_heads

    @property
    def learnable(self) -> bool:
        return self.kernel.learnable

    @property
    def n_sigmas(self) -> int:
        if not self.learnable:
            return 0
        return 1 if self.share_across_heads else self.n_heads

    def params(self) -> dict[str, np.ndarray]:
        out = {"w_v": self.w_v, "w_o": self.w_o}
        if self.learnable:
            out["sigma"] = self.sigma
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def kernel_specs(self) -> list[KernelSpec]:
        """One spec per distinct map: a single entry when heads share."""
        if not self.learnable:
            return [KernelSpec(self.kernel)]
        return [KernelSpec(self.kernel, float(s)) for s in self.sigma]

    def precompute(self, shape: GridShape) -> None:
        """Build fixed-kind maps for ``shape`` ahead of the first forward."""
        if not self.learnable:
            self.attention_maps(shape)

    def attention_maps(self, shape: GridShape) -> list[tuple[RawKernel, AttentionMatrix]]:
        """Maps for ``shape``; fixed kinds are built once and reused."""
        if not self.learnable:
            hit = self._fixed_maps.get(shape)
            if hit is None:
                raw = build_raw_kernel(shape, KernelSpec(self.kernel))
                hit = [(raw, normalize_with_offset(raw, self.offset))]
                self._fixed_maps[shape] = hit
            return hit
        maps = []
        for spec in self.kernel_specs():
            raw = build_raw_kernel(shape, spec)
            maps.append((raw, normalize_with_offset(raw, self.offset)))
        return maps


@dataclass(eq=False)
class ForwardCache:
    x: np.ndarray
    v: np.ndarray
    p: np.ndarray
    maps: list[tuple[RawKernel, AttentionMatrix]]
    shape: GridShape
    layer_id: int


def _check_input(x, shape: GridShape, c_in: int) -> np.ndarray:
    x = as_tensor(x, name="x")
    if x.ndim < 2 or x.shape[-2] != shape.size or x.shape[-1] != c_in:
        raise ShapeError(
            f"input {x.shape} does not match grid {shape.h}x{shape.w} with {c_in} channels",
            x.shape,
        )
    return x


def _head_slices(layer) -> list[slice]:
    dh = layer.d_v_head
    return [slice(h * dh, (h + 1) * dh) for h in range(layer.n_heads)]


def expatt_forward(layer: ExpAttLayer, x, shape: GridShape) -> tuple[np.ndarray, ForwardCache]:
    x = _check_input(x, shape, layer.c_in)
    with record_multiplies("value"):
        v = matmul(x, layer.w_v)
    with record_multiplies("kernel"):
        maps = layer.attention_maps(shape)
    with record_multiplies("apply"):
        if len(maps) == 1:
            p = matmul(maps[0][1].a, v)
        else:
            p = np.concatenate(
                [matmul(att.a, v[..., sl]) for (_, att), sl in zip(maps, _head_slices(layer))],
                axis=-1,
            )
    with record_multiplies("output"):
        y = matmul(p, layer.w_o)
    return y, ForwardCache(x, v, p, maps, shape, id(layer))


def _flat2(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def expatt_backward(layer: ExpAttLayer, cache: ForwardCache, dy) -> dict[str, np.ndarray]:
    """Gradients ``{"x", "w_v", "w_o"[, "sigma"]}`` of a scalar loss given ``dy``."""
    if cache.layer_id != id(layer):
        raise ValueError("forward cache belongs to a different layer")
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.p.shape:
        raise ShapeError(f"dy shape {dy.shape} != output shape {cache.p.shape}", dy.shape)

    grads: dict[str, np.ndarray] = {}
    grads["w_o"] = _flat2(cache.p).T @ _flat2(dy)
    dp = dy @ layer.w_o.T

    slices = [slice(None)] if len(cache.maps) == 1 else _head_slices(layer)
    dv = np.empty_like(cache.v)
    dsigma = np.zeros(layer.n_sigmas)
    for h, ((raw, att), sl) in enumerate(zip(cache.maps, slices)):
        dv[..., sl] = np.swapaxes(att.a, -1, -2) @ dp[..., sl]
        if layer.learnable:
            # dL/dA summed over the batch, contracted with dA/dsigma
            dl_da = _flat_batch_outer(dp[..., sl], cache.v[..., sl])
            spec = KernelSpec(layer.kernel, float(layer.sigma[h]))
            d_a = attention_sigma_grad(raw, kernel_sigma_grad(cache.shape, spec, raw), layer.offset)
            dsigma[h] = np.sum(dl_da * d_a)
    grads["w_v"] = _flat2(cache.x).T @ _flat2(dv)
    grads["x"] = dv @ layer.w_v.T
    if layer.learnable:
        grads["sigma"] = dsigma
    return grads


def _flat_batch_outer(dp: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``sum_b dp[b] @ v[b].T`` for batched or unbatched operands."""
    if dp.ndim == 2:
        return dp @ v.T
    n = dp.shape[-2]
    dp2 = np.moveaxis(dp.reshape((-1,) + dp.shape[-2:]), 1, 0).reshape(n, -1)
    v2 = np.moveaxis(v.reshape((-1,) + v.shape[-2:]), 1, 0).reshape(n, -1)
    return dp2 @ v2.T


def brute_force_pixel_attention(a_row, v, w_o) -> np.ndarray:
    """Reference output row ``(sum_j a_row[j] v[j]) @ w_o`` using plain loops."""
    a_row = np.asarray(a_row, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    if abs(float(sum(a_row.tolist())) - 1.0) > 1e-9:
        raise ValueError("attention weights must sum to 1")
    n, d_v = v.shape
    p = [0.0] * d_v
    for j in range(n):
        for c in range(d_v):
            p[c] += a_row[j] * v[j, c]
    out = np.zeros(w_o.shape[1])
    for k in range(w_o.shape[1]):
        acc = 0.0
        for c in range(d_v):
            acc += p[c] * w_o[c, k]
        out[k] = acc
    return out


# ---------------------------------------------------------------------------
# key-query baseline

@dataclass(eq=False)
class KqAttnLayer:
    """Per-head key/query/value projections stacked on the leading axis."""

    w_k: np.ndarray  # (N, C, d)
    w_q: np.ndarray  # (N, C, d)
    w_v: np.ndarray  # (N, C, d_v_head)
    w_o: np.ndarray  # (N*d_v_head, N*d_v_head)

    def __post_init__(self):
        self.w_k = as_tensor(self.w_k, name="w_k")
        self.w_q = as_tensor(self.w_q, name="w_q")
        self.w_v = as_tensor(self.w_v, name="w_v")
        self.w_o = as_tensor(self.w_o, name="w_o")
        n, c, d = self.w_k.shape
        if self.w_q.shape != (n, c, d) or self.w_v.shape[:2] != (n, c):
            raise ShapeError("inconsistent key/query/value projection shapes")
        width = n * self.w_v.shape[2]
        if self.w_o.shape != (width, width):
            raise ShapeError(f"w_o must be {width}x{width}, got {self.w_o.shape}")

    @classmethod
    def create(cls, c_in: int, n_heads: int, d: int, d_v_head: int,
               rng: np.random.Generator | None = None) -> "KqAttnLayer":
        rng = make_rng(0) if rng is None else rng
        w_k = np.stack([init_uniform(c_in, d, rng) for _ in range(n_heads)])
        w_q = np.stack([init_uniform(c_in, d, rng) for _ in range(n_heads)])
        w_v = np.stack([init_uniform(c_in, d_v_head, rng) for _ in range(n_heads)])
        width = n_heads * d_v_head
        return cls(w_k, w_q, w_v, init_uniform(width, width, rng))

    @property
    def n_heads(self) -> int:
        return self.w_k.shape[0]

    @property
    def c_in(self) -> int:
        return self.w_k.shape[1]

    @property
    def d(self) -> int:
        return self.w_k.shape[2]

    @property
    def d_v_head(self) -> int:
        return self.w_v.shape[2]

    @property
    def d_v(self) -> int:
        return self.n_heads * self.d_v_head

    def params(self) -> dict[str, np.ndarray]:
        return {"w_k": self.w_k, "w_q": self.w_q, "w_v": self.w_v, "w_o": self.w_o}

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())


@dataclass(eq=False)
class KqCache:
    x: np.ndarray
    k: list[np.ndarray]
    q: list[np.ndarray]
    v: list[np.ndarray]
    s: list[np.ndarray]
    concat: np.ndarray
    layer_id: int


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kq_attention_forward(layer: KqAttnLayer, x, shape: GridShape) -> tuple[np.ndarray, KqCache]:
    x = _check_input(x, shape, layer.c_in)
    scale = 1.0 / math.sqrt(layer.d)
    ks, qs, vs, ss, heads = [], [], [], [], []
    for h in range(layer.n_heads):
        with record_multiplies("projection"):
            k = matmul(x, layer.w_k[h])
            q = matmul(x, layer.w_q[h])
        with record_multiplies("value"):
            v = matmul(x, layer.w_v[h])
        with record_multiplies("logits"):
            logits = matmul(k, np.swapaxes(q, -1, -2))
        s = _softmax_rows(logits * scale)
        with record_multiplies("apply"):
            heads.append(matmul(s, v))
        ks.append(k)
        qs.append(q)
        vs.append(v)
        ss.append(s)
    concat = np.concatenate(heads, axis=-1)
    with record_multiplies("output"):
        y = matmul(concat, layer.w_o)
    return y, KqCache(x, ks, qs, vs, ss, concat, id(layer))


def kq_attention_backward(layer: KqAttnLayer, cache: KqCache, dy) -> dict[str, np.ndarray]:
    """Gradients ``{"x", "w_k", "w_q", "w_v", "w_o"}`` given ``dy``."""
    if cache.layer_id != id(layer):
        raise ValueError("forward cache belongs to a different layer")
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.concat.shape:
        raise ShapeError(f"dy shape {dy.shape} != output shape {cache.concat.shape}", dy.shape)
    scale = 1.0 / math.sqrt(layer.d)
    x2 = _flat2(cache.x)
    dconcat = dy @ layer.w_o.T
    grads = {
        "w_o": _flat2(cache.concat).T @ _flat2(dy),
        "w_k": np.zeros_like(layer.w_k),
        "w_q": np.zeros_like(layer.w_q),
        "w_v": np.zeros_like(layer.w_v),
    }
    dx = np.zeros_like(cache.x)
    dh = layer.d_v_head
    for h in range(layer.n_heads):
        datt = dconcat[..., h * dh:(h + 1) * dh]
        s, k, q, v = cache.s[h], cache.k[h], cache.q[h], cache.v[h]
        ds = datt @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(s, -1, -2) @ datt
        dlogits = s * (ds - np.sum(ds * s, axis=-1, keepdims=True)) * scale
        dk = dlogits @ q
        dq = np.swapaxes(dlogits, -1, -2) @ k
        grads["w_k"][h] = x2.T @ _flat2(dk)
        grads["w_q"][h] = x2.T @ _flat2(dq)
        grads["w_v"][h] = x2.T @ _flat2(dv)
        dx += dk @ layer.w_k[h].T + dq @ layer.w_q[h].T + dv @ layer.w_v[h].T
    grads["x"] = dx
    return grads


def brute_force_kq_output(layer: KqAttnLayer, x, i: int) -> np.ndarray:
    """Output row for focus pixel ``i`` from explicit dot products and exp sums."""
    x = np.asarray(x, dtype=np.float64)
    n_pix, c_in = x.shape
    d, dh = layer.d, layer.d_v_head

    def project(w, row):
        return [sum(x[row, c] * w[c, t] for c in range(c_in)) for t in range(w.shape[1])]

    concat = []
    for h in range(layer.n_heads):
        k_i = project(layer.w_k[h], i)
        logits = []
        for j in range(n_pix):
            q_j = project(layer.w_q[h], j)
            logits.append(sum(k_i[t] * q_j[t] for t in range(d)) / math.sqrt(d))
        top = max(logits)
        weights = [math.exp(z - top) for z in logits]
        total = sum(weights)
        att = [0.0] * dh
        for j in range(n_pix):
            v_j = project(layer.w_v[h], j)
            for t in range(dh):
                att[t] += weights[j] / total * v_j[t]
        concat.extend(att)
    width = layer.w_o.shape[1]
    return np.array([sum(concat[c] * layer.w_o[c, k] for c in range(len(concat))) for k in range(width)])


def concat_interplay_forward(expatt_layer: ExpAttLayer, kq_layer: KqAttnLayer, x,
                             shape: GridShape) -> np.ndarray:
    """Explicit-attention and key-query outputs side by side on the channel axis."""
    if expatt_layer.c_in != kq_layer.c_in:
        raise ShapeError(
            f"input channels differ: expatt {expatt_layer.c_in} vs kq {kq_layer.c_in}"
        )
    y_exp, _ = expatt_forward(expatt_layer, x, shape)
    y_kq, _ = kq_attention_forward(kq_layer, x, shape)
    return np.concatenate([y_exp, y_kq], axis=-1)
