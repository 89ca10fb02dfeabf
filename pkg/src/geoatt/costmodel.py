"""Parameter, memory and FLOP accounting for attention-map construction.

Closed forms use exact constants: a multiply-accumulate counts as 2 FLOPs,
memory is the number of stored reals. Their scope is the attention-map part
of a layer only (key/query projections plus logits for the baseline; the
kernel rebuild for explicit maps); value and output projections are shared
by both designs and left out.

:func:`measure_counts` checks those forms against real layers by counting
parameters one scalar at a time, summing retained map storage, and running
a forward pass under :func:`geoatt.numcore.count_multiplies`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .expatt import ExpAttLayer, KqAttnLayer, expatt_forward, kq_attention_forward
from .grid_kernels import GridShape
from .numcore import count_multiplies, make_rng

__all__ = [
    "CostReport",
    "LayerConfig",
    "cost_kq",
    "cost_pos_encoding",
    "cost_expatt",
    "measure_counts",
    "layers_for",
]


@dataclass(frozen=True)
class CostReport:
    params: int
    mem_elems: int
    flops: int

    def __post_init__(self):
        if min(self.params, self.mem_elems, self.flops) < 0:
            raise ValueError("cost fields must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LayerConfig:
    h: int
    w: int
    c: int
    n_heads: int
    d: int
    d_v: int
    learnable_kernel: bool = True

    def __post_init__(self):
        for name in ("h", "w", "c", "n_heads", "d", "d_v"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_v % self.n_heads:
            raise ValueError(f"d_v={self.d_v} is not divisible by n_heads={self.n_heads}")

    @property
    def hw(self) -> int:
        return self.h * self.w


def cost_kq(cfg: LayerConfig) -> CostReport:
    hw, n = cfg.hw, cfg.n_heads
    macs = n * (2 * hw * cfg.c * cfg.d) + n * hw * hw * cfg.d
    return CostReport(n * 2 * cfg.c * cfg.d, n * hw * hw, 2 * macs)


def cost_pos_encoding(cfg: LayerConfig) -> CostReport:
    # formula only; the relative encoding itself is not implemented here
    hw = cfg.hw
    return CostReport(2 * (cfg.h + cfg.w - 1) * cfg.d, hw * cfg.d, 2 * hw * hw)


def cost_expatt(cfg: LayerConfig) -> CostReport:
    hw2 = cfg.hw * cfg.hw
    if cfg.learnable_kernel:
        return CostReport(1, hw2, 2 * hw2)
    return CostReport(0, hw2, 0)


def _enumerate_scalars(params: dict[str, np.ndarray]) -> int:
    count = 0
    for arr in params.values():
        for _ in arr.flat:
            count += 1
    return count


def measure_counts(layer: ExpAttLayer | KqAttnLayer, shape: GridShape, *,
                   scope: str = "maps", seed: int = 0) -> CostReport:
    """Count what ``layer`` actually stores and multiplies on ``shape``.

    ``scope="maps"`` restricts every field to attention-map construction so it
    is comparable with the closed forms; ``scope="total"`` counts the whole
    layer (all parameters, every multiply of the forward pass).
    """
    if scope not in ("maps", "total"):
        raise ValueError(f"unknown scope {scope!r}")
    if not isinstance(layer, (ExpAttLayer, KqAttnLayer)):
        raise TypeError(f"cannot measure {type(layer).__name__}")
    x = make_rng(seed).standard_normal((shape.size, layer.c_in))

    if isinstance(layer, ExpAttLayer):
        # warm-up: fixed maps are precomputed once, outside the measured pass
        expatt_forward(layer, x, shape)
        with count_multiplies() as counter:
            _, cache = expatt_forward(layer, x, shape)
        maps = {id(att.a): att.a for _, att in cache.maps}
        mem = sum(a.size for a in maps.values())
        if scope == "maps":
            params = _enumerate_scalars({"sigma": layer.sigma})
            muls = counter.by_tag["kernel"]
        else:
            params = _enumerate_scalars(layer.params())
            muls = counter.total
    else:
        with count_multiplies() as counter:
            _, cache = kq_attention_forward(layer, x, shape)
        mem = sum(s.size for s in cache.s)
        if scope == "maps":
            params = _enumerate_scalars({"w_k": layer.w_k, "w_q": layer.w_q})
            muls = counter.by_tag["projection"] + counter.by_tag["logits"]
        else:
            params = _enumerate_scalars(layer.params())
            muls = counter.total
    return CostReport(params, mem, 2 * muls)


def layers_for(cfg: LayerConfig, seed: int = 0) -> tuple[ExpAttLayer, KqAttnLayer]:
    """Build the explicit-attention and key-query layers matching ``cfg``."""
    rng = make_rng(seed)
    kernel = "gaussian" if cfg.learnable_kernel else "cosine"
    exp_layer = ExpAttLayer.create(cfg.c, cfg.d_v, cfg.n_heads, kernel, rng=rng)
    kq_layer = KqAttnLayer.create(cfg.c, cfg.n_heads, cfg.d, cfg.d_v // cfg.n_heads, rng=rng)
    return exp_layer, kq_layer
