"""Explicit, content-independent attention matrices on a 2-D pixel grid.

Pixels are flattened row-major: flat index ``i = i_y * w + i_x``. For a grid
of ``h x w`` pixels every kernel is an ``hw x hw`` matrix ``G`` whose entry
``G[i, j]`` decays with the distance between pixels ``i`` and ``j``. The
attention matrix applied to values is ``Norm(G + offset)``, i.e. ``G`` plus a
constant offset (0 or 1), divided by its row sums.

Three kinds are fixed (constant, linear, cosine) and three carry a single
radius ``sigma`` (gaussian, exp-euclid, exp-manhattan). For the radius kinds
the distance part of the exponent depends only on the grid, so it is cached
per grid shape and each rebuild is one scale and one ``exp`` per entry.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass

import numpy as np

from .numcore import ShapeError, add_multiplies

__all__ = [
    "SIGMA_FLOOR",
    "GridShape",
    "KernelKind",
    "KernelSpec",
    "RawKernel",
    "AttentionMatrix",
    "KernelError",
    "pixel_coords",
    "kernel_distance",
    "build_raw_kernel",
    "normalize_with_offset",
    "kernel_sigma_grad",
    "attention_sigma_grad",
    "EVAL_COUNTER",
]

SIGMA_FLOOR = 1e-3


class KernelError(ValueError):
    pass


class KernelKind(str, enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    COSINE = "cosine"
    GAUSSIAN = "gaussian"
    EXP_EUCLID = "exp-euclid"
    EXP_MANHATTAN = "exp-manhattan"

    @property
    def learnable(self) -> bool:
        return self in _LEARNABLE


_LEARNABLE = frozenset({KernelKind.GAUSSIAN, KernelKind.EXP_EUCLID, KernelKind.EXP_MANHATTAN})


@dataclass(frozen=True)
class GridShape:
    h: int
    w: int

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ShapeError(f"grid dims must be >= 1, got {self.h}x{self.w}")

    @property
    def size(self) -> int:
        return self.h * self.w

    @property
    def center(self) -> int:
        return (self.h // 2) * self.w + self.w // 2


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind
    sigma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.kind.learnable:
            if self.sigma is None:
                raise KernelError(f"{self.kind.value} kernel requires sigma")
            if not math.isfinite(self.sigma) or self.sigma < SIGMA_FLOOR:
                raise KernelError(
                    f"sigma={self.sigma!r} is below the floor {SIGMA_FLOOR}"
                )
            object.__setattr__(self, "sigma", float(self.sigma))
        elif self.sigma is not None:
            raise KernelError(f"{self.kind.value} kernel has no sigma")

    @property
    def learnable(self) -> bool:
        return self.kind.learnable


@dataclass(frozen=True, eq=False)
class RawKernel:
    shape: GridShape
    g: np.ndarray


@dataclass(frozen=True, eq=False)
class AttentionMatrix:
    a: np.ndarray
    offset: int
    row_sums: np.ndarray


class _EvalCounter:
    """Counts kernel-formula evaluations (one per matrix entry)."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


EVAL_COUNTER = _EvalCounter()


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def pixel_coords(shape: GridShape, i: int) -> tuple[int, int]:
    """Return ``(i_x, i_y)``, i.e. (column, row), of flat pixel index ``i``."""
    if not 0 <= i < shape.size:
        raise IndexError(f"pixel index {i} outside grid {shape.h}x{shape.w}")
    return i % shape.w, i // shape.w


@functools.lru_cache(maxsize=64)
def _offsets(shape: GridShape) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(shape.size)
    ix, iy = idx % shape.w, idx // shape.w
    dx = (ix[:, None] - ix[None, :]).astype(np.float64)
    dy = (iy[:, None] - iy[None, :]).astype(np.float64)
    return _frozen(dx), _frozen(dy)


@functools.lru_cache(maxsize=64)
def kernel_distance(shape: GridShape, kind: KernelKind) -> np.ndarray:
    """The kind's own distance matrix, the grid-only part of each formula.

    linear/cosine: pixel Euclidean distance over ``sqrt(H^2 + W^2)``;
    gaussian: squared axis-normalized distance ``(dx/W)^2 + (dy/H)^2``;
    exp-euclid: its square root; exp-manhattan: ``|dx|/W + |dy|/H``.
    """
    kind = KernelKind(kind)
    dx, dy = _offsets(shape)
    h, w = shape.h, shape.w
    if kind is KernelKind.CONSTANT:
        d = np.zeros_like(dx)
    elif kind in (KernelKind.LINEAR, KernelKind.COSINE):
        d = np.sqrt(dx**2 + dy**2) / math.sqrt(h * h + w * w)
    elif kind is KernelKind.GAUSSIAN:
        d = (dx / w) ** 2 + (dy / h) ** 2
    elif kind is KernelKind.EXP_EUCLID:
        d = np.sqrt((dx / w) ** 2 + (dy / h) ** 2)
    else:
        d = np.abs(dx) / w + np.abs(dy) / h
    return _frozen(d)


def build_raw_kernel(shape: GridShape, spec: KernelSpec) -> RawKernel:
    """Evaluate ``G`` for every pixel pair of ``shape``."""
    kind = spec.kind
    d = kernel_distance(shape, kind)
    if kind is KernelKind.CONSTANT:
        g = np.ones_like(d)
    elif kind is KernelKind.LINEAR:
        g = 1.0 - d
    elif kind is KernelKind.COSINE:
        g = 0.5 * (1.0 + np.cos(math.pi * d))
    else:
        sigma = spec.sigma
        if kind is KernelKind.GAUSSIAN:
            scale = -1.0 / (2.0 * sigma * sigma)
        else:
            scale = -1.0 / sigma
        # one scale multiply per entry; the distance part is precomputed
        add_multiplies(d.size)
        g = np.exp(d * scale)
    EVAL_COUNTER.count += g.size
    return RawKernel(shape, _frozen(g))


def normalize_with_offset(raw: RawKernel, offset: int) -> AttentionMatrix:
    """Row-normalize ``G + offset`` (offset 1 keeps every entry positive)."""
    if offset not in (0, 1):
        raise KernelError(f"offset must be 0 or 1, got {offset!r}")
    shifted = raw.g + offset if offset else raw.g
    sums = shifted.sum(axis=1)
    a = shifted / sums[:, None]
    return AttentionMatrix(_frozen(a), offset, _frozen(sums))


def kernel_sigma_grad(shape: GridShape, spec: KernelSpec, raw: RawKernel | None = None) -> np.ndarray:
    """Elementwise ``dG/dsigma`` for the radius kinds."""
    if not spec.learnable:
        raise KernelError(f"kernel has no sigma ({spec.kind.value})")
    if raw is None:
        raw = build_raw_kernel(shape, spec)
    d = kernel_distance(shape, spec.kind)
    s = spec.sigma
    if spec.kind is KernelKind.GAUSSIAN:
        return raw.g * d / (s * s * s)
    return raw.g * d / (s * s)


def attention_sigma_grad(raw: RawKernel, d_g: np.ndarray, offset: int) -> np.ndarray:
    """Chain ``dG/dsigma`` through the offset-and-normalize step.

    With ``S_i`` the row sum of ``G + offset``:
    ``dA_ij = dG_ij / S_i - A_ij * sum_k dG_ik / S_i``.
    """
    if d_g.shape != raw.g.shape:
        raise ShapeError(
            f"dG shape {d_g.shape} does not match kernel {raw.g.shape}", d_g.shape, raw.g.shape
        )
    att = normalize_with_offset(raw, offset)
    inv = 1.0 / att.row_sums[:, None]
    return d_g * inv - att.a * (d_g.sum(axis=1, keepdims=True) * inv)
