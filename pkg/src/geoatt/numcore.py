"""Dense float64 numeric substrate shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
(C) order. This module adds the few things numpy does not give us directly:
shape-checked matmul with structured errors, a portable seeded generator,
a multiply counter used by the cost-model instrumentation, and a
central-difference gradient checker.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "make_rng",
    "matmul",
    "init_uniform",
    "finite_diff_grad",
    "rel_error",
    "MulCounter",
    "count_multiplies",
    "record_multiplies",
    "add_multiplies",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, message: str, *shapes: tuple[int, ...]):
        super().__init__(message)
        self.shapes = shapes


class NonFiniteError(ValueError):
    """Raised when a NaN or Inf shows up where a finite value is required."""


def as_tensor(x, *, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    # Philox is counter-based and its output stream is specified
    # independently of platform, unlike the legacy global state.
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


# ---------------------------------------------------------------------------
# multiply instrumentation

class MulCounter:
    """Tally of scalar multiplies, keyed by a free-form tag."""

    def __init__(self) -> None:
        self.by_tag: Counter[str] = Counter()
        self._tags: list[str] = ["untagged"]

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())

    def add(self, n: int) -> None:
        self.by_tag[self._tags[-1]] += int(n)

    @contextlib.contextmanager
    def tag(self, name: str) -> Iterator[None]:
        self._tags.append(name)
        try:
            yield
        finally:
            self._tags.pop()


_active_counter: MulCounter | None = None


@contextlib.contextmanager
def count_multiplies() -> Iterator[MulCounter]:
    """Activate a fresh :class:`MulCounter` for the duration of the block."""
    global _active_counter
    if _active_counter is not None:
        raise RuntimeError("a multiply counter is already active")
    counter = MulCounter()
    _active_counter = counter
    try:
        yield counter
    finally:
        _active_counter = None


@contextlib.contextmanager
def record_multiplies(tag: str) -> Iterator[None]:
    """Attribute multiplies inside the block to ``tag`` (no-op when inactive)."""
    if _active_counter is None:
        yield
        return
    with _active_counter.tag(tag):
        yield


def add_multiplies(n: int) -> None:
    if _active_counter is not None:
        _active_counter.add(n)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit error on inner-dimension mismatch.

    Leading batch dimensions broadcast as in ``numpy.matmul``. Every scalar
    multiply is reported to the active :class:`MulCounter`, if any.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul shape mismatch: {a.shape} @ {b.shape}", a.shape, b.shape
        )
    out = np.matmul(a, b)
    if _active_counter is not None:
        _active_counter.add(out.size * a.shape[-1])
    return out


def init_uniform(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot-style uniform init on ``[-b, b]`` with ``b = sqrt(6/(rows+cols))``."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"init_uniform needs rows, cols >= 1, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at flat vector ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + eps
        fp = float(f(x.copy()))
        x[k] = orig - eps
        fm = float(f(x.copy()))
        x[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is non-finite when perturbing coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(a, b) -> float:
    """``max|a-b| / max(max|a|, max|b|, 1e-12)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"rel_error shape mismatch: {a.shape} vs {b.shape}", a.shape, b.shape)
    if a.size == 0:
        return 0.0
    num = np.max(np.abs(a - b))
    den = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(num / den)
