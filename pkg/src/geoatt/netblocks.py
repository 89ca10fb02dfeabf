"""Desk-scale network pieces built around the explicit-attention layer.

Feature maps are channel-first, ``(C, H, W)``, with an optional leading batch
axis. Convolution is cross-correlation (no filter flip) with zero padding;
3x3 kernels use same-padding so the output is ``ceil(in / stride)``.

The augmented block splits its output channels between an ordinary 3x3
convolution and an explicit-attention branch and concatenates the two along
the channel axis. For stride 2 the attention output goes through a 3x3,
stride-2 average pool (padded zeros counted in the divisor) so the spatial
sizes line up.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .expatt import ExpAttLayer, expatt_backward, expatt_forward
from .grid_kernels import SIGMA_FLOOR, GridShape, KernelKind
from .numcore import NonFiniteError, ShapeError, as_tensor, make_rng

__all__ = [
    "Conv2dLayer",
    "AugmentedConvBlock",
    "ToyNetConfig",
    "TrainReport",
    "TrainingDiverged",
    "split_channels",
    "conv2d_forward",
    "conv2d_backward",
    "conv2d_loops",
    "avgpool3x3s2",
    "avgpool3x3s2_backward",
    "augmented_forward",
    "augmented_backward",
    "make_toy_dataset",
    "ToyNet",
    "train_toy",
]


def split_channels(c_out: int, ratio: float, n_heads: int) -> tuple[int, int]:
    """Split ``c_out`` into ``(c_conv, c_expatt)``.

    ``c_expatt`` is the multiple of ``n_heads`` nearest to ``ratio * c_out``
    (ties go up), never less than ``n_heads``.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if n_heads < 1 or c_out <= n_heads:
        raise ValueError(f"c_out={c_out} must exceed n_heads={n_heads}")
    target = ratio * c_out
    lower = math.floor(target / n_heads) * n_heads
    upper = lower + n_heads
    c_expatt = upper if (upper - target) <= (target - lower) else lower
    c_expatt = min(max(c_expatt, n_heads), (c_out - 1) // n_heads * n_heads)
    return c_out - c_expatt, c_expatt


# ---------------------------------------------------------------------------
# convolution

@dataclass(eq=False)
class Conv2dLayer:
    weight: np.ndarray  # (c_out, c_in, k, k)
    bias: np.ndarray  # (c_out,)
    stride: int = 1

    def __post_init__(self):
        self.weight = as_tensor(self.weight, name="weight")
        self.bias = as_tensor(self.bias, name="bias")
        c_out, _, k, k2 = self.weight.shape
        if k != k2 or k not in (1, 3):
            raise ShapeError(f"kernel must be 1x1 or 3x3, got {k}x{k2}")
        if self.bias.shape != (c_out,):
            raise ShapeError(f"bias must have shape ({c_out},), got {self.bias.shape}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @classmethod
    def create(cls, c_in: int, c_out: int, kernel_size: int = 3, stride: int = 1,
               rng: np.random.Generator | None = None) -> "Conv2dLayer":
        rng = make_rng(0) if rng is None else rng
        fan_in = c_in * kernel_size * kernel_size
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, kernel_size, kernel_size))
        return cls(w, np.zeros(c_out), stride)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def pad(self) -> int:
        return self.kernel_size // 2

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return -(-h // self.stride), -(-w // self.stride)

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, widths)


def _window(xp: np.ndarray, di: int, dj: int, ho: int, wo: int, s: int):
    return (..., slice(di, di + s * (ho - 1) + 1, s), slice(dj, dj + s * (wo - 1) + 1, s))


def _im2col(xp: np.ndarray, k: int, ho: int, wo: int, s: int) -> np.ndarray:
    # (..., C, Hp, Wp) -> (..., C*k*k, ho*wo), rows ordered (c, di, dj)
    cols = np.stack(
        [xp[_window(xp, di, dj, ho, wo, s)] for di in range(k) for dj in range(k)], axis=-3
    )
    return cols.reshape(xp.shape[:-3] + (xp.shape[-3] * k * k, ho * wo))


def conv2d_forward(layer: Conv2dLayer, x) -> tuple[np.ndarray, tuple]:
    x = as_tensor(x, name="x")
    if x.ndim < 3 or x.shape[-3] != layer.c_in:
        raise ShapeError(f"conv input {x.shape} does not have {layer.c_in} channels", x.shape)
    h, w = x.shape[-2:]
    ho, wo = layer.out_hw(h, w)
    xp = _pad_hw(x, layer.pad)
    cols = _im2col(xp, layer.kernel_size, ho, wo, layer.stride)
    out = layer.weight.reshape(layer.c_out, -1) @ cols + layer.bias[:, None]
    return out.reshape(x.shape[:-3] + (layer.c_out, ho, wo)), (cols, xp.shape, x.shape)


def conv2d_backward(layer: Conv2dLayer, cache, dy) -> dict[str, np.ndarray]:
    cols, xp_shape, x_shape = cache
    dy = np.asarray(dy, dtype=np.float64)
    ho, wo = dy.shape[-2:]
    k, s, p = layer.kernel_size, layer.stride, layer.pad
    c_out = layer.c_out
    dy2 = dy.reshape(-1, c_out, ho * wo)
    cols3 = cols.reshape((-1,) + cols.shape[-2:])
    # batch folded into the contraction axis
    dw = np.moveaxis(dy2, 0, 1).reshape(c_out, -1) @ np.moveaxis(cols3, 1, 2).reshape(-1, cols3.shape[1])
    dcols = layer.weight.reshape(c_out, -1).T @ dy2
    dcols = dcols.reshape((-1, layer.c_in, k, k, ho, wo))
    dxp = np.zeros((dcols.shape[0],) + tuple(xp_shape[-3:]))
    for di in range(k):
        for dj in range(k):
            dxp[_window(dxp, di, dj, ho, wo, s)] += dcols[:, :, di, dj]
    h, w = x_shape[-2:]
    dx = dxp[..., p:p + h, p:p + w].reshape(x_shape)
    db = dy2.sum(axis=(0, 2))
    return {"x": np.ascontiguousarray(dx), "weight": dw.reshape(layer.weight.shape), "bias": db}


def conv2d_loops(weight, bias, x, stride: int = 1) -> np.ndarray:
    """Six-loop reference convolution for a single ``(C, H, W)`` input."""
    c_out, c_in, k, _ = weight.shape
    _, h, w = x.shape
    p = k // 2
    ho, wo = -(-h // stride), -(-w // stride)
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = bias[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            r, q = i * stride + di - p, j * stride + dj - p
                            if 0 <= r < h and 0 <= q < w:
                                acc += weight[o, c, di, dj] * x[c, r, q]
                out[o, i, j] = acc
    return out


# ---------------------------------------------------------------------------
# pooling

def avgpool3x3s2(x) -> np.ndarray:
    """3x3 mean pool, stride 2, zero same-padding, divisor always 9."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"pooling needs H, W >= 2, got {h}x{w}")
    ho, wo = -(-h // 2), -(-w // 2)
    xp = _pad_hw(x, 1)
    out = np.zeros(x.shape[:-2] + (ho, wo))
    for di in range(3):
        for dj in range(3):
            out += xp[_window(xp, di, dj, ho, wo, 2)]
    return out / 9.0


def avgpool3x3s2_backward(dy, in_shape: tuple[int, ...]) -> np.ndarray:
    dy = np.asarray(dy, dtype=np.float64)
    h, w = in_shape[-2:]
    ho, wo = dy.shape[-2:]
    dxp = np.zeros(tuple(in_shape[:-2]) + (h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            dxp[_window(dxp, di, dj, ho, wo, 2)] += dy
    return dxp[..., 1:h + 1, 1:w + 1] / 9.0


# ---------------------------------------------------------------------------
# augmented convolution block

@dataclass(eq=False)
class AugmentedConvBlock:
    conv: Conv2dLayer
    attn: ExpAttLayer
    stride: int = 1

    def __post_init__(self):
        if self.conv.c_in != self.attn.c_in:
            raise ShapeError("conv and attention branches must read the same channels")
        if self.conv.stride != self.stride:
            raise ShapeError("conv stride must equal the block stride")
        if self.attn.d_v % self.attn.n_heads:
            raise ShapeError("attention channels must be divisible by the head count")

    @classmethod
    def create(cls, c_in: int, c_out: int, *, ratio: float = 0.1, n_heads: int = 4,
               stride: int = 1, kernel: KernelKind | str = KernelKind.GAUSSIAN,
               sigma: float = 0.75, offset: int = 1, share_across_heads: bool = True,
               rng: np.random.Generator | None = None) -> "AugmentedConvBlock":
        rng = make_rng(0) if rng is None else rng
        c_conv, c_expatt = split_channels(c_out, ratio, n_heads)
        conv = Conv2dLayer.create(c_in, c_conv, 3, stride, rng)
        attn = ExpAttLayer.create(c_in, c_expatt, n_heads, kernel, sigma=sigma, offset=offset,
                                  share_across_heads=share_across_heads, rng=rng)
        return cls(conv, attn, stride)

    @property
    def c_out(self) -> int:
        return self.conv.c_out + self.attn.d_v

    def params(self) -> dict[str, np.ndarray]:
        out = {f"conv.{k}": v for k, v in self.conv.params().items()}
        out.update({f"attn.{k}": v for k, v in self.attn.params().items()})
        return out


def _to_pixels(x: np.ndarray) -> np.ndarray:
    # (..., C, H, W) -> (..., HW, C)
    c, h, w = x.shape[-3:]
    return np.moveaxis(x.reshape(x.shape[:-2] + (h * w,)), -2, -1)


def _to_maps(y: np.ndarray, h: int, w: int) -> np.ndarray:
    # (..., HW, C) -> (..., C, H, W)
    return np.moveaxis(y, -1, -2).reshape(y.shape[:-2] + (y.shape[-1], h, w))


def augmented_forward(block: AugmentedConvBlock, x) -> tuple[np.ndarray, tuple]:
    x = as_tensor(x, name="x")
    h, w = x.shape[-2:]
    shape = GridShape(h, w)
    conv_out, conv_cache = conv2d_forward(block.conv, x)
    att, att_cache = expatt_forward(block.attn, _to_pixels(x), shape)
    att = _to_maps(att, h, w)
    pre_pool = att.shape
    if block.stride == 2:
        att = avgpool3x3s2(att)
    if att.shape[-2:] != conv_out.shape[-2:]:
        raise ShapeError(
            f"branch spatial mismatch: conv {conv_out.shape[-2:]} vs attention {att.shape[-2:]}"
        )
    out = np.concatenate([conv_out, att], axis=-3)
    return out, (conv_cache, att_cache, pre_pool, (h, w))


def augmented_backward(block: AugmentedConvBlock, cache, dy) -> dict[str, np.ndarray]:
    conv_cache, att_cache, pre_pool, (h, w) = cache
    dy = np.asarray(dy, dtype=np.float64)
    c_conv = block.conv.c_out
    d_conv, d_att = dy[..., :c_conv, :, :], dy[..., c_conv:, :, :]
    if block.stride == 2:
        d_att = avgpool3x3s2_backward(d_att, pre_pool)
    gc = conv2d_backward(block.conv, conv_cache, d_conv)
    ga = expatt_backward(block.attn, att_cache, _to_pixels(d_att))
    grads = {"x": gc["x"] + _to_maps(ga["x"], h, w)}
    grads.update({f"conv.{k}": v for k, v in gc.items() if k != "x"})
    grads.update({f"attn.{k}": v for k, v in ga.items() if k != "x"})
    return grads


# ---------------------------------------------------------------------------
# toy task

IMAGE_SIZE = 16
BLOB_STD = 1.5
# (row_lo, row_hi, col_lo, col_hi) of the blob-center box per class
REGIONS = (
    (6.0, 9.0, 6.0, 9.0),
    (1.0, 4.0, 1.0, 4.0),
    (11.0, 14.0, 11.0, 14.0),
)


def make_toy_dataset(seed: int, n: int, noise: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """``n`` single-channel 16x16 images with one Gaussian blob each.

    Labels cycle 0, 1, 2 so classes stay balanced; the blob center is drawn
    uniformly inside the label's region. Returns ``(images (n,1,16,16), labels)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    labels = rng.permutation(np.arange(n) % len(REGIONS))
    grid = np.arange(IMAGE_SIZE, dtype=np.float64)
    images = np.empty((n, 1, IMAGE_SIZE, IMAGE_SIZE))
    for k, lab in enumerate(labels):
        r0, r1, c0, c1 = REGIONS[lab]
        cy, cx = rng.uniform(r0, r1), rng.uniform(c0, c1)
        blob = np.exp(-((grid[:, None] - cy) ** 2 + (grid[None, :] - cx) ** 2) / (2 * BLOB_STD**2))
        images[k, 0] = blob + noise * rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE))
    return images, labels


@dataclass
class ToyNetConfig:
    seed: int = 7
    steps: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    n_train: int = 384
    sigma0: float = 0.75
    kernel: str = "gaussian"
    offset: int = 1
    stem_channels: int = 16
    block_channels: int = 32
    n_heads: int = 4
    ratio: float = 0.1
    block_stride: int = 2
    n_classes: int = 3

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.n_train < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and n_train >= 1 are required")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be >= 0 and momentum in [0, 1)")
        split_channels(self.block_channels, self.ratio, self.n_heads)


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    sigma: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    digest: str = ""

    def to_json(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy, "sigma": self.sigma,
                "config": self.config, "digest": self.digest}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step


class ToyNet:
    """stem conv -> ReLU -> augmented block -> ReLU -> global mean -> linear."""

    def __init__(self, cfg: ToyNetConfig, rng: np.random.Generator):
        self.stem = Conv2dLayer.create(1, cfg.stem_channels, 3, 1, rng)
        self.block = AugmentedConvBlock.create(
            cfg.stem_channels, cfg.block_channels, ratio=cfg.ratio, n_heads=cfg.n_heads,
            stride=cfg.block_stride, kernel=cfg.kernel, sigma=cfg.sigma0, offset=cfg.offset,
            rng=rng,
        )
        bound = math.sqrt(6.0 / (cfg.block_channels + cfg.n_classes))
        self.fc_w = rng.uniform(-bound, bound, size=(cfg.block_channels, cfg.n_classes))
        self.fc_b = np.zeros(cfg.n_classes)

    def params(self) -> dict[str, np.ndarray]:
        out = {f"stem.{k}": v for k, v in self.stem.params().items()}
        out.update({f"block.{k}": v for k, v in self.block.params().items()})
        out["fc.w"] = self.fc_w
        out["fc.b"] = self.fc_b
        return out

    def logits(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        h1, c1 = conv2d_forward(self.stem, x)
        a1 = np.maximum(h1, 0.0)
        h2, c2 = augmented_forward(self.block, a1)
        a2 = np.maximum(h2, 0.0)
        pooled = a2.mean(axis=(-2, -1))
        return pooled @ self.fc_w + self.fc_b, (c1, h1, c2, h2, pooled)

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        z, (c1, h1, c2, h2, pooled) = self.logits(x)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = x.shape[0]
        loss = -float(np.mean(logp[np.arange(n), y]))

        dz = np.exp(logp)
        dz[np.arange(n), y] -= 1.0
        dz /= n
        grads = {"fc.w": pooled.T @ dz, "fc.b": dz.sum(axis=0)}
        dpooled = dz @ self.fc_w.T
        hw = h2.shape[-2] * h2.shape[-1]
        dh2 = np.broadcast_to(dpooled[:, :, None, None] / hw, h2.shape) * (h2 > 0)
        gb = augmented_backward(self.block, c2, dh2)
        dh1 = gb.pop("x") * (h1 > 0)
        gs = conv2d_backward(self.stem, c1, dh1)
        grads.update({f"block.{k}": v for k, v in gb.items()})
        grads.update({f"stem.{k}": v for k, v in gs.items() if k != "x"})
        return loss, grads

    def accuracy(self, x: np.ndarray, y: np.ndarray, batch: int = 128) -> float:
        hits = 0
        for s in range(0, x.shape[0], batch):
            z, _ = self.logits(x[s:s + batch])
            hits += int(np.sum(np.argmax(z, axis=1) == y[s:s + batch]))
        return hits / x.shape[0]

    @property
    def sigma(self) -> float | None:
        s = self.block.attn.sigma
        return float(s[0]) if s.size else None


def _digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


def train_toy(cfg: ToyNetConfig | None = None) -> TrainReport:
    """Train :class:`ToyNet` with SGD + momentum and record the radius path.

    Accuracy is measured on the full training set after every epoch and once
    more after the final step.
    """
    cfg = ToyNetConfig() if cfg is None else cfg
    rng = make_rng(cfg.seed)
    images, labels = make_toy_dataset(cfg.seed, cfg.n_train)
    net = ToyNet(cfg, rng)
    params = net.params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    report = TrainReport(config=asdict(cfg))

    order = rng.permutation(cfg.n_train)
    cursor = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > cfg.n_train:
            report.accuracy.append(net.accuracy(images, labels))
            order = rng.permutation(cfg.n_train)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        loss, grads = net.loss_and_grads(images[idx], labels[idx])
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        for name, p in params.items():
            v = velocity[name]
            v *= cfg.momentum
            v += grads[name]
            p -= cfg.lr * v
        sig = net.block.attn.sigma
        np.maximum(sig, SIGMA_FLOOR, out=sig)
        report.loss.append(loss)
        if net.sigma is not None:
            report.sigma.append(net.sigma)
    report.accuracy.append(net.accuracy(images, labels))
    report.digest = _digest(params)
    return report
