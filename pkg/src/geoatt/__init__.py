"""Self-attention with explicitly modeled, content-independent attention maps."""

from .costmodel import CostReport, LayerConfig, cost_expatt, cost_kq, cost_pos_encoding, measure_counts
from .expatt import (
    ExpAttLayer,
    KqAttnLayer,
    brute_force_pixel_attention,
    concat_interplay_forward,
    expatt_backward,
    expatt_forward,
    kq_attention_backward,
    kq_attention_forward,
)
from .grid_kernels import (
    SIGMA_FLOOR,
    AttentionMatrix,
    GridShape,
    KernelKind,
    KernelSpec,
    RawKernel,
    attention_sigma_grad,
    build_raw_kernel,
    kernel_sigma_grad,
    normalize_with_offset,
    pixel_coords,
)

__version__ = "0.1.0"
