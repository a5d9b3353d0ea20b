"""Float32 NCHW tensor container, layer parameter records, and shape checks.

Everything downstream of this module works on plain numpy arrays; ``Tensor``
exists to pair a value buffer with its gradient buffer (for trainable
parameters and for checked activations). Arrays are kept C-contiguous and
float32 on the main path; the finite-difference oracle runs the same ops in
float64 by passing float64 buffers through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

CONV3X3 = "conv3x3"
CONV1X1 = "conv1x1"
MAXPOOL2X2 = "maxpool2x2"
RELU = "relu"
UPSAMPLE_BILINEAR = "upsample_bilinear"
CONCAT = "concat"
SOFTMAX = "softmax"
GLOBAL_AVG_POOL = "global_avg_pool"

LAYER_KINDS = (
    CONV3X3,
    CONV1X1,
    MAXPOOL2X2,
    RELU,
    UPSAMPLE_BILINEAR,
    CONCAT,
    SOFTMAX,
    GLOBAL_AVG_POOL,
)


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible; the message names the offending dims."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf (training divergence signal)."""


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s) in a buffer of size {arr.size}")
    return arr


def _as_float(arr) -> np.ndarray:
    a = np.ascontiguousarray(arr)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return a


@dataclass
class Tensor:
    """Value buffer plus an optional same-shape gradient buffer.

    ``data`` is row-major float32 (float64 in gradient-check mode). The
    gradient, once allocated, always matches ``data`` in shape and dtype.
    """

    data: np.ndarray
    grad: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        self.data = _as_float(self.data)
        check_finite(self.data, f"Tensor({self.name or 'unnamed'})")
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeMismatchError(
                f"Tensor({self.name}): grad shape {self.grad.shape} != data shape {self.data.shape}"
            )

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def add_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeMismatchError(
                f"Tensor({self.name}): incoming grad shape {g.shape} != data shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g


@dataclass
class LayerParams:
    """One layer's kind tag, trainable buffers, and kind-specific scalars.

    Conv weights are shaped (C_out, C_in, k, k) with a length-C_out bias.
    ``hyper`` carries scalars such as the upsampling target size.
    """

    kind: str
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.kind in (CONV3X3, CONV1X1):
            if self.weight is None:
                raise ValueError(f"{self.kind} requires a weight tensor")
            w = self.weight.data
            k = 3 if self.kind == CONV3X3 else 1
            if w.ndim != 4 or w.shape[2] != k or w.shape[3] != k:
                raise ShapeMismatchError(
                    f"{self.kind}: weight shape {w.shape} is not (C_out, C_in, {k}, {k})"
                )
            if self.bias is not None and self.bias.data.shape != (w.shape[0],):
                raise ShapeMismatchError(
                    f"{self.kind}: bias length {self.bias.data.shape} != C_out {w.shape[0]}"
                )

    @property
    def out_channels(self) -> int:
        if self.weight is None:
            raise ValueError(f"{self.kind} has no weights")
        return self.weight.data.shape[0]

    @property
    def in_channels(self) -> int:
        if self.weight is None:
            raise ValueError(f"{self.kind} has no weights")
        return self.weight.data.shape[1]


def he_normal_conv(c_out: int, c_in: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """He-normal init for a ReLU conv: std = sqrt(2 / (C_in * k * k))."""
    std = np.sqrt(2.0 / (c_in * k * k))
    return (rng.standard_normal((c_out, c_in, k, k)) * std).astype(np.float32)


def conv_layer(
    c_in: int, c_out: int, k: int, rng: np.random.Generator, name: str = ""
) -> LayerParams:
    """A freshly initialized conv3x3/conv1x1 layer with zero bias."""
    kind = CONV3X3 if k == 3 else CONV1X1
    w = Tensor(he_normal_conv(c_out, c_in, k, rng), name=f"{name}.w")
    b = Tensor(np.zeros(c_out, dtype=np.float32), name=f"{name}.b")
    return LayerParams(kind=kind, weight=w, bias=b)
