"""Minimal deterministic tensor engine: fixed layer set with exact backward
passes, momentum SGD, finite-difference checking, and binary serialization."""

from .functional import (
    channel_concat,
    channel_concat_backward,
    conv_backward,
    conv_forward,
    cross_entropy,
    global_avg_pool,
    global_avg_pool_backward,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
    upsample_bilinear,
    upsample_bilinear_backward,
)
from .gradcheck import numerical_gradient, relative_error
from .optim import SgdState, sgd_step
from .serial import (
    MAGIC_NETWORK,
    MAGIC_SVM,
    ContainerError,
    load_records,
    save_records,
)
from .tensor import (
    LAYER_KINDS,
    LayerParams,
    NonFiniteError,
    ShapeMismatchError,
    Tensor,
    check_finite,
    conv_layer,
    he_normal_conv,
)

__all__ = [
    "Tensor",
    "LayerParams",
    "LAYER_KINDS",
    "ShapeMismatchError",
    "NonFiniteError",
    "check_finite",
    "conv_layer",
    "he_normal_conv",
    "conv_forward",
    "conv_backward",
    "maxpool2x2",
    "maxpool2x2_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "relu",
    "relu_backward",
    "softmax",
    "softmax_backward",
    "upsample_bilinear",
    "upsample_bilinear_backward",
    "channel_concat",
    "channel_concat_backward",
    "cross_entropy",
    "SgdState",
    "sgd_step",
    "numerical_gradient",
    "relative_error",
    "MAGIC_NETWORK",
    "MAGIC_SVM",
    "ContainerError",
    "save_records",
    "load_records",
]
