"""Compact encoder-decoder segmentation network.

Three encoder stages (two 3x3 convs + relu each, 2x2 max-pool between
stages), a mirrored decoder with nearest-neighbor upsampling and skip
concatenation, a feature head producing the dense embedding consumed by
the prototype machinery, and a 1x1 classification head yielding two-class
logits. Forward returns the feature map, the logits, and their per-pixel
softmax in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    channel_softmax,
    concat_channels,
    conv2d,
    maxpool2x2,
    relu,
    upsample_nearest2x,
)


@dataclass(frozen=True)
class NetDescriptor:
    """Channel widths of the three encoder stages plus the feature-head width."""

    widths: tuple[int, int, int] = (16, 32, 64)
    feature_dim: int = 32

    def __post_init__(self):
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ValueError(f"descriptor widths must be three positive ints, got {self.widths}")
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be >= 2, got {self.feature_dim}")


def _layer_shapes(desc: NetDescriptor) -> list[tuple[str, tuple[int, int, int, int]]]:
    w1, w2, w3 = desc.widths
    d = desc.feature_dim
    return [
        ("enc1a", (w1, 1, 3, 3)),
        ("enc1b", (w1, w1, 3, 3)),
        ("enc2a", (w2, w1, 3, 3)),
        ("enc2b", (w2, w2, 3, 3)),
        ("enc3a", (w3, w2, 3, 3)),
        ("enc3b", (w3, w3, 3, 3)),
        ("dec2a", (w2, w3 + w2, 3, 3)),
        ("dec2b", (w2, w2, 3, 3)),
        ("dec1a", (w1, w2 + w1, 3, 3)),
        ("dec1b", (w1, w1, 3, 3)),
        ("feat", (d, w1, 3, 3)),
        ("head", (2, d, 1, 1)),
    ]


def param_count(desc: NetDescriptor) -> int:
    return sum(math.prod(shape) + shape[0] for _, shape in _layer_shapes(desc))


class SegNetParams:
    """Ordered named parameter tensors for every conv layer of the network."""

    def __init__(self, descriptor: NetDescriptor, tensors: dict[str, Tensor]):
        self.descriptor = descriptor
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()


def init_params(descriptor: NetDescriptor, seed: int) -> SegNetParams:
    """Fan-in scaled uniform kernels (within +-sqrt(6/fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in _layer_shapes(descriptor):
        fan_in = shape[1] * shape[2] * shape[3]
        bound = math.sqrt(6.0 / fan_in)
        kernel = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        tensors[f"{name}.kernel"] = Tensor(kernel, requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros(shape[0], dtype=np.float32), requires_grad=True)
    return SegNetParams(descriptor, tensors)


@dataclass
class NetOutput:
    feature: Tensor  # D x H x W embedding from the feature head
    logits: Tensor  # 2 x H x W
    probs: Tensor = field(default=None)  # channel softmax of logits


def _conv_relu(params: SegNetParams, name: str, x: Tensor) -> Tensor:
    return relu(conv2d(x, params[f"{name}.kernel"], params[f"{name}.bias"], stride=1, padding=1))


def forward(params: SegNetParams, image: Tensor) -> NetOutput:
    """Run the network on a 1xHxW image; H and W must be divisible by 4."""
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.data.ndim != 3 or image.data.shape[0] != 1:
        raise ShapeError(f"forward expects a 1xHxW image, got shape {image.shape}")
    _, h, w = image.data.shape
    if h % 4 or w % 4:
        raise ShapeError(f"spatial size {h}x{w} must be divisible by 4 (two 2x downsamplings)")

    e1 = _conv_relu(params, "enc1b", _conv_relu(params, "enc1a", image))
    e2 = _conv_relu(params, "enc2b", _conv_relu(params, "enc2a", maxpool2x2(e1)))
    e3 = _conv_relu(params, "enc3b", _conv_relu(params, "enc3a", maxpool2x2(e2)))

    d2 = concat_channels([upsample_nearest2x(e3), e2])
    d2 = _conv_relu(params, "dec2b", _conv_relu(params, "dec2a", d2))
    d1 = concat_channels([upsample_nearest2x(d2), e1])
    d1 = _conv_relu(params, "dec1b", _conv_relu(params, "dec1a", d1))

    feature = _conv_relu(params, "feat", d1)
    logits = conv2d(feature, params["head.kernel"], params["head.bias"], stride=1, padding=0)
    return NetOutput(feature=feature, logits=logits, probs=channel_softmax(logits))
