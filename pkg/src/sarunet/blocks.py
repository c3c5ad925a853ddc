"""Composite layers: depthwise-separable convolution stages, the residual
DSC block, its plain (shortcut-free) ablation, and CBAM attention.

Blocks hold parameters only; ``forward`` is re-entrant given a per-call tape.
Every block enumerates its trainables as stable hierarchical names
(``dsc1.depthwise``, ``shortcut.weight``, ...) consumed by checkpoints and
the optimizer. Weight init is Kaiming-uniform (fan-in) for conv/perceptron
weights, zeros for biases and bn beta, ones for bn gamma, drawn from the
generator in construction order.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor4, parameter

__all__ = [
    "BatchNorm2d", "Conv2dLayer", "DscLayer", "ResidualDscBlock",
    "DoubleDscBlock", "Cbam", "param_count",
]

NamedParams = Iterator[tuple[str, Tensor4]]
NamedBuffers = Iterator[tuple[str, np.ndarray]]



def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name

def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                     fan_in: int, dtype) -> Tensor4:
    bound = math.sqrt(6.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, shape), dtype=dtype)


class BatchNorm2d:
    """Per-channel batch norm: trainable gamma/beta plus running buffers."""

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = parameter(np.ones((1, channels, 1, 1)), dtype=dtype)
        self.beta = parameter(np.zeros((1, channels, 1, 1)), dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor4, train: bool) -> Tensor4:
        return ops.batch_norm(x, self.gamma, self.beta,
                              self.running_mean, self.running_var,
                              train=train, eps=self.eps, momentum=self.momentum)

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield _join(prefix, "gamma"), self.gamma
        yield _join(prefix, "beta"), self.beta

    def named_buffers(self, prefix: str = "") -> NamedBuffers:
        yield _join(prefix, "running_mean"), self.running_mean
        yield _join(prefix, "running_var"), self.running_var


class Conv2dLayer:
    """Plain convolution holder (dense or grouped), optional bias."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True, groups: int = 1, padding: int = 0):
        fan_in = (cin // groups) * kernel * kernel
        self.weight = _kaiming_uniform(rng, (cout, cin // groups, kernel, kernel),
                                       fan_in, dtype)
        self.bias = parameter(np.zeros((1, cout, 1, 1)), dtype=dtype) if bias else None
        self.groups = groups
        self.padding = padding

    def forward(self, x: Tensor4) -> Tensor4:
        return ops.conv2d(x, self.weight, self.bias,
                          padding=self.padding, groups=self.groups)

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield _join(prefix, "weight"), self.weight
        if self.bias is not None:
            yield _join(prefix, "bias"), self.bias


class DscLayer:
    """Depthwise 3x3 (pad 1) then pointwise 1x1 convolution, spatial-size
    preserving. Bias only on the pointwise stage."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.cin = cin
        self.cout = cout
        self.depthwise = _kaiming_uniform(rng, (cin, 1, 3, 3), 9, dtype)
        self.pointwise = _kaiming_uniform(rng, (cout, cin, 1, 1), cin, dtype)
        self.pointwise_bias = parameter(np.zeros((1, cout, 1, 1)), dtype=dtype)

    def forward(self, x: Tensor4) -> Tensor4:
        if x.shape[1] != self.cin:
            raise DimensionError(f"DscLayer expects {self.cin} channels, got {x.shape[1]}")
        mid = ops.conv2d(x, self.depthwise, padding=1, groups=self.cin)
        return ops.conv2d(mid, self.pointwise, self.pointwise_bias)

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield _join(prefix, "depthwise"), self.depthwise
        yield _join(prefix, "pointwise"), self.pointwise
        yield _join(prefix, "pointwise_bias"), self.pointwise_bias


class _DscStack:
    """Shared body of the residual and plain blocks: DSC+BN+ReLU twice."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.dsc1 = DscLayer(cin, cout, rng, dtype)
        self.bn1 = BatchNorm2d(cout, dtype)
        self.dsc2 = DscLayer(cout, cout, rng, dtype)
        self.bn2 = BatchNorm2d(cout, dtype)

    def forward(self, x: Tensor4, train: bool) -> Tensor4:
        h = ops.relu(self.bn1.forward(self.dsc1.forward(x), train))
        return ops.relu(self.bn2.forward(self.dsc2.forward(h), train))

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield from self.dsc1.named_parameters(_join(prefix, "dsc1"))
        yield from self.bn1.named_parameters(_join(prefix, "bn1"))
        yield from self.dsc2.named_parameters(_join(prefix, "dsc2"))
        yield from self.bn2.named_parameters(_join(prefix, "bn2"))

    def named_buffers(self, prefix: str = "") -> NamedBuffers:
        yield from self.bn1.named_buffers(_join(prefix, "bn1"))
        yield from self.bn2.named_buffers(_join(prefix, "bn2"))


class ResidualDscBlock:
    """Two DSC+BN+ReLU stages summed with a parallel 1x1-conv shortcut.

    The sum itself is not re-activated; the shortcut carries a bias and no
    batch norm (``shortcut_bn`` flips that on for the ablation flag).
    """

    has_shortcut = True

    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 dtype=np.float32, shortcut_bn: bool = False):
        self.cin = cin
        self.cout = cout
        self.stack = _DscStack(cin, cout, rng, dtype)
        self.shortcut = Conv2dLayer(cin, cout, 1, rng, dtype, bias=True)
        self.shortcut_norm: Optional[BatchNorm2d] = BatchNorm2d(cout, dtype) if shortcut_bn else None

    def forward(self, x: Tensor4, train: bool, tap=None, prefix: str = "") -> Tensor4:
        dsc_out = self.stack.forward(x, train)
        short_out = self.shortcut.forward(x)
        if self.shortcut_norm is not None:
            short_out = self.shortcut_norm.forward(short_out, train)
        if tap is not None:
            dsc_out = tap.put(_join(prefix, "dsc_path"), dsc_out)
            short_out = tap.put(_join(prefix, "shortcut"), short_out)
        return ops.add(dsc_out, short_out)

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield from self.stack.named_parameters(prefix)
        yield from self.shortcut.named_parameters(_join(prefix, "shortcut"))
        if self.shortcut_norm is not None:
            yield from self.shortcut_norm.named_parameters(_join(prefix, "shortcut_bn"))

    def named_buffers(self, prefix: str = "") -> NamedBuffers:
        yield from self.stack.named_buffers(prefix)
        if self.shortcut_norm is not None:
            yield from self.shortcut_norm.named_buffers(_join(prefix, "shortcut_bn"))


class DoubleDscBlock:
    """Shortcut-free double DSC stage (the smaat-config ablation block)."""

    has_shortcut = False

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.cin = cin
        self.cout = cout
        self.stack = _DscStack(cin, cout, rng, dtype)

    def forward(self, x: Tensor4, train: bool, tap=None, prefix: str = "") -> Tensor4:
        return self.stack.forward(x, train)

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield from self.stack.named_parameters(prefix)

    def named_buffers(self, prefix: str = "") -> NamedBuffers:
        yield from self.stack.named_buffers(prefix)


class Cbam:
    """Channel attention (shared bias-free two-layer perceptron over avg/max
    spatial descriptors, summed, sigmoid) followed by spatial attention (7x7
    bias-free conv over the stacked channel-avg/channel-max map, sigmoid).
    Channel gating precedes spatial gating; output shape equals input shape.
    """

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator,
                 dtype=np.float32, spatial_kernel: int = 7):
        if channels % reduction != 0:
            raise ConfigurationError(
                f"CBAM reduction {reduction} must divide channel count {channels}")
        if spatial_kernel % 2 == 0:
            raise ConfigurationError("CBAM spatial kernel must be odd")
        hidden = channels // reduction
        self.channels = channels
        self.reduction = reduction
        self.mlp_w1 = _kaiming_uniform(rng, (hidden, channels, 1, 1), channels, dtype)
        self.mlp_w2 = _kaiming_uniform(rng, (channels, hidden, 1, 1), hidden, dtype)
        self.spatial = Conv2dLayer(2, 1, spatial_kernel, rng, dtype, bias=False,
                                   padding=spatial_kernel // 2)

    def _mlp(self, descriptor: Tensor4) -> Tensor4:
        h = ops.relu(ops.conv2d(descriptor, self.mlp_w1))
        return ops.conv2d(h, self.mlp_w2)

    def channel_attention(self, x: Tensor4) -> Tensor4:
        avg = ops.global_pool(x, "avg", "spatial")
        mx = ops.global_pool(x, "max", "spatial")
        return ops.sigmoid(ops.add(self._mlp(avg), self._mlp(mx)))

    def spatial_attention(self, x: Tensor4) -> Tensor4:
        avg = ops.global_pool(x, "avg", "channel")
        mx = ops.global_pool(x, "max", "channel")
        return ops.sigmoid(self.spatial.forward(ops.concat_channels(avg, mx)))

    def forward(self, x: Tensor4, train: bool = False) -> Tensor4:
        gated = ops.mul_broadcast(x, self.channel_attention(x))
        return ops.mul_broadcast(gated, self.spatial_attention(gated))

    def named_parameters(self, prefix: str = "") -> NamedParams:
        yield _join(prefix, "mlp_w1"), self.mlp_w1
        yield _join(prefix, "mlp_w2"), self.mlp_w2
        yield from self.spatial.named_parameters(_join(prefix, "spatial"))

    def named_buffers(self, prefix: str = "") -> NamedBuffers:
        return iter(())


def param_count(obj) -> int:
    """Exact number of trainable scalars; running stats are excluded."""
    return sum(t.data.size for _, t in obj.named_parameters())
