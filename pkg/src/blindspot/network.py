"""Blind-spot network: builder, forward pass, and structural checks.

The forward stream is a stack of conventional same-padded convolutions
with residual skips around every `residual_period` layers. Each stream
stage (including the raw input) feeds a center-masked dilated branch
convolution whose dilation is one plus the stream's receptive-field
radius at that stage, which keeps the center pixel out of every
computational path. Branch outputs are concatenated and reduced by a
stack of 1x1 convolutions to per-pixel Gaussian parameters.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, ParameterError

# cov params per color count: 1 -> log-variance, 3 -> lower-triangular factor
COV_CHANNELS = {1: 1, 3: 6}


def rf_half(depth, kernel_size):
    """Receptive-field radius of the forward stream after `depth` convolutions."""
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ParameterError(f"kernel size must be odd and positive, got {kernel_size}")
    if depth < 0:
        raise ParameterError(f"depth must be non-negative, got {depth}")
    return depth * (kernel_size - 1) // 2


def branch_dilation(depth, kernel_size):
    """Dilation of the branch tapping the stream after `depth` convolutions."""
    return 1 + rf_half(depth, kernel_size)


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 10
    kernel_size: int = 3
    forward_channels: int = 64
    branch_channels: int = 32
    head_widths: tuple = (96, 96)
    channels: int = 1
    residual_period: int = 2

    def __post_init__(self):
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.forward_channels < 1:
            raise ConfigError(f"forward_channels must be >= 1, got {self.forward_channels}")
        if self.branch_channels < 1:
            raise ConfigError(f"branch_channels must be >= 1, got {self.branch_channels}")
        if any(w < 1 for w in self.head_widths):
            raise ConfigError(f"head_widths must all be >= 1, got {self.head_widths}")
        if self.channels not in COV_CHANNELS:
            raise ConfigError(f"channels must be 1 (gray) or 3 (color), got {self.channels}")
        if self.residual_period < 0:
            raise ConfigError(f"residual_period must be >= 0, got {self.residual_period}")

    @property
    def cov_channels(self):
        return COV_CHANNELS[self.channels]

    @property
    def out_channels(self):
        return self.channels + self.cov_channels

    def branch_dilations(self):
        return [branch_dilation(i, self.kernel_size) for i in range(self.depth + 1)]

    def receptive_field_side(self):
        return 2 * (rf_half(self.depth, self.kernel_size)
                    + branch_dilation(self.depth, self.kernel_size)) + 1


@dataclass(frozen=True)
class ReceptiveFieldInfo:
    radii: tuple      # stream radius after 0..D convolutions
    side: int         # total network receptive-field side length


def receptive_field_info(config):
    radii = tuple(rf_half(i, config.kernel_size) for i in range(config.depth + 1))
    return ReceptiveFieldInfo(radii=radii, side=config.receptive_field_side())


@dataclass
class LayerSpec:
    kind: str               # forward_conv | branch_conv | head_conv
    kernel_size: int
    dilation: int
    in_channels: int
    out_channels: int
    blind_spot: bool


@dataclass
class Layer:
    spec: LayerSpec
    weight: T.Tensor
    bias: T.Tensor

    def mask(self):
        if not self.spec.blind_spot:
            return None
        return T.blind_spot_mask(self.spec.kernel_size, self.spec.kernel_size)

    def apply(self, x):
        return T.conv2d(x, self.weight, self.bias,
                        dilation=self.spec.dilation, mask=self.mask())


@dataclass
class GaussianPredictionMap:
    """Per-pixel Gaussian parameters: mean plus raw covariance channels."""
    mean: T.Tensor
    cov_params: T.Tensor


@dataclass
class Network:
    config: NetworkConfig
    stream: list = field(default_factory=list)
    branches: list = field(default_factory=list)
    head: list = field(default_factory=list)

    def layers(self):
        names = [f"stream{i + 1}" for i in range(len(self.stream))]
        names += [f"branch{i}" for i in range(len(self.branches))]
        names += [f"head{i + 1}" for i in range(len(self.head))]
        return list(zip(names, self.stream + self.branches + self.head))

    def parameters(self):
        """Trainable tensors keyed by canonical name, in serialization order."""
        params = {}
        for name, layer in self.layers():
            params[f"{name}.weight"] = layer.weight
            params[f"{name}.bias"] = layer.bias
        return params


def _init_conv(spec, rng):
    fan_in = spec.in_channels * spec.kernel_size * spec.kernel_size
    limit = np.sqrt(6.0 / fan_in)
    shape = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size)
    weight = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    if spec.blind_spot:
        # The masked tap never contributes and never receives gradient; storing
        # it as zero keeps serialized bytes independent of the draw.
        c = spec.kernel_size // 2
        weight[:, :, c, c] = 0.0
    bias = np.zeros(spec.out_channels, dtype=np.float32)
    return Layer(spec=spec,
                 weight=T.Tensor(weight, requires_grad=True),
                 bias=T.Tensor(bias, requires_grad=True))


def build_network(config, seed=0):
    """Initialize a network with fan-in-scaled uniform weights from `seed`."""
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    net = Network(config=config)

    c_prev = config.channels
    for _ in range(config.depth):
        spec = LayerSpec("forward_conv", k, 1, c_prev, config.forward_channels, False)
        net.stream.append(_init_conv(spec, rng))
        c_prev = config.forward_channels

    for i, dil in enumerate(config.branch_dilations()):
        cin = config.channels if i == 0 else config.forward_channels
        spec = LayerSpec("branch_conv", k, dil, cin, config.branch_channels, True)
        net.branches.append(_init_conv(spec, rng))

    c_prev = config.branch_channels * (config.depth + 1)
    for width in list(config.head_widths) + [config.out_channels]:
        spec = LayerSpec("head_conv", 1, 1, c_prev, width, False)
        net.head.append(_init_conv(spec, rng))
        c_prev = width

    return net


def forward(net, image):
    """Run the network; returns the per-pixel Gaussian prediction map."""
    cfg = net.config
    if image.data.ndim != 4 or image.data.shape[1] != cfg.channels:
        raise DimensionError(
            f"expected input of shape (N, {cfg.channels}, H, W), got {image.data.shape}")

    stream_values = [image]
    period = cfg.residual_period
    for i, layer in enumerate(net.stream, start=1):
        h = T.leaky_activation(layer.apply(stream_values[-1]), 0.1)
        if period and i % period == 0:
            skip = stream_values[i - period]
            if skip.data.shape == h.data.shape:
                h = T.add(h, skip)
        stream_values.append(h)

    taps = [T.leaky_activation(layer.apply(value), 0.1)
            for layer, value in zip(net.branches, stream_values)]
    h = T.concat_channels(taps)

    for layer in net.head[:-1]:
        h = T.leaky_activation(layer.apply(h), 0.1)
    h = net.head[-1].apply(h)

    return GaussianPredictionMap(mean=T.slice_channels(h, 0, cfg.channels),
                                 cov_params=T.slice_channels(h, cfg.channels, cfg.cov_channels))


def _probe_positions(h, w):
    ys, xs = [0, h // 2, h - 1], [0, w // 2, w - 1]
    return [(y, x) for y in ys for x in xs]


@dataclass
class BlindSpotReport:
    passed: bool
    failures: list  # (y, x, gradient magnitude)

    def __str__(self):
        if self.passed:
            return "blind-spot check passed"
        worst = ", ".join(f"({y},{x}): {m:.3e}" for y, x, m in self.failures)
        return f"blind-spot check FAILED at {worst}"


def assert_blind_spot(net, image_size=24, seed=0, positions=None):
    """Probe the center gradient of the output at several pixel positions.

    Fails if the derivative of any output channel at (y, x) with respect to
    the input at (y, x) has magnitude above zero.
    """
    cfg = net.config
    h = w = int(image_size)
    if positions is None:
        positions = _probe_positions(h, w)
    rng = np.random.default_rng(seed)

    failures = []
    for y, x in positions:
        image = T.Tensor(rng.uniform(0, 1, size=(1, cfg.channels, h, w)).astype(np.float32),
                         requires_grad=True)
        pred = forward(net, image)
        pick = np.zeros_like(pred.mean.data)
        pick[:, :, y, x] = 1.0
        root = T.sum_all(T.mul(pred.mean, T.Tensor(pick)))
        T.backward(root)
        mag = float(np.abs(image.grad[0, :, y, x]).max())
        if mag > 0.0:
            failures.append((y, x, mag))
    return BlindSpotReport(passed=not failures, failures=failures)
