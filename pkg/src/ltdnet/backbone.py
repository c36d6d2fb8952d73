"""Residual bottom-up network producing a multi-scale feature pyramid.

A shallow, randomly initialized stand-in for a large pretrained classifier
trunk: a strided stem followed by one stack of residual blocks per pyramid
level. No normalization layers; per-sample outputs are batch-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


@dataclass
class BackboneConfig:
    stem_channels: int = 32
    level_channels: list = field(default_factory=lambda: [32, 64, 128, 128])
    blocks_per_level: list = field(default_factory=lambda: [1, 1, 1, 1])
    input_size: int = 64
    base_stride: int = 4

    def validate(self):
        if len(self.level_channels) != len(self.blocks_per_level):
            raise ConfigError(
                f"level_channels ({len(self.level_channels)}) and blocks_per_level "
                f"({len(self.blocks_per_level)}) lengths differ")
        if len(self.level_channels) < 3:
            raise ConfigError(
                f"need at least 3 pyramid levels, got {len(self.level_channels)}")
        if self.base_stride < 1 or (self.base_stride & (self.base_stride - 1)):
            raise ConfigError(f"base_stride must be a power of 2, got {self.base_stride}")
        total = self.base_stride * 2 ** (len(self.level_channels) - 1)
        if self.input_size % total != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by {total}")
        if self.stem_channels < 1 or any(c < 1 for c in self.level_channels):
            raise ConfigError("channel counts must be positive")

    @property
    def num_levels(self):
        return len(self.level_channels)

    def level_sizes(self):
        return [self.input_size // (self.base_stride * 2 ** l)
                for l in range(self.num_levels)]

    def level_strides(self):
        return [self.base_stride * 2 ** l for l in range(self.num_levels)]


@dataclass
class BottomUpPyramid:
    levels: list          # Tensor[N, C_l, H_l, W_l], finest first
    strides: list


def init_conv(rng, out_ch, in_ch, kh, kw):
    fan_in = in_ch * kh * kw
    w = rng.standard_normal((out_ch, in_ch, kh, kw)) * np.sqrt(2.0 / fan_in)
    return w, np.zeros(out_ch)


def _conv_specs(config: BackboneConfig):
    """Enumerate (name, out_ch, in_ch, kh, kw) for every backbone conv."""
    specs = []
    n_stem = int(np.log2(config.base_stride))
    in_ch = 3
    for i in range(n_stem):
        specs.append((f"stem{i}", config.stem_channels, in_ch, 3, 3))
        in_ch = config.stem_channels
    for l, (out_ch, n_blocks) in enumerate(
            zip(config.level_channels, config.blocks_per_level)):
        for b in range(n_blocks):
            pre = f"level{l}.block{b}"
            stride = 2 if (l > 0 and b == 0) else 1
            specs.append((f"{pre}.conv1", out_ch, in_ch, 3, 3))
            specs.append((f"{pre}.conv2", out_ch, out_ch, 3, 3))
            if stride != 1 or in_ch != out_ch:
                specs.append((f"{pre}.shortcut", out_ch, in_ch, 1, 1))
            in_ch = out_ch
    return specs


def parameter_count(config: BackboneConfig) -> int:
    """Closed-form parameter count from the declared conv shapes."""
    return sum(o * i * kh * kw + o for _, o, i, kh, kw in _conv_specs(config))


def build_backbone(config: BackboneConfig, seed: int) -> dict:
    """Initialize backbone parameters deterministically from a seed.

    Weights are zero-mean normal scaled by sqrt(2/fan_in); biases zero.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, out_ch, in_ch, kh, kw in _conv_specs(config):
        w, b = init_conv(rng, out_ch, in_ch, kh, kw)
        params[f"{name}.w"] = w
        params[f"{name}.b"] = b
    return params


def _conv(params, name, x, stride=1, padding=1):
    return ag.conv2d(x, params[f"{name}.w"], params[f"{name}.b"],
                     stride=stride, padding=padding)


def _block(params, prefix, x, stride):
    out = ag.relu(_conv(params, f"{prefix}.conv1", x, stride=stride))
    out = _conv(params, f"{prefix}.conv2", out)
    if f"{prefix}.shortcut.w" in params:
        short = _conv(params, f"{prefix}.shortcut", x, stride=stride, padding=0)
    else:
        short = x
    return ag.relu(ag.add(out, short))


def forward_backbone(params: dict, image: Tensor,
                     config: BackboneConfig) -> BottomUpPyramid:
    """Run the bottom-up trunk; params maps names to Tensors.

    image is (N, 3, S, S) with S == config.input_size.
    """
    n, c, h, w = image.shape
    if c != 3 or h != config.input_size or w != config.input_size:
        raise ag.ShapeError(
            f"expected (N, 3, {config.input_size}, {config.input_size}) image, "
            f"got {image.shape}")
    x = image
    for i in range(int(np.log2(config.base_stride))):
        x = ag.relu(_conv(params, f"stem{i}", x, stride=2))
    levels = []
    for l, n_blocks in enumerate(config.blocks_per_level):
        for b in range(n_blocks):
            stride = 2 if (l > 0 and b == 0) else 1
            x = _block(params, f"level{l}.block{b}", x, stride)
        levels.append(x)
    return BottomUpPyramid(levels=levels, strides=config.level_strides())


def bind_params(tape, params: dict) -> dict:
    """Register raw parameter arrays as tape leaves for one forward pass."""
    return {name: tape.leaf(arr) for name, arr in params.items()}


def const_params(params: dict) -> dict:
    """Wrap raw parameter arrays as constants (inference, no gradients)."""
    return {name: Tensor(arr) for name, arr in params.items()}
