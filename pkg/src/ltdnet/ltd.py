"""Local top-down fusion over a bottom-up feature pyramid.

Each level is fused with the upsampled features of exactly its two coarser
successors: upsample -> channel concat -> 3x3 conv + relu -> 1x1 conv down to
a fixed channel width D. The second-from-top level fuses its single successor;
the top level is projected by a 1x1 conv + relu. Information therefore never
travels more than two levels down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import BackboneConfig, BottomUpPyramid, ConfigError, init_conv


@dataclass
class LtdConfig:
    out_channels: int = 64   # D; channel width of every refined level
    fuse_kernel: int = 3

    def validate(self):
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.fuse_kernel % 2 != 1:
            raise ConfigError(f"fuse_kernel must be odd, got {self.fuse_kernel}")


@dataclass
class FeaturePyramid:
    levels: list   # Tensor[N, D, H_l, W_l], finest first
    strides: list


def ltd_param_specs(level_channels, cfg: LtdConfig):
    """(name, out_ch, in_ch, kh, kw) for every fusion conv."""
    d = cfg.out_channels
    k = cfg.fuse_kernel
    n_levels = len(level_channels)
    specs = []
    for l in range(n_levels - 2):
        cin = level_channels[l] + level_channels[l + 1] + level_channels[l + 2]
        specs.append((f"ltd{l}.fuse", d, cin, k, k))
        specs.append((f"ltd{l}.proj", d, d, 1, 1))
    l = n_levels - 2
    cin = level_channels[l] + level_channels[l + 1]
    specs.append((f"ltd{l}.fuse", d, cin, k, k))
    specs.append((f"ltd{l}.proj", d, d, 1, 1))
    specs.append((f"ltd{n_levels - 1}.proj", d, level_channels[-1], 1, 1))
    return specs


def build_ltd(backbone_cfg: BackboneConfig, cfg: LtdConfig, rng) -> dict:
    cfg.validate()
    params = {}
    for name, out_ch, in_ch, kh, kw in ltd_param_specs(
            backbone_cfg.level_channels, cfg):
        w, b = init_conv(rng, out_ch, in_ch, kh, kw)
        params[f"{name}.w"] = w
        params[f"{name}.b"] = b
    return params


def _fuse(inputs, params, prefix, cfg: LtdConfig):
    h, w = inputs[0].shape[2], inputs[0].shape[3]
    ups = [inputs[0]] + [ag.bilinear_upsample(t, h, w) for t in inputs[1:]]
    x = ag.concat_channels(ups)
    x = ag.relu(ag.conv2d(x, params[f"{prefix}.fuse.w"], params[f"{prefix}.fuse.b"],
                          stride=1, padding=cfg.fuse_kernel // 2))
    return ag.conv2d(x, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"],
                     stride=1, padding=0)


def ltd_fuse(lower: Tensor, succ1: Tensor, succ2: Tensor,
             params: dict, cfg: LtdConfig, prefix: str = "ltd0") -> Tensor:
    """Fuse one level with its two coarser successors."""
    _, _, h, w = lower.shape
    for name, t, div in (("succ1", succ1, 2), ("succ2", succ2, 4)):
        if t.shape[2] * div != h or t.shape[3] * div != w:
            raise ag.ShapeError(
                f"ltd_fuse: {name} shape {t.shape} is not 1/{div} of lower "
                f"{lower.shape}")
    return _fuse([lower, succ1, succ2], params, prefix, cfg)


def build_feature_pyramid(bottom_up: BottomUpPyramid, params: dict,
                          cfg: LtdConfig) -> FeaturePyramid:
    """Refine a bottom-up pyramid with local top-down fusion."""
    levels = bottom_up.levels
    n_levels = len(levels)
    if n_levels < 3:
        raise ConfigError(f"need at least 3 pyramid levels, got {n_levels}")
    out = []
    for l in range(n_levels - 2):
        out.append(ltd_fuse(levels[l], levels[l + 1], levels[l + 2],
                            params, cfg, prefix=f"ltd{l}"))
    l = n_levels - 2
    out.append(_fuse([levels[l], levels[l + 1]], params, f"ltd{l}", cfg))
    top = n_levels - 1
    out.append(ag.relu(ag.conv2d(levels[top], params[f"ltd{top}.proj.w"],
                                 params[f"ltd{top}.proj.b"], stride=1, padding=0)))
    return FeaturePyramid(levels=out, strides=list(bottom_up.strides))


def projection_param_specs(level_channels, cfg: LtdConfig):
    """Per-level 1x1 projection specs for the fusion-free baseline."""
    d = cfg.out_channels
    return [(f"proj{l}", d, c, 1, 1) for l, c in enumerate(level_channels)]


def build_projections(backbone_cfg: BackboneConfig, cfg: LtdConfig, rng) -> dict:
    cfg.validate()
    params = {}
    for name, out_ch, in_ch, kh, kw in projection_param_specs(
            backbone_cfg.level_channels, cfg):
        w, b = init_conv(rng, out_ch, in_ch, kh, kw)
        params[f"{name}.w"] = w
        params[f"{name}.b"] = b
    return params


def project_pyramid(bottom_up: BottomUpPyramid, params: dict,
                    cfg: LtdConfig) -> FeaturePyramid:
    """Baseline without top-down flow: independent 1x1 conv + relu per level."""
    out = [ag.relu(ag.conv2d(t, params[f"proj{l}.w"], params[f"proj{l}.b"],
                             stride=1, padding=0))
           for l, t in enumerate(bottom_up.levels)]
    return FeaturePyramid(levels=out, strides=list(bottom_up.strides))
