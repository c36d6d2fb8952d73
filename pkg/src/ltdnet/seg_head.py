"""Pyramid convolutional segmentation head.

All pyramid levels are upsampled to a common target size, concatenated, and
passed through a 3x3 conv + relu; a final 3x3 convolution produces per-pixel
class logits. The loss is mean per-pixel softmax cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import ConfigError, init_conv
from .det_head import InputError


@dataclass
class PcmConfig:
    target_size: tuple = (16, 16)   # (H*, W*)
    mid_channels: int = 128         # F

    def validate(self):
        if self.target_size[0] < 1 or self.target_size[1] < 1:
            raise ConfigError(f"invalid target_size {self.target_size}")
        if self.mid_channels < 1:
            raise ConfigError(f"mid_channels must be >= 1, got {self.mid_channels}")


def seg_param_specs(num_levels, pyramid_channels, num_classes, cfg: PcmConfig):
    cin = num_levels * pyramid_channels
    return [("pcm.fuse", cfg.mid_channels, cin, 3, 3),
            ("pcm.mask", num_classes, cfg.mid_channels, 3, 3)]


def build_seg_head(num_levels, pyramid_channels, num_classes,
                   cfg: PcmConfig, rng) -> dict:
    cfg.validate()
    params = {}
    for name, out_ch, in_ch, kh, kw in seg_param_specs(
            num_levels, pyramid_channels, num_classes, cfg):
        w, b = init_conv(rng, out_ch, in_ch, kh, kw)
        if name == "pcm.mask":
            # near-zero initial logits: per-pixel predictions start uniform
            w = w * 0.01
        params[f"{name}.w"] = w
        params[f"{name}.b"] = b
    return params


def pcm_forward(pyramid, params: dict, cfg: PcmConfig) -> Tensor:
    """Upsample every level to the target size, concat, 3x3 conv + relu."""
    if not pyramid.levels:
        raise ag.ArgumentError("pcm_forward: empty pyramid")
    th, tw = cfg.target_size
    ups = [ag.bilinear_upsample(t, th, tw) for t in pyramid.levels]
    x = ag.concat_channels(ups)
    return ag.relu(ag.conv2d(x, params["pcm.fuse.w"], params["pcm.fuse.b"],
                             stride=1, padding=1))


def mask_logits(features: Tensor, params: dict) -> Tensor:
    """Single 3x3 convolution to per-pixel class logits, no activation."""
    return ag.conv2d(features, params["pcm.mask.w"], params["pcm.mask.b"],
                     stride=1, padding=1)


def segmentation_loss(logits: Tensor, target) -> Tensor:
    """Mean over all pixels of -log softmax(logits)[target class].

    logits is (N, C, H, W); target is an (N, H, W) integer class-id array.
    """
    n, c, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ag.ShapeError(
            f"target shape {target.shape} does not match logits {logits.shape}")
    if target.min() < 0 or target.max() >= c:
        raise InputError(
            f"target class ids must be in [0, {c}), got "
            f"[{target.min()}, {target.max()}]")
    rows = ag.reshape(ag.transpose(logits, (0, 2, 3, 1)), (n * h * w, c))
    onehot = np.zeros((n * h * w, c))
    onehot[np.arange(n * h * w), target.reshape(-1)] = 1.0
    ce = ag.mul(ag.log_softmax(rows), Tensor(onehot))
    return ag.scale(ag.sum_all(ce), -1.0 / (n * h * w))


def predict_mask(logits_data, out_size: int):
    """Argmax class map, nearest-neighbor upsampled to out_size (numpy)."""
    pred = np.argmax(logits_data, axis=1)  # (N, H*, W*)
    n, h, w = pred.shape
    ys = (np.arange(out_size) * h) // out_size
    xs = (np.arange(out_size) * w) // out_size
    return pred[:, ys[:, None], xs[None, :]]
