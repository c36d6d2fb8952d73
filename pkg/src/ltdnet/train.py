"""Joint objective, Adam optimizer, schedule, augmentation, training loop.

The four training modes share every line of forward code: `joint` trains both
heads, `det_only` / `seg_only` train one head, and `no_ltd` swaps the fused
pyramid for independent per-level 1x1 projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import det_head as dh
from . import ltd as ltd_mod
from . import seg_head as sh
from .autograd import Tape, Tensor
from .backbone import (BackboneConfig, ConfigError, build_backbone,
                       forward_backbone)
from .data_io import Checkpoint, GroundTruthSample

MODES = ("joint", "det_only", "seg_only", "no_ltd")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    w_seg: float = 1.0
    lr0: float = 1e-4
    decay_milestones: tuple = (1500, 2400)
    batch_size: int = 8
    max_steps: int = 3000
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mode: str = "joint"

    def validate(self):
        m1, m2 = self.decay_milestones
        if not (0 < m1 < m2 < self.max_steps):
            raise ConfigError(
                f"milestones {self.decay_milestones} must be strictly increasing "
                f"and below max_steps {self.max_steps}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ltd: ltd_mod.LtdConfig = field(default_factory=ltd_mod.LtdConfig)
    anchors: dh.AnchorConfig = field(default_factory=dh.AnchorConfig)
    pcm: sh.PcmConfig = None

    def __post_init__(self):
        if self.pcm is None:
            # segmentation target size tracks the finest pyramid stride
            t = self.backbone.input_size // self.backbone.base_stride
            self.pcm = sh.PcmConfig(target_size=(t, t))

    def level_shapes(self):
        return [(s, s) for s in self.backbone.level_sizes()]


def total_loss(det_loss, seg_loss, w: float, mode: str):
    """Combined objective: detection plus w-weighted segmentation."""
    if mode == "det_only":
        return det_loss
    if mode == "seg_only":
        return seg_loss
    return ag.add(det_loss, ag.scale(seg_loss, w))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Step decay: lr0, then lr0/10 and lr0/100 at the two milestones."""
    if step < 0:
        raise ag.ArgumentError(f"step must be nonnegative, got {step}")
    m1, m2 = cfg.decay_milestones
    if step < m1:
        return cfg.lr0
    if step < m2:
        return cfg.lr0 / 10.0
    return cfg.lr0 / 100.0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              cfg: TrainConfig):
    """In-place bias-corrected Adam update; missing grads count as zero."""
    state.t += 1
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.adam_eps
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ag.ShapeError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# augmentation

def hflip_sample(sample: GroundTruthSample) -> GroundTruthSample:
    boxes = [(cls, (1.0 - x1, y0, 1.0 - x0, y1))
             for cls, (x0, y0, x1, y1) in sample.boxes]
    return GroundTruthSample(image=sample.image[:, :, ::-1].copy(),
                             boxes=boxes, mask=sample.mask[:, ::-1].copy())


def crop_sample(sample: GroundTruthSample, ox: int, oy: int,
                crop: int) -> GroundTruthSample:
    """Crop a crop x crop window at (ox, oy), resize back by nearest neighbor.

    Keeps boxes whose centers fall inside the window, clipped to it.
    Returns None if no box survives.
    """
    size = sample.mask.shape[0]
    boxes = []
    for cls, (x0, y0, x1, y1) in sample.boxes:
        cx = (x0 + x1) / 2 * size
        cy = (y0 + y1) / 2 * size
        if not (ox <= cx < ox + crop and oy <= cy < oy + crop):
            continue
        nx0 = max((x0 * size - ox) / crop, 0.0)
        ny0 = max((y0 * size - oy) / crop, 0.0)
        nx1 = min((x1 * size - ox) / crop, 1.0)
        ny1 = min((y1 * size - oy) / crop, 1.0)
        if nx1 > nx0 and ny1 > ny0:
            boxes.append((cls, (nx0, ny0, nx1, ny1)))
    if not boxes:
        return None
    idx = (np.arange(size) * crop) // size
    image = sample.image[:, (oy + idx)[:, None], (ox + idx)[None, :]]
    mask = sample.mask[(oy + idx)[:, None], (ox + idx)[None, :]]
    return GroundTruthSample(image=image, boxes=boxes, mask=mask)


def augment_sample(sample: GroundTruthSample, rng) -> GroundTruthSample:
    """Random horizontal flip, then a random crop of scale in [0.6, 1.0]."""
    if rng.random() < 0.5:
        sample = hflip_sample(sample)
    size = sample.mask.shape[0]
    for _ in range(10):
        scale = rng.uniform(0.6, 1.0)
        crop = max(1, int(round(scale * size)))
        ox = int(rng.integers(0, size - crop + 1))
        oy = int(rng.integers(0, size - crop + 1))
        out = crop_sample(sample, ox, oy, crop)
        if out is not None:
            return out
    return crop_sample(sample, 0, 0, size) or sample


def downsample_mask(mask, target_h, target_w):
    h, w = mask.shape
    ys = (np.arange(target_h) * h) // target_h
    xs = (np.arange(target_w) * w) // target_w
    return mask[ys[:, None], xs[None, :]]


# ---------------------------------------------------------------------------
# model assembly

def init_model_params(cfg: ModelConfig, mode: str, seed: int) -> dict:
    """All parameter groups under name prefixes; deterministic per seed."""
    cfg.backbone.validate()
    cfg.ltd.validate()
    cfg.pcm.validate()
    params = {f"backbone.{k}": v
              for k, v in build_backbone(cfg.backbone, seed).items()}
    rng = np.random.default_rng(seed + 1)
    if mode == "no_ltd":
        neck = ltd_mod.build_projections(cfg.backbone, cfg.ltd, rng)
    else:
        neck = ltd_mod.build_ltd(cfg.backbone, cfg.ltd, rng)
    params.update({f"neck.{k}": v for k, v in neck.items()})
    rng = np.random.default_rng(seed + 2)
    det = dh.build_det_head(cfg.backbone.num_levels, cfg.ltd.out_channels,
                            cfg.anchors, rng)
    params.update({f"det.{k}": v for k, v in det.items()})
    rng = np.random.default_rng(seed + 3)
    seg = sh.build_seg_head(cfg.backbone.num_levels, cfg.ltd.out_channels,
                            cfg.anchors.num_classes, cfg.pcm, rng)
    params.update({f"seg.{k}": v for k, v in seg.items()})
    return params


def _group(bound: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in bound.items() if k.startswith(prefix)}


def forward_model(bound: dict, images: Tensor, cfg: ModelConfig, mode: str,
                  with_det: bool = True, with_seg: bool = True):
    """Shared trunk plus the requested heads.

    Returns (DetectionOutputs or None, mask logits Tensor or None).
    """
    bu = forward_backbone(_group(bound, "backbone."), images, cfg.backbone)
    neck = _group(bound, "neck.")
    if mode == "no_ltd":
        pyramid = ltd_mod.project_pyramid(bu, neck, cfg.ltd)
    else:
        pyramid = ltd_mod.build_feature_pyramid(bu, neck, cfg.ltd)
    det_out = dh.bbox_predict(pyramid, _group(bound, "det."), cfg.anchors) \
        if with_det else None
    seg_logits = None
    if with_seg:
        seg = _group(bound, "seg.")
        seg_logits = sh.mask_logits(sh.pcm_forward(pyramid, seg, cfg.pcm), seg)
    return det_out, seg_logits


def predict(params: dict, sample_image, cfg: ModelConfig, mode: str,
            with_det: bool = True, with_seg: bool = True):
    """Inference for one image array (3, S, S): detections and class mask."""
    from .backbone import const_params
    images = Tensor(sample_image[None])
    det_out, seg_logits = forward_model(const_params(params), images, cfg,
                                        mode, with_det, with_seg)
    dets = None
    if det_out is not None:
        anchors = dh.generate_anchors(cfg.level_shapes(), cfg.anchors)
        candidates = dh.decode_detections(det_out, anchors, cfg.anchors)[0]
        dets = dh.nms(candidates, cfg.anchors.nms_threshold)
    mask = None
    if seg_logits is not None:
        mask = sh.predict_mask(seg_logits.data, cfg.backbone.input_size)[0]
    return dets, mask


# ---------------------------------------------------------------------------
# training loop

def format_log_line(step, lr, det_val, seg_val, total):
    return f"{step}\t{lr:.10g}\t{det_val:.10g}\t{seg_val:.10g}\t{total:.10g}"


def train_loop(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
               params: dict = None, log_fn=None):
    """Train for max_steps; returns (params, loss log lines, AdamState).

    Deterministic given train_cfg.seed: shuffling, augmentation, and
    initialization all derive from it.
    """
    train_cfg.validate()
    if not dataset:
        raise ag.ArgumentError("train_loop: empty dataset")
    mode = train_cfg.mode
    if params is None:
        params = init_model_params(model_cfg, mode, train_cfg.seed)
    anchors = dh.generate_anchors(model_cfg.level_shapes(), model_cfg.anchors)
    state = AdamState()
    rng = np.random.default_rng(train_cfg.seed)
    log = []
    order = []
    with_det = mode != "seg_only"
    with_seg = mode != "det_only"
    th, tw = model_cfg.pcm.target_size

    for step in range(train_cfg.max_steps):
        batch = []
        for _ in range(train_cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(dataset)))
            batch.append(dataset[order.pop()])
        batch = [augment_sample(s, rng) for s in batch]
        images = Tensor(np.stack([s.image for s in batch]))

        tape = Tape()
        bound = {k: tape.leaf(v) for k, v in params.items()}
        det_out, seg_logits = forward_model(bound, images, model_cfg, mode,
                                            with_det, with_seg)
        det_val = seg_val = 0.0
        losses = {}
        if with_det:
            assignments = [dh.match_anchors(anchors, s.boxes,
                                            model_cfg.anchors.iou_threshold)
                           for s in batch]
            det_loss, _ = dh.detection_loss(det_out, assignments,
                                            [s.boxes for s in batch], anchors,
                                            model_cfg.anchors,
                                            model_cfg.anchors.neg_ratio)
            losses["det"] = det_loss
            det_val = det_loss.item()
        if with_seg:
            targets = np.stack([downsample_mask(s.mask, th, tw) for s in batch])
            seg_loss = sh.segmentation_loss(seg_logits, targets)
            losses["seg"] = seg_loss
            seg_val = seg_loss.item()
        loss = total_loss(losses.get("det"), losses.get("seg"),
                          train_cfg.w_seg, mode if mode != "no_ltd" else "joint")
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step}")

        grads = ag.backward(tape, loss)
        grad_by_name = {k: grads[t.node_id].data for k, t in bound.items()}
        lr = lr_at(step, train_cfg)
        adam_step(params, grad_by_name, state, lr, train_cfg)

        line = format_log_line(step, lr, det_val, seg_val, value)
        log.append(line)
        if log_fn:
            log_fn(line)
    return params, log, state


def train_checkpoint(params: dict, step: int, model_cfg: ModelConfig,
                     train_cfg: TrainConfig) -> Checkpoint:
    cfg = {
        "mode": train_cfg.mode,
        "seed": train_cfg.seed,
        "input_size": model_cfg.backbone.input_size,
        "base_stride": model_cfg.backbone.base_stride,
        "stem_channels": model_cfg.backbone.stem_channels,
        "level_channels": ",".join(map(str, model_cfg.backbone.level_channels)),
        "blocks_per_level": ",".join(map(str, model_cfg.backbone.blocks_per_level)),
        "out_channels": model_cfg.ltd.out_channels,
        "num_classes": model_cfg.anchors.num_classes,
        "aspect_ratios": ",".join(map(str, model_cfg.anchors.aspect_ratios)),
        "anchor_scales": ",".join(map(str, model_cfg.anchors.scales)),
        "mid_channels": model_cfg.pcm.mid_channels,
    }
    return Checkpoint(params=params, step=step,
                      config={k: str(v) for k, v in cfg.items()})


def model_config_from_checkpoint(ckpt: Checkpoint) -> tuple:
    """Rebuild (ModelConfig, mode) from a checkpoint's config snapshot."""
    c = ckpt.config
    backbone = BackboneConfig(
        stem_channels=int(c["stem_channels"]),
        level_channels=[int(v) for v in c["level_channels"].split(",")],
        blocks_per_level=[int(v) for v in c["blocks_per_level"].split(",")],
        input_size=int(c["input_size"]),
        base_stride=int(c["base_stride"]))
    cfg = ModelConfig(
        backbone=backbone,
        ltd=ltd_mod.LtdConfig(out_channels=int(c["out_channels"])),
        anchors=dh.AnchorConfig(
            num_classes=int(c["num_classes"]),
            aspect_ratios=[float(v) for v in c["aspect_ratios"].split(",")],
            scales=[float(v) for v in c["anchor_scales"].split(",")]),
        pcm=None)
    cfg.pcm = sh.PcmConfig(
        target_size=(backbone.input_size // backbone.base_stride,) * 2,
        mid_channels=int(c["mid_channels"]))
    return cfg, c["mode"]
