"""SSD-style detection head over a refined feature pyramid.

Anchor (default box) generation, ground-truth matching, center-size box
encoding, classification + localization loss with hard negative mining, and
greedy per-class NMS. Boxes are (xmin, ymin, xmax, ymax) or (cx, cy, w, h)
in normalized [0, 1] image coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import init_conv


class InputError(ValueError):
    """Raised for semantically invalid inputs (degenerate boxes, bad ids)."""


@dataclass
class AnchorConfig:
    num_classes: int = 4                 # C, including background class 0
    aspect_ratios: list = field(default_factory=lambda: [1.0, 2.0, 0.5])
    scales: list = field(default_factory=lambda: [0.1, 0.25, 0.45, 0.7])
    extra_scale_anchor: bool = True      # extra ar=1 anchor at the next scale
    variances: tuple = (0.1, 0.2)
    iou_threshold: float = 0.5
    neg_ratio: float = 3.0
    nms_threshold: float = 0.45
    score_threshold: float = 0.05
    top_k: int = 200

    @property
    def anchors_per_cell(self):
        return len(self.aspect_ratios) + (1 if self.extra_scale_anchor else 0)


@dataclass
class AnchorSet:
    boxes: np.ndarray        # (M, 4) as (cx, cy, w, h)
    level_index: np.ndarray  # (M,)
    level_shapes: list       # [(H_l, W_l)]
    anchors_per_cell: int

    def __len__(self):
        return len(self.boxes)

    def corners(self):
        return center_to_corner(self.boxes)


@dataclass
class MatchAssignment:
    labels: np.ndarray     # (M,) class id, 0 = background
    gt_index: np.ndarray   # (M,) matched ground-truth index, -1 = background
    positives: int
    normalizer: int        # max(1, positives)


@dataclass
class DetectionOutputs:
    scores: list    # per level Tensor[N, C*A, H_l, W_l]
    offsets: list   # per level Tensor[N, 4*A, H_l, W_l]


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple      # (xmin, ymin, xmax, ymax)
    image_id: int = 0


def center_to_corner(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def corner_to_center(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    x0, y0, x1, y1 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def iou_matrix(a_corners, b_corners):
    """Pairwise IoU between (M,4) and (G,4) corner boxes."""
    a = np.asarray(a_corners)[:, None, :]
    b = np.asarray(b_corners)[None, :, :]
    ix = np.maximum(0.0, np.minimum(a[..., 2], b[..., 2])
                    - np.maximum(a[..., 0], b[..., 0]))
    iy = np.maximum(0.0, np.minimum(a[..., 3], b[..., 3])
                    - np.maximum(a[..., 1], b[..., 1]))
    inter = ix * iy
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    out = np.zeros(inter.shape)
    np.divide(inter, union, out=out, where=union > 0)
    return out


# ---------------------------------------------------------------------------
# anchors

def _cell_anchors(cfg: AnchorConfig, level: int):
    scale = cfg.scales[level]
    pairs = [(scale, ar) for ar in cfg.aspect_ratios]
    if cfg.extra_scale_anchor:
        if level + 1 < len(cfg.scales):
            nxt = math.sqrt(scale * cfg.scales[level + 1])
        else:
            nxt = math.sqrt(scale * min(1.0, scale * 1.5))
        pairs.append((nxt, 1.0))
    return [(s * math.sqrt(ar), s / math.sqrt(ar)) for s, ar in pairs]


def generate_anchors(pyramid_shapes, cfg: AnchorConfig) -> AnchorSet:
    """Tile default boxes over every cell of every pyramid level.

    Ordering is level-major, row-major, anchor-index-minor; centers sit at
    cell midpoints ((i + 0.5)/W, (j + 0.5)/H).
    """
    if not pyramid_shapes:
        raise ag.ArgumentError("generate_anchors: no pyramid shapes")
    boxes = []
    level_index = []
    for l, (h, w) in enumerate(pyramid_shapes):
        whs = _cell_anchors(cfg, l)
        for j in range(h):
            for i in range(w):
                cx = (i + 0.5) / w
                cy = (j + 0.5) / h
                for aw, ah in whs:
                    boxes.append((cx, cy, aw, ah))
                    level_index.append(l)
    return AnchorSet(boxes=np.array(boxes, dtype=np.float64),
                     level_index=np.array(level_index, dtype=np.intp),
                     level_shapes=list(pyramid_shapes),
                     anchors_per_cell=cfg.anchors_per_cell)


# ---------------------------------------------------------------------------
# matching and encoding

def match_anchors(anchors: AnchorSet, gt, iou_threshold: float = 0.5) -> MatchAssignment:
    """Assign each anchor to a ground truth or background.

    (a) each ground truth, in index order, claims its best-IoU anchor among
    anchors not yet claimed (ties broken by lower anchor index);
    (b) every remaining anchor with IoU >= threshold is matched to its argmax
    ground truth (ties broken by lower ground-truth index).
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ag.ArgumentError(f"iou_threshold must be in (0,1), got {iou_threshold}")
    m = len(anchors)
    labels = np.zeros(m, dtype=np.intp)
    gt_index = np.full(m, -1, dtype=np.intp)
    if not gt:
        return MatchAssignment(labels, gt_index, 0, 1)
    gt_boxes = np.array([g[1] for g in gt], dtype=np.float64)
    for cls, box in gt:
        if (box[2] - box[0]) <= 0 or (box[3] - box[1]) <= 0:
            raise InputError(f"ground-truth box has zero area: {box}")
    iou = iou_matrix(anchors.corners(), gt_boxes)   # (M, G)

    claimed = np.zeros(m, dtype=bool)
    for g in range(len(gt)):
        col = np.where(claimed, -1.0, iou[:, g])
        best = int(np.argmax(col))                  # argmax takes lowest index on ties
        claimed[best] = True
        labels[best] = gt[g][0]
        gt_index[best] = g

    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(m), best_gt]
    extra = (~claimed) & (best_iou >= iou_threshold)
    labels[extra] = np.array([gt[g][0] for g in best_gt[extra]], dtype=np.intp)
    gt_index[extra] = best_gt[extra]

    positives = int((gt_index >= 0).sum())
    return MatchAssignment(labels, gt_index, positives, max(1, positives))


def encode_box(anchor, g, variances=(0.1, 0.2)):
    """Center-size offsets of corner box g relative to a (cx,cy,w,h) anchor."""
    acx, acy, aw, ah = anchor
    gcx, gcy, gw, gh = corner_to_center(np.asarray(g, dtype=np.float64))
    if aw <= 0 or ah <= 0 or gw <= 0 or gh <= 0:
        raise InputError(f"nonpositive box size: anchor {anchor}, gt {g}")
    v1, v2 = variances
    return ((gcx - acx) / (aw * v1), (gcy - acy) / (ah * v1),
            math.log(gw / aw) / v2, math.log(gh / ah) / v2)


def decode_box(anchor, offsets, variances=(0.1, 0.2)):
    """Inverse of encode_box; returns corner coordinates."""
    acx, acy, aw, ah = anchor
    tx, ty, tw, th = offsets
    v1, v2 = variances
    cx = acx + tx * v1 * aw
    cy = acy + ty * v1 * ah
    w = aw * math.exp(tw * v2)
    h = ah * math.exp(th * v2)
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def encode_boxes(anchor_boxes, gt_corners, variances=(0.1, 0.2)):
    """Vectorized encode_box over (P,4) anchors and corner ground truths."""
    a = np.asarray(anchor_boxes, dtype=np.float64)
    g = corner_to_center(gt_corners)
    v1, v2 = variances
    if np.any(a[:, 2:] <= 0) or np.any(g[:, 2:] <= 0):
        raise InputError("nonpositive box size in encode_boxes")
    t = np.empty_like(a)
    t[:, 0] = (g[:, 0] - a[:, 0]) / (a[:, 2] * v1)
    t[:, 1] = (g[:, 1] - a[:, 1]) / (a[:, 3] * v1)
    t[:, 2] = np.log(g[:, 2] / a[:, 2]) / v2
    t[:, 3] = np.log(g[:, 3] / a[:, 3]) / v2
    return t


def decode_boxes(anchor_boxes, offsets, variances=(0.1, 0.2)):
    a = np.asarray(anchor_boxes, dtype=np.float64)
    t = np.asarray(offsets, dtype=np.float64)
    v1, v2 = variances
    cx = a[:, 0] + t[:, 0] * v1 * a[:, 2]
    cy = a[:, 1] + t[:, 1] * v1 * a[:, 3]
    w = a[:, 2] * np.exp(t[:, 2] * v2)
    h = a[:, 3] * np.exp(t[:, 3] * v2)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


# ---------------------------------------------------------------------------
# prediction branches

def det_param_specs(num_levels, in_channels, cfg: AnchorConfig):
    a = cfg.anchors_per_cell
    specs = []
    for l in range(num_levels):
        specs.append((f"det{l}.cls", cfg.num_classes * a, in_channels, 3, 3))
        specs.append((f"det{l}.loc", 4 * a, in_channels, 3, 3))
    return specs


def build_det_head(num_levels, in_channels, cfg: AnchorConfig, rng) -> dict:
    params = {}
    for name, out_ch, in_ch, kh, kw in det_param_specs(num_levels, in_channels, cfg):
        w, b = init_conv(rng, out_ch, in_ch, kh, kw)
        # prediction layers start near zero: uniform class scores and
        # anchor-sized boxes, so early steps are not spent undoing large
        # random logits/offsets
        params[f"{name}.w"] = w * 0.01
        params[f"{name}.b"] = b
    return params


def bbox_predict(pyramid, params: dict, cfg: AnchorConfig) -> DetectionOutputs:
    """Per-level paired classification / localization 3x3 convolutions."""
    scores, offsets = [], []
    for l, feat in enumerate(pyramid.levels):
        scores.append(ag.conv2d(feat, params[f"det{l}.cls.w"],
                                params[f"det{l}.cls.b"], stride=1, padding=1))
        offsets.append(ag.conv2d(feat, params[f"det{l}.loc.w"],
                                 params[f"det{l}.loc.b"], stride=1, padding=1))
    return DetectionOutputs(scores=scores, offsets=offsets)


def flatten_outputs(outputs: DetectionOutputs, cfg: AnchorConfig):
    """Reshape per-level maps to ((B*M, C), (B*M, 4)) in anchor order."""
    c = cfg.num_classes
    score_rows, offset_rows = [], []
    batch = outputs.scores[0].shape[0]
    for s, o in zip(outputs.scores, outputs.offsets):
        b, ca, h, w = s.shape
        a = ca // c
        score_rows.append(ag.reshape(ag.transpose(s, (0, 2, 3, 1)),
                                     (b, h * w * a, c)))
        offset_rows.append(ag.reshape(ag.transpose(o, (0, 2, 3, 1)),
                                      (b, h * w * a, 4)))
    scores = ag.concat(score_rows, axis=1)
    offsets = ag.concat(offset_rows, axis=1)
    m = scores.shape[1]
    return (ag.reshape(scores, (batch * m, c)),
            ag.reshape(offsets, (batch * m, 4)), m)


# ---------------------------------------------------------------------------
# losses

def hard_negative_mining(per_anchor_cls_loss, positives, ratio: float = 3.0):
    """Select the floor(ratio * positives) highest-loss background anchors.

    Ties break toward the lower anchor index; positives are never selected.
    """
    if ratio <= 0:
        raise ag.ArgumentError(f"neg_ratio must be positive, got {ratio}")
    loss = np.asarray(per_anchor_cls_loss, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    budget = int(ratio * int(pos.sum()))
    selected = np.zeros(len(loss), dtype=bool)
    neg_idx = np.flatnonzero(~pos)
    if budget >= len(neg_idx):
        selected[neg_idx] = True
        return selected
    # stable sort on (-loss, index): highest loss first, lower index on ties
    order = neg_idx[np.argsort(-loss[neg_idx], kind="stable")]
    selected[order[:budget]] = True
    return selected


def _per_anchor_ce(logits, labels):
    """Cross-entropy of each anchor against its assigned label (numpy)."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def detection_loss(outputs: DetectionOutputs, assignments, gts,
                   anchors: AnchorSet, cfg: AnchorConfig,
                   neg_ratio: float = 3.0):
    """Per-image-normalized SSD loss, averaged over the batch.

    assignments/gts are one MatchAssignment and ground-truth list per image
    (a single MatchAssignment is accepted for batch size 1). Returns the
    differentiable scalar loss and the total positive count.
    """
    if isinstance(assignments, MatchAssignment):
        assignments = [assignments]
        gts = [gts]
    scores2d, offsets2d, m = flatten_outputs(outputs, cfg)
    batch = outputs.scores[0].shape[0]
    if len(assignments) != batch:
        raise ag.ArgumentError(
            f"{len(assignments)} assignments for batch of {batch}")
    if m != len(anchors):
        raise ag.ArgumentError(
            f"outputs cover {m} anchors, anchor set has {len(anchors)}")

    logits_np = scores2d.data.reshape(batch, m, cfg.num_classes)
    sel_rows, sel_labels, sel_w = [], [], []
    pos_rows, pos_targets, pos_w = [], [], []
    total_pos = 0
    for b, (asg, gt) in enumerate(zip(assignments, gts)):
        pos_mask = asg.gt_index >= 0
        total_pos += asg.positives
        inv_n = 1.0 / asg.normalizer
        ce = _per_anchor_ce(logits_np[b], asg.labels)
        neg_mask = hard_negative_mining(ce, pos_mask, neg_ratio)
        keep = np.flatnonzero(pos_mask | neg_mask)
        sel_rows.extend(b * m + keep)
        sel_labels.extend(asg.labels[keep])
        sel_w.extend([inv_n] * len(keep))
        pidx = np.flatnonzero(pos_mask)
        if len(pidx):
            pos_rows.extend(b * m + pidx)
            gt_corners = np.array([gt[asg.gt_index[i]][1] for i in pidx])
            pos_targets.append(encode_boxes(anchors.boxes[pidx], gt_corners,
                                            cfg.variances))
            pos_w.extend([inv_n] * len(pidx))

    # classification: weighted cross-entropy on positives + mined negatives
    ls = ag.gather_rows(ag.log_softmax(scores2d), sel_rows)
    onehot = np.zeros((len(sel_rows), cfg.num_classes))
    onehot[np.arange(len(sel_rows)), sel_labels] = np.asarray(sel_w)
    l_cls = ag.scale(ag.sum_all(ag.mul(ls, Tensor(onehot))), -1.0)

    # localization: weighted smooth-L1 on positives only
    if pos_rows:
        pred = ag.gather_rows(offsets2d, pos_rows)
        target = Tensor(np.concatenate(pos_targets, axis=0))
        diff = ag.smooth_l1(ag.sub(pred, target))
        weights = np.repeat(np.asarray(pos_w)[:, None], 4, axis=1)
        l_loc = ag.sum_all(ag.mul(diff, Tensor(weights)))
        loss = ag.add(l_cls, l_loc)
    else:
        loss = l_cls
    return ag.scale(loss, 1.0 / batch), total_pos


# ---------------------------------------------------------------------------
# inference

def decode_detections(outputs: DetectionOutputs, anchors: AnchorSet,
                      cfg: AnchorConfig, score_threshold: float = None,
                      top_k: int = None):
    """Softmax, threshold, decode, clip; at most top_k by score (pre-NMS).

    Returns one list of Detection per image in the batch.
    """
    thr = cfg.score_threshold if score_threshold is None else score_threshold
    k = cfg.top_k if top_k is None else top_k
    if not 0.0 < thr < 1.0:
        raise ag.ArgumentError(f"score_threshold must be in (0,1), got {thr}")
    scores2d, offsets2d, m = flatten_outputs(outputs, cfg)
    batch = outputs.scores[0].shape[0]
    probs = ag.softmax(Tensor(scores2d.data)).data.reshape(batch, m, cfg.num_classes)
    offs = offsets2d.data.reshape(batch, m, 4)
    results = []
    for b in range(batch):
        decoded = decode_boxes(anchors.boxes, offs[b], cfg.variances)
        decoded = np.clip(decoded, 0.0, 1.0)
        dets = []
        for cls in range(1, cfg.num_classes):
            for i in np.flatnonzero(probs[b, :, cls] >= thr):
                x0, y0, x1, y1 = decoded[i]
                if x1 <= x0 or y1 <= y0:
                    continue
                dets.append(Detection(class_id=cls, score=float(probs[b, i, cls]),
                                      box=(x0, y0, x1, y1), image_id=b))
        dets.sort(key=lambda d: -d.score)
        results.append(dets[:k])
    return results


def nms(dets, iou_threshold: float = 0.45):
    """Greedy per-class suppression; ties resolved by insertion order."""
    if not 0.0 < iou_threshold < 1.0:
        raise ag.ArgumentError(f"iou_threshold must be in (0,1), got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    suppressed = [False] * len(dets)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(dets[i])
        bi = np.array(dets[i].box)[None, :]
        for j in order:
            if j == i or suppressed[j] or dets[j].class_id != dets[i].class_id:
                continue
            if iou_matrix(bi, np.array(dets[j].box)[None, :])[0, 0] > iou_threshold:
                suppressed[j] = True
    return kept
