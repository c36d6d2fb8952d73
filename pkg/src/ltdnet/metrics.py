"""Detection and segmentation quality metrics.

Average precision uses score-descending greedy matching at IoU >= 0.5 and
continuous area-under-curve integration with monotone-decreasing precision
interpolation. Mean IoU excludes classes absent from both prediction and
ground truth.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag


@dataclass
class EvalReport:
    per_class_ap: dict = field(default_factory=dict)    # class id -> AP
    per_class_iou: dict = field(default_factory=dict)   # class id -> IoU
    num_images: int = 0
    num_ground_truths: int = 0
    num_detections: int = 0

    @property
    def map(self):
        if not self.per_class_ap:
            return float("nan")
        return float(np.mean(list(self.per_class_ap.values())))

    @property
    def miou(self):
        if not self.per_class_iou:
            return float("nan")
        return float(np.mean(list(self.per_class_iou.values())))

    def to_text(self):
        classes = sorted(set(self.per_class_ap) | set(self.per_class_iou))
        lines = []
        for c in classes:
            ap = self.per_class_ap.get(c)
            iou = self.per_class_iou.get(c)
            lines.append(f"{c}\t{'-' if ap is None else f'{ap:.6f}'}"
                         f"\t{'-' if iou is None else f'{iou:.6f}'}")
        lines.append(f"mAP\t{'-' if not self.per_class_ap else f'{self.map:.6f}'}")
        lines.append(f"mIoU\t{'-' if not self.per_class_iou else f'{self.miou:.6f}'}")
        return "\n".join(lines) + "\n"


def box_iou(a, b) -> float:
    """Intersection over union of two corner boxes; 0 when disjoint."""
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    if area_a <= 0 or area_b <= 0:
        warnings.warn(f"degenerate box in box_iou: {a if area_a <= 0 else b}")
        return 0.0
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (area_a + area_b - inter)


def average_precision(detections, ground_truths, iou_thresh: float = 0.5) -> float:
    """AP of one class.

    detections: list of (image_id, score, box), any order.
    ground_truths: list of (image_id, box).
    Greedy match each detection, in descending score, to the highest-IoU
    still-unmatched ground truth of its image; AP is the area under the
    precision-recall curve with precision made monotone non-increasing.
    """
    n_gt = len(ground_truths)
    if n_gt == 0:
        return 0.0
    by_image = {}
    for gi, (img, box) in enumerate(ground_truths):
        by_image.setdefault(img, []).append((gi, box))
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i][1], i))
    matched = set()
    tp = np.zeros(len(order))
    for rank, di in enumerate(order):
        img, _, box = detections[di]
        best_gi, best_iou = -1, 0.0
        for gi, gbox in by_image.get(img, []):
            if gi in matched:
                continue
            v = box_iou(box, gbox)
            if v > best_iou:
                best_gi, best_iou = gi, v
        if best_gi >= 0 and best_iou >= iou_thresh:
            matched.add(best_gi)
            tp[rank] = 1.0
    if len(order) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(order) + 1)
    # monotone-decreasing interpolation, continuous integration
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def mean_iou(pred_mask, gt_mask, num_classes: int):
    """Per-class IoU and their mean over classes present in either mask."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ag.ShapeError(
            f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if pred.max() >= num_classes or gt.max() >= num_classes:
        raise ag.ArgumentError("mask contains class id >= num_classes")
    per_class = {}
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        union = int((p | g).sum())
        if union == 0:
            continue
        per_class[c] = int((p & g).sum()) / union
    miou = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, miou


def evaluate_dataset(samples, predict_fn, num_classes: int,
                     iou_thresh: float = 0.5) -> EvalReport:
    """Aggregate detection AP and segmentation IoU over a dataset.

    predict_fn(sample) returns (detections, mask_or_None) where detections is
    a list of det_head.Detection and mask is a full-resolution class-id array.
    Segmentation counts are accumulated globally across images. Either output
    may be None to skip that task.
    """
    samples = list(samples)
    all_dets = {}    # class -> [(image_id, score, box)]
    all_gts = {}     # class -> [(image_id, box)]
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    any_seg = False
    any_det = False
    n_dets = 0
    n_gts = 0
    for img_id, sample in enumerate(samples):
        dets, mask = predict_fn(sample)
        if dets is not None:
            any_det = True
            n_dets += len(dets)
            for d in dets:
                all_dets.setdefault(d.class_id, []).append((img_id, d.score, d.box))
            for cls, box in sample.boxes:
                all_gts.setdefault(cls, []).append((img_id, box))
                n_gts += 1
        if mask is not None:
            any_seg = True
            gt = np.asarray(sample.mask)
            pred = np.asarray(mask)
            for c in range(num_classes):
                p = pred == c
                g = gt == c
                inter[c] += int((p & g).sum())
                union[c] += int((p | g).sum())
    report = EvalReport(num_images=len(samples),
                        num_ground_truths=n_gts, num_detections=n_dets)
    if any_det:
        for cls in range(1, num_classes):
            gts = all_gts.get(cls, [])
            dets = all_dets.get(cls, [])
            if not gts and not dets:
                continue
            report.per_class_ap[cls] = average_precision(dets, gts, iou_thresh)
    if any_seg:
        for c in range(num_classes):
            if union[c] > 0:
                report.per_class_iou[c] = inter[c] / union[c]
    return report
