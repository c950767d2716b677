"""Anchor-free three-scale detection head, box decoding, NMS and P/R/mAP.

Raw predictions per level are ``(B, 6, h, w)`` tensors with channels
``objectness, class, tx, ty, tw, th``. A cell at grid ``(gy, gx)`` with stride
``s`` decodes to centre ``((gx + sigmoid(tx)) * s, (gy + sigmoid(ty)) * s)``
and size ``(exp(tw) * s, exp(th) * s)`` in pixels, then to image fractions.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn

from .mtfe import PYRAMID_STRIDES, PYRAMID_WIDTHS
from .nnprims import ConvBlock, LayerSpec, ShapeError

N_OUTPUTS = 6
LOG_SIZE_CLAMP = 8.0
IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))


@dataclass(frozen=True)
class Detection:
    box: Tuple[float, float, float, float]  # cx, cy, w, h in image fractions
    score: float
    class_id: int = 0

    def sort_key(self):
        return (-self.score,) + tuple(self.box)


@dataclass(frozen=True)
class DetEvalReport:
    precision: float
    recall: float
    map50: float
    map5095: float

    def as_text(self) -> str:
        return (f"P\tR\tmAP50\tmAP50:95\n"
                f"{self.precision:.6f}\t{self.recall:.6f}\t{self.map50:.6f}\t{self.map5095:.6f}")


class DetectHead(nn.Module):
    def __init__(self, widths: Sequence[int] = PYRAMID_WIDTHS):
        super().__init__()
        self.stems = nn.ModuleList([ConvBlock(w, [LayerSpec(w)]) for w in widths])
        self.outs = nn.ModuleList([nn.Conv2d(w, N_OUTPUTS, 1) for w in widths])

    def forward(self, pyramid: Sequence[Tensor]) -> List[Tensor]:
        if len(pyramid) != len(self.outs):
            raise ShapeError(f"expected {len(self.outs)} pyramid levels, got {len(pyramid)}")
        return [out(stem(f)) for f, stem, out in zip(pyramid, self.stems, self.outs)]


def head_forward(det_pyramid: Sequence[Tensor], weights: DetectHead) -> List[Tensor]:
    return weights(det_pyramid)


def decode_level(raw: Tensor, stride: int, image_size: Tuple[int, int]) -> Tuple[Tensor, Tensor]:
    """Boxes ``(B, h*w, 4)`` as fractional ``cx, cy, w, h`` and scores ``(B, h*w)``."""
    b, c, gh, gw = raw.shape
    if c != N_OUTPUTS:
        raise ShapeError(f"raw level must have {N_OUTPUTS} channels, got {c}")
    height, width = image_size
    gy, gx = torch.meshgrid(torch.arange(gh, dtype=raw.dtype), torch.arange(gw, dtype=raw.dtype), indexing="ij")
    cx = (gx + torch.sigmoid(raw[:, 2])) * stride / width
    cy = (gy + torch.sigmoid(raw[:, 3])) * stride / height
    w = torch.exp(raw[:, 4].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP)) * stride / width
    h = torch.exp(raw[:, 5].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP)) * stride / height
    boxes = torch.stack([cx, cy, w, h], dim=-1).reshape(b, gh * gw, 4)
    scores = (torch.sigmoid(raw[:, 0]) * torch.sigmoid(raw[:, 1])).reshape(b, gh * gw)
    return boxes, scores


def box_iou(a, b) -> float:
    """IoU of two ``(cx, cy, w, h)`` boxes."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def box_iou_tensor(a: Tensor, b: Tensor, eps: float = 1e-9) -> Tensor:
    """Elementwise IoU of ``(..., 4)`` ``cx, cy, w, h`` tensors."""
    a0, a1 = a[..., :2] - a[..., 2:] / 2, a[..., :2] + a[..., 2:] / 2
    b0, b1 = b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2
    wh = (torch.minimum(a1, b1) - torch.maximum(a0, b0)).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / (union + eps)


def nms(dets: Iterable[Detection], iou_thresh: float) -> List[Detection]:
    """Greedy NMS; suppresses boxes whose IoU with a kept box is strictly greater than ``iou_thresh``."""
    kept: List[Detection] = []
    for d in sorted(dets, key=Detection.sort_key):
        if all(box_iou(d.box, k.box) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


def decode_and_nms(raw: Sequence[Tensor], conf_thresh: float, iou_thresh: float,
                   image_size: Tuple[int, int], strides: Sequence[int] = PYRAMID_STRIDES) -> List[List[Detection]]:
    """Per-image detection lists for a batch of raw head outputs."""
    if not (0 <= conf_thresh <= 1 and 0 <= iou_thresh <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    with torch.no_grad():
        decoded = [decode_level(r, s, image_size) for r, s in zip(raw, strides)]
        boxes = torch.cat([d[0] for d in decoded], dim=1).double().numpy()
        scores = torch.cat([d[1] for d in decoded], dim=1).double().numpy()
    out = []
    for bi in range(boxes.shape[0]):
        keep = np.nonzero(scores[bi] >= conf_thresh)[0]
        cands = [Detection(tuple(float(v) for v in boxes[bi, k]), float(scores[bi, k])) for k in keep]
        out.append(nms(cands, iou_thresh))
    return out


def _match(dets: Sequence[Detection], gts: Sequence, thr: float) -> List[bool]:
    """Greedy match in descending score order; each GT claims at most one detection."""
    taken = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou = -1, thr
        for gi, g in enumerate(gts):
            if taken[gi]:
                continue
            iou = box_iou(d.box, g)
            if iou >= best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            taken[best] = True
        flags.append(best >= 0)
    return flags


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope, all-point interpolation."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _gt_boxes(gts) -> List[Tuple[float, float, float, float]]:
    return [(g.cx, g.cy, g.w, g.h) if hasattr(g, "cx") else tuple(g) for g in gts]


def ap_at(dets: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence], thr: float) -> float:
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return 0.0
    records = []
    for img_id in sorted(set(dets) | set(gts)):
        ordered = sorted(dets.get(img_id, []), key=Detection.sort_key)
        for d, tp in zip(ordered, _match(ordered, _gt_boxes(gts.get(img_id, [])), thr)):
            records.append((d.sort_key(), img_id, tp))
    if not records:
        return 0.0
    records.sort(key=lambda r: (r[0], r[1]))
    tp = np.array([r[2] for r in records], dtype=float)
    ctp, cfp = np.cumsum(tp), np.cumsum(1.0 - tp)
    return average_precision(ctp / n_gt, ctp / (ctp + cfp))


def evaluate(dets: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence],
             iou_list: Sequence[float] = IOU_THRESHOLDS, conf: float = 0.25) -> DetEvalReport:
    """P/R at ``conf`` and IoU 0.5; mAP50 and mAP averaged over ``iou_list``."""
    aps = [ap_at(dets, gts, t) for t in iou_list]
    map50 = ap_at(dets, gts, 0.5)
    n_gt = sum(len(v) for v in gts.values())
    tp = n_det = 0
    for img_id in sorted(set(dets) | set(gts)):
        kept = sorted((d for d in dets.get(img_id, []) if d.score >= conf), key=Detection.sort_key)
        tp += sum(_match(kept, _gt_boxes(gts.get(img_id, [])), 0.5))
        n_det += len(kept)
    precision = tp / n_det if n_det else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return DetEvalReport(precision, recall, map50, float(np.mean(aps)) if aps else 0.0)


def format_detections(img_id: str, dets: Sequence[Detection]) -> str:
    return "".join(f"{img_id} {d.class_id} {d.score:.6f} {d.box[0]:.6f} {d.box[1]:.6f} "
                   f"{d.box[2]:.6f} {d.box[3]:.6f}\n" for d in dets)


def write_detections(path: str, img_id: str, dets: Sequence[Detection]) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_detections(img_id, dets))


def parse_detections(text: str, source: str = "<dets>") -> Dict[str, List[Detection]]:
    """Parse ``id class score cx cy w h`` lines.

    Plain ``class cx cy w h`` label lines are accepted as score-1 detections
    with the id taken from ``source``'s file stem.
    """
    out: Dict[str, List[Detection]] = {}
    stem = os.path.splitext(os.path.basename(source))[0]
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        try:
            if len(parts) == 7:
                img_id, cls, score, box = parts[0], int(parts[1]), float(parts[2]), parts[3:]
            elif len(parts) == 5:
                img_id, cls, score, box = stem, int(parts[0]), 1.0, parts[1:]
            else:
                raise ValueError(f"expected 7 fields, got {len(parts)}")
            det = Detection(tuple(float(v) for v in box), score, cls)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
        out.setdefault(img_id, []).append(det)
    return out


def read_detections(path: str) -> Dict[str, List[Detection]]:
    with open(path, encoding="utf-8") as fh:
        return parse_detections(fh.read(), path)
