"""Object-enhancement fusion loss, detection loss and the joint objective.

Images are ``(B, 1, H, W)`` tensors in [0, 1]. Gamma correction of the LWIR
target is applied on the 0-255 scale and renormalised.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from .dataio import BoxAnnotation, gamma_correct
from .detecthead import LOG_SIZE_CLAMP, box_iou_tensor
from .mtfe import PYRAMID_STRIDES
from .nnprims import ShapeError

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


@dataclass(frozen=True)
class LossConfig:
    sigma: float = 0.2   # object vs global fusion loss
    alpha: float = 0.5   # intensity vs gradient, global term
    beta: float = 0.5    # intensity vs gradient, object term
    gamma: float = 2.0   # LWIR gamma for the global target
    lam: float = 0.5     # detection vs fusion
    magnitude: str = "l1"  # Sobel magnitude: "l1" = |gx| + |gy|, "l2" = sqrt(gx^2 + gy^2)

    def __post_init__(self):
        for name in ("sigma", "alpha", "beta", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.magnitude not in ("l1", "l2"):
            raise ValueError(f"magnitude must be 'l1' or 'l2', got {self.magnitude!r}")


@dataclass
class LossBreakdown:
    total: float
    l_f: float
    l_det: float
    l_global: float
    l_object: float
    l_grad_g: float
    l_int_g: float
    l_grad_o: float
    l_int_o: float

    FIELDS = ("total", "l_f", "l_det", "l_global", "l_object", "l_grad_g", "l_int_g", "l_grad_o", "l_int_o")

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


class GlobalTerms(NamedTuple):
    total: Tensor
    grad: Tensor
    intensity: Tensor


class ObjectTerms(NamedTuple):
    total: Tensor
    grad: Tensor
    intensity: Tensor
    skipped: int


def _as_batch(i: Tensor) -> Tensor:
    if i.dim() == 2:
        return i[None, None]
    if i.dim() == 3:
        return i[:, None]
    return i


def sobel_grad(i: Tensor, magnitude: str = "l1") -> Tensor:
    """Sobel gradient magnitude with reflect padding; same shape as the input."""
    x = _as_batch(i)
    if x.shape[1] != 1:
        raise ShapeError(f"sobel_grad expects a single-channel image, got {tuple(i.shape)}")
    kx = _SOBEL_X.to(dtype=x.dtype, device=x.device)
    kernels = torch.stack([kx, kx.t()])[:, None]
    mode = "reflect" if min(x.shape[-2:]) > 1 else "replicate"
    g = F.conv2d(F.pad(x, (1, 1, 1, 1), mode=mode), kernels)
    gx, gy = g[:, :1], g[:, 1:]
    if magnitude == "l2":
        out = torch.sqrt(gx * gx + gy * gy + 1e-12)
    else:
        out = gx.abs() + gy.abs()
    return out.reshape(i.shape)


def threshold_target(i_sw: Tensor, i_lw: Tensor, gamma: float) -> Tensor:
    """Pixelwise mean of SWIR and gamma-corrected LWIR."""
    i_lw_g = gamma_correct(i_lw.clamp(0, 1) * 255.0, gamma) / 255.0
    return (i_sw + i_lw_g) / 2


def _check_dims(*images):
    shapes = {tuple(i.shape) for i in images}
    if len(shapes) != 1:
        raise ShapeError(f"image shapes differ: {sorted(shapes)}")


def _l1_terms(i_f, a, b, magnitude):
    grad = (sobel_grad(i_f, magnitude) - torch.maximum(sobel_grad(a, magnitude), sobel_grad(b, magnitude))).abs().mean()
    inten = (i_f - torch.maximum(a, b)).abs().mean()
    return grad, inten


def global_loss(i_f: Tensor, i_sw: Tensor, i_lw: Tensor, cfg: LossConfig = LossConfig()) -> GlobalTerms:
    _check_dims(i_f, i_sw, i_lw)
    i_th = threshold_target(i_sw, i_lw, cfg.gamma)
    grad, inten = _l1_terms(i_f, i_sw, i_th, cfg.magnitude)
    return GlobalTerms((1 - cfg.alpha) * grad + cfg.alpha * inten, grad, inten)


def plain_fusion_loss(i_f: Tensor, i_sw: Tensor, i_lw: Tensor, cfg: LossConfig = LossConfig()) -> GlobalTerms:
    """Global gradient/intensity loss against ``max(I_SW, I_LW)``, no gamma, no object term."""
    _check_dims(i_f, i_sw, i_lw)
    grad, inten = _l1_terms(i_f, i_sw, i_lw, cfg.magnitude)
    return GlobalTerms((1 - cfg.alpha) * grad + cfg.alpha * inten, grad, inten)


def object_loss(i_f: Tensor, i_sw: Tensor, i_lw: Tensor, boxes: Sequence[Sequence[BoxAnnotation]],
                cfg: LossConfig = LossConfig()) -> ObjectTerms:
    """Per-box crop losses against ``max(I_SW, I_LW)``, averaged per image then over the batch.

    ``boxes`` holds one list per batch image. Boxes one pixel thin or less are
    skipped and counted in ``skipped``; an image with no usable box contributes 0.
    """
    _check_dims(i_f, i_sw, i_lw)
    f, a, b = _as_batch(i_f), _as_batch(i_sw), _as_batch(i_lw)
    if len(boxes) != f.shape[0]:
        raise ShapeError(f"{len(boxes)} box lists for a batch of {f.shape[0]}")
    height, width = f.shape[-2:]
    zero = f.sum() * 0.0
    grads, ints, skipped = [], [], 0
    for bi, img_boxes in enumerate(boxes):
        g_sum, i_sum, n = zero, zero, 0
        for box in img_boxes:
            y0, y1, x0, x1 = box.to_pixels(height, width)
            if y1 - y0 <= 1 or x1 - x0 <= 1:
                skipped += 1
                continue
            crop = lambda t: t[bi:bi + 1, :, y0:y1, x0:x1]
            g, it = _l1_terms(crop(f), crop(a), crop(b), cfg.magnitude)
            g_sum, i_sum, n = g_sum + g, i_sum + it, n + 1
        grads.append(g_sum / n if n else zero)
        ints.append(i_sum / n if n else zero)
    grad = torch.stack(grads).mean()
    inten = torch.stack(ints).mean()
    return ObjectTerms((1 - cfg.beta) * grad + cfg.beta * inten, grad, inten, skipped)


def oe_loss(i_f: Tensor, i_sw: Tensor, i_lw: Tensor, boxes: Sequence[Sequence[BoxAnnotation]],
            cfg: LossConfig = LossConfig()) -> Tuple[Tensor, Dict[str, Tensor]]:
    g = global_loss(i_f, i_sw, i_lw, cfg)
    o = object_loss(i_f, i_sw, i_lw, boxes, cfg)
    l_f = (1 - cfg.sigma) * g.total + cfg.sigma * o.total
    parts = dict(l_global=g.total, l_object=o.total, l_grad_g=g.grad, l_int_g=g.intensity,
                 l_grad_o=o.grad, l_int_o=o.intensity)
    return l_f, parts


def build_targets(raw: Sequence[Tensor], gts: Sequence[Sequence[BoxAnnotation]], image_size: Tuple[int, int],
                  strides: Sequence[int] = PYRAMID_STRIDES):
    """Per level: objectness target map ``(B, h, w)`` and a list of ``(b, gy, gx, box)`` positives.

    A cell is positive at a level when it contains a GT centre; when several
    centres share a cell the smallest box wins.
    """
    height, width = image_size
    out = []
    for level, stride in zip(raw, strides):
        b, _, gh, gw = level.shape
        obj = torch.zeros(b, gh, gw, dtype=level.dtype)
        cells = {}
        for bi, img_gts in enumerate(gts):
            for g in sorted(img_gts, key=lambda g: -g.w * g.h):
                gx = min(gw - 1, int(g.cx * width // stride))
                gy = min(gh - 1, int(g.cy * height // stride))
                cells[(bi, gy, gx)] = (g.cx, g.cy, g.w, g.h)
        pos = sorted(cells.items())
        for (bi, gy, gx), _ in pos:
            obj[bi, gy, gx] = 1.0
        out.append((obj, [(k[0], k[1], k[2], v) for k, v in pos]))
    return out


def det_loss(raw: Sequence[Tensor], gts: Sequence[Sequence[BoxAnnotation]], image_size: Tuple[int, int],
             strides: Sequence[int] = PYRAMID_STRIDES) -> Tensor:
    """Objectness BCE over all cells plus class BCE and ``1 - IoU`` on positives, over max(1, #positives)."""
    height, width = image_size
    total = raw[0].sum() * 0.0
    n_pos = 0
    for level, stride, (obj_t, pos) in zip(raw, strides, build_targets(raw, gts, image_size, strides)):
        total = total + F.binary_cross_entropy_with_logits(level[:, 0], obj_t, reduction="sum")
        if not pos:
            continue
        bi = torch.tensor([p[0] for p in pos])
        gy = torch.tensor([p[1] for p in pos])
        gx = torch.tensor([p[2] for p in pos])
        tgt = torch.tensor([p[3] for p in pos], dtype=level.dtype)
        cell = level[bi, :, gy, gx]  # (P, 6)
        pred = torch.stack([
            (gx.to(level.dtype) + torch.sigmoid(cell[:, 2])) * stride / width,
            (gy.to(level.dtype) + torch.sigmoid(cell[:, 3])) * stride / height,
            torch.exp(cell[:, 4].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP)) * stride / width,
            torch.exp(cell[:, 5].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP)) * stride / height,
        ], dim=-1)
        total = total + F.binary_cross_entropy_with_logits(cell[:, 1], torch.ones_like(cell[:, 1]), reduction="sum")
        total = total + (1.0 - box_iou_tensor(pred, tgt)).sum()
        n_pos += len(pos)
    return total / max(1, n_pos)


def total_loss(l_f, l_det, cfg: LossConfig = LossConfig()):
    return (1 - cfg.lam) * l_f + cfg.lam * l_det


def breakdown(total, l_f, l_det, parts: Dict[str, Tensor]) -> LossBreakdown:
    f = lambda t: float(t.detach()) if torch.is_tensor(t) else float(t)
    return LossBreakdown(f(total), f(l_f), f(l_det), **{k: f(v) for k, v in parts.items()})
