"""Multi-task feature extraction shared by the fusion and detection branches.

The detection backbone here is a plain strided conv stack (widths 16/32/64 at
strides 4/8/16) with per-scale SWIR/LWIR concat-and-mix aggregation. It keeps
the interface of a YOLO-style backbone, not its internals.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import torch
from torch import Tensor, nn

from .nnprims import ConvBlock, LayerSpec, ShapeError, upsample

BASE_CHANNELS = 8
FUSION_WIDTH = 32
PYRAMID_WIDTHS = (16, 32, 64)
PYRAMID_STRIDES = (4, 8, 16)


@dataclass
class MtfeOutputs:
    f_sw: Tensor
    f_lw: Tensor
    f_sw_fus: Tensor
    f_lw_fus: Tensor
    det_pyramid: List[Tensor]
    f_det_attn: Tensor


class BaseExtractor(nn.Module):
    """Three 3x3 stride-1 convolutions producing 8-channel shallow features."""

    def __init__(self, width: int = BASE_CHANNELS, shortcut: bool = False):
        super().__init__()
        self.block = ConvBlock(1, [LayerSpec(width), LayerSpec(width), LayerSpec(width)], shortcut)

    def forward(self, image: Tensor) -> Tensor:
        return self.block(image)


class FusionExtractor(nn.Module):
    """8 -> 32 -> 8 channel refinement at full resolution; ``shortcut`` adds the input back."""

    def __init__(self, channels: int = BASE_CHANNELS, width: int = FUSION_WIDTH, shortcut: bool = False):
        super().__init__()
        self.shortcut = shortcut
        self.block = ConvBlock(channels, [LayerSpec(width), LayerSpec(channels)])

    def forward(self, f: Tensor) -> Tensor:
        y = self.block(f)
        return f + y if self.shortcut else y


class FusionFeatureAugment(nn.Module):
    """``f + proj(concat(f, f_f))`` for each modality, 1x1 projections."""

    def __init__(self, channels: int = BASE_CHANNELS):
        super().__init__()
        self.proj_sw = nn.Conv2d(2 * channels, channels, 1)
        self.proj_lw = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, f_sw: Tensor, f_lw: Tensor, f_f: Tensor) -> Tuple[Tensor, Tensor]:
        if not (f_sw.shape[-2:] == f_lw.shape[-2:] == f_f.shape[-2:]):
            raise ShapeError(f"spatial mismatch: {tuple(f_sw.shape)}, {tuple(f_lw.shape)}, {tuple(f_f.shape)}")
        return (f_sw + self.proj_sw(torch.cat([f_sw, f_f], dim=1)),
                f_lw + self.proj_lw(torch.cat([f_lw, f_f], dim=1)))


def _stem(channels: int) -> nn.ModuleList:
    w1, w2, w3 = PYRAMID_WIDTHS
    return nn.ModuleList([
        ConvBlock(channels, [LayerSpec(w1, 3, 2), LayerSpec(w1, 3, 2), LayerSpec(w1)]),
        ConvBlock(w1, [LayerSpec(w2, 3, 2), LayerSpec(w2)]),
        ConvBlock(w2, [LayerSpec(w3, 3, 2), LayerSpec(w3)]),
    ])


class DetectBackbone(nn.Module):
    """Per-modality downsampling stacks plus per-scale multimodal aggregation."""

    def __init__(self, channels: int = BASE_CHANNELS):
        super().__init__()
        self.sw_stages = _stem(channels)
        self.lw_stages = _stem(channels)
        self.mix = nn.ModuleList([ConvBlock(2 * w, [LayerSpec(w), LayerSpec(w)]) for w in PYRAMID_WIDTHS])
        self.attn_proj = nn.Conv2d(PYRAMID_WIDTHS[0], channels, 1)

    def forward(self, f_sw: Tensor, f_lw: Tensor) -> Tuple[List[Tensor], Tensor]:
        h, w = f_sw.shape[-2:]
        if h < 16 or w < 16:
            raise ShapeError(f"detection backbone needs inputs of at least 16x16, got {h}x{w}")
        pyramid = []
        x_sw, x_lw = f_sw, f_lw
        for sw_stage, lw_stage, mix in zip(self.sw_stages, self.lw_stages, self.mix):
            x_sw, x_lw = sw_stage(x_sw), lw_stage(x_lw)
            pyramid.append(mix(torch.cat([x_sw, x_lw], dim=1)))
        f_det_attn = upsample(self.attn_proj(pyramid[0]), size=(h, w))
        return pyramid, f_det_attn


class MTFE(nn.Module):
    def __init__(self, shortcut: bool = False):
        super().__init__()
        self.base_sw = BaseExtractor(shortcut=shortcut)
        self.base_lw = BaseExtractor(shortcut=shortcut)
        self.fus_sw = FusionExtractor(shortcut=shortcut)
        self.fus_lw = FusionExtractor(shortcut=shortcut)
        self.augment = FusionFeatureAugment()
        self.backbone = DetectBackbone()

    def base_extract(self, swir: Tensor, lwir: Tensor) -> Tuple[Tensor, Tensor]:
        return self.base_sw(swir), self.base_lw(lwir)

    def fusion_extract(self, f_sw: Tensor, f_lw: Tensor) -> Tuple[Tensor, Tensor]:
        return self.fus_sw(f_sw), self.fus_lw(f_lw)

    def detect(self, f_sw: Tensor, f_lw: Tensor, f_f: Tensor) -> Tuple[List[Tensor], Tensor]:
        f_sw_aug, f_lw_aug = self.augment(f_sw, f_lw, f_f)
        return self.backbone(f_sw_aug, f_lw_aug)


def base_extract(swir: Tensor, lwir: Tensor, weights: MTFE) -> Tuple[Tensor, Tensor]:
    return weights.base_extract(swir, lwir)


def fusion_extract(f: Tensor, weights: FusionExtractor) -> Tensor:
    if f.shape[1] != BASE_CHANNELS:
        raise ShapeError(f"fusion extractor expects {BASE_CHANNELS} channels, got {f.shape[1]}")
    return weights(f)


def fusion_feature_augment(f_sw, f_lw, f_f, weights: FusionFeatureAugment):
    return weights(f_sw, f_lw, f_f)


def detect_backbone(f_sw_aug, f_lw_aug, weights: DetectBackbone):
    return weights(f_sw_aug, f_lw_aug)
