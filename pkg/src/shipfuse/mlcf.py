"""Multi-level cross fusion: three patch-attention fusion blocks over two scales.

``F_f_H = MFA1(a, b)``, ``F_f_L = up(MFA2(down(a), down(b)))``,
``F_f = MFA3(F_f_H, F_f_L)``, then the detection feature is added residually
and the sum is decoded to a one-channel image in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor, nn

from .nnprims import (ConvBlock, LayerSpec, PatchAttention, ShapeError, crop_to, cross_attend, downsample, fold,
                      pad_to_multiple, patchify, self_attend, upsample)

CHANNELS = 8
DECODER_TRACE = (16, 16, 8, 8)


@dataclass
class FusionResult:
    f_f: Tensor
    f_f_det: Tensor
    i_f: Tensor


class MFABlock(nn.Module):
    """Conv, patchify, self-attend each branch, cross-attend both ways, fold, decode.

    ``multimodal=False`` skips the attention stages: the two conv outputs are
    concatenated and decoded directly.
    """

    def __init__(self, channels: int = CHANNELS, p: int = 4, d_p: int = 64,
                 cross_residual: bool = False, multimodal: bool = True, shortcut: bool = False):
        super().__init__()
        self.p, self.multimodal = p, multimodal
        dim = p * p * channels
        self.conv_a = ConvBlock(channels, [LayerSpec(channels), LayerSpec(channels)], shortcut)
        self.conv_b = ConvBlock(channels, [LayerSpec(channels), LayerSpec(channels)], shortcut)
        self.self_a = PatchAttention(dim, d_p, residual=True)
        self.self_b = PatchAttention(dim, d_p, residual=True)
        self.cross_a = PatchAttention(dim, d_p, residual=cross_residual)
        self.cross_b = PatchAttention(dim, d_p, residual=cross_residual)
        c1, c2, c3, c4 = DECODER_TRACE
        self.decoder = ConvBlock(2 * channels, [LayerSpec(c1), LayerSpec(c2), LayerSpec(c3), LayerSpec(c4, activation=None)],
                                 shortcut)

    def fused_halves(self, a: Tensor, b: Tensor):
        """The two folded cross-attention outputs (before concatenation)."""
        if a.shape != b.shape:
            raise ShapeError(f"MFA inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
        xa, xb = self.conv_a(a), self.conv_b(b)
        if not self.multimodal:
            return xa, xb
        sa, sb = patchify(xa, self.p), patchify(xb, self.p)
        sa, sb = self_attend(sa, self.self_a), self_attend(sb, self.self_b)
        ca = cross_attend(sa, sb, self.cross_a)
        cb = cross_attend(sb, sa, self.cross_b)
        return fold(ca), fold(cb)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        ha, hb = self.fused_halves(a, b)
        return self.decoder(torch.cat([ha, hb], dim=1))


def mfa_block(a: Tensor, b: Tensor, w: MFABlock) -> Tensor:
    return w(a, b)


class FusionDecoder(nn.Module):
    """8 -> 8 -> 4 -> 1 conv stack with a sigmoid squash."""

    def __init__(self, channels: int = CHANNELS, shortcut: bool = False):
        super().__init__()
        self.block = ConvBlock(channels, [LayerSpec(8), LayerSpec(4), LayerSpec(1, activation=None)], shortcut)

    def forward(self, f: Tensor) -> Tensor:
        return torch.sigmoid(self.block(f))


def fusion_decode(f: Tensor, weights: FusionDecoder) -> Tensor:
    return weights(f)


class MLCF(nn.Module):
    def __init__(self, p: int = 4, d_p: int = 64, cross_residual: bool = False,
                 multimodal: bool = True, multiscale: bool = True, shortcut: bool = False):
        super().__init__()
        self.p, self.multiscale = p, multiscale
        kw = dict(p=p, d_p=d_p, cross_residual=cross_residual, multimodal=multimodal, shortcut=shortcut)
        self.mfa_high = MFABlock(**kw)
        self.mfa_low = MFABlock(**kw)
        self.mfa_scale = MFABlock(**kw)
        self.decoder = FusionDecoder(shortcut=shortcut)

    def preliminary(self, f_sw_fus: Tensor, f_lw_fus: Tensor) -> Tensor:
        """``F_f`` before the detection residual, at the input resolution."""
        if f_sw_fus.shape != f_lw_fus.shape:
            raise ShapeError(f"fusion inputs differ: {tuple(f_sw_fus.shape)} vs {tuple(f_lw_fus.shape)}")
        a, size = pad_to_multiple(f_sw_fus, 2 * self.p)
        b, _ = pad_to_multiple(f_lw_fus, 2 * self.p)
        f_high = self.mfa_high(a, b)
        if not self.multiscale:
            return crop_to(f_high, size)
        f_low = upsample(self.mfa_low(downsample(a), downsample(b)), size=a.shape[-2:])
        return crop_to(self.mfa_scale(f_high, f_low), size)

    def finish(self, f_f: Tensor, f_det_attn: Optional[Tensor]) -> FusionResult:
        if f_det_attn is None:
            f_f_det = f_f
        else:
            if f_det_attn.shape != f_f.shape:
                raise ShapeError(f"detection feature {tuple(f_det_attn.shape)} does not match F_f {tuple(f_f.shape)}")
            f_f_det = f_f + f_det_attn
        return FusionResult(f_f, f_f_det, self.decoder(f_f_det))

    def forward(self, f_sw_fus: Tensor, f_lw_fus: Tensor, f_det_attn: Optional[Tensor]) -> FusionResult:
        return self.finish(self.preliminary(f_sw_fus, f_lw_fus), f_det_attn)


def mlcf_forward(f_sw_fus: Tensor, f_lw_fus: Tensor, f_det_attn: Optional[Tensor], weights: MLCF) -> FusionResult:
    return weights(f_sw_fus, f_lw_fus, f_det_attn)
