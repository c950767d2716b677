"""Patch sequences, single-head patch attention, and conv layer stacks.

Feature maps are plain ``(B, C, H, W)`` tensors throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class PatchSequence:
    """``patches`` is ``(B, N, d)`` with ``N = rows * cols`` and ``d = p * p * C``."""

    patches: Tensor
    grid: Tuple[int, int, int, int]  # rows, cols, p, channels

    @property
    def n(self) -> int:
        return self.patches.shape[1]

    @property
    def d(self) -> int:
        return self.patches.shape[2]


def patchify(f: Tensor, p: int) -> PatchSequence:
    """Cut ``f`` into non-overlapping ``p x p`` patches, row-major over the grid.

    Each patch vector is flattened channel-major, i.e. in ``(C, p, p)`` order.
    """
    if f.dim() != 4:
        raise ShapeError(f"expected a (B, C, H, W) tensor, got shape {tuple(f.shape)}")
    b, c, h, w = f.shape
    if h % p or w % p:
        need_h, need_w = (-h) % p, (-w) % p
        raise ShapeError(f"{h}x{w} map is not divisible by patch size {p}; "
                         f"pad by {need_h} rows and {need_w} columns")
    rows, cols = h // p, w // p
    x = f.reshape(b, c, rows, p, cols, p).permute(0, 2, 4, 1, 3, 5)
    return PatchSequence(x.reshape(b, rows * cols, c * p * p), (rows, cols, p, c))


def fold(s: PatchSequence) -> Tensor:
    rows, cols, p, c = s.grid
    b, n, d = s.patches.shape
    if n != rows * cols or d != c * p * p:
        raise ShapeError(f"patches {tuple(s.patches.shape)} inconsistent with grid {s.grid}")
    x = s.patches.reshape(b, rows, cols, c, p, p).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, c, rows * p, cols * p)


def pad_to_multiple(f: Tensor, m: int) -> Tuple[Tensor, Tuple[int, int]]:
    """Reflect-pad bottom/right so H and W become multiples of ``m``."""
    h, w = f.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        f = F.pad(f, (0, pw, 0, ph), mode=mode)
    return f, (h, w)


def crop_to(f: Tensor, size: Tuple[int, int]) -> Tensor:
    return f[..., : size[0], : size[1]]


def downsample(f: Tensor) -> Tensor:
    return F.avg_pool2d(f, 2)


def upsample(f: Tensor, size: Optional[Tuple[int, int]] = None) -> Tensor:
    if size is None:
        size = (f.shape[-2] * 2, f.shape[-1] * 2)
    return F.interpolate(f, size=size, mode="bilinear", align_corners=False)


class MLP(nn.Module):
    """Two affine layers with GELU between, added back onto the input."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.fc2(F.gelu(self.fc1(x)))


class PatchAttention(nn.Module):
    """Single-head scaled dot-product attention over patch vectors, then an MLP.

    Q, K and V project ``dim -> d_p``; ``proj`` maps the attended values back to
    ``dim``. With ``residual=True`` the query sequence is added to the attention
    term before the MLP (self-attention form); with ``residual=False`` the
    attention term alone feeds the MLP (cross-attention form).
    """

    def __init__(self, dim: int, d_p: int = 64, residual: bool = True, mlp_hidden: Optional[int] = None):
        super().__init__()
        self.dim, self.d_p, self.residual = dim, d_p, residual
        self.q = nn.Linear(dim, d_p)
        self.k = nn.Linear(dim, d_p)
        self.v = nn.Linear(dim, d_p)
        self.proj = nn.Linear(d_p, dim)
        self.mlp = MLP(dim, mlp_hidden or 2 * d_p)

    def weights(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        scores = self.q(q_in) @ self.k(kv_in).transpose(-2, -1) / math.sqrt(self.d_p)
        return torch.softmax(scores, dim=-1)

    def attend(self, q_in: Tensor, kv_in: Tensor) -> Tuple[Tensor, Tensor]:
        """Pre-MLP output and the attention matrix."""
        if q_in.shape[-1] != self.dim or kv_in.shape[-1] != self.dim:
            raise ShapeError(f"patch dim must be {self.dim}, got {q_in.shape[-1]} and {kv_in.shape[-1]}")
        if q_in.shape[:-1] != kv_in.shape[:-1]:
            raise ShapeError(f"query {tuple(q_in.shape)} and key/value {tuple(kv_in.shape)} "
                             "sequences differ in length")
        attn = self.weights(q_in, kv_in)
        out = self.proj(attn @ self.v(kv_in))
        if self.residual:
            out = q_in + out
        return out, attn

    def forward(self, q_in: Tensor, kv_in: Optional[Tensor] = None) -> Tensor:
        out, _ = self.attend(q_in, q_in if kv_in is None else kv_in)
        out = self.mlp(out)
        if not torch.isfinite(out).all():
            raise NumericError("non-finite attention output; check the weights")
        return out


def self_attend(s: PatchSequence, params: PatchAttention) -> PatchSequence:
    return PatchSequence(params(s.patches), s.grid)


def cross_attend(q_seq: PatchSequence, kv_seq: PatchSequence, params: PatchAttention) -> PatchSequence:
    if q_seq.n != kv_seq.n:
        raise ShapeError(f"query has {q_seq.n} patches, key/value has {kv_seq.n}")
    return PatchSequence(params(q_seq.patches, kv_seq.patches), q_seq.grid)


class LayerSpec(NamedTuple):
    out_channels: int
    kernel: int = 3
    stride: int = 1
    activation: Optional[str] = "silu"


_ACTIVATIONS = {
    None: nn.Identity,
    "none": nn.Identity,
    "relu": nn.ReLU,
    "silu": nn.SiLU,
    "gelu": nn.GELU,
    "tanh": nn.Tanh,
    "sigmoid": nn.Sigmoid,
    "lrelu": lambda: nn.LeakyReLU(0.1),
}


class _ConvLayer(nn.Module):
    def __init__(self, in_channels: int, spec: LayerSpec, shortcut: bool):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, spec.out_channels, spec.kernel, spec.stride, spec.kernel // 2)
        self.act = _ACTIVATIONS[spec.activation]()
        self.shortcut = shortcut and spec.stride == 1 and in_channels == spec.out_channels

    def forward(self, x: Tensor) -> Tensor:
        y = self.act(self.conv(x))
        return x + y if self.shortcut else y


class ConvBlock(nn.Module):
    """Stack of 2-D convolutions, zero-padded by ``kernel // 2``.

    Stride-1 layers preserve the spatial size; stride-``s`` layers give
    ``ceil(H / s)``. With ``shortcut=True`` every stride-1 layer whose input
    and output widths agree adds its input back (``x + act(conv(x))``).
    """

    def __init__(self, in_channels: int, layers: Sequence[LayerSpec], shortcut: bool = False):
        super().__init__()
        self.in_channels = in_channels
        mods = []
        c = in_channels
        for spec in layers:
            spec = LayerSpec(*spec)
            mods.append(_ConvLayer(c, spec, shortcut))
            c = spec.out_channels
        self.layers = nn.Sequential(*mods)
        self.out_channels = c

    def forward(self, f: Tensor) -> Tensor:
        if f.dim() != 4 or f.shape[1] != self.in_channels:
            raise ShapeError(f"conv block expects {self.in_channels} input channels, got shape {tuple(f.shape)}")
        return self.layers(f)

    def convs(self):
        return [m.conv for m in self.layers]


def conv_block(f: Tensor, block: ConvBlock) -> Tensor:
    return block(f)


def zero_(module: nn.Module) -> nn.Module:
    """Zero every parameter of ``module`` in place."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module
