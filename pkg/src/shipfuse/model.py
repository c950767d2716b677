"""The joint fusion + detection network."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import List, Optional

import torch
from torch import Tensor, nn

from .detecthead import DetectHead
from .mlcf import MLCF, FusionResult
from .mtfe import MTFE


@dataclass(frozen=True)
class AblationFlags:
    oe_loss: bool = True
    mlcf_multimodal: bool = True
    mlcf_multiscale: bool = True
    mlcf_multitask: bool = True
    ff_in_detection: bool = True

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


# Rows of the OE-loss / MLCF ablation grid plus the detection-side F_f ablation.
ABLATIONS = {
    "M1": AblationFlags(False, False, False, False),
    "M2": AblationFlags(False, True, True, True),
    "M3": AblationFlags(True, False, False, False),
    "M4": AblationFlags(True, False, True, True),
    "M5": AblationFlags(True, True, False, True),
    "M6": AblationFlags(True, True, True, False),
    "M7": AblationFlags(),
    "no_ff": AblationFlags(ff_in_detection=False),
}


@dataclass
class NetOutput:
    fusion: FusionResult
    raw: List[Tensor]
    f_det_attn: Tensor

    @property
    def i_f(self) -> Tensor:
        return self.fusion.i_f


class FusionDetectNet(nn.Module):
    def __init__(self, p: int = 4, d_p: int = 64, flags: AblationFlags = AblationFlags(),
                 cross_residual: bool = False, shortcut: bool = False):
        super().__init__()
        self.flags = flags
        self.mtfe = MTFE(shortcut=shortcut)
        self.mlcf = MLCF(p=p, d_p=d_p, cross_residual=cross_residual, multimodal=flags.mlcf_multimodal,
                         multiscale=flags.mlcf_multiscale, shortcut=shortcut)
        self.head = DetectHead()

    def forward(self, swir: Tensor, lwir: Tensor) -> NetOutput:
        f_sw, f_lw = self.mtfe.base_extract(swir, lwir)
        f_sw_fus, f_lw_fus = self.mtfe.fusion_extract(f_sw, f_lw)
        f_f = self.mlcf.preliminary(f_sw_fus, f_lw_fus)
        ff_for_det = f_f if self.flags.ff_in_detection else torch.zeros_like(f_f)
        pyramid, f_det_attn = self.mtfe.detect(f_sw, f_lw, ff_for_det)
        if not self.flags.mlcf_multitask:
            f_det_attn = torch.zeros_like(f_det_attn)
        fusion = self.mlcf.finish(f_f, f_det_attn)
        return NetOutput(fusion, self.head(pyramid), f_det_attn)
