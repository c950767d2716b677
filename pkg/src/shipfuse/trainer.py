"""Joint end-to-end training, learning-rate schedule, config files and checkpoints."""
from __future__ import annotations

import dataclasses
import io
import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .dataio import BoxAnnotation, ImagePair
from .detecthead import Detection, decode_and_nms, evaluate, DetEvalReport
from .losses import (LossBreakdown, LossConfig, breakdown, det_loss, oe_loss, plain_fusion_loss, total_loss)
from .model import AblationFlags, FusionDetectNet
from .nnprims import NumericError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warmup_iters: int = 500
    total_iters: int = 2000
    batch_size: int = 4
    crop: int = 64  # random square crops when images are larger; 0 disables
    seed: int = 0
    patch_p: int = 4
    d_p: int = 64
    cross_residual: bool = False
    conv_shortcut: bool = False
    checkpoint_every: int = 0  # 0 = final checkpoint only
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise ValueError(f"need 0 <= warmup_iters ({self.warmup_iters}) <= total_iters ({self.total_iters})")

    def flat(self) -> Dict[str, object]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                out.update({k: getattr(v, k) for k in (g.name for g in dataclasses.fields(v))})
            else:
                out[f.name] = v
        return out

    def replace(self, **overrides) -> "TrainConfig":
        return config_from_flat({**self.flat(), **overrides})


CONFIG_DOCS = {
    "lr": "peak learning rate",
    "warmup_iters": "linear warm-up length from 0 to lr",
    "total_iters": "optimizer steps; lr decays linearly to 0 after warm-up",
    "batch_size": "pairs per step",
    "crop": "square random-crop size for larger images (0 = full image)",
    "seed": "seeds weight init and batch order",
    "patch_p": "attention patch size",
    "d_p": "attention projection width",
    "cross_residual": "add the query sequence back after cross-attention",
    "conv_shortcut": "identity shortcuts on width-preserving stride-1 conv layers",
    "checkpoint_every": "write a checkpoint every N steps (0 = final only)",
    "sigma": "object-loss weight in the fusion loss",
    "alpha": "intensity weight in the global loss",
    "beta": "intensity weight in the object loss",
    "gamma": "LWIR gamma for the global target",
    "lam": "detection-loss weight in the joint objective",
    "magnitude": "Sobel magnitude, l1 or l2",
    "oe_loss": "object-enhancement loss (false = plain max-of-sources loss)",
    "mlcf_multimodal": "cross-attention fusion (false = concat + decoder)",
    "mlcf_multiscale": "low-scale fusion branch",
    "mlcf_multitask": "detection feature residual into the fusion branch",
    "ff_in_detection": "feed the fused feature into detection augmentation",
}


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return type(like)(value)


def config_from_flat(values: Dict[str, object]) -> TrainConfig:
    defaults = TrainConfig().flat()
    unknown = set(values) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    merged = {k: _coerce(values.get(k, v), v) for k, v in defaults.items()}
    loss_keys = {f.name for f in dataclasses.fields(LossConfig)}
    flag_keys = {f.name for f in dataclasses.fields(AblationFlags)}
    return TrainConfig(
        loss=LossConfig(**{k: merged.pop(k) for k in list(merged) if k in loss_keys}),
        ablation=AblationFlags(**{k: merged.pop(k) for k in list(merged) if k in flag_keys}),
        **merged,
    )


def parse_config(text: str) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k] = v
    return config_from_flat(values)


def load_config(path: str) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"# {CONFIG_DOCS[k]}\n{k} = {v}\n" for k, v in cfg.flat().items())


def lr_at(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step < cfg.total_iters:
        raise ValueError(f"step {step} outside [0, {cfg.total_iters})")
    if step < cfg.warmup_iters:
        return cfg.lr * step / cfg.warmup_iters
    return cfg.lr * ((cfg.total_iters - step) / (cfg.total_iters - cfg.warmup_iters))


def build_model(cfg: TrainConfig) -> FusionDetectNet:
    torch.manual_seed(cfg.seed)
    return FusionDetectNet(p=cfg.patch_p, d_p=cfg.d_p, flags=cfg.ablation, cross_residual=cfg.cross_residual,
                           shortcut=cfg.conv_shortcut)


def to_tensors(pairs: Sequence[ImagePair]):
    swir = torch.from_numpy(np.stack([p.swir for p in pairs]).astype(np.float32) / 255.0)[:, None]
    lwir = torch.from_numpy(np.stack([p.lwir for p in pairs]).astype(np.float32) / 255.0)[:, None]
    return swir, lwir, [list(p.boxes) for p in pairs]


def random_crop(pair: ImagePair, size: int, rng: np.random.Generator) -> ImagePair:
    """Crop to ``size x size``; boxes are clipped and dropped if under 2 px."""
    h, w = pair.shape
    if size <= 0 or (h <= size and w <= size):
        return pair
    ch, cw = min(size, h), min(size, w)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    boxes = []
    for b in pair.boxes:
        by0, by1, bx0, bx1 = b.to_pixels(h, w)
        by0, by1 = max(by0, y0) - y0, min(by1, y0 + ch) - y0
        bx0, bx1 = max(bx0, x0) - x0, min(bx1, x0 + cw) - x0
        if by1 - by0 >= 2 and bx1 - bx0 >= 2:
            boxes.append(BoxAnnotation(b.class_id, (bx0 + bx1) / 2 / cw, (by0 + by1) / 2 / ch,
                                       (bx1 - bx0) / cw, (by1 - by0) / ch))
    return ImagePair(pair.id, pair.swir[y0:y0 + ch, x0:x0 + cw], pair.lwir[y0:y0 + ch, x0:x0 + cw], boxes)


def compute_losses(model: FusionDetectNet, swir, lwir, boxes, cfg: TrainConfig):
    """Forward pass plus the joint objective; returns ``(total, LossBreakdown, output)``."""
    out = model(swir, lwir)
    if cfg.ablation.oe_loss:
        l_f, parts = oe_loss(out.i_f, swir, lwir, boxes, cfg.loss)
    else:
        g = plain_fusion_loss(out.i_f, swir, lwir, cfg.loss)
        zero = g.total * 0.0
        l_f = g.total
        parts = dict(l_global=g.total, l_object=zero, l_grad_g=g.grad, l_int_g=g.intensity,
                     l_grad_o=zero, l_int_o=zero)
    l_det = det_loss(out.raw, boxes, tuple(swir.shape[-2:]))
    total = total_loss(l_f, l_det, cfg.loss)
    return total, breakdown(total, l_f, l_det, parts), out


LOG_FIELDS = ("step",) + LossBreakdown.FIELDS + ("lr",)


def format_log_line(step: int, b: LossBreakdown, lr: float) -> str:
    return "\t".join([str(step)] + [f"{getattr(b, k):.10e}" for k in LossBreakdown.FIELDS] + [f"{lr:.10e}"])


@dataclass
class TrainResult:
    model: FusionDetectNet
    config: TrainConfig
    log_lines: List[str]
    history: List[LossBreakdown]
    checkpoints: List[str]


def train(dataset: Sequence[ImagePair], cfg: TrainConfig, out_dir: Optional[str] = None,
          model: Optional[FusionDetectNet] = None,
          on_step: Optional[Callable[[int, LossBreakdown], None]] = None) -> TrainResult:
    """Adam on the joint objective for ``cfg.total_iters`` steps.

    Batches are drawn from seeded per-epoch permutations of ``dataset``. With
    ``out_dir`` set, ``train_log.tsv`` and ``checkpoint_<step>.pt`` /
    ``checkpoint_final.pt`` are written there.
    """
    if not dataset:
        raise ValueError("empty training set")
    model = build_model(cfg) if model is None else model
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(cfg.seed)
    order: List[int] = []
    log_lines = ["\t".join(LOG_FIELDS)]
    history: List[LossBreakdown] = []
    checkpoints: List[str] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for step in range(cfg.total_iters):
        idx = []
        while len(idx) < cfg.batch_size:
            if not order:
                order = list(rng.permutation(len(dataset)))
            idx.append(order.pop(0))
        batch = [random_crop(dataset[i], cfg.crop, rng) for i in idx]
        swir, lwir, boxes = to_tensors(batch)

        lr = lr_at(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        try:
            total, parts, _ = compute_losses(model, swir, lwir, boxes, cfg)
        except NumericError as exc:
            raise TrainingDiverged(f"non-finite activations at step {step}: {exc}") from None
        if not torch.isfinite(total):
            log.error("non-finite loss at step %d", step)
            raise TrainingDiverged(f"non-finite loss at step {step}")
        total.backward()
        opt.step()

        history.append(parts)
        log_lines.append(format_log_line(step, parts, lr))
        if on_step is not None:
            on_step(step, parts)
        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            path = os.path.join(out_dir, f"checkpoint_{step + 1:06d}.pt")
            save_checkpoint(path, model, cfg, step + 1)
            checkpoints.append(path)

    if out_dir:
        path = os.path.join(out_dir, "checkpoint_final.pt")
        save_checkpoint(path, model, cfg, cfg.total_iters)
        checkpoints.append(path)
        with open(os.path.join(out_dir, "train_log.tsv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(log_lines) + "\n")
    model.eval()
    return TrainResult(model, cfg, log_lines, history, checkpoints)


def save_checkpoint(path: str, model: FusionDetectNet, cfg: TrainConfig, step: int) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.flat(),
        "step": step,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str, cfg: Optional[TrainConfig] = None) -> Tuple[FusionDetectNet, TrainConfig, int]:
    """Rebuild the model from a checkpoint.

    If ``cfg`` is given with different ablation flags, the checkpoint's flags
    win and a warning is issued; its other fields are ignored.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt or truncated checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has checkpoint format version {payload['format_version']}, "
                              f"this build reads version {CHECKPOINT_VERSION}")
    ckpt_cfg = config_from_flat(payload["config"])
    if cfg is not None and cfg.ablation != ckpt_cfg.ablation:
        warnings.warn(f"ablation flags differ from the checkpoint; using the checkpoint's "
                      f"{ckpt_cfg.ablation.as_dict()}")
    model = FusionDetectNet(p=ckpt_cfg.patch_p, d_p=ckpt_cfg.d_p, flags=ckpt_cfg.ablation,
                            cross_residual=ckpt_cfg.cross_residual, shortcut=ckpt_cfg.conv_shortcut)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, ckpt_cfg, int(payload["step"])


@torch.no_grad()
def fuse_pairs(model: FusionDetectNet, pairs: Sequence[ImagePair]):
    """Fused images as float arrays in [0, 1], one per pair (evaluated one at a time)."""
    model.eval()
    out = []
    for p in pairs:
        swir, lwir, _ = to_tensors([p])
        out.append(model(swir, lwir).i_f[0, 0].double().numpy())
    return out


@torch.no_grad()
def detect_pairs(model: FusionDetectNet, pairs: Sequence[ImagePair], conf_thresh: float = 0.001,
                 iou_thresh: float = 0.5) -> Dict[str, List[Detection]]:
    model.eval()
    out = {}
    for p in pairs:
        swir, lwir, _ = to_tensors([p])
        raw = model(swir, lwir).raw
        out[p.id] = decode_and_nms(raw, conf_thresh, iou_thresh, p.shape)[0]
    return out


@torch.no_grad()
def dataset_losses(model: FusionDetectNet, pairs: Sequence[ImagePair], cfg: TrainConfig) -> LossBreakdown:
    """Joint-objective breakdown over the whole of ``pairs`` as one batch (OE loss always on)."""
    model.eval()
    swir, lwir, boxes = to_tensors(pairs)
    eval_cfg = cfg.replace(oe_loss=True)
    _, parts, _ = compute_losses(model, swir, lwir, boxes, eval_cfg)
    return parts


def detection_report(model: FusionDetectNet, pairs: Sequence[ImagePair]) -> DetEvalReport:
    dets = detect_pairs(model, pairs)
    return evaluate(dets, {p.id: p.boxes for p in pairs})
