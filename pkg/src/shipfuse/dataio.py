"""Registered SWIR/LWIR pairs on disk, synthetic maritime scenes, and splits.

Dataset layout::

    <root>/swir/<id>.png     8-bit single channel
    <root>/lwir/<id>.png     8-bit single channel, same size as swir
    <root>/labels/<id>.txt   optional, one ``class cx cy w h`` line per ship
    <root>/manifest.txt      optional, one id per line
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter


class DataError(Exception):
    pass


class RegistrationError(DataError):
    pass


class LabelParseError(DataError):
    pass


@dataclass(frozen=True)
class BoxAnnotation:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive size, got w={self.w}, h={self.h}")

    def clamped(self) -> "BoxAnnotation":
        x0 = max(0.0, self.cx - self.w / 2)
        y0 = max(0.0, self.cy - self.h / 2)
        x1 = min(1.0, self.cx + self.w / 2)
        y1 = min(1.0, self.cy + self.h / 2)
        if x0 > 0 and y0 > 0 and x1 < 1 and y1 < 1:
            return self
        return BoxAnnotation(self.class_id, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def to_pixels(self, height: int, width: int):
        """Integer pixel extent ``(y0, y1, x0, x1)``, half-open, clipped to the image."""
        x0 = int(round((self.cx - self.w / 2) * width))
        x1 = int(round((self.cx + self.w / 2) * width))
        y0 = int(round((self.cy - self.h / 2) * height))
        y1 = int(round((self.cy + self.h / 2) * height))
        return max(0, y0), min(height, y1), max(0, x0), min(width, x1)

    def to_line(self) -> str:
        return f"{self.class_id} {self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"


@dataclass
class ImagePair:
    id: str
    swir: np.ndarray
    lwir: np.ndarray
    boxes: List[BoxAnnotation] = field(default_factory=list)

    def __post_init__(self):
        if self.swir.ndim != 2 or self.lwir.ndim != 2:
            raise DataError(f"{self.id}: images must be single channel 2-D arrays")
        if self.swir.shape != self.lwir.shape:
            raise RegistrationError(
                f"{self.id}: SWIR {self.swir.shape[1]}x{self.swir.shape[0]} and "
                f"LWIR {self.lwir.shape[1]}x{self.lwir.shape[0]} are not registered"
            )
        for name, img in (("swir", self.swir), ("lwir", self.lwir)):
            if img.size and (img.min() < 0 or img.max() > 255):
                raise DataError(f"{self.id}: {name} intensities outside [0, 255]")

    @property
    def shape(self):
        return self.swir.shape


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: List[str]
    test_ids: List[str]


def parse_labels(text: str, source: str = "<labels>") -> List[BoxAnnotation]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise LabelParseError(f"{source}:{lineno}: expected 'class cx cy w h', got {line!r}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
        except ValueError as exc:
            raise LabelParseError(f"{source}:{lineno}: {exc}") from None
        if not (w > 0 and h > 0):
            raise LabelParseError(f"{source}:{lineno}: non-positive box size")
        boxes.append(BoxAnnotation(cls, cx, cy, w, h).clamped())
    return boxes


def read_png(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    if arr.size == 0:
        raise DataError(f"empty image {path}")
    return arr


def write_png(path: str, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def load_pair(root_dir: str, id: str) -> ImagePair:
    swir = read_png(os.path.join(root_dir, "swir", f"{id}.png"))
    lwir = read_png(os.path.join(root_dir, "lwir", f"{id}.png"))
    label_path = os.path.join(root_dir, "labels", f"{id}.txt")
    boxes: List[BoxAnnotation] = []
    if os.path.exists(label_path):
        with open(label_path, encoding="utf-8") as fh:
            boxes = parse_labels(fh.read(), label_path)
    return ImagePair(id, swir, lwir, boxes)


def save_pair(root_dir: str, pair: ImagePair) -> None:
    write_png(os.path.join(root_dir, "swir", f"{pair.id}.png"), pair.swir)
    write_png(os.path.join(root_dir, "lwir", f"{pair.id}.png"), pair.lwir)
    os.makedirs(os.path.join(root_dir, "labels"), exist_ok=True)
    with open(os.path.join(root_dir, "labels", f"{pair.id}.txt"), "w", encoding="utf-8") as fh:
        for box in pair.boxes:
            fh.write(box.to_line() + "\n")


def read_manifest(path: str) -> List[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def write_manifest(path: str, ids: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{i}\n" for i in ids)


def list_ids(root_dir: str) -> List[str]:
    """Ids from ``manifest.txt`` if present, else every ``swir/*.png`` sorted."""
    manifest = os.path.join(root_dir, "manifest.txt")
    if os.path.exists(manifest):
        return read_manifest(manifest)
    swir_dir = os.path.join(root_dir, "swir")
    if not os.path.isdir(swir_dir):
        raise DataError(f"no swir/ directory under {root_dir}")
    return sorted(os.path.splitext(n)[0] for n in os.listdir(swir_dir) if n.endswith(".png"))


def load_dataset(root_dir: str, ids: Optional[Sequence[str]] = None) -> List[ImagePair]:
    ids = list_ids(root_dir) if ids is None else ids
    return [load_pair(root_dir, i) for i in ids]


def gamma_correct(image, gamma: float):
    """Power-law remap ``255 * (I / 255) ** gamma`` on the 0-255 scale.

    Works on numpy arrays and torch tensors alike; the result is floating point.
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if hasattr(image, "detach"):
        x = image.float() if not image.is_floating_point() else image
    else:
        x = np.asarray(image, dtype=np.float64)
    if x.numel() if hasattr(x, "numel") else x.size:
        lo, hi = float(x.min()), float(x.max())
        if lo < 0 or hi > 255:
            raise ValueError(f"intensities must lie in [0, 255], got [{lo}, {hi}]")
    return 255.0 * (x / 255.0) ** gamma


@dataclass(frozen=True)
class SynthParams:
    """Levels are on the [0, 1] scale; sizes in pixels."""

    background: float = 0.1
    lwir_background: float = 0.2
    lwir_background_sigma: float = 0.01
    speckle_sigma: float = 0.05
    speckle_corr: float = 0.0  # spatial correlation length (Gaussian sigma, px); 0 = white
    speckle_clip: float = 3.0  # speckle is truncated at this many sigmas
    ship_level: float = 0.7
    ship_level_max: float = 0.95
    lwir_ship_level: float = 0.8
    lwir_blur: float = 1.2
    margin: float = 0.4  # guaranteed interior-minus-background contrast in both bands
    min_size: int = 6
    max_size_frac: float = 0.3

    @property
    def speckle_amplitude(self) -> float:
        return self.speckle_sigma * self.speckle_clip


def _place_boxes(rng, n_ships, height, width, params):
    placed = []
    max_w = max(params.min_size + 1, int(width * params.max_size_frac))
    max_h = max(params.min_size + 1, int(height * params.max_size_frac * 0.6))
    for _ in range(n_ships):
        for _attempt in range(200):
            w = int(rng.integers(params.min_size, max_w + 1))
            h = int(rng.integers(params.min_size, max(params.min_size, max_h) + 1))
            x0 = int(rng.integers(1, width - w - 1))
            y0 = int(rng.integers(1, height - h - 1))
            cand = (y0, y0 + h, x0, x0 + w)
            # keep a 2 px gap so LWIR blur halos never merge blobs
            if all(cand[0] >= b[1] + 2 or cand[1] + 2 <= b[0] or cand[2] >= b[3] + 2 or cand[3] + 2 <= b[2]
                   for b in placed):
                placed.append(cand)
                break
        else:
            raise ValueError(f"cannot place {n_ships} ships in a {height}x{width} scene")
    return placed


def synth_scene(seed: int, n_ships: int, size=(64, 64), params: SynthParams = SynthParams(),
                id: Optional[str] = None) -> ImagePair:
    """Deterministic synthetic sea scene with ``n_ships`` bright blobs.

    SWIR gets a dark background with truncated Gaussian speckle and sharp-edged,
    mildly textured ships; LWIR gets a smooth, near-uniform background with
    uniformly bright, blurred ships.
    """
    height, width = size
    if n_ships < 0:
        raise ValueError("n_ships must be >= 0")
    if height < 64 or width < 64:
        raise ValueError(f"scene must be at least 64x64, got {height}x{width}")
    rng = np.random.default_rng(seed)
    p = params

    noise = rng.normal(0.0, 1.0, size)
    if p.speckle_corr > 0:
        noise = gaussian_filter(noise, p.speckle_corr, mode="wrap")
        noise /= noise.std()
    speckle = np.clip(p.speckle_sigma * noise, -p.speckle_amplitude, p.speckle_amplitude)
    swir = p.background + speckle
    lwir_mask = np.zeros(size)
    lwir_bg = p.lwir_background + np.clip(
        rng.normal(0.0, p.lwir_background_sigma, size), -3 * p.lwir_background_sigma, 3 * p.lwir_background_sigma)

    boxes = []
    for y0, y1, x0, x1 in _place_boxes(rng, n_ships, height, width, p):
        mask = np.zeros(size, dtype=bool)
        if rng.random() < 0.5:
            mask[y0:y1, x0:x1] = True
        else:
            yy, xx = np.mgrid[0:height, 0:width]
            cy, cx = (y0 + y1 - 1) / 2, (x0 + x1 - 1) / 2
            ry, rx = (y1 - y0) / 2, (x1 - x0) / 2
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            ys, xs = np.nonzero(mask)
            y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        level = rng.uniform(p.ship_level + 0.05, p.ship_level_max)
        texture = rng.uniform(-0.05, 0.05, size)
        swir = np.where(mask, level + texture, swir)
        lwir_mask = np.maximum(lwir_mask, mask.astype(float))
        boxes.append(BoxAnnotation(0, (x0 + x1) / 2 / width, (y0 + y1) / 2 / height,
                                   (x1 - x0) / width, (y1 - y0) / height))

    lwir_ships = gaussian_filter(lwir_mask, p.lwir_blur) * p.lwir_ship_level
    # re-saturate blob interiors so LWIR ships stay uniformly bright
    lwir_ships = np.where(lwir_mask > 0, p.lwir_ship_level, lwir_ships)
    lwir = np.maximum(lwir_bg, lwir_ships)

    to8 = lambda x: np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    return ImagePair(id if id is not None else f"synth_{seed:06d}", to8(swir), to8(lwir), boxes)


def synth_dataset(root_dir: str, n: int, seed: int, size=(64, 64), ships=(1, 3),
                  params: SynthParams = SynthParams()) -> List[str]:
    """Write ``n`` synthetic pairs plus ``manifest.txt``; returns the ids."""
    rng = np.random.default_rng(seed)
    ids = []
    for k in range(n):
        scene_seed = int(rng.integers(0, 2**31 - 1))
        n_ships = int(rng.integers(ships[0], ships[1] + 1))
        pair = synth_scene(scene_seed, n_ships, size, params, id=f"{k:05d}")
        save_pair(root_dir, pair)
        ids.append(pair.id)
    write_manifest(os.path.join(root_dir, "manifest.txt"), ids)
    return ids


def make_split(manifest: Sequence[str], ratio: float = 0.9, seed: int = 0) -> DatasetSplit:
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    ids = list(manifest)
    if not ids:
        raise ValueError("empty manifest")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(ratio * len(ids)))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(shuffled[:n_train], shuffled[n_train:])
