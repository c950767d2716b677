"""Fusion-quality metrics: EN, SF, SD, SCD, VIF and Qabf.

All functions take 2-D arrays on the 0-255 intensity scale (uint8 or float).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy import ndimage
from scipy.signal import convolve2d

FIELDS = ("EN", "SF", "SD", "SCD", "VIF", "Qabf")

# Qabf sigmoid constants (strength: T_g, k_g, D_g; orientation: T_a, k_a, D_a).
QABF_TG, QABF_KG, QABF_DG = 0.9994, -15.0, 0.5
QABF_TA, QABF_KA, QABF_DA = 0.9879, -22.0, 0.8

VIF_SIGMA_NSQ = 2.0
VIF_SCALES = 4


def _img(i) -> np.ndarray:
    a = np.asarray(i, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {a.shape}")
    return a


def _same(*imgs):
    shapes = {i.shape for i in imgs}
    if len(shapes) != 1:
        raise ValueError(f"images differ in shape: {sorted(shapes)}")


def en(i) -> float:
    q = np.clip(np.round(_img(i)), 0, 255).astype(np.int64).ravel()
    p = np.bincount(q, minlength=256) / q.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def sf(i) -> float:
    """Squared first differences are summed and divided by the pixel count."""
    a = _img(i)
    rf2 = np.sum(np.diff(a, axis=1) ** 2) / a.size
    cf2 = np.sum(np.diff(a, axis=0) ** 2) / a.size
    return float(math.sqrt(rf2 + cf2))


def sd(i) -> float:
    return float(np.std(_img(i)))


def _corr(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    den = math.sqrt(float(np.sum(x * x)) * float(np.sum(y * y)))
    if den == 0.0:
        return 0.0
    return float(np.clip(np.sum(x * y) / den, -1.0, 1.0))


def scd(f, a, b) -> float:
    f, a, b = _img(f), _img(a), _img(b)
    _same(f, a, b)
    return _corr(f - b, a - b) + _corr(f - a, b - a)


def _gauss_window(n: int) -> np.ndarray:
    sd_ = n / 5.0
    m = (n - 1) / 2.0
    y, x = np.ogrid[-m:m + 1, -m:m + 1]
    h = np.exp(-(x * x + y * y) / (2 * sd_ * sd_))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def vif_single(ref, dist) -> float:
    """Multi-scale pixel-domain VIF of ``dist`` against ``ref``.

    Scales whose image has shrunk below the window size are skipped. A
    reference with no variance anywhere yields 1.0 when ``dist`` equals it
    and 0.0 otherwise.
    """
    ref, dist = _img(ref), _img(dist)
    _same(ref, dist)
    eps = 1e-10
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES - scale + 1) + 1
        win = _gauss_window(n)
        if scale > 1:
            if min(ref.shape) < n:
                break
            ref = convolve2d(ref, win, mode="valid")[::2, ::2]
            dist = convolve2d(dist, win, mode="valid")[::2, ::2]
        if min(ref.shape) < n:
            break
        mu1 = convolve2d(ref, win, mode="valid")
        mu2 = convolve2d(dist, win, mode="valid")
        s1 = np.maximum(convolve2d(ref * ref, win, mode="valid") - mu1 * mu1, 0)
        s2 = np.maximum(convolve2d(dist * dist, win, mode="valid") - mu2 * mu2, 0)
        s12 = convolve2d(ref * dist, win, mode="valid") - mu1 * mu2

        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        low1 = s1 < eps
        g[low1] = 0
        sv[low1] = s2[low1]
        s1[low1] = 0
        low2 = s2 < eps
        g[low2] = 0
        sv[low2] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv = np.maximum(sv, eps)

        num += float(np.sum(np.log10(1 + g * g * s1 / (sv + VIF_SIGMA_NSQ))))
        den += float(np.sum(np.log10(1 + s1 / VIF_SIGMA_NSQ)))
    if den == 0.0:
        return 1.0 if np.array_equal(ref, dist) else 0.0
    return num / den


def vif(f, a, b) -> float:
    return 0.5 * (vif_single(a, f) + vif_single(b, f))


def _edges(i: np.ndarray):
    gx = ndimage.sobel(i, axis=1, mode="nearest")
    gy = ndimage.sobel(i, axis=0, mode="nearest")
    g = np.hypot(gx, gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(gx == 0, math.pi / 2, np.arctan(gy / np.where(gx == 0, 1, gx)))
    return g, alpha


def _q_gain(g_rel, a_rel):
    qg = QABF_TG / (1 + np.exp(QABF_KG * (g_rel - QABF_DG)))
    qa = QABF_TA / (1 + np.exp(QABF_KA * (a_rel - QABF_DA)))
    return qg * qa


# Normalizer so that perfect strength and orientation transfer scores exactly 1.
_Q_PERFECT = float(_q_gain(1.0, 1.0))


def _transfer(g_s, a_s, g_f, a_f):
    hi = np.maximum(g_s, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        g_rel = np.where(hi == 0, 1.0, np.minimum(g_s, g_f) / hi)
    a_rel = 1 - np.abs(a_s - a_f) / (math.pi / 2)
    return _q_gain(g_rel, a_rel) / _Q_PERFECT


def qabf(f, a, b) -> float:
    f, a, b = _img(f), _img(a), _img(b)
    _same(f, a, b)
    g_f, a_f = _edges(f)
    g_a, a_a = _edges(a)
    g_b, a_b = _edges(b)
    den = float(np.sum(g_a + g_b))
    if den == 0.0:
        return 0.0
    num = np.sum(_transfer(g_a, a_a, g_f, a_f) * g_a + _transfer(g_b, a_b, g_f, a_f) * g_b)
    return float(np.clip(num / den, 0.0, 1.0))


def all_metrics(f, a, b) -> Dict[str, float]:
    return {"EN": en(f), "SF": sf(f), "SD": sd(f), "SCD": scd(f, a, b), "VIF": vif(f, a, b), "Qabf": qabf(f, a, b)}


@dataclass
class MetricReport:
    ids: List[str] = field(default_factory=list)
    rows: List[Dict[str, float]] = field(default_factory=list)

    def add(self, image_id: str, values: Dict[str, float]):
        self.ids.append(image_id)
        self.rows.append({k: float(values[k]) for k in FIELDS})

    @property
    def mean(self) -> Dict[str, float]:
        if not self.rows:
            return {k: float("nan") for k in FIELDS}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in FIELDS}

    def as_text(self) -> str:
        """Tab-separated records: a header, one line per image, then a ``mean`` line."""
        lines = ["\t".join(("id",) + FIELDS)]
        for i, r in zip(self.ids, self.rows):
            lines.append("\t".join([i] + [f"{r[k]:.6f}" for k in FIELDS]))
        m = self.mean
        lines.append("\t".join(["mean"] + [f"{m[k]:.6f}" for k in FIELDS]))
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> MetricReport:
    rep = MetricReport()
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0].split("\t")[0] != "id":
        raise ValueError("metric report must start with a header line")
    header = lines[0].split("\t")[1:]
    for line in lines[1:]:
        parts = line.split("\t")
        if parts[0] == "mean":
            continue
        rep.add(parts[0], dict(zip(header, map(float, parts[1:]))))
    return rep


def evaluate_fusion(triples: Sequence) -> MetricReport:
    """``triples`` yields ``(id, fused, swir, lwir)``."""
    rep = MetricReport()
    for image_id, f, a, b in triples:
        rep.add(image_id, all_metrics(f, a, b))
    return rep
