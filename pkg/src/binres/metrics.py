"""PSNR and SSIM.

PSNR is computed over all channels (RGB); SSIM on BT.601 luma with the
11x11 Gaussian window (sigma 1.5) of Wang et al., averaged over all valid
window positions.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = ["psnr", "ssim", "to_luma", "gaussian_window", "QualityScore", "score_frames", "PSNR_CAP"]

PSNR_CAP = 99.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes {x.shape} and {y.shape} differ")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def to_luma(frame: np.ndarray) -> np.ndarray:
    """(3, H, W) RGB -> (H, W) luma; (H, W) and (1, H, W) pass through."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 2:
        return f
    if f.ndim == 3 and f.shape[0] == 1:
        return f[0]
    if f.ndim == 3 and f.shape[0] == 3:
        r, g, b = LUMA_WEIGHTS
        return r * f[0] + g * f[1] + b * f[2]
    raise ShapeError(f"cannot convert frame of shape {f.shape} to luma")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1-d Gaussian; the 2-d window is its outer product."""
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.tensordot(sliding_window_view(img, k, axis=0), g, axes=([2], [0]))
    return np.tensordot(sliding_window_view(rows, k, axis=1), g, axes=([2], [0]))


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0,
         window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    if np.shape(x) != np.shape(y):
        raise ShapeError(f"ssim: shapes {np.shape(x)} and {np.shape(y)} differ")
    a, b = to_luma(x), to_luma(y)
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeError(f"ssim: frame {a.shape} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


@dataclass
class QualityScore:
    psnr_db: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db)) if self.psnr_db else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame_index", "psnr_db", "ssim"])
        for i, (p, s) in enumerate(zip(self.psnr_db, self.ssim)):
            w.writerow([i, repr(p), repr(s)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"frames": len(self.psnr_db), "psnr_db": self.mean_psnr, "ssim": self.mean_ssim,
                "psnr_space": "rgb", "ssim_space": "luma_bt601"}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def score_frames(originals: Sequence[np.ndarray], decoded: Sequence[np.ndarray]) -> QualityScore:
    if len(originals) != len(decoded):
        raise ShapeError(f"{len(originals)} originals vs {len(decoded)} decoded frames")
    score = QualityScore()
    for x, y in zip(originals, decoded):
        score.psnr_db.append(psnr(x, y))
        score.ssim.append(ssim(x, y))
    return score
