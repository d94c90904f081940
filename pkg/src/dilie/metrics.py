"""Image quality measures: SSIM, PSNR, perceptual error and the haze-corruption score."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.signal import convolve2d

from .core import DimensionError
from .features import PERCEPTUAL_TAPS, FeatureExtractor, image_to_tensor

LUMA = np.array([0.299, 0.587, 0.114])
PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-window SSIM on luma over all fully-contained 11x11 Gaussian windows."""
    a, b = _same_shape(a, b)
    x, y = luma(a), luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    win = gaussian_window()
    filt = lambda v: convolve2d(v, win, mode="valid")  # noqa: E731  (window is symmetric)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity on ITU-R 601 luma, data range 1."""
    return float(np.mean(ssim_map(a, b)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for data range 1, capped at 99 dB."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10 * np.log10(1.0 / mse))


# ---------------------------------------------------------------- perceptual error


class PerceptualErrorBackend:
    kind: str

    def score(self, a, b) -> float:
        raise NotImplementedError


class FeatureDistance(PerceptualErrorBackend):
    """Frozen-feature distance (not PieAPP).

    Activations at each tap are unit-normalized along channels per site; the
    squared difference is summed over channels, averaged over sites, then
    averaged over taps.
    """

    kind = "feature_distance"

    def __init__(self, ext: FeatureExtractor, taps: Sequence[str] = PERCEPTUAL_TAPS):
        self.ext = ext
        self.taps = ext.check_taps(taps)

    def features(self, img) -> dict[str, torch.Tensor]:
        x = img if isinstance(img, torch.Tensor) else image_to_tensor(np.asarray(img, dtype=np.float64), torch.float64)
        with torch.no_grad():
            return {k: F.normalize(v, dim=1, eps=1e-12) for k, v in self.ext(x, self.taps).items()}

    def score(self, a, b) -> float:
        a, b = _same_shape(a, b)
        fa, fb = self.features(a), self.features(b)
        per_tap = [((fa[t] - fb[t]) ** 2).sum(dim=1).mean() for t in self.taps]
        return float(torch.stack(per_tap).mean())


@dataclass
class ExternalScores(PerceptualErrorBackend):
    """Precomputed pair scores (e.g. PieAPP) loaded from a CSV with columns path_a, path_b, score."""

    path: str
    table: dict[tuple[str, str], float] = field(default_factory=dict)
    kind: str = "external_scores"

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExternalScores":
        table = {}
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            missing = {"path_a", "path_b", "score"} - set(reader.fieldnames or [])
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                table[(_key(row["path_a"]), _key(row["path_b"]))] = float(row["score"])
        return cls(str(path), table)

    def require(self, pairs) -> None:
        missing = [(a, b) for a, b in pairs if (_key(a), _key(b)) not in self.table]
        if missing:
            raise KeyError(f"{self.path}: no score for pairs {missing}")

    def score(self, a, b) -> float:
        key = (_key(a), _key(b))
        if key not in self.table:
            raise KeyError(f"{self.path}: no score for pair ({key[0]}, {key[1]})")
        return self.table[key]


def _key(p) -> str:
    return Path(p).as_posix() if isinstance(p, (str, os.PathLike)) else str(p)


def perceptual_error(a, b, backend: PerceptualErrorBackend) -> float:
    """Perceptual error between two images (arrays, or path keys for the external backend)."""
    return backend.score(a, b)


def haze_corruption_H(clean, hazy, style, st: Callable, backend: PerceptualErrorBackend) -> float:
    """``|E(clean, st(clean, style)) - E(clean, st(hazy, style))|``."""
    e_clean = backend.score(clean, st(clean, style))
    e_hazy = backend.score(clean, st(hazy, style))
    return abs(e_clean - e_hazy)
