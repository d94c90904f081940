"""Image algebra, corruption models and shared error types.

Images are numpy arrays of shape (H, W, 3) with float values in [0, 1]
(linear RGB after load).  Transmission maps are (H, W, 1).  A haze layer is
either a full (H, W, 3) array or a single RGB triple that is broadcast over
the image (uniform-airlight mode).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np

MIN_SIDE = 32


class DilieError(Exception):
    """Base class for all package errors."""


class DimensionError(DilieError, ValueError):
    pass


class IntegrityError(DilieError):
    pass


class LoadError(DilieError, OSError):
    pass


class DatasetError(DilieError):
    pass


class RunError(DilieError, RuntimeError):
    """Optimization failure, tagged with the pipeline stage that raised it."""

    def __init__(self, message: str, stage: str | None = None, last_finite_iteration: int | None = None):
        self.stage = stage
        self.last_finite_iteration = last_finite_iteration
        prefix = f"[{stage}] " if stage else ""
        super().__init__(prefix + message)


def check_image(img: np.ndarray, name: str = "image", min_side: int | None = None) -> np.ndarray:
    """Validate an ImageTensor and return it as a float array."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"{name}: expected shape (H, W, 3), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise TypeError(f"{name}: expected floating dtype, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: values outside [0, 1]")
    if min_side is not None and min(arr.shape[:2]) < min_side:
        raise ValueError(f"{name}: spatial size {arr.shape[:2]} below minimum side {min_side}")
    return arr


def as_transmission(transmission, shape: tuple[int, int], name: str = "transmission") -> np.ndarray:
    """Broadcast a scalar or (H, W) / (H, W, 1) array to an (H, W, 1) transmission map."""
    t = np.asarray(transmission, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(shape + (1,), float(t))
    elif t.ndim == 2:
        t = t[..., None]
    if t.ndim != 3 or t.shape[2] != 1 or t.shape[:2] != tuple(shape):
        raise DimensionError(f"{name}: expected spatial shape {tuple(shape)} with one channel, got {t.shape}")
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValueError(f"{name}: values outside [0, 1]")
    return t


def as_haze_layer(airlight, shape: tuple[int, int], name: str = "airlight") -> np.ndarray:
    """Broadcast an RGB triple (uniform mode) or check a full (H, W, 3) haze layer."""
    a = np.asarray(airlight, dtype=np.float64)
    if a.ndim == 0:
        a = np.full(3, float(a))
    if a.shape == (3,):
        a = np.broadcast_to(a, tuple(shape) + (3,)).copy()
    if a.shape != tuple(shape) + (3,):
        raise DimensionError(f"{name}: expected an RGB triple or shape {tuple(shape) + (3,)}, got {a.shape}")
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError(f"{name}: values outside [0, 1]")
    return a


def compose_haze(clean: np.ndarray, airlight, transmission) -> np.ndarray:
    """Atmospheric scattering model: ``clean * M + airlight * (1 - M)``, clamped to [0, 1]."""
    clean = np.asarray(clean)
    if clean.ndim != 3 or clean.shape[2] != 3:
        raise DimensionError(f"clean: expected shape (H, W, 3), got {clean.shape}")
    shape = clean.shape[:2]
    haze = as_haze_layer(airlight, shape)
    m = as_transmission(transmission, shape)
    out = clean * m + haze * (1.0 - m)
    return np.clip(out, 0.0, 1.0)


def add_noise(clean: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Additive i.i.d. Gaussian noise with std ``sigma``, clamped to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    clean = np.asarray(clean, dtype=np.float64)
    if sigma == 0:
        return clean.copy()
    rng = np.random.default_rng(seed)
    return np.clip(clean + rng.normal(0.0, sigma, size=clean.shape), 0.0, 1.0)


def image_delta(a: np.ndarray, b: np.ndarray, norm: Literal["L1", "L2"] = "L2") -> float:
    """Mean absolute (L1) or root-mean-square (L2) pixel difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    if norm == "L1":
        return float(np.mean(np.abs(diff)))
    if norm == "L2":
        return float(np.sqrt(np.mean(diff * diff)))
    raise ValueError(f"unknown norm {norm!r}")


@dataclass
class CorruptionSpec:
    """Parameters of a synthetic corruption.

    ``transmission`` is a scalar here; spatially varying maps are stored as
    image files next to the sidecar and referenced by ``transmission_path``.
    """

    kind: Literal["haze", "gaussian_noise"]
    sigma: float = 0.0
    airlight: Sequence[float] | None = None
    transmission: float | None = None
    transmission_path: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind == "gaussian_noise":
            if not self.sigma > 0:
                raise ValueError("gaussian_noise requires sigma > 0")
        elif self.kind == "haze":
            if self.airlight is None or (self.transmission is None and self.transmission_path is None):
                raise ValueError("haze requires airlight and transmission")
            air = [float(v) for v in np.broadcast_to(np.asarray(self.airlight, dtype=float), (3,))]
            if min(air) < 0 or max(air) > 1:
                raise ValueError("airlight outside [0, 1]")
            self.airlight = air
            if self.transmission is not None and not 0 <= self.transmission <= 1:
                raise ValueError("transmission outside [0, 1]")
        else:
            raise ValueError(f"unknown corruption kind {self.kind!r}")

    def apply(self, clean: np.ndarray, transmission_map: np.ndarray | None = None) -> np.ndarray:
        if self.kind == "gaussian_noise":
            return add_noise(clean, self.sigma, self.seed or 0)
        m = transmission_map if transmission_map is not None else self.transmission
        return compose_haze(clean, self.airlight, m)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        return cls(**d)
