"""PSNR / SSIM on luma and RMSE on depth, plus the per-dataset report."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ImageBuffer
from .tensor import StructuralError

PSNR_CAP = 100.0


def _plane(x) -> np.ndarray:
    if isinstance(x, ImageBuffer):
        return x.plane.astype(np.float64)
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim != 2:
        raise StructuralError(f"expected a single-channel image, got shape {a.shape}")
    return a


def _shaved(a, b, shave: int) -> tuple[np.ndarray, np.ndarray]:
    a, b = _plane(a), _plane(b)
    if a.shape != b.shape:
        raise StructuralError(f"image sizes differ: {a.shape} vs {b.shape}")
    if shave < 0:
        raise ValueError("shave must be >= 0")
    if 2 * shave >= min(a.shape):
        raise ValueError(f"shave {shave} removes the whole {a.shape[1]}x{a.shape[0]} image")
    if shave:
        a, b = a[shave:-shave, shave:-shave], b[shave:-shave, shave:-shave]
    return a * 255.0, b * 255.0


def psnr(a, b, shave: int = 0) -> float:
    """PSNR in dB on the [0, 255] scale; identical inputs give ``PSNR_CAP``."""
    a, b = _shaved(a, b, shave)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    h, w = a.shape
    rows = sum(g[i] * a[i:h - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5) -> np.ndarray:
    """SSIM at every fully-covered window position of two [0, 255] images."""
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape[1]}x{a.shape[0]} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, shave: int = 0) -> float:
    """Single-scale Gaussian SSIM, mean over valid window positions."""
    a, b = _shaved(a, b, shave)
    return float(np.mean(ssim_map(a, b)))


def rmse(a, b, units: float | None = None) -> float:
    """Root-mean-square error in native units (``divisor`` of the buffers by default)."""
    if units is None:
        units = a.divisor if isinstance(a, ImageBuffer) else 1.0
    a, b = _plane(a), _plane(b)
    if a.shape != b.shape:
        raise StructuralError(f"depth sizes differ: {a.shape} vs {b.shape}")
    d = (a - b) * units
    return float(math.sqrt(np.mean(d * d)))


@dataclass
class MetricRecord:
    image_id: str
    psnr: float | None = None
    ssim: float | None = None
    rmse: float | None = None


@dataclass
class MetricReport:
    records: list[MetricRecord] = field(default_factory=list)

    def add(self, record: MetricRecord) -> None:
        self.records.append(record)

    def mean(self, name: str) -> float | None:
        vals = [getattr(r, name) for r in self.records if getattr(r, name) is not None]
        return math.fsum(vals) / len(vals) if vals else None

    def _columns(self) -> list[str]:
        return [c for c in ("psnr", "ssim", "rmse") if any(getattr(r, c) is not None for r in self.records)]

    def format(self, extra: dict[str, object] | None = None) -> str:
        cols = self._columns()
        lines = ["\t".join(["image"] + cols)]
        for r in self.records:
            lines.append("\t".join([r.image_id] + [f"{getattr(r, c):.4f}" for c in cols]))
        lines.append("\t".join(["MEAN"] + [f"{self.mean(c):.4f}" for c in cols]))
        lines.append("")
        summary = dict(extra or {})
        summary["images"] = len(self.records)
        for c in cols:
            summary[f"mean-{c}"] = f"{self.mean(c):.6f}"
        lines.extend(f"{k}={v}" for k, v in summary.items())
        return "\n".join(lines) + "\n"
