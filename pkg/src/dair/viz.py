"""Export kernel fields as images.

Channel maps are normalised per channel (contrast within one tap);
kernel grids use one global scale so kernels at different pixels compare.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .resampling import KernelField

SEPARATOR = 128


def _field_array(field: KernelField | np.ndarray, n: int = 0) -> np.ndarray:
    if isinstance(field, KernelField):
        return np.asarray(field.values.data[n], dtype=np.float64)
    a = np.asarray(field, dtype=np.float64)
    return a[n] if a.ndim == 4 else a


def normalize_channel(c: np.ndarray) -> np.ndarray:
    lo, hi = float(c.min()), float(c.max())
    if hi == lo:
        return np.full(c.shape, 128, dtype=np.uint8)
    return np.floor((c - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def export_channel_maps(field: KernelField, out_dir: str | Path, n: int = 0) -> list[Path]:
    """Write ``filter_<k>.png`` for every tap channel plus ``norms.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = _field_array(field, n)
    written = []
    norms = ["# per-channel min-max normalisation; constant channels map to 128\n"]
    for k in range(values.shape[0]):
        c = values[k]
        path = out_dir / f"filter_{k}.png"
        Image.fromarray(normalize_channel(c)).save(path, format="PNG")
        written.append(path)
        norms.append(f"{k}\t{float(c.min())!r}\t{float(c.max())!r}\n")
    (out_dir / "norms.txt").write_text("".join(norms), encoding="utf-8")
    return written


def signed_colormap(v: np.ndarray, scale: float) -> np.ndarray:
    """Blue for negative, white at zero, red for positive."""
    t = np.zeros_like(v) if scale == 0 else np.clip(v / scale, -1.0, 1.0)
    rgb = np.ones(v.shape + (3,))
    pos, neg = t > 0, t < 0
    rgb[pos, 1] -= t[pos]
    rgb[pos, 2] -= t[pos]
    rgb[neg, 0] += t[neg]
    rgb[neg, 1] += t[neg]
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def kernel_grid(field: KernelField, region: tuple[int, int, int, int], n: int = 0) -> np.ndarray:
    """RGB grid of the ``f x f`` kernels of every pixel in ``region = (x, y, w, h)``."""
    x, y, w, h = region
    f = field.f
    values = _field_array(field, n)[: f * f]
    H, W = values.shape[1:]
    if w < 1 or h < 1:
        raise ValueError("region must not be empty")
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"region {region} exceeds the {W}x{H} field")
    kernels = values[:, y:y + h, x:x + w]
    scale = float(np.abs(kernels).max())
    cells = signed_colormap(kernels, scale)
    # one-pixel separators between cells and around the outside
    out = np.full((h * (f + 1) + 1, w * (f + 1) + 1, 3), SEPARATOR, dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            y0, x0 = 1 + r * (f + 1), 1 + c * (f + 1)
            out[y0:y0 + f, x0:x0 + f] = cells[:, r, c].reshape(f, f, 3)
    return out


def export_kernel_grid(field: KernelField, region: tuple[int, int, int, int], out_path: str | Path,
                       n: int = 0) -> Path:
    out_path = Path(out_path)
    grid = kernel_grid(field, region, n)
    Image.fromarray(grid).save(out_path, format="PNG")
    return out_path
