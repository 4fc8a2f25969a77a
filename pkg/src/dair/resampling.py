"""Spatially-variant dilated filtering of a nearest-neighbour upsampled image.

Each output pixel ``(i, j)`` owns an ``f x f`` kernel stored along the channel
axis of a kernel field (channel ``k1 * f + k2``).  Taps are read from the
source with a stride equal to the dilation interval so that, on a
nearest-neighbour upsampled image, they land on distinct low-resolution
pixels.  Reads outside the image are clamped to the nearest edge pixel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import StructuralError, Tensor, _result, _wrap


@dataclass
class KernelField:
    """Per-pixel interpolation kernels, shape ``(N, f*f, H, W)``."""

    values: Tensor
    f: int
    s: int

    def __post_init__(self):
        if self.f < 1 or self.f % 2 == 0:
            raise StructuralError(f"kernel extent must be odd, got f={self.f}")
        if self.s < 1:
            raise StructuralError(f"dilation must be >= 1, got s={self.s}")
        if self.values.data.ndim != 4 or self.values.shape[1] % (self.f * self.f):
            raise StructuralError(
                f"field of shape {self.values.shape} does not hold {self.f}x{self.f} kernels")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def spatial(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    def kernels(self, n: int = 0) -> np.ndarray:
        """Kernels of batch item ``n`` as an ``(H, W, f, f)`` array."""
        v = self.values.data[n, : self.f * self.f]
        return v.transpose(1, 2, 0).reshape(v.shape[1], v.shape[2], self.f, self.f)


def _check(source: Tensor, fvals: Tensor, f: int) -> None:
    if source.data.ndim != 4 or source.shape[1] != 1:
        raise StructuralError(f"source must be (N, 1, H, W), got {source.shape}")
    if f % 2 == 0:
        raise StructuralError(f"kernel extent must be odd, got f={f}")
    if source.shape[0] != fvals.shape[0] or source.shape[2:] != fvals.shape[2:]:
        raise StructuralError(
            f"source {source.shape} and field {fvals.shape} disagree on batch/spatial size")


def _fold_edges(gp: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of edge-replicate padding on the last two axes."""
    if p == 0:
        return gp
    g = gp[:, p:-p].copy()
    g[:, 0] += gp[:, :p].sum(axis=1)
    g[:, -1] += gp[:, -p:].sum(axis=1)
    out = g[:, :, p:-p].copy()
    out[:, :, 0] += g[:, :, :p].sum(axis=2)
    out[:, :, -1] += g[:, :, -p:].sum(axis=2)
    return out


def _resample(source: Tensor, fvals: Tensor, f: int, intervals: Sequence[int], shared: bool) -> Tensor:
    _check(source, fvals, f)
    ff = f * f
    nsets = 1 if shared else len(intervals)
    if fvals.shape[1] != ff * nsets:
        raise StructuralError(f"field has {fvals.shape[1]} channels, expected {ff * nsets}")
    n, _, h, w = source.shape
    src = source.data[:, 0]
    kv = fvals.data
    half = f // 2
    out = np.zeros((n, h, w), dtype=np.result_type(src.dtype, kv.dtype))
    padded = []
    for idx, d in enumerate(intervals):
        p = d * half
        sp = np.pad(src, ((0, 0), (p, p), (p, p)), mode="edge")
        padded.append(sp)
        base = 0 if shared else idx * ff
        for k1 in range(f):
            for k2 in range(f):
                tap = sp[:, k1 * d:k1 * d + h, k2 * d:k2 * d + w]
                out += kv[:, base + k1 * f + k2] * tap

    def _bw(g):
        g = g[:, 0]
        gk = np.zeros_like(kv)
        gs = np.zeros_like(src)
        for idx, d in enumerate(intervals):
            p = d * half
            sp = padded[idx]
            gsp = np.zeros_like(sp)
            base = 0 if shared else idx * ff
            for k1 in range(f):
                for k2 in range(f):
                    k = base + k1 * f + k2
                    ys, xs = slice(k1 * d, k1 * d + h), slice(k2 * d, k2 * d + w)
                    gk[:, k] += g * sp[:, ys, xs]
                    gsp[:, ys, xs] += g * kv[:, k]
            gs += _fold_edges(gsp, p)
        return gs[:, None], gk

    return _result(out[:, None], "adaptive_resample", (source, fvals), _bw)


def adaptive_resample(source: Tensor, field: KernelField) -> Tensor:
    """Filter ``source`` with the per-pixel kernels of ``field`` at dilation ``field.s``."""
    source = _wrap(source)
    if field.values.shape[1] != field.f * field.f:
        raise StructuralError("adaptive_resample needs a field with exactly f*f channels")
    return _resample(source, field.values, field.f, (field.s,), shared=True)


def validate_intervals(intervals: Sequence[int]) -> tuple[int, ...]:
    iv = tuple(int(x) for x in intervals)
    if not iv:
        raise StructuralError("interval set must not be empty")
    if any(x < 1 for x in iv) or any(b <= a for a, b in zip(iv, iv[1:])):
        raise StructuralError(f"intervals must be positive and strictly increasing, got {iv}")
    return iv


def adaptive_resample_asp(source: Tensor, field: KernelField, intervals: Sequence[int],
                          shared: bool = True) -> Tensor:
    """Sum of dilated filterings over every interval in ``intervals``.

    With ``shared`` the same ``f*f`` kernel is reused at every interval;
    otherwise the field carries one ``f*f`` block per interval, in order.
    """
    source = _wrap(source)
    iv = validate_intervals(intervals)
    return _resample(source, field.values, field.f, iv, shared=shared)


def resample_backward(upstream: np.ndarray, source: Tensor, field: KernelField,
                      intervals: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the resampling w.r.t. ``(source, field)`` for a given upstream gradient."""
    src = Tensor(np.asarray(source.data if isinstance(source, Tensor) else source), requires_grad=True)
    kv = Tensor(field.values.data, requires_grad=True)
    iv = (field.s,) if intervals is None else validate_intervals(intervals)
    out = _resample(src, kv, field.f, iv, shared=True)
    return out._backward(np.asarray(upstream, dtype=out.dtype))


def delta_field(n: int, h: int, w: int, f: int, s: int, dtype=None) -> KernelField:
    """The centre-tap kernel everywhere; resampling with it is the identity."""
    v = np.zeros((n, f * f, h, w), dtype=dtype or np.float32)
    v[:, (f // 2) * f + f // 2] = 1
    return KernelField(Tensor(v, dtype=v.dtype), f, s)
