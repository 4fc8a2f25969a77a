"""Images, colour conversion, classical resamplers and training-pair sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .tensor import StructuralError

SCALES = (0.6, 0.7, 0.8, 0.9, 1.0)
LR_PATCH = 48


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageBuffer:
    """``(H, W, C)`` float32 values in [0, 1].

    ``divisor`` is the integer full-scale the file was stored with (255 for
    8-bit, 65535 for 16-bit) so native units can be recovered.
    """

    values: np.ndarray
    space: str = "gray"
    divisor: float = 255.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3) or v.shape[0] < 1 or v.shape[1] < 1:
            raise StructuralError(f"image must be (H, W, 1|3) and non-empty, got {v.shape}")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """The single channel as a 2-D array."""
        if self.channels != 1:
            raise StructuralError("image has more than one channel")
        return self.values[:, :, 0]

    def with_values(self, values: np.ndarray) -> "ImageBuffer":
        return ImageBuffer(values, self.space, self.divisor)


@dataclass
class SamplePair:
    lr: ImageBuffer
    hr: ImageBuffer
    scale: int
    guidance: ImageBuffer | None = None
    source_id: str = ""

    def __post_init__(self):
        s = self.scale
        if (self.hr.height, self.hr.width) != (self.lr.height * s, self.lr.width * s):
            raise StructuralError(
                f"hr {self.hr.height}x{self.hr.width} is not lr {self.lr.height}x{self.lr.width} times {s}")
        if self.guidance is not None and (self.guidance.height, self.guidance.width) != (self.hr.height, self.hr.width):
            raise StructuralError("guidance must match the HR size")


@dataclass
class Batch:
    lr: np.ndarray
    hr: np.ndarray
    guidance: np.ndarray | None = None


# ---------------------------------------------------------------------------
# file I/O


_SUFFIXES = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}


def load_image(path: str | Path) -> ImageBuffer:
    """PNG (8-bit gray/RGB, 16-bit gray) or binary PGM/PPM."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ImageFormatError(f"{path}: cannot decode ({exc})") from None
    if img.format not in ("PNG", "PPM"):
        raise ImageFormatError(f"{path}: unsupported format {img.format}")
    mode = img.mode
    if mode in ("P", "RGBA", "LA"):
        img = img.convert("RGB" if mode != "LA" else "L")
        mode = img.mode
    if mode == "L":
        return ImageBuffer(np.asarray(img, dtype=np.float32) / 255.0, "gray", 255.0)
    if mode == "RGB":
        return ImageBuffer(np.asarray(img, dtype=np.float32) / 255.0, "rgb", 255.0)
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        a = np.asarray(img).astype(np.float64)
        if a.min() < 0 or a.max() > 65535:
            raise ImageFormatError(f"{path}: values outside the 16-bit range")
        return ImageBuffer((a / 65535.0).astype(np.float32), "depth", 65535.0)
    raise ImageFormatError(f"{path}: unsupported pixel mode {mode}")


def quantize(values: np.ndarray, full_scale: float) -> np.ndarray:
    """Round half away from zero after clamping to [0, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * full_scale
    return np.floor(v + 0.5)


def save_image(image: ImageBuffer, path: str | Path) -> None:
    path = Path(path)
    fmt = _SUFFIXES.get(path.suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"{path}: unsupported output format")
    if image.space == "depth" or image.divisor > 255:
        if image.channels != 1:
            raise ImageFormatError("16-bit output must be single channel")
        pil = Image.fromarray(quantize(image.plane, 65535.0).astype(np.uint16))
    elif image.channels == 1:
        pil = Image.fromarray(quantize(image.plane, 255.0).astype(np.uint8))
    else:
        pil = Image.fromarray(quantize(image.values, 255.0).astype(np.uint8))
    pil.save(path, format=fmt)


# ---------------------------------------------------------------------------
# colour


_YCBCR = np.array([[65.481, 128.553, 24.966],
                   [-37.797, -74.203, 112.0],
                   [112.0, -93.786, -18.214]])
_OFFSET = np.array([16.0, 128.0, 128.0])


def rgb_to_y(image: ImageBuffer) -> ImageBuffer:
    """BT.601 studio-swing luma."""
    if image.channels != 3:
        raise StructuralError("rgb_to_y needs a 3-channel image")
    v = image.values.astype(np.float64)
    y = (v @ _YCBCR[0] + 16.0) / 255.0
    return ImageBuffer(y.astype(np.float32), "luma-Y", 255.0)


def to_luma(image: ImageBuffer) -> ImageBuffer:
    if image.channels == 3:
        return rgb_to_y(image)
    return image


def rgb_to_ycbcr(image: ImageBuffer) -> np.ndarray:
    v = image.values.astype(np.float64)
    return ((v @ _YCBCR.T + _OFFSET) / 255.0).astype(np.float32)


def ycbcr_to_rgb(ycc: np.ndarray) -> ImageBuffer:
    v = np.asarray(ycc, dtype=np.float64) * 255.0 - _OFFSET
    rgb = v @ np.linalg.inv(_YCBCR).T
    return ImageBuffer(np.clip(rgb, 0, 1).astype(np.float32), "rgb", 255.0)


# ---------------------------------------------------------------------------
# classical resampling


def _nearest(x):
    return ((x >= -0.5) & (x < 0.5)).astype(np.float64)


def _triangle(x):
    return np.maximum(0.0, 1.0 - np.abs(x))


def cubic(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2, ax3 = ax * ax, ax * ax * ax
    inner = (a + 2) * ax3 - (a + 3) * ax2 + 1
    outer = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, inner, np.where(ax < 2, outer, 0.0))


def lanczos3(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 3, np.sinc(x) * np.sinc(x / 3), 0.0)


KERNELS = {"nearest": (_nearest, 1.0), "bilinear": (_triangle, 2.0),
           "bicubic": (cubic, 4.0), "lanczos3": (lanczos3, 6.0)}


def resample_matrix(n_in: int, n_out: int, method: str, antialias: bool) -> np.ndarray:
    """Dense ``(n_out, n_in)`` interpolation matrix for one axis."""
    kernel, width = KERNELS[method]
    scale = n_out / n_in
    if antialias and scale < 1 and method != "nearest":
        h = lambda x: scale * kernel(scale * x)  # noqa: E731
        width = width / scale
    else:
        h = kernel
    u = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = h(u[:, None] - idx)
    total = w.sum(axis=1, keepdims=True)
    w = w / np.where(total == 0, 1, total)
    idx = np.clip(idx, 0, n_in - 1).astype(np.int64)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(np.arange(n_out), taps), idx.ravel()), w.ravel())
    return m


def resize_array(a: np.ndarray, out_h: int, out_w: int, method: str = "bicubic",
                 antialias: bool = True, clamp: bool = True) -> np.ndarray:
    """Separable resize of an ``(H, W[, C])`` array; the stronger shrink goes first."""
    if method not in KERNELS:
        raise StructuralError(f"unknown resize method {method!r}")
    if out_h < 1 or out_w < 1:
        raise StructuralError(f"output size must be positive, got {out_h}x{out_w}")
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[:2]
    steps = sorted([(out_h / h, 0), (out_w / w, 1)], key=lambda t: t[0])
    for _, axis in steps:
        if axis == 0:
            m = resample_matrix(a.shape[0], out_h, method, antialias)
            a = np.tensordot(m, a, axes=(1, 0))
        else:
            m = resample_matrix(a.shape[1], out_w, method, antialias)
            a = np.moveaxis(np.tensordot(m, a, axes=(1, 1)), 0, 1)
    if clamp:
        a = np.clip(a, 0.0, 1.0)
    return a.astype(np.float32)


def resize_classical(image: ImageBuffer, out_dims: tuple[int, int], method: str = "bicubic",
                     antialias: bool = True) -> ImageBuffer:
    """Resize to ``out_dims = (height, width)``."""
    out_h, out_w = out_dims
    return image.with_values(resize_array(image.values, out_h, out_w, method, antialias))


# ---------------------------------------------------------------------------
# pairs and augmentation


def modcrop(image: ImageBuffer, s: int) -> ImageBuffer:
    h, w = image.height - image.height % s, image.width - image.width % s
    if h < s or w < s:
        raise StructuralError(f"image {image.height}x{image.width} is smaller than the scale {s}")
    return image.with_values(image.values[:h, :w])


def make_eval_pair(hr_image: ImageBuffer, s: int, source_id: str = "") -> SamplePair:
    """Crop to a multiple of ``s``, convert to luma and bicubic-downscale."""
    if hr_image.height < s or hr_image.width < s:
        raise StructuralError(f"image {hr_image.height}x{hr_image.width} is smaller than the scale {s}")
    hr = to_luma(modcrop(hr_image, s))
    lr = resize_classical(hr, (hr.height // s, hr.width // s), "bicubic", antialias=True)
    return SamplePair(lr, hr, s, None, source_id)


def apply_augmentation(values: np.ndarray, rotation: int, scale: float, flip: bool) -> np.ndarray:
    """Scale (bicubic, antialiased), then rotate by ``rotation`` degrees, then mirror."""
    a = values
    if scale != 1.0:
        h, w = a.shape[:2]
        a = resize_array(a, max(1, round(h * scale)), max(1, round(w * scale)), "bicubic", True)
    k = (rotation // 90) % 4
    if k:
        a = np.rot90(a, k, axes=(0, 1))
    if flip:
        a = a[:, ::-1]
    return np.ascontiguousarray(a)


def draw_augmentation(rng: np.random.Generator) -> tuple[int, float, bool]:
    rotation = 90 * int(rng.integers(4))
    scale = SCALES[int(rng.integers(len(SCALES)))]
    flip = bool(rng.integers(2))
    return rotation, scale, flip


def augment(image: ImageBuffer, rng: np.random.Generator) -> ImageBuffer:
    return image.with_values(apply_augmentation(image.values, *draw_augmentation(rng)))


def worker_rng(seed: int, worker_id: int) -> np.random.Generator:
    """Independent stream per data worker."""
    return np.random.default_rng([seed, worker_id])


# ---------------------------------------------------------------------------
# manifests and samplers


@dataclass
class DatasetManifest:
    root: Path
    paths: list[str]
    task: str = "sr"
    pairs: list[tuple[str, str]] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def open(cls, path: str | Path, task: str | None = None) -> "DatasetManifest":
        """Read a manifest; every listed file must exist and decode."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such manifest: {path}")
        root = path.parent
        lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
        lines = [ln for ln in lines if ln and not ln.startswith("#")]
        if task is None:
            task = "depth" if lines and all("\t" in ln for ln in lines) else "sr"
        m = cls(root, [], task, [])
        for ln in lines:
            if task == "depth":
                parts = ln.split("\t")
                if len(parts) != 2:
                    raise ImageFormatError(f"{path}: depth manifest lines need depth<TAB>guidance: {ln!r}")
                m.pairs.append((parts[0], parts[1]))
            else:
                m.paths.append(ln)
        for rel in m.paths + [p for pair in m.pairs for p in pair]:
            m.load(rel)
        return m

    def load(self, rel: str) -> ImageBuffer:
        if rel not in self._cache:
            self._cache[rel] = load_image(self.root / rel)
        return self._cache[rel]

    def images(self) -> list[ImageBuffer]:
        return [self.load(p) for p in self.paths]

    def depth_pairs(self) -> list[tuple[ImageBuffer, ImageBuffer]]:
        return [(self.load(d), self.load(g)) for d, g in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs) if self.task == "depth" else len(self.paths)


class SRSampler:
    """Random augmented HR patches of ``48 * s`` with their 48x48 bicubic LR."""

    def __init__(self, images: Sequence[ImageBuffer], scale: int, ids: Sequence[str] | None = None):
        if not images:
            raise ValueError("cannot sample from an empty dataset")
        self.scale = scale
        self.patch = LR_PATCH * scale
        self.planes = [to_luma(im).plane for im in images]
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
        for i, p in enumerate(self.planes):
            if min(p.shape) < self.patch:
                raise ValueError(f"image {self.ids[i]} ({p.shape[1]}x{p.shape[0]}) is smaller than "
                                 f"the {self.patch}px training patch")
        self._scaled: dict[tuple[int, float], np.ndarray] = {}

    def _scaled_plane(self, i: int, scale: float) -> np.ndarray:
        key = (i, scale)
        if key not in self._scaled:
            self._scaled[key] = apply_augmentation(self.planes[i], 0, scale, False)
        return self._scaled[key]

    def sample_arrays(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
        i = int(rng.integers(len(self.planes)))
        while True:
            rotation, scale, flip = draw_augmentation(rng)
            base = self._scaled_plane(i, scale)
            if min(base.shape) >= self.patch:
                break
        img = apply_augmentation(base, rotation, 1.0, flip)
        y = int(rng.integers(img.shape[0] - self.patch + 1))
        x = int(rng.integers(img.shape[1] - self.patch + 1))
        hr = img[y:y + self.patch, x:x + self.patch]
        lr = resize_array(hr, LR_PATCH, LR_PATCH, "bicubic", True)
        return lr, np.ascontiguousarray(hr), i

    def sample_pair(self, rng: np.random.Generator) -> SamplePair:
        lr, hr, i = self.sample_arrays(rng)
        return SamplePair(ImageBuffer(lr, "luma-Y"), ImageBuffer(hr, "luma-Y"), self.scale, None, self.ids[i])

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> Batch:
        lrs, hrs = [], []
        for _ in range(batch_size):
            lr, hr, _ = self.sample_arrays(rng)
            lrs.append(lr)
            hrs.append(hr)
        return Batch(np.stack(lrs)[:, None], np.stack(hrs)[:, None], None)


class DepthSampler:
    """Aligned depth/guidance crops; LR depth by nearest-neighbour decimation."""

    def __init__(self, pairs: Sequence[tuple[ImageBuffer, ImageBuffer]], scale: int,
                 patch: int | None = None, ids: Sequence[str] | None = None):
        if not pairs:
            raise ValueError("cannot sample from an empty dataset")
        self.scale = scale
        self.patch = patch or (128 if scale >= 16 else 64)
        if self.patch % scale:
            raise ValueError(f"patch {self.patch} is not divisible by scale {scale}")
        self.depths = [d.plane for d, _ in pairs]
        self.guides = []
        for d, g in pairs:
            if g.channels != 3 or (g.height, g.width) != (d.height, d.width):
                raise ValueError("guidance must be RGB and the same size as its depth map")
            if min(d.height, d.width) < self.patch:
                raise ValueError(f"depth map smaller than the {self.patch}px patch")
            self.guides.append(g.values)
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]

    def sample_arrays(self, rng: np.random.Generator):
        i = int(rng.integers(len(self.depths)))
        d, g = self.depths[i], self.guides[i]
        y = int(rng.integers(d.shape[0] - self.patch + 1))
        x = int(rng.integers(d.shape[1] - self.patch + 1))
        hr = d[y:y + self.patch, x:x + self.patch]
        guide = g[y:y + self.patch, x:x + self.patch]
        n = self.patch // self.scale
        lr = resize_array(hr, n, n, "nearest", False)
        return lr, np.ascontiguousarray(hr), np.ascontiguousarray(guide), i

    def sample_pair(self, rng: np.random.Generator) -> SamplePair:
        lr, hr, guide, i = self.sample_arrays(rng)
        return SamplePair(ImageBuffer(lr, "depth", 65535.0), ImageBuffer(hr, "depth", 65535.0), self.scale,
                          ImageBuffer(guide, "rgb"), self.ids[i])

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> Batch:
        lrs, hrs, gs = [], [], []
        for _ in range(batch_size):
            lr, hr, g, _ = self.sample_arrays(rng)
            lrs.append(lr)
            hrs.append(hr)
            gs.append(g.transpose(2, 0, 1))
        return Batch(np.stack(lrs)[:, None], np.stack(hrs)[:, None], np.stack(gs))


def sampler_for(manifest: DatasetManifest, s: int, patch: int | None = None):
    key = ("sampler", s, patch)
    if key not in manifest._cache:
        if len(manifest) == 0:
            raise ValueError("manifest lists no images")
        if manifest.task == "depth":
            manifest._cache[key] = DepthSampler(manifest.depth_pairs(), s, patch,
                                                [d for d, _ in manifest.pairs])
        else:
            manifest._cache[key] = SRSampler(manifest.images(), s, manifest.paths)
    return manifest._cache[key]


def sample_training_pair(manifest: DatasetManifest, s: int, rng: np.random.Generator) -> SamplePair:
    return sampler_for(manifest, s).sample_pair(rng)
