"""Dense tensors with reverse-mode differentiation.

Only the handful of operations the adaptive-resampling architectures need are
provided.  Every op takes and returns :class:`Tensor`; the graph is recorded
only when at least one input requires a gradient and recording is enabled.
"""

from __future__ import annotations

import contextlib
import enum
from typing import Callable, Iterable, Sequence

import numpy as np


class StructuralError(ValueError):
    """Raised when shapes or arguments violate an operation's contract."""


class PrecisionMode(enum.Enum):
    STANDARD = "standard-32bit"
    CHECK = "check-64bit"


_DTYPES = {PrecisionMode.STANDARD: np.float32, PrecisionMode.CHECK: np.float64}
_state = {"mode": PrecisionMode.STANDARD, "grad": True, "kinks": None}


def current_precision() -> PrecisionMode:
    return _state["mode"]


def current_dtype():
    return _DTYPES[_state["mode"]]


@contextlib.contextmanager
def precision(mode: PrecisionMode | str):
    """Temporarily switch the dtype new tensors are created with."""
    mode = PrecisionMode(mode)
    prev = _state["mode"]
    _state["mode"] = mode
    try:
        yield mode
    finally:
        _state["mode"] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation / inference)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def kink_margin():
    """Track the smallest ``|x|`` fed to a non-differentiable point.

    Yields a one-element list holding the running minimum over relu inputs
    and l1 differences; finite-difference checks use it to reject draws that
    sit within ``eps`` of a kink.
    """
    prev = _state["kinks"]
    box = [np.inf]
    _state["kinks"] = box
    try:
        yield box
    finally:
        _state["kinks"] = prev


def _note_kinks(values: np.ndarray) -> None:
    box = _state["kinks"]
    if box is not None and values.size:
        box[0] = min(box[0], float(np.abs(values).min()))


class Tensor:
    """An array plus the provenance needed to differentiate through it.

    ``op`` names the producing operation (``"leaf"`` for inputs and
    parameters), ``parents`` are the input tensors in argument order and
    ``grad`` is filled by :func:`backward` for tensors that require it.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or current_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every leaf that requires a gradient.

    Returns a mapping from leaf tensor to its gradient and also stores the
    gradient on ``leaf.grad`` (added to any gradient already present).
    """
    if loss.size != 1:
        raise StructuralError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for leaf, g in leaves.items():
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    return leaves


# ---------------------------------------------------------------------------
# operations


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    # xp is channel-major padded input (C, N, Hp, Wp)
    c, n = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, dy, dx] = xp[:, :, dy:dy + ho, dx:dx + wo]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad: int | None = None) -> Tensor:
    """Zero-padded 2-D cross-correlation, computed as one im2col GEMM.

    ``pad`` defaults to ``kh // 2`` which keeps the spatial size.
    """
    x, weight = _wrap(x), _wrap(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise StructuralError("conv2d expects NCHW input and (Cout, Cin, kh, kw) weight")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise StructuralError(f"conv2d channel mismatch: input has {c}, weight expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise StructuralError(f"conv2d kernel must be odd, got {kh}x{kw}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (cout,):
            raise StructuralError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    p = kh // 2 if pad is None else int(pad)
    ho, wo = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise StructuralError("conv2d output would be empty")

    xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x.data.transpose(1, 0, 2, 3)
    cols = _im2col(xp, kh, kw, ho, wo)
    del xp
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    need_x = x.requires_grad

    def _bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gm @ cols.T).reshape(weight.shape)
        gx = None
        if need_x:
            gcols = (wmat.T @ gm).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, :, dy:dy + ho, dx:dx + wo] += gcols[:, dy, dx]
            gx = np.ascontiguousarray(gxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    return _result(out, "conv2d", parents, _bw)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    _note_kinks(x.data)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise StructuralError("concat_channels expects NCHW tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise StructuralError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype)], axis=1)
    return _result(out, "concat", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def nearest_upsample(x: Tensor, s: int) -> Tensor:
    x = _wrap(x)
    if s < 1:
        raise StructuralError(f"upsampling factor must be >= 1, got {s}")
    if s == 1:
        return _result(x.data.copy(), "nearest_upsample", (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, s, w, s)).reshape(n, c, h * s, w * s)

    def _bw(g):
        return (g.reshape(n, c, h, s, w, s).sum(axis=(3, 5)),)

    return _result(np.ascontiguousarray(out), "nearest_upsample", (x,), _bw)


def _shuffle(data: np.ndarray, s: int) -> np.ndarray:
    n, cs2, h, w = data.shape
    c = cs2 // (s * s)
    return data.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)


def _unshuffle(data: np.ndarray, s: int) -> np.ndarray:
    n, c, hs, ws = data.shape
    h, w = hs // s, ws // s
    return data.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h, w)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Depth-to-space: channel ``c*s*s + dy*s + dx`` lands at ``(y*s+dy, x*s+dx)``."""
    x = _wrap(x)
    if s < 1 or x.shape[1] % (s * s):
        raise StructuralError(f"channel count {x.shape[1]} not divisible by {s}^2")
    out = np.ascontiguousarray(_shuffle(x.data, s))
    return _result(out, "pixel_shuffle", (x,), lambda g: (np.ascontiguousarray(_unshuffle(g, s)),))


def space_to_depth(x: Tensor, s: int) -> Tensor:
    x = _wrap(x)
    if s < 1 or x.shape[2] % s or x.shape[3] % s:
        raise StructuralError(f"spatial size {x.shape[2:]} not divisible by {s}")
    out = np.ascontiguousarray(_unshuffle(x.data, s))
    return _result(out, "space_to_depth", (x,), lambda g: (np.ascontiguousarray(_shuffle(g, s)),))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at zero difference is 0."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise StructuralError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    _note_kinks(diff)
    count = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=pred.dtype)

    def _bw(g):
        sg = np.sign(diff) * (g / count)
        return sg.astype(pred.dtype), (-sg).astype(target.dtype)

    return _result(out, "l1_loss", (pred, target), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise StructuralError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise StructuralError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    x = _wrap(x)
    return _result((x.data * c).astype(x.dtype), "scale", (x,), lambda g: (g * c,))


def tensor_sum(x: Tensor) -> Tensor:
    x = _wrap(x)
    shape = x.shape
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _result(out, "sum", (x,), lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


# ---------------------------------------------------------------------------
# finite-difference verification


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Iterable[np.ndarray | Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` receives one tensor per input and must return a scalar tensor.  The
    check runs in 64-bit mode.  With ``max_coords`` only that many randomly
    chosen coordinates per input are probed (the analytic gradient is still
    taken from one full backward pass).
    """
    rng = rng or np.random.default_rng(0)
    with precision(PrecisionMode.CHECK):
        base = [np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in inputs]
        leaves = [Tensor(b, requires_grad=True) for b in base]
        loss = fn(*leaves)
        grads = backward(loss)
        worst = 0.0
        for i, b in enumerate(base):
            analytic = grads.get(leaves[i])
            if analytic is None:
                analytic = np.zeros_like(b)
            flat = b.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            numeric = np.empty(coords.size)
            for j, k in enumerate(coords):
                saved = flat[k]
                flat[k] = saved + eps
                with no_grad():
                    up = fn(*[Tensor(x) for x in base]).data
                flat[k] = saved - eps
                with no_grad():
                    down = fn(*[Tensor(x) for x in base]).data
                flat[k] = saved
                numeric[j] = (float(up) - float(down)) / (2 * eps)
            worst = max(worst, relative_error(analytic.reshape(-1)[coords], numeric))
    return worst
