"""Binary checkpoint format.

All integers little-endian::

    "DAIR" | u32 version | u32 flags | u64 step
    u32 config length | config text (UTF-8, key = value lines)
    u32 tensor count | tensors
    [flags bit 0] u32 count | Adam first moments, u32 count | second moments
    u64 word count | u64 RNG state words

A tensor is ``u16 name length | name | u8 rank | rank x u64 | float32 data``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig, format_config, parse_model_config
from .optim import AdamState

MAGIC = b"DAIR"
VERSION = 1
FLAG_OPTIMIZER = 1
_MASK64 = (1 << 64) - 1


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


class CheckpointValidationError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState | None
    step: int
    rng_state: tuple[int, ...]
    version: int = VERSION


def rng_to_words(rng: np.random.Generator) -> tuple[int, ...]:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators can be checkpointed")
    s, inc = st["state"]["state"], st["state"]["inc"]
    return (s & _MASK64, s >> 64, inc & _MASK64, inc >> 64, int(st["has_uint32"]), int(st["uinteger"]))


def rng_from_words(words) -> np.random.Generator:
    if len(words) != 6:
        raise CheckpointFormatError(f"expected 6 RNG state words, got {len(words)}")
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": words[0] | (words[1] << 64), "inc": words[2] | (words[3] << 64)},
        "has_uint32": int(words[4]),
        "uinteger": int(words[5]),
    }
    return np.random.Generator(bg)


def _pack_tensors(items) -> bytes:
    chunks = [struct.pack("<I", len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def encode(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params)
    flags = FLAG_OPTIMIZER if ckpt.adam is not None else 0
    cfg = format_config(ckpt.config).encode("utf-8")
    parts = [MAGIC, struct.pack("<IIQ", ckpt.version, flags, ckpt.step), struct.pack("<I", len(cfg)), cfg,
             _pack_tensors([(n, ckpt.params[n]) for n in names])]
    if ckpt.adam is not None:
        parts.append(_pack_tensors(list(zip(names, ckpt.adam.m))))
        parts.append(_pack_tensors(list(zip(names, ckpt.adam.v))))
    parts.append(struct.pack("<Q", len(ckpt.rng_state)))
    parts.append(struct.pack(f"<{len(ckpt.rng_state)}Q", *ckpt.rng_state))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def tensors(self, what: str) -> list[tuple[str, np.ndarray]]:
        (count,) = self.unpack("I", f"{what} count")
        out = []
        for _ in range(count):
            start = self.pos
            (nlen,) = self.unpack("H", "tensor name length")
            try:
                name = self.take(nlen, "tensor name").decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointFormatError("tensor name is not UTF-8", start) from None
            (rank,) = self.unpack("B", "tensor rank")
            dims = self.unpack(f"{rank}Q", f"dims of {name}") if rank else ()
            numel = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = self.take(4 * numel, f"data of {name}")
            out.append((name, np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)))
        return out


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic, not a DAIR checkpoint", 0)
    version, flags, step = r.unpack("IIQ", "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}", 4)
    (clen,) = r.unpack("I", "config length")
    cpos = r.pos
    try:
        config = parse_model_config(r.take(clen, "config text").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointFormatError(f"invalid config block: {exc}", cpos) from None
    params = r.tensors("tensor")
    adam = None
    if flags & FLAG_OPTIMIZER:
        m = r.tensors("first-moment")
        v = r.tensors("second-moment")
        adam = AdamState([a for _, a in m], [a for _, a in v], step)
        if [n for n, _ in m] != [n for n, _ in params] or [n for n, _ in v] != [n for n, _ in params]:
            raise CheckpointValidationError("optimizer state names do not match parameters")
    (nwords,) = r.unpack("Q", "RNG word count")
    words = r.unpack(f"{nwords}Q", "RNG words") if nwords else ()
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after checkpoint", r.pos)
    ckpt = Checkpoint(config, dict(params), adam, step, tuple(words), version)
    validate(ckpt)
    return ckpt


def validate(ckpt: Checkpoint) -> None:
    """Check the tensors against the shapes the declared config implies."""
    from .models import build_model

    expected = {k: p.shape for k, p in build_model(ckpt.config, 0).params.items()}
    got = {k: a.shape for k, a in ckpt.params.items()}
    if set(expected) != set(got):
        raise CheckpointValidationError(
            f"tensor names do not match config: missing {sorted(set(expected) - set(got))}, "
            f"unexpected {sorted(set(got) - set(expected))}")
    for name, shape in expected.items():
        if got[name] != shape:
            raise CheckpointValidationError(f"{name}: config implies {shape}, file has {got[name]}")
    if ckpt.adam is not None:
        for name, m, v in zip(ckpt.params, ckpt.adam.m, ckpt.adam.v):
            if m.shape != got[name] or v.shape != got[name]:
                raise CheckpointValidationError(f"optimizer state for {name} has the wrong shape")


def checkpoint_save(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def checkpoint_load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
