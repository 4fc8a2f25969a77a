"""Initialisation, Adam, the step-decay schedule and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tensor import StructuralError, Tensor, backward, l1_loss

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class NumericFault(RuntimeError):
    """A NaN/Inf appeared in the loss or the gradients."""


def glorot_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on ``(-a, a)`` with ``a = sqrt(6 / (fan_in + fan_out))``."""
    if fan_in <= 0 or fan_out <= 0:
        raise StructuralError(f"fans must be positive, got fan_in={fan_in}, fan_out={fan_out}")
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(np.float32)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[Tensor]) -> "AdamState":
        params = _distinct(params)
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def _distinct(params: Sequence[Tensor]) -> list[Tensor]:
    seen: set[int] = set()
    out = []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float) -> AdamState:
    """One bias-corrected Adam update, in place.

    A tensor listed more than once (an alias) is updated once, with the
    gradient given at its first occurrence.
    """
    seen: set[int] = set()
    pairs = []
    for p, g in zip(params, grads):
        if id(p) in seen:
            continue
        seen.add(id(p))
        pairs.append((p, g))
    if len(pairs) != len(state.m):
        raise StructuralError(f"optimizer state holds {len(state.m)} tensors, got {len(pairs)}")
    for p, g in pairs:
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for parameter of shape {p.shape}")
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for (p, g), m, v in zip(pairs, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise StructuralError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + EPS)).astype(p.dtype)
    return state


def lr_at(step: int, config) -> float:
    """``lr0`` halved once every ``lr_halving_interval`` steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.lr0 * 0.5 ** (step // config.lr_halving_interval)


@dataclass
class LogEntry:
    step: int
    lr: float
    loss: float
    seconds: float

    def line(self) -> str:
        return f"{self.step}\t{self.lr!r}\t{self.loss!r}\t{self.seconds:.3f}"


@dataclass
class TrainResult:
    checkpoint: "Checkpoint"
    log: list[LogEntry]
    losses: list[float] = field(default_factory=list)


def train(model, dataset, config, out_dir: str | Path | None = None, resume=None,
          on_log: Callable[[LogEntry], None] | None = None) -> TrainResult:
    """Sample, forward, L1, backward, Adam; repeated ``config.iterations`` times.

    ``resume`` is a :class:`Checkpoint` to continue from.  With ``out_dir`` a
    checkpoint is written every ``checkpoint_interval`` steps (``last.ckpt``)
    and the loss log is appended to ``loss.log``.
    """
    from .checkpoint import Checkpoint, checkpoint_save, rng_from_words, rng_to_words

    params = model.parameters()
    if resume is not None:
        model.load_arrays(resume.params)
        state = resume.adam or AdamState.zeros(params)
        rng = rng_from_words(resume.rng_state)
        step = resume.step
    else:
        state = AdamState.zeros(params)
        rng = np.random.default_rng(config.seed)
        step = 0

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "loss.log", "a", encoding="utf-8")

    def snapshot():
        return Checkpoint(model.config, {k: v.copy() for k, v in model.state_arrays().items()},
                          AdamState([m.copy() for m in state.m], [v.copy() for v in state.v], state.t),
                          step, rng_to_words(rng))

    log: list[LogEntry] = []
    losses: list[float] = []
    t0 = time.perf_counter()
    try:
        while step < config.iterations:
            lr = lr_at(step, config)
            batch = dataset.sample_batch(rng, config.batch_size)
            for p in params:
                p.grad = None
            sr, _ = model.forward(batch.lr, batch.guidance)
            loss = l1_loss(sr, Tensor(batch.hr))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericFault(f"non-finite loss {value} at step {step}")
            grads = backward(loss)
            adam_step(params, [grads.get(p) for p in params], state, lr)
            step += 1
            losses.append(value)
            if step % config.log_interval == 0 or step == config.iterations:
                entry = LogEntry(step, lr, value, time.perf_counter() - t0)
                log.append(entry)
                if log_fh is not None:
                    log_fh.write(entry.line() + "\n")
                    log_fh.flush()
                if on_log is not None:
                    on_log(entry)
                logger.info("step %d lr %.3g loss %.6f", step, lr, value)
            if out is not None and step % config.checkpoint_interval == 0:
                checkpoint_save(snapshot(), out / "last.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    final = snapshot()
    if out is not None:
        checkpoint_save(final, out / "final.ckpt")
    return TrainResult(final, log, losses)
