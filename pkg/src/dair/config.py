"""Model / training configuration and the ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

VARIANTS = ("dair", "fcn-baseline", "dair-asp", "recur", "prog4x", "joint")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "dair"
    depth: int = 10
    channels: int = 64
    f: int = 5
    s: int = 2
    recursions: int = 0
    asp_intervals: tuple[int, ...] | None = None
    asp_shared: bool = True
    input_channels: int = 1
    head_init: str = "glorot"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.channels < 1:
            raise ConfigError("channels must be positive")
        if self.f < 1 or self.f % 2 == 0:
            raise ConfigError(f"kernel extent f must be odd, got {self.f}")
        if self.recursions < 0:
            raise ConfigError("recursions must be >= 0")
        if self.head_init not in ("glorot", "zero"):
            raise ConfigError(f"head-init must be glorot or zero, got {self.head_init!r}")
        if self.variant == "joint":
            if self.input_channels != 4:
                raise ConfigError("joint variant takes 4 input channels (depth + RGB guidance)")
            if self.s < 1:
                raise ConfigError("scale must be >= 1")
        else:
            if self.input_channels != 1:
                raise ConfigError("super-resolution variants take a single luma channel")
            if self.s not in (2, 3, 4):
                raise ConfigError(f"super-resolution scale must be 2, 3 or 4, got {self.s}")
        if self.variant == "recur" and self.recursions < 1:
            raise ConfigError("recur variant needs recursions >= 1")
        if self.variant == "prog4x" and self.s != 4:
            raise ConfigError("prog4x is defined for s = 4 only")
        if self.asp_intervals is not None:
            iv = tuple(self.asp_intervals)
            if not iv or any(x < 1 for x in iv) or any(b <= a for a, b in zip(iv, iv[1:])):
                raise ConfigError(f"asp-intervals must be positive and increasing, got {iv}")
            object.__setattr__(self, "asp_intervals", iv)

    @property
    def intervals(self) -> tuple[int, ...]:
        """Dilation intervals used by the first resampling stage."""
        if self.variant == "dair-asp":
            return self.asp_intervals or (self.s, 2 * self.s)
        return (self.s,)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200_000
    batch_size: int = 16
    lr0: float = 1e-4
    lr_halving_interval: int = 50_000
    seed: int = 0
    scale: int = 2
    patch_hr_size: int | None = None
    checkpoint_interval: int = 10_000
    log_interval: int = 100
    task: str = "sr"

    def __post_init__(self):
        for name in ("batch_size", "lr_halving_interval", "scale", "checkpoint_interval", "log_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{kebab(name)} must be positive")
        if self.iterations < 0 or self.lr0 <= 0:
            raise ConfigError("iterations must be >= 0 and lr0 > 0")
        if self.task not in ("sr", "depth"):
            raise ConfigError(f"task must be sr or depth, got {self.task!r}")
        if self.patch_hr_size is None:
            object.__setattr__(self, "patch_hr_size", default_patch_size(self.task, self.scale))
        elif self.task == "sr" and self.patch_hr_size != 48 * self.scale:
            raise ConfigError(f"patch-hr-size must equal 48*scale = {48 * self.scale}")


def default_patch_size(task: str, scale: int) -> int:
    if task == "sr":
        return 48 * scale
    return 128 if scale >= 16 else 64


def kebab(name: str) -> str:
    return name.replace("_", "-")


def _parse_value(f: dataclasses.Field, raw: str):
    name = f.name
    if name == "asp_intervals":
        if raw.lower() in ("", "none"):
            return None
        return tuple(int(x) for x in raw.replace(" ", "").split(","))
    if name == "patch_hr_size" and raw.lower() in ("", "none"):
        return None
    default = f.default
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"{kebab(name)}: expected a boolean, got {raw!r}")
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, int) or name == "patch_hr_size":
        return int(raw)
    return raw


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse a combined model/training config; unknown keys are errors."""
    pairs = parse_pairs(text)
    model_fields = {kebab(f.name): f for f in fields(ModelConfig)}
    train_fields = {kebab(f.name): f for f in fields(TrainConfig)}
    unknown = sorted(set(pairs) - set(model_fields) - set(train_fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    m = {f.name: _parse_value(f, pairs[k]) for k, f in model_fields.items() if k in pairs}
    t = {f.name: _parse_value(f, pairs[k]) for k, f in train_fields.items() if k in pairs}
    # one scale, two names
    if "s" in m and "scale" in t and m["s"] != t["scale"]:
        raise ConfigError(f"s = {m['s']} disagrees with scale = {t['scale']}")
    if "s" in m:
        t.setdefault("scale", m["s"])
    elif "scale" in t:
        m["s"] = t["scale"]
    if m.get("variant") == "joint":
        m.setdefault("input_channels", 4)
        t.setdefault("task", "depth")
    try:
        return ModelConfig(**m), TrainConfig(**t)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_model_config(text: str) -> ModelConfig:
    pairs = parse_pairs(text)
    model_fields = {kebab(f.name): f for f in fields(ModelConfig)}
    unknown = sorted(set(pairs) - set(model_fields))
    if unknown:
        raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
    return ModelConfig(**{f.name: _parse_value(f, pairs[k]) for k, f in model_fields.items() if k in pairs})


def format_config(cfg) -> str:
    return "".join(f"{kebab(f.name)} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
