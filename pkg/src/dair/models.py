"""Architectures built around the adaptive resampling operator.

Every model is a named, ordered store of parameter tensors plus a forward
plan selected by ``config.variant``.  Parameter names are stable, so a
checkpoint written by one process can be loaded into a fresh build.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .config import ModelConfig
from .optim import glorot_init
from .resampling import KernelField, adaptive_resample, adaptive_resample_asp
from .tensor import StructuralError, Tensor, concat_channels, conv2d, nearest_upsample, pixel_shuffle, relu


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


class Model:
    """Parameter store and forward plan for one configured architecture.

    ``sharing`` maps each logical stage to the parameter prefix it reads, so
    several stages may alias one set of tensors.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], sharing: dict[str, str],
                 plan: Callable):
        self.config = config
        self.params = params
        self.sharing = sharing
        self._plan = plan

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def stage_parameters(self, stage: str) -> dict[str, Tensor]:
        """Tensors read by a logical stage, keyed by their name within the stage."""
        prefix = self.sharing[stage] + "."
        return {k[len(prefix):]: p for k, p in self.params.items() if k.startswith(prefix)}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, lr, guidance=None) -> tuple[Tensor, list[KernelField]]:
        return forward_sr(self, lr, guidance)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise StructuralError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, p in self.params.items():
            a = np.asarray(arrays[name])
            if a.shape != p.shape:
                raise StructuralError(f"{name}: expected shape {p.shape}, got {a.shape}")
            p.data[...] = a

    def __repr__(self) -> str:
        return f"Model({self.config.variant}, {len(self.params)} tensors, {self.num_parameters()} values)"


# ---------------------------------------------------------------------------
# parameter construction


def _conv(params, name, cin, cout, rng, k=3):
    fan_in, fan_out = cin * k * k, cout * k * k
    params[f"{name}.weight"] = Tensor(glorot_init((cout, cin, k, k), fan_in, fan_out, rng), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)


def _trunk_params(params, prefix, cin, cfg, rng):
    _conv(params, f"{prefix}.conv0", cin, cfg.channels, rng)
    for i in range(1, cfg.depth):
        _conv(params, f"{prefix}.conv{i}", cfg.channels, cfg.channels, rng)


def _head_params(params, prefix, cfg, rng, nsets=1, centre_weight=1.0):
    ff = cfg.f * cfg.f
    _conv(params, f"{prefix}.head", cfg.channels, ff * nsets, rng)
    if cfg.head_init == "zero":
        params[f"{prefix}.head.weight"].data[...] = 0
    # start from the centre-tap kernel, i.e. nearest-neighbour upsampling
    bias = params[f"{prefix}.head.bias"].data
    centre = (cfg.f // 2) * cfg.f + cfg.f // 2
    for j in range(nsets):
        bias[j * ff + centre] = centre_weight


def _lr_stage_params(params, prefix, cin, s, cfg, rng, nsets=1, centre_weight=1.0):
    _trunk_params(params, prefix, cin, cfg, rng)
    _conv(params, f"{prefix}.expand", cfg.channels, cfg.channels * s * s, rng)
    _head_params(params, prefix, cfg, rng, nsets, centre_weight)


def _hr_stage_params(params, prefix, cin, cfg, rng):
    _trunk_params(params, prefix, cin, cfg, rng)
    _head_params(params, prefix, cfg, rng)


# ---------------------------------------------------------------------------
# forward pieces


def _c(params, name, x):
    return conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"])


def _run_trunk(params, prefix, x, depth):
    for i in range(depth):
        x = relu(_c(params, f"{prefix}.conv{i}", x))
    return x


def _lr_stage(params, prefix, x, s, cfg) -> KernelField:
    t = _run_trunk(params, prefix, x, cfg.depth)
    t = pixel_shuffle(relu(_c(params, f"{prefix}.expand", t)), s)
    return KernelField(_c(params, f"{prefix}.head", t), cfg.f, s)


def _hr_stage(params, prefix, x, s, cfg) -> KernelField:
    t = _run_trunk(params, prefix, x, cfg.depth)
    return KernelField(_c(params, f"{prefix}.head", t), cfg.f, s)


def _refine(params, cfg, estimate, nn, fields):
    for _ in range(cfg.recursions):
        field = _hr_stage(params, "refine", concat_channels(estimate, nn), cfg.s, cfg)
        fields.append(field)
        estimate = adaptive_resample(estimate, field)
    return estimate


# ---------------------------------------------------------------------------
# builders


def _refine_sharing(cfg, sharing):
    for i in range(1, cfg.recursions + 1):
        sharing[f"refine{i}"] = "refine"


def build_dair(config: ModelConfig, rng=0) -> Model:
    if config.variant not in ("dair", "dair-asp"):
        raise StructuralError(f"build_dair cannot build variant {config.variant!r}")
    rng = _rng(rng)
    intervals = config.intervals
    nsets = 1 if config.asp_shared else len(intervals)
    params: dict[str, Tensor] = {}
    # the centre taps of all intervals read the same pixel, so split the unit weight
    _lr_stage_params(params, "stage0", 1, config.s, config, rng, nsets, 1.0 / len(intervals))
    sharing = {"stage0": "stage0"}
    if config.recursions:
        _hr_stage_params(params, "refine", 2, config, rng)
        _refine_sharing(config, sharing)

    def plan(params, lr, guidance):
        nn = nearest_upsample(lr, config.s)
        field = _lr_stage(params, "stage0", lr, config.s, config)
        if config.variant == "dair-asp":
            out = adaptive_resample_asp(nn, field, intervals, shared=config.asp_shared)
        else:
            out = adaptive_resample(nn, field)
        fields = [field]
        return _refine(params, config, out, nn, fields), fields

    return Model(config, params, sharing, plan)


def build_fcn_baseline(config: ModelConfig, rng=0) -> Model:
    """Same trunk and subpixel upsampling, but the head predicts the image."""
    if config.variant != "fcn-baseline":
        raise StructuralError(f"build_fcn_baseline cannot build variant {config.variant!r}")
    rng = _rng(rng)
    params: dict[str, Tensor] = {}
    _trunk_params(params, "stage0", 1, config, rng)
    _conv(params, "stage0.expand", config.channels, config.channels * config.s ** 2, rng)
    _conv(params, "stage0.head", config.channels, 1, rng)

    def plan(params, lr, guidance):
        t = _run_trunk(params, "stage0", lr, config.depth)
        t = pixel_shuffle(relu(_c(params, "stage0.expand", t)), config.s)
        return _c(params, "stage0.head", t), []

    return Model(config, params, {"stage0": "stage0"}, plan)


def build_recur(config: ModelConfig, rng=0) -> Model:
    """DAIR stage on the LR input followed by ``r`` weight-shared refinements."""
    if config.variant != "recur":
        raise StructuralError(f"build_recur cannot build variant {config.variant!r}")
    if config.recursions < 1:
        raise StructuralError("recur needs at least one refinement stage")
    rng = _rng(rng)
    params: dict[str, Tensor] = {}
    _lr_stage_params(params, "stage0", 1, config.s, config, rng)
    _hr_stage_params(params, "refine", 2, config, rng)
    sharing = {"stage0": "stage0"}
    _refine_sharing(config, sharing)

    def plan(params, lr, guidance):
        nn = nearest_upsample(lr, config.s)
        field = _lr_stage(params, "stage0", lr, config.s, config)
        fields = [field]
        out = adaptive_resample(nn, field)
        return _refine(params, config, out, nn, fields), fields

    return Model(config, params, sharing, plan)


def build_prog4x(config: ModelConfig, rng=0) -> Model:
    """Two cascaded 2x stages; optional refinements run on the 4x output."""
    if config.variant != "prog4x":
        raise StructuralError(f"build_prog4x cannot build variant {config.variant!r}")
    if config.s != 4:
        raise StructuralError("prog4x requires s = 4")
    rng = _rng(rng)
    params: dict[str, Tensor] = {}
    _lr_stage_params(params, "stageA", 1, 2, config, rng)
    _lr_stage_params(params, "stageB", 2, 2, config, rng)
    sharing = {"stageA": "stageA", "stageB": "stageB"}
    if config.recursions:
        _hr_stage_params(params, "refine", 2, config, rng)
        _refine_sharing(config, sharing)

    def plan(params, lr, guidance):
        nn2 = nearest_upsample(lr, 2)
        field_a = _lr_stage(params, "stageA", lr, 2, config)
        est2 = adaptive_resample(nn2, field_a)
        field_b = _lr_stage(params, "stageB", concat_channels(est2, nn2), 2, config)
        out = adaptive_resample(nearest_upsample(est2, 2), field_b)
        fields = [field_a, field_b]
        if config.recursions:
            out = _refine(params, config, out, nearest_upsample(lr, 4), fields)
        return out, fields

    return Model(config, params, sharing, plan)


def build_joint(config: ModelConfig, rng=0) -> Model:
    """Kernels predicted at HR from the upsampled depth and an RGB guidance image."""
    if config.variant != "joint":
        raise StructuralError(f"build_joint cannot build variant {config.variant!r}")
    if config.input_channels != 4:
        raise StructuralError("joint model takes 4 input channels")
    rng = _rng(rng)
    params: dict[str, Tensor] = {}
    _hr_stage_params(params, "stage0", 4, config, rng)

    def plan(params, depth, guidance):
        nn = nearest_upsample(depth, config.s)
        field = _hr_stage(params, "stage0", concat_channels(nn, guidance), config.s, config)
        return adaptive_resample(nn, field), [field]

    return Model(config, params, {"stage0": "stage0"}, plan)


_BUILDERS = {
    "dair": build_dair,
    "dair-asp": build_dair,
    "fcn-baseline": build_fcn_baseline,
    "recur": build_recur,
    "prog4x": build_prog4x,
    "joint": build_joint,
}


def build_model(config: ModelConfig, rng=0) -> Model:
    return _BUILDERS[config.variant](config, rng)


def forward_sr(model: Model, lr, guidance=None) -> tuple[Tensor, list[KernelField]]:
    """Super-resolve ``lr``; returns the estimate and every kernel field used."""
    lr = lr if isinstance(lr, Tensor) else Tensor(lr)
    if lr.data.ndim != 4 or lr.shape[1] != 1:
        raise StructuralError(f"input must be (N, 1, H, W), got {lr.shape}")
    cfg = model.config
    if cfg.variant == "joint":
        if guidance is None:
            raise StructuralError("joint model needs a guidance image")
        guidance = guidance if isinstance(guidance, Tensor) else Tensor(guidance)
        n, _, h, w = lr.shape
        if guidance.shape != (n, 3, h * cfg.s, w * cfg.s):
            raise StructuralError(
                f"guidance must be {(n, 3, h * cfg.s, w * cfg.s)}, got {guidance.shape}")
    elif guidance is not None:
        raise StructuralError(f"{cfg.variant} model does not take a guidance image")
    return model._plan(model.params, lr, guidance)
