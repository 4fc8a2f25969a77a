"""``dair`` command line: train, eval, sr, depth-sr, resize, visualize, gradcheck.

Exit status: 0 success, 1 usage error, 2 data or format error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import CheckpointFormatError, CheckpointValidationError, checkpoint_load
from .config import ConfigError, ModelConfig, load_config
from .metrics import MetricRecord, MetricReport, psnr, ssim
from .models import build_model, forward_sr
from .optim import NumericFault, train
from .resampling import KernelField, adaptive_resample, adaptive_resample_asp
from .tensor import (PrecisionMode, StructuralError, Tensor, conv2d, grad_check, kink_margin, l1_loss, mul,
                     no_grad, pixel_shuffle, precision, scale, tensor_sum)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_BOUND = 1e-5
KINK_MARGIN = 1e-3

log = logging.getLogger("dair")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_model(path):
    ckpt = checkpoint_load(path)
    model = build_model(ckpt.config, 0)
    model.load_arrays(ckpt.params)
    return model


def _super_resolve(model, plane: np.ndarray, guidance: np.ndarray | None = None):
    """Run the model on one ``(H, W)`` plane; returns the HR plane and the fields."""
    with no_grad():
        g = None if guidance is None else Tensor(guidance.transpose(2, 0, 1)[None])
        sr, fields = forward_sr(model, Tensor(plane[None, None]), g)
    return sr.data[0, 0], fields


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_config(args.config)
    manifest = D.DatasetManifest.open(args.manifest, train_cfg.task)
    patch = train_cfg.patch_hr_size if train_cfg.task == "depth" else None
    dataset = D.sampler_for(manifest, train_cfg.scale, patch)
    model = build_model(model_cfg, train_cfg.seed)
    resume = None
    if args.resume:
        resume = checkpoint_load(args.resume)
        if resume.config != model_cfg:
            raise ConfigError("checkpoint config does not match the training config")
    result = train(model, dataset, train_cfg, out_dir=args.out, resume=resume,
                   on_log=lambda e: print(e.line(), flush=True))
    print(f"final checkpoint at step {result.checkpoint.step}: {Path(args.out) / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.model is None or args.model == "none") and args.baseline is None:
        raise UsageError("eval needs --model <ckpt> or --baseline <method>")
    if args.model not in (None, "none") and args.baseline is not None:
        raise UsageError("--model and --baseline are mutually exclusive")
    s = args.scale
    shave = s if args.shave is None else args.shave
    model = None
    if args.baseline is None:
        model = _load_model(args.model)
        if model.config.s != s:
            raise UsageError(f"model was built for scale {model.config.s}, not {s}")
    manifest = D.DatasetManifest.open(args.manifest, "sr")
    report = MetricReport()
    for rel in manifest.paths:
        pair = D.make_eval_pair(manifest.load(rel), s, rel)
        if model is None:
            sr = D.resize_array(pair.lr.plane, pair.hr.height, pair.hr.width, args.baseline, True)
        else:
            sr, _ = _super_resolve(model, pair.lr.plane)
        report.add(MetricRecord(rel, psnr(sr, pair.hr, shave), ssim(sr, pair.hr, shave)))
    text = report.format({"method": args.baseline or args.model, "scale": s, "shave": shave})
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_sr(args) -> int:
    model = _load_model(args.model)
    if model.config.variant == "joint":
        raise UsageError("use depth-sr for joint models")
    image = D.load_image(args.inp)
    s = model.config.s
    if image.channels == 3:
        ycc = D.rgb_to_ycbcr(image)
        y, fields = _super_resolve(model, ycc[:, :, 0])
        chroma = D.resize_array(ycc[:, :, 1:], image.height * s, image.width * s, "bicubic", True)
        out = D.ycbcr_to_rgb(np.concatenate([y[:, :, None], chroma], axis=2))
    else:
        y, fields = _super_resolve(model, image.plane)
        out = image.with_values(np.clip(y, 0, 1))
    D.save_image(out, args.out)
    if args.tap_fields:
        from .viz import export_channel_maps

        for i, field in enumerate(fields):
            export_channel_maps(field, Path(args.tap_fields) / f"stage{i}")
    return EXIT_OK


def cmd_depth_sr(args) -> int:
    model = _load_model(args.model)
    if model.config.variant != "joint":
        raise UsageError("depth-sr needs a joint model")
    depth = D.load_image(args.depth)
    guide = D.load_image(args.guidance)
    if guide.channels != 3:
        raise D.ImageFormatError(f"{args.guidance}: guidance must be RGB")
    s = model.config.s
    if (guide.height, guide.width) != (depth.height * s, depth.width * s):
        raise StructuralError(f"guidance must be {depth.height * s}x{depth.width * s} for scale {s}")
    out, _ = _super_resolve(model, depth.plane, guide.values)
    D.save_image(D.ImageBuffer(np.clip(out, 0, 1), "depth", depth.divisor), args.out)
    return EXIT_OK


def cmd_resize(args) -> int:
    if not args.scale > 0:
        raise UsageError("--scale must be positive")
    image = D.load_image(args.inp)
    # non-integer products round up so no row or column of content is lost
    h = max(1, math.ceil(image.height * args.scale - 1e-9))
    w = max(1, math.ceil(image.width * args.scale - 1e-9))
    D.save_image(D.resize_classical(image, (h, w), args.method, args.antialias), args.out)
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .viz import export_channel_maps, export_kernel_grid

    if (args.channels is None) == (args.grid is None):
        raise UsageError("visualize needs exactly one of --channels or --grid")
    if args.grid is not None and args.out is None:
        raise UsageError("--grid needs --out")
    model = _load_model(args.model)
    if model.config.variant in ("joint", "fcn-baseline"):
        raise UsageError(f"visualize does not support {model.config.variant} models")
    _, fields = _super_resolve(model, D.to_luma(D.load_image(args.inp)).plane)
    field = fields[args.stage]
    if args.channels is not None:
        export_channel_maps(field, args.channels)
    else:
        try:
            region = tuple(int(v) for v in args.grid.split(","))
        except ValueError:
            raise UsageError(f"--grid expects x,y,w,h, got {args.grid!r}") from None
        if len(region) != 4:
            raise UsageError(f"--grid expects x,y,w,h, got {args.grid!r}")
        try:
            export_kernel_grid(field, region, args.out)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return EXIT_OK


def _gradcheck_case(op: str, f: int, s: int, rng: np.random.Generator):
    def away(shape):
        # magnitudes in [0.1, 1) keep every coordinate clear of the relu kink
        return rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape)

    h = w = 4
    if op == "conv2d":
        weights = Tensor(rng.standard_normal((1, 4, 6, 6)))
        return (lambda x, k, b: tensor_sum(mul(conv2d(x, k, b), weights)),
                [rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4)])
    if op == "pixel-shuffle":
        weights = Tensor(rng.standard_normal((1, 1, h * s, w * s)))
        return lambda x: tensor_sum(mul(pixel_shuffle(x, s), weights)), [rng.standard_normal((1, s * s, h, w))]
    if op in ("adaptive-resample", "asp"):
        n = 8
        weights = Tensor(rng.standard_normal((1, 1, n, n)))
        if op == "asp":
            fn = lambda x, k: tensor_sum(mul(adaptive_resample_asp(x, KernelField(k, f, s), (s, 2 * s)), weights))
        else:
            fn = lambda x, k: tensor_sum(mul(adaptive_resample(x, KernelField(k, f, s)), weights))
        return fn, [rng.standard_normal((1, 1, n, n)), rng.standard_normal((1, f * f, n, n))]
    if op == "model":
        cfg = ModelConfig("dair", depth=3, channels=4, f=f, s=s)
        numel = h * s * w * s
        while True:
            with precision(PrecisionMode.CHECK):
                model = build_model(cfg, rng)
                lr = away((1, 1, h, w))
                target = Tensor(rng.uniform(-1, 1, (1, 1, h * s, w * s)))
                with no_grad(), kink_margin() as margin:
                    l1_loss(forward_sr(model, lr)[0], target)
            # redraw until no relu input or residual lies near its kink
            if margin[0] > KINK_MARGIN:
                break
        names = list(model.params)

        def fn(*arrays):
            saved = dict(model.params)
            model.params.update(zip(names, arrays))
            try:
                return scale(l1_loss(forward_sr(model, lr)[0], target), numel)
            finally:
                model.params.update(saved)

        return fn, [model.params[n].data.astype(np.float64) for n in names]
    raise UsageError(f"unknown gradcheck op {op!r}")


def cmd_gradcheck(args) -> int:
    if args.f < 1 or args.f % 2 == 0:
        raise UsageError("--f must be odd")
    if args.s < 1:
        raise UsageError("--s must be >= 1")
    if args.op == "model" and args.s not in (2, 3, 4):
        raise UsageError("model gradcheck needs --s in {2, 3, 4}")
    rng = np.random.default_rng(args.seed)
    fn, inputs = _gradcheck_case(args.op, args.f, args.s, rng)
    err = grad_check(fn, inputs, rng=np.random.default_rng(args.seed))
    ok = err < GRADCHECK_BOUND
    print(f"{args.op}\tmax-relative-error={err:.3e}\t{'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dair", description="Adaptive-kernel image super-resolution.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM of a model or a classical resizer")
    e.add_argument("--manifest", required=True)
    e.add_argument("--scale", type=int, required=True)
    e.add_argument("--model", help="checkpoint, or 'none' together with --baseline")
    e.add_argument("--baseline", choices=sorted(D.KERNELS))
    e.add_argument("--shave", type=int, help="border pixels excluded (default: the scale)")
    e.add_argument("--report", help="also write the report to this file")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("sr", help="super-resolve one image")
    r.add_argument("--model", required=True)
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--tap-fields", help="write the kernel fields as channel maps here")
    r.set_defaults(func=cmd_sr)

    d = sub.add_parser("depth-sr", help="guided depth upsampling")
    d.add_argument("--model", required=True)
    d.add_argument("--depth", required=True)
    d.add_argument("--guidance", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_depth_sr)

    z = sub.add_parser("resize", help="classical resize; output dims are ceil(dims * scale)")
    z.add_argument("--method", required=True, choices=sorted(D.KERNELS))
    z.add_argument("--scale", type=float, required=True)
    z.add_argument("--antialias", action="store_true")
    z.add_argument("inp")
    z.add_argument("out")
    z.set_defaults(func=cmd_resize)

    v = sub.add_parser("visualize", help="export a kernel field as images")
    v.add_argument("--model", required=True)
    v.add_argument("--in", dest="inp", required=True)
    v.add_argument("--channels", help="directory for per-channel maps")
    v.add_argument("--grid", help="region x,y,w,h in HR pixels")
    v.add_argument("--out", help="PNG path for --grid")
    v.add_argument("--stage", type=int, default=0, help="which kernel field (default 0)")
    v.set_defaults(func=cmd_visualize)

    g = sub.add_parser("gradcheck", help="finite-difference check of one operation")
    g.add_argument("--op", required=True, choices=["conv2d", "adaptive-resample", "asp", "pixel-shuffle", "model"])
    g.add_argument("--f", type=int, default=3)
    g.add_argument("--s", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dair {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        print(f"dair {args.command}: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, D.ImageFormatError, CheckpointFormatError, CheckpointValidationError, ConfigError,
            StructuralError, ValueError) as exc:
        print(f"dair {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main(argv=None) -> None:
    sys.exit(run(argv))
