"""Command-line front end.

Subcommands:
    analyze      receptive fields and parameter counts vs the reference figures
    train        fit the generator on a manifest of images
    infer        reconstruct the masked region of one image
    extrapolate  reconstruct everything outside a visible centre square
    eval         corpus reconstruction metrics for a trained checkpoint
    gradcheck    finite-difference verification of the backward passes

Options may come from ``--config FILE`` (key=value lines, ``#`` comments)
with explicit flags taking precedence; unknown keys are rejected.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import get_type_hints

import numpy as np

from .data import load_image, load_manifest, make_mask, save_image
from .errors import DataError, NumericError, UsageError
from .gradcheck import SUITES, run_suite
from .loss import GAN_VARIANTS
from .model import (
    DOCUMENTED_CONVENTION,
    REFERENCE_DISCRIMINATOR_PARAMS,
    REFERENCE_GENERATOR_PARAMS,
    REFERENCE_RECEPTIVE_FIELDS,
    CountingConvention,
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    count_parameters,
    encoder_dilations,
    enumerate_conventions,
    receptive_field,
)
from .trainer import (
    FILL_MODES,
    SLOT_EVAL,
    TASKS,
    TrainConfig,
    create_trainer,
    evaluate,
    generator_infer_fn,
    infer_images,
    load_trainer,
    prepare_eval_image,
    step_rng,
    train_loop,
)

_CONFIG_HINTS = get_type_hints(TrainConfig)
_KEY_ALIASES = {"lambda": "lambda_weight", "batch": "batch_size"}

# flags that shadow TrainConfig fields (dest == field name)
_CONFIG_FLAG_FIELDS = (
    "task",
    "image_size",
    "region_size",
    "overlap",
    "lambda_weight",
    "fill",
    "seed",
    "lr",
    "batch_size",
    "max_steps",
    "gan_variant",
    "base_filters",
    "n_dilated",
    "disc_filters",
    "log_every",
    "checkpoint_every",
    "plateau_window",
)


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad flags through the usage exit code."""

    def error(self, message):
        raise UsageError(message)


def _coerce(key: str, value: str):
    target = _CONFIG_HINTS[key]
    if target is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key!r}: expected a boolean, got {value!r}")
    try:
        return target(value)
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: {exc}") from exc


def parse_config_file(path) -> dict:
    """key=value lines; blank lines and # comments skipped."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    entries: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = _KEY_ALIASES.get(key.strip(), key.strip())
        if key not in _CONFIG_HINTS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in entries:
            raise UsageError(f"{path}:{lineno}: duplicate config key {key!r}")
        entries[key] = _coerce(key, value.strip())
    return entries


def resolve_train_config(args, base: dict | None = None) -> TrainConfig:
    """defaults < checkpoint/base < config file < explicit flags."""
    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for name in _CONFIG_FLAG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "no_augment", False):
        values["augment"] = False
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _add_geometry_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="FILE", help="key=value option file")
    p.add_argument("--task", choices=TASKS, help="which region gets corrupted")
    p.add_argument("--image-size", type=int, dest="image_size", metavar="N",
                   help="square working resolution (multiple of 4)")
    p.add_argument("--region-size", type=int, dest="region_size", metavar="N",
                   help="corrupted (or, for extrapolate, visible) square side")
    p.add_argument("--overlap", type=int, metavar="N",
                   help="visible band kept inside the region border")
    p.add_argument("--fill", choices=FILL_MODES,
                   help="value written into corrupted pixels")
    p.add_argument("--seed", type=int, metavar="N", help="root of all rng streams")
    p.add_argument("--deterministic", action="store_true",
                   help="accepted for compatibility; runs are always deterministic")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--lambda", type=float, dest="lambda_weight", metavar="X",
                   help="weight of the L1 term (1 - X goes to the adversarial term)")
    p.add_argument("--lr", type=float, metavar="X", help="learning rate for both nets")
    p.add_argument("--batch", type=int, dest="batch_size", metavar="N")
    p.add_argument("--max-steps", type=int, dest="max_steps", metavar="N")
    p.add_argument("--gan-variant", choices=GAN_VARIANTS, dest="gan_variant")
    p.add_argument("--base-filters", type=int, dest="base_filters", metavar="N")
    p.add_argument("--n-dilated", type=int, dest="n_dilated", metavar="N")
    p.add_argument("--disc-filters", type=int, dest="disc_filters", metavar="N")
    p.add_argument("--log-every", type=int, dest="log_every", metavar="N")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every", metavar="N")
    p.add_argument("--plateau-window", type=int, dest="plateau_window", metavar="N",
                   help="stop when mean L1 improves < 0.5%% over this many steps (0 off)")
    p.add_argument("--no-augment", action="store_true",
                   help="disable random crops and flips")


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    gcfg_kwargs = {}
    if args.base_filters is not None:
        gcfg_kwargs["base_filters"] = args.base_filters
    if args.n_dilated is not None:
        gcfg_kwargs["n_dilated"] = args.n_dilated
    try:
        gcfg = GeneratorConfig(**gcfg_kwargs)
        f = args.disc_filters if args.disc_filters is not None else 64
        dcfg = DiscriminatorConfig(channel_schedule=(f, 2 * f, 4 * f, 8 * f, 1))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    gen = build_generator(gcfg, seed=0)
    disc = build_discriminator(dcfg, seed=0)

    is_reference_arch = (
        gcfg.base_filters == 128 and gcfg.n_dilated == 4 and f == 64
    )
    dilations = encoder_dilations(gcfg)
    fields = [receptive_field(d, gcfg) for d in range(1, gcfg.encoder_depth + 1)]

    report = {
        "receptive_fields": fields,
        "generator_params": count_parameters(gen, DOCUMENTED_CONVENTION),
        "conventions": {
            conv.describe(): n for conv, n in enumerate_conventions(gen).items()
        },
        "discriminator_params_weights_only": count_parameters(
            disc, CountingConvention(False, False, False)
        ),
        "discriminator_params_with_bias": count_parameters(
            disc, CountingConvention(True, False, False)
        ),
    }

    print("encoder receptive fields")
    print("  depth  dilation  rf")
    for depth, (dil, rf) in enumerate(zip(dilations, fields), start=1):
        print(f"  {depth:5d}  {dil:8d}  {rf}")
    if is_reference_arch:
        ok = tuple(fields) == REFERENCE_RECEPTIVE_FIELDS
        report["receptive_fields_match"] = ok
        print(
            f"  reference {REFERENCE_RECEPTIVE_FIELDS}: "
            f"{'MATCH' if ok else 'MISMATCH'}"
        )

    print(f"generator parameters ({DOCUMENTED_CONVENTION.describe()}): "
          f"{report['generator_params']}")
    if is_reference_arch:
        ok = report["generator_params"] == REFERENCE_GENERATOR_PARAMS
        report["generator_params_match"] = ok
        print(f"  reference {REFERENCE_GENERATOR_PARAMS}: "
              f"{'MATCH' if ok else 'MISMATCH'}")
    print("  all counting conventions:")
    for conv, n in enumerate_conventions(gen).items():
        marker = "  <- documented" if conv == DOCUMENTED_CONVENTION else ""
        print(f"    {n:9d}  ({conv.describe()}){marker}")

    w_only = report["discriminator_params_weights_only"]
    w_bias = report["discriminator_params_with_bias"]
    print(f"discriminator parameters: {w_only} (weights), {w_bias} (with biases)")
    if is_reference_arch:
        delta = abs(w_bias - REFERENCE_DISCRIMINATOR_PARAMS)
        pct = 100.0 * delta / REFERENCE_DISCRIMINATOR_PARAMS
        ok = pct <= 0.2
        report["discriminator_delta_pct"] = pct
        report["discriminator_within_tolerance"] = ok
        print(f"  reference {REFERENCE_DISCRIMINATOR_PARAMS}: "
              f"delta {delta} ({pct:.3f}%) "
              f"{'WITHIN' if ok else 'OUTSIDE'} 0.2% tolerance")

    if args.json:
        print(json.dumps(report))
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    if not args.manifest:
        raise UsageError("train requires --manifest (also when resuming)")
    paths = load_manifest(args.manifest)
    if args.resume:
        overridden = [
            name
            for name in _CONFIG_FLAG_FIELDS
            if name != "max_steps" and getattr(args, name, None) is not None
        ]
        if getattr(args, "no_augment", False):
            overridden.append("no_augment")
        if overridden or getattr(args, "config", None):
            raise UsageError(
                "resume uses the checkpoint's configuration; only --max-steps "
                f"may change (got: {', '.join(overridden) or '--config'})"
            )
        state = load_trainer(args.resume, sources=paths)
        if args.max_steps is not None:
            state.config = replace(state.config, max_steps=args.max_steps)
    else:
        config = resolve_train_config(args)
        state = create_trainer(config, paths)
    result = train_loop(state, args.out_dir)
    print(json.dumps(result))
    return 0


# ---------------------------------------------------------------------------
# infer / extrapolate
# ---------------------------------------------------------------------------


def _inference_config(state_config: TrainConfig, args, force_task: str | None):
    base = asdict(state_config)
    config = resolve_train_config(args, base=base)
    if force_task is not None:
        if config.task != force_task and getattr(args, "task", None) not in (
            None,
            force_task,
        ):
            raise UsageError(f"this subcommand always uses task={force_task!r}")
        if config.task != force_task:
            # visible-centre default when the checkpoint trained on another task
            region = (
                args.region_size
                if args.region_size is not None
                else 3 * config.image_size // 4
            )
            config = replace(config, task=force_task, region_size=region)
    return config


def _write_triptych(images: dict, out_dir, stem: str, fmt: str) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for kind in ("corrupted", "output", "composite"):
        dest = out_dir / f"{stem}_{kind}.{fmt}"
        save_image(images[kind], dest)
        written[kind] = str(dest)
    return written


def _run_single_image(args, force_task: str | None) -> int:
    state = load_trainer(args.checkpoint)
    config = _inference_config(state.config, args, force_task)
    img = prepare_eval_image(load_image(args.image), config.image_size)
    if config.task == "random":
        mask = make_mask(
            "random",
            config.image_size,
            config.region_size,
            config.overlap,
            rng=step_rng(config.seed, 0, SLOT_EVAL),
        )
    else:
        mask = make_mask(
            config.task, config.image_size, config.region_size, config.overlap
        )
    try:
        images = infer_images(state.gen, img, mask, state.fill)
    except ValueError as exc:
        raise UsageError(
            f"checkpoint is not usable for inference: {exc}"
        ) from exc
    written = _write_triptych(
        images, args.out_dir, f"{Path(args.image).stem}_{config.task}", args.format
    )
    print(json.dumps({"task": config.task, **written}))
    return 0


def cmd_infer(args) -> int:
    return _run_single_image(args, force_task=None)


def cmd_extrapolate(args) -> int:
    return _run_single_image(args, force_task="extrapolate")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    state = load_trainer(args.checkpoint)
    config = resolve_train_config(args, base=asdict(state.config))
    paths = load_manifest(args.manifest)
    if args.limit is not None:
        if args.limit < 1:
            raise UsageError("--limit must be >= 1")
        paths = paths[: args.limit]
    try:
        result = evaluate(
            paths,
            config,
            state.fill,
            generator_infer_fn(state.gen),
            seed=config.seed,
            keep_records=args.per_image,
        )
    except ValueError as exc:
        raise UsageError(f"checkpoint is not usable for inference: {exc}") from exc
    if args.json:
        print(json.dumps(result))
    else:
        print(f"evaluated {result['count']} images ({result['skipped']} skipped)")
        print(f"  region rmse {result['rmse_region']:.3f}  "
              f"psnr {result['psnr_region']:.3f} dB")
        print(f"  full   rmse {result['rmse_full']:.3f}  "
              f"psnr {result['psnr_full']:.3f} dB")
        print(f"  fill-only baseline region rmse "
              f"{result['baseline_rmse_region']:.3f}  "
              f"psnr {result['baseline_psnr_region']:.3f} dB")
        for rec in result.get("images", []):
            print(f"    {rec['path']}: rmse {rec['rmse_region']:.3f} "
                  f"psnr {rec['psnr_region']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    if args.suites == "all":
        names = list(SUITES)
    else:
        names = [s.strip() for s in args.suites.split(",") if s.strip()]
        unknown = [n for n in names if n not in SUITES]
        if unknown:
            raise UsageError(
                f"unknown gradcheck suites {unknown}; have {sorted(SUITES)}"
            )
    failed = []
    for name in names:
        result = run_suite(name, cases=args.cases, seed=args.seed)
        ok = result.passed(args.tolerance)
        print(f"{result.name:12s} {result.cases:3d} cases  "
              f"max rel err {result.max_rel_err:.3e}  "
              f"{'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pixelfill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("analyze", parents=[], help="architecture numbers")
    p.add_argument("--base-filters", type=int, dest="base_filters")
    p.add_argument("--n-dilated", type=int, dest="n_dilated")
    p.add_argument("--disc-filters", type=int, dest="disc_filters")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="fit the generator on a manifest")
    p.add_argument("--manifest", metavar="FILE", help="newline-delimited image paths")
    p.add_argument("--out-dir", required=True, dest="out_dir", metavar="DIR")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    _add_geometry_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, helptext, fn in (
        ("infer", "reconstruct the masked region of one image", cmd_infer),
        ("extrapolate", "reconstruct outside a visible centre square", cmd_extrapolate),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True, metavar="CKPT")
        p.add_argument("--image", required=True, metavar="FILE")
        p.add_argument("--out-dir", required=True, dest="out_dir", metavar="DIR")
        p.add_argument("--format", choices=("png", "ppm"), default="png")
        _add_geometry_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="corpus metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--manifest", required=True, metavar="FILE")
    p.add_argument("--limit", type=int, metavar="N", help="evaluate only the first N")
    p.add_argument("--per-image", action="store_true", dest="per_image")
    p.add_argument("--json", action="store_true")
    _add_geometry_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify backward passes numerically")
    p.add_argument("--suites", default="all",
                   help=f"comma list from {sorted(SUITES)} or 'all'")
    p.add_argument("--cases", type=int, default=24, metavar="N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
