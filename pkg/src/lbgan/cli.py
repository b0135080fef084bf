"""Command-line entry point.

Subcommands: synth-data, train, rotate, grid, morph, eval, ablate. Every
run resolves its configuration (profile defaults, then TOML config file,
then explicit flags), writes the resolved form next to its outputs, and
derives all randomness from one seed, so any run is reproducible from the
emitted config alone.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The LBGAN_SEED environment variable overrides --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from . import evaluation, inference, training
from .dataset import (
    DatasetManifest,
    FaceDataset,
    LandmarkSet,
    generate_synthetic_dataset,
    pose_to_index,
    preprocess,
)
from .losses import LossWeights
from .training import (
    CheckpointError,
    ConfigError,
    ModelBundle,
    TrainConfig,
    TrainingError,
    TrainLogger,
    build_bundle,
    config_digest,
    load_checkpoint,
    run_variant,
    save_checkpoint,
)

PROFILES = {
    "desk": {
        "image_size": 32,
        "base_channels": 24,
        "d_base_channels": 8,
        "n_blocks": 3,
        "bottleneck_dim": 128,
        "stage1_iters": 2000,
        "stage2_iters": 4000,
        "color_jitter": 0.5,
    },
    "paper": {
        "image_size": 96,
        "base_channels": 32,
        "n_blocks": 5,
        "bottleneck_dim": 256,
        "stage1_iters": 20000,
        "stage2_iters": 20000,
    },
}

# Flags that map straight onto TrainConfig fields; None means "not given".
_TRAIN_FIELD_FLAGS = {
    "stage1_iters": "stage1_iters",
    "stage2_iters": "stage2_iters",
    "batch": "batch_size",
    "lr": "lr",
    "beta1": "adam_beta1",
    "beta2": "adam_beta2",
    "gn_lr_factor": "stage2_gn_lr_factor",
    "g_steps": "g_steps_per_d_step",
    "base_channels": "base_channels",
    "n_blocks": "n_blocks",
    "bottleneck_dim": "bottleneck_dim",
    "d_base_channels": "d_base_channels",
    "color_jitter": "color_jitter",
    "image_size": "image_size",
}


def resolve_seed(flag_value: int | None, fallback: int = 1) -> int:
    env = os.environ.get("LBGAN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"LBGAN_SEED must be an integer, got {env!r}") from None
    return fallback if flag_value is None else int(flag_value)


def _load_toml_train_section(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with p.open("rb") as fh:
        data = tomllib.load(fh)
    section = data.get("train", {})
    if not isinstance(section, dict):
        raise ConfigError("[train] section must be a table")
    return section


def resolve_train_config(args) -> TrainConfig:
    """Profile defaults, then TOML [train] values, then explicit flags."""
    values: dict = dict(PROFILES[args.profile])
    file_values = _load_toml_train_section(getattr(args, "config", None))
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    weights = {}
    for key, val in file_values.items():
        if key in ("lambda_rec", "lambda_csc"):
            weights[key] = float(val)
        elif key in known:
            values[key] = val
        else:
            raise ConfigError(f"unknown [train] config key {key!r}")
    for flag, fieldname in _TRAIN_FIELD_FLAGS.items():
        flag_val = getattr(args, flag, None)
        if flag_val is not None:
            values[fieldname] = flag_val
    if getattr(args, "lambda_rec", None) is not None:
        weights["lambda_rec"] = args.lambda_rec
    if getattr(args, "lambda_csc", None) is not None:
        weights["lambda_csc"] = args.lambda_csc
    base_weights = values.get("weights", LossWeights())
    values["weights"] = LossWeights(
        lambda_rec=weights.get("lambda_rec", base_weights.lambda_rec),
        lambda_csc=weights.get("lambda_csc", base_weights.lambda_csc),
    )
    if getattr(args, "variant", None) is not None:
        values["variant"] = args.variant
    values.setdefault("variant", "full")
    values["seed"] = resolve_seed(
        getattr(args, "seed", None), fallback=int(values.get("seed", 1))
    )
    try:
        config = TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    config.validate()
    return config


def _out_dirs(out: str) -> dict[str, Path]:
    root = Path(out)
    dirs = {name: root / name for name in ("checkpoints", "logs", "images", "reports")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return {"root": root, **dirs}


def _write_resolved_config(root: Path, command: str, config: TrainConfig | None, extra: dict) -> None:
    payload = {"command": command, **extra}
    if config is not None:
        payload["train"] = config.to_json()
        payload["config_digest"] = config_digest(config)
    (root / "resolved_config.json").write_text(json.dumps(payload, indent=1))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth_data(args) -> int:
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    manifest = generate_synthetic_dataset(
        n_identities=args.identities,
        seed=seed,
        image_size=args.size,
        out_dir=out,
        split=args.split,
    )
    h = hashlib.sha256((out / "manifest.json").read_bytes())
    for rec in manifest.records:
        h.update((out / rec.path).read_bytes())
    print(out / "manifest.json")
    print(f"digest {h.hexdigest()}")
    return 0


def _find_resume_checkpoint(checkpoint_root: Path) -> Path | None:
    for name in ("latest", "final", "stage1"):
        candidate = checkpoint_root / name
        if (candidate / "manifest.json").exists():
            return candidate
    return None


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    data = FaceDataset.load(args.data)
    if data.image_size != config.image_size:
        raise ConfigError(
            f"dataset image_size {data.image_size} != configured {config.image_size}"
        )
    dirs = _out_dirs(args.out)
    _write_resolved_config(
        dirs["root"], "train", config,
        {"data": str(args.data), "out": str(args.out), "profile": args.profile},
    )

    bundle = None
    resume_point = None
    if args.resume:
        found = _find_resume_checkpoint(dirs["checkpoints"])
        if found is None:
            raise ConfigError(f"--resume given but no checkpoint under {dirs['checkpoints']}")
        bundle = load_checkpoint(found, expected_image_size=config.image_size)
        if config_digest(bundle.config) != config_digest(config):
            raise ConfigError(
                "resume config differs from checkpoint config; rerun with matching flags"
            )
        resume_point = (1 if bundle.stage == "stage1" else 2,
                        bundle.stage1_iter if bundle.stage == "stage1" else bundle.stage2_iter)
        print(f"resuming from {found} at stage {resume_point[0]} iteration {resume_point[1]}")

    logger = TrainLogger(dirs["logs"] / "train.jsonl", resume_point=resume_point)
    save_every = args.checkpoint_every

    state = {"count": 0}

    def on_iteration(b: ModelBundle) -> None:
        state["count"] += 1
        if save_every and state["count"] % save_every == 0:
            save_checkpoint(b, dirs["checkpoints"] / "latest")

    try:
        bundle = run_variant(
            config, data, logger,
            diagnostics_dir=dirs["checkpoints"],
            bundle=bundle,
            on_iteration=on_iteration,
            on_stage1_done=lambda b: save_checkpoint(b, dirs["checkpoints"] / "stage1"),
        )
    finally:
        logger.close()
    save_checkpoint(bundle, dirs["checkpoints"] / "final")
    print(f"trained variant {config.variant}: checkpoints in {dirs['checkpoints']}")
    print(f"final digests: {json.dumps(bundle.parameter_digests())}")
    return 0


def _load_record_image(args, image_size: int) -> np.ndarray:
    """Aligned (3, H, W) input from either a dataset record or a raw image."""
    if args.image is not None:
        if args.landmarks is None:
            raise ConfigError("--image requires --landmarks")
        raw = np.asarray(Image.open(args.image).convert("RGB"))
        landmarks = LandmarkSet.from_json(json.loads(Path(args.landmarks).read_text()))
        aligned, _ = preprocess(raw, landmarks, image_size=image_size)
        return aligned
    if args.data is None:
        raise ConfigError("provide --data with --record, or --image with --landmarks")
    data = FaceDataset.load(args.data)
    if data.image_size != image_size:
        raise ConfigError(
            f"dataset image_size {data.image_size} != checkpoint {image_size}"
        )
    idx = _record_index(args, data)
    return data.images[idx]


def _record_index(args, data: FaceDataset, flag: str = "record") -> int:
    value = getattr(args, flag)
    if value is None:
        raise ConfigError(f"--{flag} is required with --data")
    idx = int(value)
    if not 0 <= idx < len(data):
        raise ConfigError(f"record index {idx} out of range [0, {len(data)})")
    return idx


def cmd_rotate(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    image = _load_record_image(args, bundle.config.image_size)
    request = inference.RotationRequest(image=image, target_degrees=args.deg)
    out = inference.rotate(bundle, request)
    dirs = _out_dirs(args.out)
    tag = inference.format_degrees(args.deg)
    path = inference.save_png(out, dirs["images"] / f"out_{tag}.png")
    print(path)
    return 0


def cmd_grid(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    image = _load_record_image(args, bundle.config.image_size)
    if args.degs == "all":
        targets = [float(d) for d in range(-90, 91, 15)]
    else:
        targets = [float(tok) for tok in args.degs.split(",") if tok.strip()]
    grid = inference.pose_sweep_grid(bundle, image, targets)
    dirs = _out_dirs(args.out)
    path = inference.save_png(grid, dirs["images"] / "grid.png")
    print(path)
    return 0


def cmd_morph(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    if args.data is None:
        raise ConfigError("morph requires --data with --record-a/--record-b")
    data = FaceDataset.load(args.data)
    if data.image_size != bundle.config.image_size:
        raise ConfigError(
            f"dataset image_size {data.image_size} != checkpoint {bundle.config.image_size}"
        )
    ia = _record_index(args, data, "record_a")
    ib = _record_index(args, data, "record_b")
    grid = inference.identity_morph_grid(
        bundle, data.images[ia], data.images[ib], n_steps=args.steps
    )
    dirs = _out_dirs(args.out)
    path = inference.save_png(grid, dirs["images"] / "morph.png")
    print(path)
    return 0


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    train_data = FaceDataset.load(args.train_data)
    test_data = FaceDataset.load(args.test_data)
    seed = resolve_seed(args.seed)
    dirs = _out_dirs(args.out)
    _write_resolved_config(
        dirs["root"], "eval", None,
        {"checkpoint": str(args.checkpoint), "train_data": str(args.train_data),
         "test_data": str(args.test_data), "seed": seed},
    )
    report = evaluation.evaluate_model(bundle, train_data, test_data, seed=seed)
    path = evaluation.save_report(report, dirs["reports"])
    print(report.format_table())
    print(path)
    return 0


def cmd_ablate(args) -> int:
    train_data = FaceDataset.load(args.data)
    test_data = FaceDataset.load(args.test_data)
    seed = resolve_seed(args.seed)
    dirs = _out_dirs(args.out)

    reports = {}
    models = None
    for variant in training.VARIANTS:
        ckpt_dir = dirs["checkpoints"] / variant / "final"
        if (ckpt_dir / "manifest.json").exists():
            bundle = load_checkpoint(ckpt_dir)
        elif args.train_missing:
            values = dict(PROFILES[args.profile])
            config = TrainConfig(**values, seed=seed, variant=variant)
            config.validate()
            print(f"training missing variant {variant}")
            logger = TrainLogger(dirs["logs"] / f"train_{variant}.jsonl")
            try:
                bundle = run_variant(config, train_data, logger)
            finally:
                logger.close()
            save_checkpoint(bundle, ckpt_dir)
        else:
            raise ConfigError(
                f"no checkpoint for variant {variant} at {ckpt_dir}; "
                "pass --train-missing to train it"
            )
        if models is None:
            models = evaluation.train_eval_models(train_data, seed)
        reports[variant] = evaluation.evaluate_model(
            bundle, train_data, test_data, models=models, variant=variant
        )
        evaluation.save_report(reports[variant], dirs["reports"])

    cmp = evaluation.ablation_compare(reports)
    table = evaluation.format_comparison_table(cmp)
    (dirs["reports"] / "ablation.json").write_text(json.dumps(cmp, indent=1, default=str))
    (dirs["reports"] / "ablation.txt").write_text(table + "\n")
    _write_resolved_config(
        dirs["root"], "ablate", None,
        {"data": str(args.data), "test_data": str(args.test_data),
         "seed": seed, "profile": args.profile},
    )
    print(table)
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--config", help="TOML config file with a [train] table")
    p.add_argument("--variant", choices=training.VARIANTS, default=None,
                   help="training variant (default full)")
    p.add_argument("--seed", type=int, default=None, help="run seed (default 1)")
    p.add_argument("--stage1-iters", type=int, default=None, help="default 20000 (desk 2000)")
    p.add_argument("--stage2-iters", type=int, default=None, help="default 20000 (desk 4000)")
    p.add_argument("--batch", type=int, default=None, help="batch size (default 24)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 2e-4)")
    p.add_argument("--beta1", type=float, default=None, help="Adam beta1 (default 0.5)")
    p.add_argument("--beta2", type=float, default=None, help="Adam beta2 (default 0.999)")
    p.add_argument("--gn-lr-factor", type=float, default=None,
                   help="stage-2 learning-rate factor for G_N/D_N (default 0.25)")
    p.add_argument("--g-steps", type=int, default=None,
                   help="generator updates per discriminator update (default 4)")
    p.add_argument("--lambda-rec", type=float, default=None, help="default 10")
    p.add_argument("--lambda-csc", type=float, default=None, help="default 10")
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--n-blocks", type=int, default=None)
    p.add_argument("--bottleneck-dim", type=int, default=None)
    p.add_argument("--d-base-channels", type=int, default=None,
                   help="discriminator width (default: same as --base-channels)")
    p.add_argument("--color-jitter", type=float, default=None,
                   help="max training-time hue rotation in [0, 0.5] (default 0)")
    p.add_argument("--image-size", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lbgan",
        description="Two-generator GAN for face frontalization and yaw rotation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render the synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=30)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a variant end to end")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=500)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, fn in (("rotate", cmd_rotate), ("grid", cmd_grid)):
        p = sub.add_parser(name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--data")
        p.add_argument("--record", type=int, help="record index into the dataset manifest")
        p.add_argument("--image", help="raw image file (needs --landmarks)")
        p.add_argument("--landmarks", help="JSON file with left_eye/right_eye/mouth [row, col]")
        if name == "rotate":
            p.add_argument("--deg", type=float, required=True)
        else:
            p.add_argument("--degs", default="all", help="'all' or comma-separated degrees")
        p.set_defaults(func=fn)

    p = sub.add_parser("morph", help="identity-interpolation grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--record-a", type=int, required=True)
    p.add_argument("--record-b", type=int, required=True)
    p.add_argument("--steps", type=int, default=6)
    p.set_defaults(func=cmd_morph)

    p = sub.add_parser("eval", help="run the measurement protocol on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate all variants and compare")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--train-missing", action="store_true")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
