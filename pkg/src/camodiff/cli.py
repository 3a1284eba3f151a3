"""Command-line entry point: train, sample, eval, synth, schedule-dump.

Configuration is a flat key=value text file (one pair per line, # comments)
whose keys are validated against the training schema; repeated --set
key=value flags override file values. Failures print a single structured
``ERROR <code>: <message>`` line and exit nonzero.
"""

import argparse
import pathlib
import sys

from importlib import metadata as importlib_metadata

import torch

from .data_io import (IMAGE_EXTENSIONS, DatasetSpec, SynthConfig,
                      generate_synthetic, load_image, save_mask)
from .errors import CamoDiffError, ConfigError
from .metrics import (METRIC_COLUMNS, evaluate_dataset, write_report_csv,
                      write_report_json)
from .model import ModelConfig
from .sampler import binarize, load_model_for_sampling, sample, sample_ensemble
from .schedule import make_linear_schedule
from .trainer import CHECKPOINT_FORMAT_VERSION, TrainConfig, train


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(text)


def _parse_int_tuple(text: str) -> tuple:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _parse_optional_int(text: str):
    lowered = text.strip().lower()
    return None if lowered in ("none", "") else int(text)


TRAIN_KEYS = {
    "num_steps": int, "beta_start": float, "beta_end": float,
    "learning_rate": float, "batch_size": int, "image_size": _parse_int_tuple,
    "max_steps": int, "lambda_vlb": float, "flip_augment": _parse_bool,
    "crop_augment": _parse_bool, "jitter_augment": _parse_bool,
    "jitter_strength": float, "crop_min_scale": float, "seed": int,
    "checkpoint_interval": int,
}
MODEL_KEYS = {
    "unet_widths": _parse_int_tuple, "cond_channels": int,
    "encoder_widths": _parse_int_tuple, "time_dim": _parse_optional_int,
    "use_iam": _parse_bool, "use_fusion": _parse_bool,
    "iam_residual": _parse_bool,
}
TRAIN_SCHEMA = {**TRAIN_KEYS, **MODEL_KEYS}


def _coerce(key: str, raw: str, schema: dict):
    if key not in schema:
        raise ConfigError(f"unknown config key '{key}'")
    try:
        return schema[key](raw)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad value for config key '{key}': {raw!r}") from e


def parse_config(path, overrides=(), schema=TRAIN_SCHEMA) -> dict:
    """Flat key=value file plus override pairs; every key schema-checked."""
    values = {}
    if path is not None:
        path = pathlib.Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(
                    f"{path}:{lineno}: expected key=value, got {stripped!r}"
                )
            key, raw = (part.strip() for part in stripped.split("=", 1))
            values[key] = _coerce(key, raw, schema)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split("=", 1))
        values[key] = _coerce(key, raw, schema)
    return values


def _split_train_config(values: dict):
    train_kwargs = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    model_kwargs = {k: v for k, v in values.items() if k in MODEL_KEYS}
    return TrainConfig(**train_kwargs), ModelConfig(**model_kwargs)


def _cmd_train(args) -> int:
    values = parse_config(args.config, args.set or ())
    train_config, model_config = _split_train_config(values)
    dataset = DatasetSpec.from_manifest(args.data, args.manifest)
    payload = train(dataset, train_config, args.out, model_config,
                    resume=args.resume)
    print(f"trained to step {payload['step']}; "
          f"checkpoint {pathlib.Path(args.out) / 'ckpt_final.pt'}")
    return 0


def _image_files(directory, manifest=None) -> list:
    directory = pathlib.Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"not a directory: {directory}")
    files = [p for p in sorted(directory.iterdir())
             if p.suffix.lower() in IMAGE_EXTENSIONS]
    if manifest is not None:
        manifest = pathlib.Path(manifest)
        if not manifest.is_file():
            raise ConfigError(f"manifest not found: {manifest}")
        wanted = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
        by_stem = {p.stem: p for p in files}
        missing = [stem for stem in wanted if stem not in by_stem]
        if missing:
            raise ConfigError(f"manifest stems missing from {directory}: {missing[:5]}")
        files = [by_stem[stem] for stem in sorted(wanted)]
    if not files:
        raise ConfigError(f"no images found under {directory}")
    return files


def _cmd_sample(args) -> int:
    model, schedule = load_model_for_sampling(args.checkpoint)
    files = _image_files(args.images, manifest=args.manifest)
    out_dir = pathlib.Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_at = _parse_int_tuple(args.trace) if args.trace else None
    if trace_at and args.ensemble > 1:
        raise ConfigError("--trace is not supported with --ensemble > 1")

    written = 0
    batch, indices = [], []
    for idx, path in enumerate(files):
        image = load_image(path)
        if batch and (image.shape != batch[0][1].shape or len(batch) >= args.batch):
            written += _flush_batch(batch, indices, model, schedule, args, out_dir)
            batch, indices = [], []
        batch.append((path, image))
        indices.append(idx)
    written += _flush_batch(batch, indices, model, schedule, args, out_dir)
    print(f"wrote {written} masks to {out_dir}")
    return 0


def _flush_batch(batch, indices, model, schedule, args, out_dir) -> int:
    if not batch:
        return 0
    images = torch.stack([image for _, image in batch])
    trace_at = _parse_int_tuple(args.trace) if args.trace else None
    if args.ensemble > 1:
        final = sample_ensemble(images, model, schedule, num_steps=args.steps,
                                num_samples=args.ensemble, seed=args.seed,
                                combine=args.combine, image_indices=indices)
        trace = None
    else:
        trace = sample(images, model, schedule, num_steps=args.steps,
                       seed=args.seed, trace_at=trace_at, image_indices=indices)
        final = trace.final
    if args.binarize:
        final = binarize(final)
    for row, (path, _) in enumerate(batch):
        save_mask(out_dir / f"{path.stem}.png", final[row, 0].numpy())
        if trace is not None:
            for ts, snap in zip(trace.snapshot_timesteps, trace.snapshots):
                save_mask(out_dir / f"{path.stem}_t{ts:04d}.png",
                          snap[row, 0].numpy())
    return len(batch)


def _cmd_eval(args) -> int:
    report = evaluate_dataset(args.pred, args.gt, raw=args.raw)
    for stem in report.unmatched:
        print(f"WARNING unmatched mask name: {stem}", file=sys.stderr)
    print("image," + ",".join(METRIC_COLUMNS))
    for row in report.per_image:
        print(row[0] + "," + ",".join(f"{v:.4f}" for v in row[1:]))
    means = (report.s_alpha, report.f_w, report.f_m, report.e_m, report.mae)
    print("MEAN," + ",".join(f"{v:.4f}" for v in means))
    if args.report:
        write_report_csv(report, args.report)
    if args.json:
        write_report_json(report, args.json)
    return 0


def _cmd_synth(args) -> int:
    config = SynthConfig(count=args.count, image_size=args.size,
                         contrast=args.contrast, seed=args.seed)
    spec = generate_synthetic(config, args.out)
    print(f"wrote {len(spec.stems)} image/mask pairs to {spec.root}")
    return 0


def _cmd_schedule_dump(args) -> int:
    schedule = make_linear_schedule(args.T, args.beta_start, args.beta_end)
    lines = ["t,beta,alpha_bar,posterior_variance"]
    for i in range(schedule.num_steps):
        lines.append(f"{i + 1},{schedule.betas[i]:.12g},"
                     f"{schedule.alpha_bars[i]:.12g},"
                     f"{schedule.posterior_variance[i]:.12g}")
    text = "\n".join(lines)
    if args.out:
        pathlib.Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _version_string() -> str:
    try:
        version = importlib_metadata.version("artifact")
    except importlib_metadata.PackageNotFoundError:
        version = "0.1.0"
    return f"artifact {version} (checkpoint format {CHECKPOINT_FORMAT_VERSION})"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camodiff",
        description="Mask diffusion for camouflaged object segmentation.",
    )
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train a model on an image/mask dataset")
    p.add_argument("--data", required=True, help="dataset root (Imgs/, GT/, manifests)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--manifest", default="train.txt", help="manifest file name")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable; wins over the file)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="generate masks for a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None,
                   help="optional file of stems; restricts sampling to those images")
    p.add_argument("--steps", type=int, default=None,
                   help="respaced step count (default: full schedule)")
    p.add_argument("--ensemble", type=int, default=1)
    p.add_argument("--combine", choices=("mean", "vote"), default="mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--binarize", action="store_true",
                   help="threshold the written masks at 0.5")
    p.add_argument("--trace", default=None, metavar="T1,T2,...",
                   help="save pred_y0 snapshots at these original timesteps")
    p.add_argument("--batch", type=int, default=16)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", default=None, help="write per-image CSV here")
    p.add_argument("--json", default=None, help="write JSON report here")
    p.add_argument("--raw", action="store_true",
                   help="skip per-image min-max normalization for F_m/E_m")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("synth", help="generate the synthetic camouflage dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=400)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--contrast", type=float, default=0.35)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("schedule-dump", help="print the noise schedule tables as CSV")
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_schedule_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage()
        return 2
    try:
        return args.func(args)
    except CamoDiffError as e:
        print(f"ERROR {e.code}: {e.message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
