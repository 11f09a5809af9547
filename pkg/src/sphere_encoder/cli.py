"""``sphere-encoder`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from PIL import Image

from . import config as run_config
from . import evaluation, geometry, sampling
from .checkpoint import Checkpoint, load_checkpoint
from .data import DatasetSpec, LabeledImages, _to_array, load_dataset, load_folder, save_png
from .exceptions import ConfigError, ConfigMismatch, DegenerateLatent, InvalidAngle, InvalidClass
from .geometry import NoisePolicy
from .network import NULL_CLASS, SphereAutoencoder
from .training import run_training

logger = logging.getLogger("sphere_encoder")

ENV_OUTPUT_DIR = "SPHERE_ENCODER_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "sphere_encoder_out"
RESOLVED_CONFIG = "config.resolved.yaml"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# shared helpers


def _out_dir(value: Optional[str], sub: str = "") -> Path:
    base = value or os.environ.get(ENV_OUTPUT_DIR) or DEFAULT_OUTPUT_DIR
    path = Path(base) / sub if (sub and not value) else Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _listify(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _tupled(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _noise_policy(ckpt: Checkpoint) -> NoisePolicy:
    meta = ckpt.extra.get("noise_policy")
    return NoisePolicy(**_tupled(meta)) if meta else NoisePolicy()


def _class_names(ckpt: Checkpoint) -> list:
    names = list(ckpt.extra.get("classes") or [])
    if len(names) != ckpt.config.n_classes:
        names = [str(i) for i in range(ckpt.config.n_classes)]
    return names


def _class_id(value, names: list) -> int:
    """Class name, integer id, or ``null`` for the null condition."""
    if value is None or str(value).lower() in ("null", "none", str(NULL_CLASS)):
        return NULL_CLASS
    if value in names:
        return names.index(value)
    try:
        idx = int(value)
    except ValueError:
        raise InvalidClass(f"unknown class {value!r}; known: {names}") from None
    if not 0 <= idx < len(names):
        raise InvalidClass(f"class id {idx} outside [0, {len(names)})")
    return idx


def _class_label(idx: int, names: list) -> str:
    return "null" if idx == NULL_CLASS else names[idx]


def _dataset_spec(ckpt: Checkpoint) -> DatasetSpec:
    meta = ckpt.extra.get("dataset")
    if not meta:
        cfg = ckpt.config
        return DatasetSpec(image_size=cfg.image_size, channels=cfg.channels)
    return DatasetSpec(**_tupled(meta))


def _load_images(path, ckpt: Checkpoint) -> tuple[np.ndarray, list]:
    """A PNG file, a flat folder of PNGs, or a ``class_name/*.png`` tree."""
    cfg = ckpt.config
    spec = DatasetSpec(source="folder", path=str(path), image_size=cfg.image_size, channels=cfg.channels,
                       classes=())
    path = Path(path)
    if path.is_file():
        with Image.open(path) as img:
            return _to_array(img, spec)[None], [path.name]
    if not path.is_dir():
        raise FileNotFoundError(f"input {path} does not exist")
    files = sorted(path.glob("*.png"))
    if files:
        images = []
        for f in files:
            with Image.open(f) as img:
                images.append(_to_array(img, spec))
        return np.stack(images), [f.name for f in files]
    data = load_folder(path, spec)
    return data.images, [f"{data.classes[c]}/{i}" for i, c in enumerate(data.labels)]


def _reference(args, ckpt: Checkpoint) -> LabeledImages:
    if getattr(args, "reference", None):
        cfg = ckpt.config
        spec = DatasetSpec(source="folder", path=args.reference, image_size=cfg.image_size,
                           channels=cfg.channels, classes=())
        return load_folder(args.reference, spec)
    return load_dataset(_dataset_spec(ckpt))


def make_grid(images, cols: int) -> np.ndarray:
    """Tile ``(n, H, W, C)`` images row-major into one image; empty cells are black."""
    images = np.asarray(images)
    n, h, w, c = images.shape
    cols = max(1, min(cols, n))
    rows = -(-n // cols)
    grid = np.full((rows * h, cols * w, c), -1.0, np.float32)
    for i, img in enumerate(images):
        r, k = divmod(i, cols)
        grid[r * h:(r + 1) * h, k * w:(k + 1) * w] = img
    return grid


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _plan_from_args(args, base: sampling.SamplerPlan) -> sampling.SamplerPlan:
    updates = {
        "steps": args.steps, "gamma": args.gamma, "share_noise": args.share_noise,
        "cfg_scale": args.cfg, "cfg_position": args.cfg_position, "truncation": args.truncation,
        "r_override": args.r, "seed": args.seed,
    }
    try:
        return replace(base, **{k: v for k, v in updates.items() if v is not None})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _base_plan(args) -> sampling.SamplerPlan:
    if getattr(args, "config", None):
        return run_config.RunConfig.from_flat(run_config.load_flat(args.config), require=False).sampler
    return sampling.SamplerPlan()


def _add_sampler_flags(p, steps_default=None):
    p.add_argument("--config", help="config file whose sampler keys provide defaults")
    p.add_argument("--steps", type=int, default=steps_default, help="sampling steps T")
    p.add_argument("--gamma", type=float, help="noise decay exponent")
    p.add_argument("--share-noise", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--cfg", type=float, help="classifier-free guidance scale")
    p.add_argument("--cfg-position", choices=sampling.CFG_POSITIONS)
    p.add_argument("--truncation", type=float, help="truncate prior noise to [-k, k]")
    p.add_argument("--r", type=float, help="fixed noise strength for every refinement step")


def _add_common(p, checkpoint=True):
    if checkpoint:
        p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=f"output directory (default ${ENV_OUTPUT_DIR} or ./{DEFAULT_OUTPUT_DIR})")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    flat = run_config.load_flat(args.config)
    for key in run_config.KEYS:
        raw = getattr(args, "cfg_" + key)
        if raw is not None:
            flat[key] = run_config.coerce(key, raw)
    cfg = run_config.RunConfig.from_flat(flat)
    out = _out_dir(cfg.output_dir, "train")
    cfg.output_dir = str(out)

    data = load_dataset(cfg.data)
    if cfg.model.conditional and len(data.classes) != cfg.model.n_classes:
        raise ConfigMismatch(f"dataset has {len(data.classes)} classes, model expects {cfg.model.n_classes}")
    holdout = None
    if cfg.holdout_fraction > 0:
        data, holdout = data.split(cfg.holdout_fraction, np.random.default_rng(cfg.data.seed))
    run_config.dump_config(cfg, out / RESOLVED_CONFIG)
    extra = {
        "classes": list(data.classes),
        "dataset": _listify(asdict(cfg.data)),
        "holdout_fraction": cfg.holdout_fraction,
    }

    def progress(report):
        if report["step"] % 50 == 0:
            logger.info("step %d  total %.4f  lr %.2e", report["step"], report["total"], report["lr"])

    trainer = run_training(data, cfg.model, cfg.train, cfg.noise, cfg.loss, cfg.data, out_dir=out,
                           resume_from=cfg.resume_from, extra_meta=extra, progress=progress)
    print(f"trained {trainer.state.step} steps on {len(data)} images"
          + (f" ({len(holdout)} held out)" if holdout is not None else ""))
    print(f"checkpoint: {out / 'last.npz'}")
    print(f"metrics: {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, names = ckpt.model, _class_names(ckpt)
    plan = _plan_from_args(args, _base_plan(args))
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    if args.class_ is None:
        ids = np.arange(args.n) % model.config.n_classes if model.config.conditional else np.full(args.n, NULL_CLASS)
    else:
        ids = np.full(args.n, _class_id(args.class_, names))
    y = None if np.all(ids == NULL_CLASS) else ids
    if y is not None and np.any(ids == NULL_CLASS):
        raise ConfigError("mixing null and class-conditional samples is not supported")
    images = sampling.generate(model, args.n, y, plan, _noise_policy(ckpt).sigma_max)

    out = _out_dir(args.out, "generate")
    enc_scale = plan.position_scale if plan.enc_cfg else 1.0
    dec_scale = plan.position_scale if plan.dec_cfg else 1.0
    rows = []
    for i, (img, c) in enumerate(zip(images, ids)):
        name = f"sample_{i:05d}.png"
        save_png(img, out / name)
        rows.append([name, _class_label(int(c), names), plan.seed, plan.steps, plan.gamma, plan.share_noise,
                     plan.cfg_scale, plan.cfg_position, enc_scale, dec_scale, plan.nfe])
    save_png(make_grid(images, args.grid_cols), out / "grid.png")
    _write_csv(out / "manifest.csv",
               ["filename", "class", "seed", "steps", "gamma", "share_noise", "cfg", "cfg_position",
                "enc_scale", "dec_scale", "nfe"], rows)
    print(f"wrote {len(images)} samples to {out} (NFE per sample {plan.nfe})")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.input:
        images, sources = _load_images(args.input, ckpt)
    else:
        data = load_dataset(_dataset_spec(ckpt))
        images, sources = data.images, [f"dataset/{i}" for i in range(len(data))]
    images, sources = images[: args.n], sources[: args.n]
    recon = sampling.reconstruct(ckpt.model, images)
    out = _out_dir(args.out, "reconstruct")
    rows = []
    for i, (src, x, xr) in enumerate(zip(sources, images, recon)):
        name = f"recon_{i:05d}.png"
        save_png(xr, out / name)
        rows.append([name, src, float(np.mean(np.abs(xr - x)))])
    pairs = np.concatenate([images, recon])
    save_png(make_grid(pairs, len(images)), out / "grid.png")
    _write_csv(out / "reconstruct.csv", ["filename", "source", "l1"], rows)
    print(f"mean L1 {np.mean([r[2] for r in rows]):.4f} over {len(rows)} images -> {out}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    names = _class_names(ckpt)
    plan = _plan_from_args(args, _base_plan(args))
    classes = None
    if args.classes:
        if len(args.classes) not in (1, 4):
            raise ConfigError("--classes takes one class or four (top-left, top-right, bottom-left, bottom-right)")
        ids = [_class_id(c, names) for c in args.classes] * (4 // len(args.classes))
        classes = [None if c == NULL_CLASS else c for c in ids]
    rng = np.random.default_rng(args.seed)
    corners = geometry.sample_prior(ckpt.config.latent_dim, rng, size=4)
    grid = evaluation.interpolation_grid(ckpt.model, corners, args.grid_n, plan, _noise_policy(ckpt).sigma_max,
                                         classes)
    out = _out_dir(args.out, "interpolate")
    flat = grid.reshape(-1, *grid.shape[2:])
    save_png(make_grid(flat, args.grid_n), out / "interpolation.png")
    print(f"wrote {args.grid_n}x{args.grid_n} grid to {out / 'interpolation.png'}")
    return EXIT_OK


def cmd_edit(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    names = _class_names(ckpt)
    images, sources = _load_images(args.input, ckpt)
    target = None if args.target_class is None else _class_id(args.target_class, names)
    try:
        stitch = sampling.StitchSpec(args.split, args.boundary)
        plan = sampling.EditPlan(mode=args.mode, target_class=target, steps=args.steps, r=args.r,
                                 gamma=args.gamma, share_noise=args.share_noise, stitch=stitch, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    sigma_max = _noise_policy(ckpt).sigma_max
    out = _out_dir(args.out, "edit")
    if args.mode == "manipulate":
        if args.input_b:
            raise ConfigError("--input-b is only used by --mode crossover")
        if target is None:
            raise ConfigError("--mode manipulate needs --target-class")
        before = images
        edited = sampling.manipulate(ckpt.model, images, target, plan, sigma_max)
    else:
        if not args.input_b:
            raise ConfigError("--mode crossover needs --input-b")
        b, b_sources = _load_images(args.input_b, ckpt)
        if len(b) != len(images):
            raise ConfigError(f"--input has {len(images)} images but --input-b has {len(b)}")
        before = sampling.stitch(images, b, stitch)
        sources = [f"{sa}+{sb}" for sa, sb in zip(sources, b_sources)]
        edited = sampling.crossover(ckpt.model, images, b, plan, sigma_max)
        for i, comp in enumerate(before):
            save_png(comp, out / f"composite_{i:05d}.png")
    rows = []
    label = "" if plan.target_class is None else _class_label(plan.target_class, names)
    for i, (src, img) in enumerate(zip(sources, edited)):
        name = f"edit_{i:05d}.png"
        save_png(img, out / name)
        rows.append([name, src, plan.mode, label, plan.steps, plan.r, plan.gamma, plan.seed])
    save_png(make_grid(np.concatenate([before, edited]), len(edited)), out / "grid.png")
    _write_csv(out / "edit.csv", ["filename", "source", "mode", "target_class", "steps", "r", "gamma", "seed"], rows)
    print(f"{plan.mode}: steps={plan.steps} r={plan.r} gamma={plan.gamma} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ref = _reference(args, ckpt)
    sigma_max = _noise_policy(ckpt).sigma_max
    base = _base_plan(args)
    rows = []
    summary: dict = {"checkpoint": str(args.checkpoint), "step": ckpt.step, "n_samples": args.n_samples,
                     "feature_extractor": "frozen random conv pyramid (not Inception; values not comparable to FID)",
                     "generation": {}}
    models = [("trained", ckpt.model)]
    if args.untrained:
        models.append(("untrained", SphereAutoencoder(ckpt.config, seed=ckpt.seed)))
    for steps in args.steps:
        args_steps = argparse.Namespace(**{**vars(args), "steps": steps})
        plan = _plan_from_args(args_steps, base)
        for tag, model in models:
            report = evaluation.eval_generation(model, plan, ref.images, args.n_samples, sigma_max, ref.labels)
            key = f"{tag}_steps{steps}"
            summary["generation"][key] = {k: (float(v) if np.isscalar(v) else {int(c): float(d) for c, d in v.items()})
                                          for k, v in report.items() if k != "samples"}
            rows.append([f"distance_{key}", report["distance"]])
            for c, d in report.get("per_class", {}).items():
                rows.append([f"distance_{key}_class{c}", d])
            if "noise_baseline" not in summary:
                summary["noise_baseline"] = report["noise_baseline"]
                summary["split_half_baseline"] = report["split_half_baseline"]
                rows.append(["noise_baseline", report["noise_baseline"]])
                rows.append(["split_half_baseline", report["split_half_baseline"]])
    uni = evaluation.conditional_uniformity(ckpt.model, ref.images, ref.labels if ckpt.config.conditional else None,
                                            args.projections, args.seed)
    summary["uniformity"] = {"per_class": {int(c): float(v) for c, v in uni["per_class"].items()},
                             "pooled": float(uni["pooled"])}
    for c, v in uni["per_class"].items():
        rows.append([f"swd_class{c}", v])
    rows.append(["swd_pooled", uni["pooled"]])
    recon = sampling.reconstruct(ckpt.model, ref.images)
    summary["reconstruction_l1"] = float(np.mean(np.abs(recon - ref.images)))
    rows.append(["reconstruction_l1", summary["reconstruction_l1"]])

    out = _out_dir(args.out, "eval")
    _write_csv(out / "eval.csv", ["metric", "value"], rows)
    (out / "summary.yaml").write_text(yaml.safe_dump(summary, sort_keys=False))
    for name, value in rows:
        print(f"{name:40s} {value:.5f}")
    return EXIT_OK


def cmd_latent_viz(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    names = _class_names(ckpt)
    ref = _reference(args, ckpt)
    labels = ref.labels if ckpt.config.conditional else None
    uni = evaluation.conditional_uniformity(ckpt.model, ref.images, labels, args.projections, args.seed)
    ref_names = list(ref.classes) if len(ref.classes) else names
    rows = []
    for c, coords in uni["coords"].items():
        label = ref_names[c] if c < len(ref_names) else str(c)
        rows.extend([label, *map(float, p)] for p in coords)
    out = _out_dir(args.out, "latent-viz")
    _write_csv(out / "latents.csv", ["class", "x", "y", "z"], rows)
    print(f"wrote {len(rows)} projected latents to {out / 'latents.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sphere-encoder", allow_abbrev=False,
                     description="Train and sample spherical-latent image autoencoders.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    verbose = _Parser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = sub.add_parser("train", parents=[verbose], allow_abbrev=False, help="train from a config file")
    p.add_argument("--config", required=True)
    for key in run_config.KEYS:
        p.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="VALUE",
                       help=argparse.SUPPRESS if key in ("model_params",) else None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[verbose], allow_abbrev=False, help="sample new images")
    _add_common(p)
    _add_sampler_flags(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--class", dest="class_", help="class name or id; 'null' for unconditional")
    p.add_argument("--grid-cols", type=int, default=8)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("reconstruct", parents=[verbose], allow_abbrev=False, help="encode and decode images without noise")
    _add_common(p)
    p.add_argument("--input", help="PNG file or folder (default: the checkpoint's dataset)")
    p.add_argument("--n", type=int, default=16)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("interpolate", parents=[verbose], allow_abbrev=False, help="bilinear latent interpolation grid")
    _add_common(p)
    _add_sampler_flags(p)
    p.add_argument("--grid-n", type=int, default=5)
    p.add_argument("--classes", nargs="+", help="one class, or four corner classes")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("edit", parents=[verbose], allow_abbrev=False, help="training-free editing")
    _add_common(p)
    p.add_argument("--mode", choices=("manipulate", "crossover"), required=True)
    p.add_argument("--input", required=True, help="PNG file or folder")
    p.add_argument("--input-b", help="second source for crossover")
    p.add_argument("--target-class")
    p.add_argument("--steps", type=int, help="defaults: manipulate 4, crossover 10")
    p.add_argument("--r", type=float, help="defaults: manipulate 1.0, crossover 0.25")
    p.add_argument("--gamma", type=float, help="defaults: manipulate 0, crossover 1")
    p.add_argument("--share-noise", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--split", choices=("left-right", "top-bottom"), default="left-right")
    p.add_argument("--boundary", type=float, default=0.5)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", parents=[verbose], allow_abbrev=False, help="generation distance, uniformity, reconstruction")
    _add_common(p)
    _add_sampler_flags(p)
    p.add_argument("--reference", help="class_name/*.png folder (default: the checkpoint's dataset)")
    p.add_argument("--n-samples", type=int, default=256)
    p.add_argument("--projections", type=int, default=64)
    p.add_argument("--untrained", action="store_true", help="also score a freshly initialized model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("latent-viz", parents=[verbose], allow_abbrev=False, help="export 3-D projections of encoder latents")
    _add_common(p)
    p.add_argument("--reference", help="class_name/*.png folder (default: the checkpoint's dataset)")
    p.add_argument("--projections", type=int, default=64)
    p.set_defaults(func=cmd_latent_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    if args.command == "eval":
        args.steps = [1, 4] if args.steps is None else [args.steps]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FloatingPointError, DegenerateLatent) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ConfigMismatch, InvalidClass, InvalidAngle, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
