"""Command-line entry point: ``lepa <command> [options]``.

Every successful command writes a JSON run manifest next to its outputs.
Failures print one line ``error[<category>]: <message>`` to stderr and
exit with the category's code.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5
OUT_DIR_ENV = "LEPA_OUT_DIR"

logger = logging.getLogger("lepa")


class CliError(Exception):
    def __init__(self, category: str, code: int, message: str):
        super().__init__(message)
        self.category = category
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, message)


# -- manifest -----------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, argv, config_path, seed, started, outputs):
    """Atomic JSON manifest with sha256 checksums of every output file."""
    path = Path(path)
    files = sorted(str(Path(p)) for p in outputs)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_path": str(config_path) if config_path else None,
        "seed": seed,
        "start": started,
        "end": _now(),
        "outputs": files,
        "checksums": {p: sha256_file(p) for p in files},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    return manifest


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _out_dir(args) -> Path:
    base = args.out_dir or os.environ.get(OUT_DIR_ENV) or "lepa_runs"
    out = Path(base)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- config -------------------------------------------------------------------


def _resolve(args, sections):
    from lepa.config import parse_assignments, read_kv_file, resolve

    file_values = read_kv_file(args.config) if args.config else {}
    overrides = parse_assignments(args.set)
    has_seed = any("seed" in {f.name for f in dataclasses.fields(cls)} for cls in sections.values())
    if args.seed is not None and has_seed:
        overrides["seed"] = str(args.seed)
    return resolve(sections, file_values, overrides)


def _parse_params(text):
    from lepa.geometry import TransformParams

    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as e:
        raise CliError("usage", EXIT_USAGE, f"--params expects tx,ty,angle,scale floats: {text!r}") from e
    if len(values) != 4:
        raise CliError("usage", EXIT_USAGE, f"--params expects 4 values, got {len(values)}")
    try:
        return TransformParams(*values)
    except ValueError as e:
        raise CliError("config", EXIT_CONFIG, str(e)) from e


def _load_model(path):
    from lepa.checkpoint import load_checkpoint

    model, extra = load_checkpoint(path)
    if "norm_mean" not in extra:
        raise CliError("config", EXIT_CONFIG, f"{path}: checkpoint carries no normalization stats")
    stats = (np.array(extra["norm_mean"]), np.array(extra["norm_std"]))
    return model, stats


# -- commands -----------------------------------------------------------------


def cmd_synth_data(args):
    from lepa.data import DatasetSpec, generate_dataset, write_ppm

    spec = _resolve(args, {"data": DatasetSpec})["data"]
    if spec.channels not in (1, 3):
        raise CliError("config", EXIT_CONFIG, "synth-data writes pixmaps, so channels must be 1 or 3")
    out = _out_dir(args)
    outputs = []
    meta_path = out / "metadata.jsonl"
    with open(meta_path, "w") as meta:
        for i, im in enumerate(generate_dataset(spec)):
            path = out / f"img_{i:05d}.{'ppm' if spec.channels == 3 else 'pgm'}"
            write_ppm(path, im.pixels)
            outputs.append(path)
            meta.write(json.dumps({"file": path.name, "primitives": im.primitives}, sort_keys=True) + "\n")
    outputs.append(meta_path)
    print(f"wrote {spec.n_images} images to {out}")
    return outputs, spec.seed


def cmd_train(args, finetune=False):
    from lepa.config import dump
    from lepa.data import load_images
    from lepa.model import ModelConfig
    from lepa.training import TrainConfig, train

    if finetune:
        model, stats = _load_model(args.checkpoint)
        cfg = _resolve(args, {"train": TrainConfig})["train"]
        if cfg.objective != "finetune":
            raise CliError("config", EXIT_CONFIG, "finetune requires objective = finetune (the default here)")
        mcfg = model.cfg
    else:
        sections = _resolve(args, {"model": ModelConfig, "train": TrainConfig})
        cfg, mcfg = sections["train"], sections["model"]
        model, stats = None, None
        if cfg.objective == "finetune":
            raise CliError("config", EXIT_CONFIG, "use the finetune command for objective = finetune")
    images = load_images(args.data, mcfg.img_size)
    if not images:
        raise CliError("io", EXIT_IO, f"no images in {args.data}")
    out = _out_dir(args)
    cfg_path = out / "config.txt"
    cfg_path.write_text(dump(mcfg, cfg))
    model, records = train(cfg, images, out, model_cfg=mcfg, model=model, stats=stats, log_every=args.log_every)
    outputs = [cfg_path, out / "loss_log.jsonl"] + sorted(out.glob("ckpt_epoch*.lepa"))
    if records:
        print(f"final loss {records[-1].loss:.6f} after {len(records)} steps")
        if any(r.diverged for r in records):
            logger.warning("loss exceeded 1000x its initial value during training")
    return outputs, cfg.seed


def cmd_finetune(args):
    args.set = ["objective=finetune"] + list(args.set or [])
    return cmd_train(args, finetune=True)


def cmd_eval_mrr(args):
    from lepa.data import compute_stats, load_images
    from lepa.evaluation import (
        OraclePredictor,
        RandomPredictor,
        TeacherEncoder,
        interpolation_predictor,
        learned_predictor,
        mrr,
    )
    from lepa.model import LEPAModel, ModelConfig

    seed = 0 if args.seed is None else args.seed
    if args.checkpoint:
        model, stats = _load_model(args.checkpoint)
        images = load_images(args.data, model.cfg.img_size)
    else:
        if args.predictor == "learned":
            raise CliError("usage", EXIT_USAGE, "--predictor learned needs --checkpoint")
        mcfg = _resolve(args, {"model": ModelConfig})["model"]
        model = LEPAModel(mcfg, seed=seed)
        images = load_images(args.data, mcfg.img_size)
        stats = compute_stats(images) if images else None
    if args.n_images:
        images = images[: args.n_images]
    if not images:
        raise CliError("io", EXIT_IO, f"no images in {args.data}")
    encoder = TeacherEncoder(model, stats)
    rng = np.random.default_rng(seed)
    if args.predictor == "oracle":
        predictor = OraclePredictor(encoder)
    elif args.predictor == "random":
        predictor = RandomPredictor(np.random.default_rng([seed, 1]))
    elif args.predictor == "learned":
        predictor = learned_predictor(model, stats)
    else:
        predictor = interpolation_predictor(args.predictor)
    report = mrr(predictor, encoder, images, args.n_candidates, rng)
    out = _out_dir(args)
    report_path = out / f"mrr_{args.predictor}.jsonl"
    report_path.write_text("\n".join(report.to_lines()) + "\n")
    print(f"images {report.n_images} candidates {report.n_candidates} predictor {args.predictor}")
    print(f"{report.mrr:.4f}")
    return [report_path], seed


def cmd_encode(args):
    import torch

    from lepa.data import normalize, read_ppm, write_grid

    model, stats = _load_model(args.checkpoint)
    img = read_ppm(args.image)
    c, s = model.cfg.channels, model.cfg.img_size
    if img.shape != (c, s, s):
        raise CliError("io", EXIT_IO, f"{args.image}: expected {(c, s, s)}, got {img.shape}")
    x = torch.as_tensor(normalize(img[None], stats), dtype=torch.float32)
    with torch.no_grad():
        if args.which == "teacher":
            grid = model.teacher_grid(x)[0]
        else:
            if model.cfg.use_cls:
                grid = model.student_context(x)[0][1:]
            else:
                grid = model.student_context(x)[0]
    g = model.cfg.grid_size
    out = Path(args.out)
    write_grid(out, grid.numpy().reshape(g, g, -1))
    return [out], None


def cmd_transform(args):
    from lepa.data import read_grid, write_grid
    from lepa.evaluation import interpolation_predictor, learned_predictor

    p = _parse_params(args.params)
    grid = read_grid(args.grid)
    if args.mode == "learned":
        if not args.checkpoint:
            raise CliError("usage", EXIT_USAGE, "--mode learned needs --checkpoint")
        model, stats = _load_model(args.checkpoint)
        g = model.cfg.grid_size
        if grid.shape != (g, g, model.cfg.enc_dim):
            raise CliError("io", EXIT_IO, f"{args.grid}: grid {grid.shape} does not fit the checkpoint")
        try:
            out_grid = learned_predictor(model, stats).from_grid(grid, p)
        except ValueError as e:
            raise CliError("config", EXIT_CONFIG, str(e)) from e
    else:
        out_grid = interpolation_predictor(args.mode)(None, grid, p)
    out = Path(args.out)
    write_grid(out, np.asarray(out_grid, dtype=np.float32))
    return [out], None


def cmd_visualize(args):
    from lepa.data import read_grid, write_ppm
    from lepa.evaluation import pca_colorwheel

    rgb = pca_colorwheel(read_grid(args.grid))
    if args.upscale > 1:
        rgb = np.repeat(np.repeat(rgb, args.upscale, axis=0), args.upscale, axis=1)
    out = Path(args.out)
    write_ppm(out, np.moveaxis(rgb, -1, 0).astype(np.float64) / 255.0)
    return [out], None


GRADCHECK_THRESHOLDS = {"float64": 1e-5, "float32": 1e-3}


def cmd_gradcheck(args):
    import torch

    from lepa.gradcheck import TINY_CONFIG, lepa_grad_check
    from lepa.model import ModelConfig

    cfg = TINY_CONFIG
    if args.config or args.set:
        from lepa.config import parse_assignments, read_kv_file, resolve

        base = {k: str(v) for k, v in TINY_CONFIG.to_dict().items()}
        base.update(read_kv_file(args.config) if args.config else {})
        cfg = resolve({"model": ModelConfig}, base, parse_assignments(args.set))["model"]
    seed = 0 if args.seed is None else args.seed
    dtypes = ["float64", "float32"] if args.dtype == "both" else [args.dtype]
    out = _out_dir(args)
    results = {}
    ok = True
    for name in dtypes:
        err = lepa_grad_check(cfg, seed=seed, dtype=getattr(torch, name), per=args.per)
        thr = GRADCHECK_THRESHOLDS[name]
        passed = math.isfinite(err) and err < thr
        ok &= passed
        results[name] = {"max_relative_error": err, "threshold": thr, "passed": passed}
        print(f"{name}: max relative error {err:.3e} (threshold {thr:.0e}) {'PASS' if passed else 'FAIL'}")
    path = out / "gradcheck.json"
    path.write_text(json.dumps({"per": args.per, "config": cfg.to_dict(), "results": results}, indent=2) + "\n")
    if not ok:
        raise CliError("numeric", EXIT_NUMERIC, "gradient check exceeded its threshold")
    return [path], seed


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lepa", description="Transformation-conditioned JEPA toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        p.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or ./lepa_runs)")
        p.add_argument("--seed", type=int, help="seed for every stochastic choice of the command")
        if config:
            p.add_argument("--config", help="flat key = value file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("synth-data", help="generate synthetic pixmaps")
    common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="pretrain with ijepa, lepa or nomask")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="train only the predictor of a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval-mrr", help="mean reciprocal rank of a predictor")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictor", choices=["oracle", "random", "nearest", "bilinear", "learned"], required=True)
    p.add_argument("--n-candidates", type=int, default=64)
    p.add_argument("--n-images", type=int, default=0, help="use only the first N images (0 = all)")
    p.set_defaults(func=cmd_eval_mrr)

    p = sub.add_parser("encode", help="write the embedding grid of one image")
    common(p, config=False)
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--which", choices=["student", "teacher"], default="student")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("transform", help="transform a stored embedding grid")
    common(p, config=False)
    p.add_argument("--grid", required=True)
    p.add_argument("--params", required=True, help="tx,ty,angle,scale")
    p.add_argument("--mode", choices=["nearest", "bilinear", "learned"], default="nearest")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("visualize", help="PCA colour-wheel rendering of a grid")
    common(p, config=False)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--upscale", type=int, default=8)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gradcheck", help="finite-difference check of the LEPA loss gradients")
    common(p)
    p.add_argument("--dtype", choices=["float64", "float32", "both"], default="both")
    p.add_argument("--per", choices=["tensor", "element"], default="tensor")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _manifest_path(args, outputs) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
        return out.with_name(out.name + ".manifest.json")
    return _out_dir(args) / "manifest.json"


def main(argv=None) -> int:
    from lepa.config import ConfigError
    from lepa.data import FormatError
    from lepa.evaluation import DistinctnessError
    from lepa.model import NumericalError

    argv = list(sys.argv[1:] if argv is None else argv)
    started = _now()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if getattr(args, "out", None) and getattr(args, "out_dir", None) is None:
            args.out_dir = str(Path(args.out).parent)
        outputs, seed = args.func(args)
        write_manifest(
            _manifest_path(args, outputs), args.command, argv, getattr(args, "config", None), seed, started, outputs
        )
        return EXIT_OK
    except CliError as e:
        err = e
    except ConfigError as e:
        err = CliError("config", EXIT_CONFIG, str(e))
    except (NumericalError, DistinctnessError, FloatingPointError) as e:
        err = CliError("numeric", EXIT_NUMERIC, str(e))
    except (FormatError, OSError) as e:
        err = CliError("io", EXIT_IO, str(e))
    except ValueError as e:
        err = CliError("config", EXIT_CONFIG, str(e))
    msg = " ".join(str(err).split())
    print(f"error[{err.category}]: {msg}", file=sys.stderr)
    return err.code


if __name__ == "__main__":
    sys.exit(main())
