"""``lumisplit`` command line: datasets, training, separation, evaluation, checks, ablation report.

Exit codes: 0 success, 2 validation error, 3 numeric failure (including a
failed gradient check or a failed hard ablation check).
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import logging
import multiprocessing
import os
import sys
from dataclasses import fields

import numpy as np

from . import __version__, dataset, imgio, losses, physsep
from .formation import (FormationError, SynthParams, compose_flash_pair, make_benchmark, sample_light,
                        sample_light_pair, synth_scene, synth_single_light_scene)
from .imgcore import ImageError

log = logging.getLogger("lumisplit")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3


class CliError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


# --- helpers ----------------------------------------------------------------------

def resolve_seed(arg) -> int:
    if arg is not None:
        return int(arg)
    env = os.environ.get("LUMISPLIT_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"LUMISPLIT_SEED={env!r} is not an integer")


def load_overrides(path, allowed: set[str], what: str) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})")
    if not isinstance(d, dict):
        raise CliError(f"{path}: config must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise CliError(f"{path}: unknown {what} keys {sorted(unknown)}")
    return d


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def synth_params(overrides: dict, size: int | None) -> SynthParams:
    d = dict(overrides)
    if size is not None:
        d["size"] = size
    for k in ("albedo_range", "brightness_range"):
        if k in d:
            d[k] = tuple(d[k])
    return SynthParams(**d)


def write_resolved(path, command: str, config: dict) -> None:
    dataset.dump_json(path, {"command": command, "version": __version__, **config})


def pmap(fn, items, jobs: int):
    """Order-preserving map; ``jobs > 1`` fans out over worker processes."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with multiprocessing.get_context("fork").Pool(min(jobs, len(items))) as pool:
        return pool.map(fn, items)


def _parse_rgb(text) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise CliError(f"bad colour {text!r}; expected r,g,b")
    if v.shape != (3,) or np.any(v < 0) or v.sum() <= 0:
        raise CliError(f"bad colour {text!r}; expected three non-negative numbers")
    return v / v.sum()


# --- dataset commands ---------------------------------------------------------------

def _synth_one(k, out, seed, params):
    s = synth_scene(seed * 100003 + k, params)
    dataset.write_sample(os.path.join(out, dataset.sample_id(k)), s)
    return dataset.sample_id(k)


def cmd_synth(args) -> int:
    seed = resolve_seed(args.seed)
    params = synth_params(load_overrides(args.config, _field_names(SynthParams), "synth"), args.size)
    os.makedirs(args.out, exist_ok=True)
    ids = pmap(functools.partial(_synth_one, out=args.out, seed=seed, params=params), range(args.count), args.jobs)
    write_resolved(os.path.join(args.out, "config.json"), "synth",
                   {"seed": seed, "count": args.count, "params": params.to_json()})
    print(f"wrote {len(ids)} samples to {args.out}")
    return EXIT_OK


def cmd_compose(args) -> int:
    seed = resolve_seed(args.seed)
    flash = imgio.load_image(args.flash, args.transfer)
    noflash = imgio.load_image(args.noflash, args.transfer)
    rng = np.random.default_rng([seed, 31])
    if args.recolor:
        colors = [_parse_rgb(c) for c in args.recolor]
    else:
        colors = [sample_light(rng) for _ in range(args.count)]
    flash_chrom = _parse_rgb(args.flash_chrom) if args.flash_chrom else np.full(3, 1.0 / 3.0)
    os.makedirs(args.out, exist_ok=True)
    for k, c in enumerate(colors):
        s = compose_flash_pair(flash, noflash, c, gain=args.gain, flash_chrom=flash_chrom)
        s.meta.update({"index": k, "seed": seed, "flash": os.path.basename(args.flash),
                       "noflash": os.path.basename(args.noflash)})
        dataset.write_sample(os.path.join(args.out, dataset.sample_id(k)), s)
    write_resolved(os.path.join(args.out, "config.json"), "compose",
                   {"seed": seed, "flash": args.flash, "noflash": args.noflash, "transfer": args.transfer,
                    "gain": args.gain, "flash_chrom": flash_chrom.tolist(), "recolors": [c.tolist() for c in colors]})
    print(f"wrote {len(colors)} samples to {args.out}")
    return EXIT_OK


BENCH_KEYS = {"scenes", "lights_per_scene", "colors", "size", "replace"}


def cmd_bench_gen(args) -> int:
    seed = resolve_seed(args.seed)
    over = load_overrides(args.config, BENCH_KEYS, "bench-gen")
    scenes = over.get("scenes", args.scenes)
    per_scene = over.get("lights_per_scene", args.lights_per_scene)
    n_colors = over.get("colors", args.colors)
    size = over.get("size", args.size)
    replace = over.get("replace", True)
    params = SynthParams(size=size)
    singles, alphas = [], []
    for k in range(scenes):
        s, a = synth_single_light_scene(seed * 7919 + k, per_scene, params)
        singles.append(s)
        alphas.append(a)
    rng = np.random.default_rng([seed, 23])
    colors = [sample_light_pair(rng, params.min_sep) for _ in range(n_colors)]
    samples = make_benchmark(singles, colors, args.count, alphas=alphas, seed=seed, replace=replace)
    os.makedirs(args.out, exist_ok=True)
    pmap(functools.partial(_write_indexed, out=args.out), list(enumerate(samples)), args.jobs)
    write_resolved(os.path.join(args.out, "config.json"), "bench-gen",
                   {"seed": seed, "count": args.count, "scenes": scenes, "lights_per_scene": per_scene,
                    "colors": n_colors, "size": size, "replace": replace})
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _write_indexed(item, out):
    k, s = item
    dataset.write_sample(os.path.join(out, dataset.sample_id(k)), s)


# --- training / inference ---------------------------------------------------------------

def cmd_train(args) -> int:
    from .nn.train import TrainConfig, train

    over = load_overrides(args.config, _field_names(TrainConfig), "train")
    if args.mode is not None:
        over["mode"] = args.mode
    if args.steps is not None:
        over["steps"] = args.steps
    if args.seed is not None or "seed" not in over:
        over["seed"] = resolve_seed(args.seed)
    cfg = TrainConfig.from_dict(over)
    data = dataset.read_dataset(args.data, args.limit)
    os.makedirs(args.out, exist_ok=True)
    write_resolved(os.path.join(args.out, "config.json"), "train",
                   {"data": args.data, "limit": args.limit, "train": cfg.to_dict()})
    res = train(cfg, data, out_dir=args.out, checkpoint_every=args.checkpoint_every,
                log_path=os.path.join(args.out, "metrics.csv"), resume=args.resume)
    last = res.history[-1] if res.history else {}
    print(f"trained {cfg.mode} for {res.step} steps; final total loss {last.get('total', float('nan')):.6g}")
    return EXIT_OK


def _write_separation(prefix, images, fit_json, alpha=None):
    d = os.path.dirname(prefix)
    if d:
        os.makedirs(d, exist_ok=True)
    imgio.write_pfm(f"{prefix}_1.pfm", images[0])
    imgio.write_pfm(f"{prefix}_2.pfm", images[1])
    if alpha is not None:
        imgio.write_pfm(f"{prefix}_alpha.pfm", alpha)
    dataset.dump_json(f"{prefix}_fit.json", fit_json)


def _separate_image(img, alpha, model, mode):
    """Returns (images, alpha used, fit json)."""
    from .nn.train import infer

    if model is None:
        sep = physsep.separate_with_chrom(img, alpha)
        return sep.images, None, sep.fit.to_json()
    out = infer(model, img, mode)
    fit = out.fit.to_json() if out.fit is not None else {"mode": "direct"}
    return out.images, out.alpha, fit


def _separate_sample(sid, data, out, mode, checkpoint):
    from .nn.train import load_checkpoint

    model = load_checkpoint(checkpoint).model if checkpoint else None
    s = dataset.read_sample(os.path.join(data, sid))
    images, alpha, fit = _separate_image(s.input, s.albedo_chrom, model, mode)
    _write_separation(os.path.join(out, sid, "out"), images, fit, alpha)
    return sid


def cmd_separate(args) -> int:
    from .nn.train import load_checkpoint

    if args.data is not None:
        if args.out is None:
            raise CliError("--data needs --out")
        ids = dataset.list_samples(args.data)
        if args.checkpoint is None:
            log.info("batch separation with ground-truth alpha")
        pmap(functools.partial(_separate_sample, data=args.data, out=args.out, mode=args.mode,
                               checkpoint=args.checkpoint), ids, args.jobs)
        write_resolved(os.path.join(args.out, "config.json"), "separate",
                       {"data": args.data, "checkpoint": args.checkpoint, "mode": args.mode})
        print(f"separated {len(ids)} samples into {args.out}")
        return EXIT_OK
    if args.input is None or args.out_prefix is None:
        raise CliError("separate needs --input and --out-prefix (or --data/--out)")
    if (args.alpha is None) == (args.checkpoint is None):
        raise CliError("give exactly one of --alpha or --checkpoint")
    img = imgio.load_image(args.input, args.transfer)
    alpha = imgio.load_image(args.alpha) if args.alpha else None
    if alpha is not None and alpha.shape != img.shape:
        raise CliError(f"alpha {alpha.shape} does not match input {img.shape}")
    model = load_checkpoint(args.checkpoint).model if args.checkpoint else None
    images, alpha_used, fit = _separate_image(img, alpha, model, args.mode)
    _write_separation(args.out_prefix, images, fit, alpha_used)
    write_resolved(f"{args.out_prefix}_config.json", "separate",
                   {"input": args.input, "alpha": args.alpha, "checkpoint": args.checkpoint,
                    "mode": args.mode if args.checkpoint else "physics", "transfer": args.transfer})
    print(f"wrote {args.out_prefix}_1.pfm {args.out_prefix}_2.pfm")
    return EXIT_OK


# --- evaluation -------------------------------------------------------------------------

PRED_NAMES = (("out_1.pfm", "out_2.pfm"), ("sep1.pfm", "sep2.pfm"))
ALPHA_NAMES = ("out_alpha.pfm", "alpha.pfm")


def _pred_files(d):
    for a, b in PRED_NAMES:
        if os.path.exists(os.path.join(d, a)) and os.path.exists(os.path.join(d, b)):
            return os.path.join(d, a), os.path.join(d, b)
    return None


def _eval_sample(sid, pred_dir, gt_dir, scale_align):
    gt = dataset.read_sample(os.path.join(gt_dir, sid))
    pd = os.path.join(pred_dir, sid)
    files = _pred_files(pd)
    pred = (imgio.load_image(files[0]), imgio.load_image(files[1]))
    for p in pred:
        if p.shape != gt.input.shape:
            raise CliError(f"{sid}: prediction {p.shape} does not match ground truth {gt.input.shape}")
    metric = losses.eval_metric(pred, gt.separated, gt.mask, scale_align)
    chrom = None
    for name in ALPHA_NAMES:
        path = os.path.join(pd, name)
        if os.path.exists(path):
            chrom = losses.chrom_error(imgio.load_image(path), gt.albedo_chrom, gt.mask)
            break
    return {"id": sid, "sep_metric": metric, "chrom_l1": chrom}


def cmd_eval(args) -> int:
    gt_ids = dataset.list_samples(args.gt_dir)
    if not gt_ids:
        raise CliError(f"{args.gt_dir}: no ground-truth samples")
    missing = [i for i in gt_ids if _pred_files(os.path.join(args.pred_dir, i)) is None]
    if missing:
        raise CliError(f"missing predictions for {len(missing)} samples (first: {missing[0]})")
    rows = pmap(functools.partial(_eval_sample, pred_dir=args.pred_dir, gt_dir=args.gt_dir,
                                  scale_align=not args.raw), gt_ids, args.jobs)
    mean_metric = float(np.mean([r["sep_metric"] for r in rows]))
    chroms = [r["chrom_l1"] for r in rows if r["chrom_l1"] is not None]
    mean_chrom = float(np.mean(chroms)) if chroms else None
    out = args.out or args.pred_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "eval.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "sep_metric", "chrom_l1"])
        for r in rows:
            w.writerow([r["id"], f"{r['sep_metric']:.9g}", "" if r["chrom_l1"] is None else f"{r['chrom_l1']:.9g}"])
        w.writerow(["mean", f"{mean_metric:.9g}", "" if mean_chrom is None else f"{mean_chrom:.9g}"])
    dataset.dump_json(os.path.join(out, "eval.json"),
                      {"n": len(rows), "mean_sep_metric": mean_metric, "mean_chrom_l1": mean_chrom,
                       "scale_aligned": not args.raw, "samples": rows})
    write_resolved(os.path.join(out, "eval_config.json"), "eval",
                   {"pred_dir": args.pred_dir, "gt_dir": args.gt_dir, "raw": args.raw})
    print(f"{len(rows)} samples: mean separation metric {mean_metric:.6g}"
          + ("" if mean_chrom is None else f", mean chromaticity L1 {mean_chrom:.6g}"))
    return EXIT_OK


# --- checks and reports ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .nn import gradcheck as G
    from .nn.tensor import ADJOINTS, corrupt_adjoint

    seed = resolve_seed(args.seed)
    seeds = tuple(range(seed, seed + args.seeds))
    layer_shapes = G.LAYER_SHAPES
    loss_shapes = G.LOSS_SHAPES
    if args.sizes:
        try:
            sizes = [tuple(int(v) for v in s.split("x")) for s in args.sizes.split(",")]
        except ValueError:
            raise CliError(f"bad --sizes {args.sizes!r}; expected e.g. 4x4,5x6,6x6")
        if any(len(s) != 2 or min(s) < 4 for s in sizes):
            raise CliError("each size must be HxW with both sides >= 4")
        loss_shapes = tuple(sizes)
        layer_shapes = tuple((1 + k % 2, 2 + k % 2, h, w) for k, (h, w) in enumerate(sizes))
    if args.corrupt and args.corrupt not in ADJOINTS:
        raise CliError(f"unknown op {args.corrupt!r}; choose from {sorted(ADJOINTS)}")

    def run():
        return G.run_gradcheck(seeds, layer_shapes, loss_shapes)

    if args.corrupt:
        with corrupt_adjoint(args.corrupt, args.factor):
            report = run()
    else:
        report = run()
    print(report.table())
    if args.out:
        d = os.path.dirname(args.out)
        if d:
            os.makedirs(d, exist_ok=True)
        dataset.dump_json(args.out, {**report.to_json(), "seeds": list(seeds),
                                     "corrupt": args.corrupt, "factor": args.factor if args.corrupt else None})
    if not report.passed:
        raise NumericFailure("gradient check failed")
    return EXIT_OK


def cmd_report(args) -> int:
    from .ablation import AblationConfig, run_ablation

    over = load_overrides(args.config, _field_names(AblationConfig), "report")
    if args.steps is not None:
        over["steps"] = args.steps
    if args.seed is not None or "seed" not in over:
        over["seed"] = resolve_seed(args.seed)
    cfg = AblationConfig.from_dict(over)
    report = run_ablation(cfg)
    print(report.table())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.csv"), "w", newline="") as f:
            f.write(report.to_csv())
        dataset.dump_json(os.path.join(args.out, "ablation.json"), report.to_json())
        write_resolved(os.path.join(args.out, "config.json"), "report", {"ablation": cfg.to_dict()})
    if not report.passed:
        raise NumericFailure("hard ablation check failed")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lumisplit", description="Two-illuminant image separation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, jobs=True, config=True):
        sp.add_argument("--seed", type=int, default=None, help="random seed (default: $LUMISPLIT_SEED or 0)")
        if config:
            sp.add_argument("--config", default=None, help="JSON file of overrides; unknown keys are rejected")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker processes for per-sample work")

    sp = sub.add_parser("synth", help="generate procedural two-light scenes")
    sp.add_argument("--out", required=True, help="dataset directory to write")
    sp.add_argument("--count", type=int, default=50)
    sp.add_argument("--size", type=int, default=None, help="image side in pixels (default 64)")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("compose", help="build two-light samples from a flash/no-flash pair")
    sp.add_argument("--flash", required=True)
    sp.add_argument("--noflash", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--recolor", action="append", help="flash recolour r,g,b (repeatable); default: sample --count")
    sp.add_argument("--count", type=int, default=1, help="number of random recolours when --recolor is absent")
    sp.add_argument("--gain", type=float, default=1.0)
    sp.add_argument("--flash-chrom", default=None, help="flash chromaticity r,g,b (default neutral)")
    sp.add_argument("--transfer", choices=imgio.TRANSFERS, default="linear", help="transfer function of PNG inputs")
    common(sp, jobs=False, config=False)
    sp.set_defaults(func=cmd_compose)

    sp = sub.add_parser("bench-gen", help="build a benchmark from single-light renders")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--scenes", type=int, default=52)
    sp.add_argument("--lights-per-scene", type=int, default=4)
    sp.add_argument("--colors", type=int, default=16, help="number of pre-selected light pairs")
    sp.add_argument("--size", type=int, default=64)
    common(sp)
    sp.set_defaults(func=cmd_bench_gen)

    sp = sub.add_parser("train", help="train one supervision variant")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="run directory (checkpoints, metrics.csv)")
    sp.add_argument("--mode", choices=("chrom_only", "final_only", "full", "singlenet"), default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--limit", type=int, default=None, help="use only the first N samples")
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    common(sp, jobs=False)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("separate", help="split an image into its two single-light components")
    sp.add_argument("--input", help="input image (PFM or PNG)")
    sp.add_argument("--alpha", help="reflectance chromaticity PFM (physics separation)")
    sp.add_argument("--checkpoint", help="trained checkpoint directory")
    sp.add_argument("--mode", choices=("physics", "direct"), default="physics")
    sp.add_argument("--out-prefix", help="writes <prefix>_1.pfm, <prefix>_2.pfm, <prefix>_fit.json")
    sp.add_argument("--transfer", choices=imgio.TRANSFERS, default="linear")
    sp.add_argument("--data", help="dataset directory for batch mode (ground-truth alpha unless --checkpoint)")
    sp.add_argument("--out", help="output directory for batch mode")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_separate)

    sp = sub.add_parser("eval", help="score predictions against a ground-truth dataset")
    sp.add_argument("pred_dir")
    sp.add_argument("gt_dir")
    sp.add_argument("--out", default=None, help="report directory (default: pred_dir)")
    sp.add_argument("--raw", action="store_true", help="skip the per-pairing scale alignment")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss gradient")
    sp.add_argument("--seeds", type=int, default=20, help="number of consecutive seeds")
    sp.add_argument("--sizes", default=None, help="comma-separated HxW sizes, e.g. 4x4,5x6,6x6")
    sp.add_argument("--corrupt", default=None, help="scale one op's adjoint (mutation test)")
    sp.add_argument("--factor", type=float, default=1.1)
    sp.add_argument("--out", default=None, help="write the report as JSON")
    common(sp, jobs=False, config=False)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("report", help="train the ablation variants and print the comparison table")
    sp.add_argument("--out", default=None, help="directory for ablation.csv / ablation.json")
    sp.add_argument("--steps", type=int, default=None)
    common(sp, jobs=False)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    from .nn.tensor import NumericError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except (NumericFailure, NumericError, FloatingPointError, physsep.FitError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CliError, FormationError, ImageError, dataset.DatasetError, FileNotFoundError,
            ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
