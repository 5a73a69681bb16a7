"""``camofreq`` command-line entry point.

Every subcommand validates its flags before touching the filesystem, logs to
stderr and writes only to the paths it was given. Exit codes: 0 on success, 1
for an operation error (a one-line JSON object on stderr), 2 for bad usage.

Images are 8-bit PNGs. They are read into float64 on the 0..255 scale divided
by 255, and written back with round-half-even quantisation, so an operation
that leaves values untouched reproduces the input pixels exactly.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from PIL import Image

from . import __version__
from .errors import CamoFreqError, ConfigurationError, InputError

log = logging.getLogger("camofreq")


class UsageError(Exception):
    """Flag combination rejected after parsing (reported with exit code 2)."""


# ----------------------------------------------------------------- image I/O
def read_image(path) -> np.ndarray:
    """RGB PNG as float64 ``H x W x 3`` in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: cannot read image ({exc})", path=str(path)) from exc
    return arr / 255.0


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-even."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, values: np.ndarray) -> None:
    arr = quantize(values)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def normalize_for_display(band: np.ndarray) -> np.ndarray:
    lo, hi = float(band.min()), float(band.max())
    return np.zeros_like(band) if hi <= lo else (band - lo) / (hi - lo)


def write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def ordered_map(fn, items, jobs: int) -> list:
    """``map`` that may fan out to processes; results keep input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------- validators
def _require_file(path, what="input"):
    if not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")


def _require_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"output directory does not exist: {parent}")


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _unit_float(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative value, got {text}")
    return v


def _load_config(args):
    from .pipeline import ModelConfig
    if getattr(args, "config", None):
        _require_file(args.config, "config")
        cfg = ModelConfig.from_json(args.config)
    else:
        cfg = ModelConfig()
    return cfg


def _config_has_seed(path) -> bool:
    if not path:
        return False
    with open(path, encoding="utf-8") as fh:
        return "seed" in json.load(fh)


# --------------------------------------------------------------- commands
def cmd_cbom(args) -> None:
    from .cbom import correct_image, init_cbom
    from .tensorkit import ParamStore
    _require_file(args.input)
    _require_parent(args.out)
    if args.params:
        _require_file(args.params, "params")
    elif args.seed is None:
        raise UsageError("cbom needs --params or --seed (weights are otherwise random)")
    image = read_image(args.input)
    params = ParamStore.load(args.params) if args.params else ParamStore(args.seed)
    if not any(n.startswith("cbom_rgb.") for n in params.names()):
        if args.params:
            raise ConfigurationError(f"{args.params} holds no cbom_rgb.* weights")
        init_cbom(params, 3, "cbom_rgb")
    write_image(args.out, correct_image(image, params, lam=args.lam))


def cmd_fdtim(args) -> None:
    from .fdtim import amplitude_image, fdtim_image
    _require_file(args.input)
    for p in filter(None, (args.out, args.spectrum_out)):
        _require_parent(p)
    image = read_image(args.input)
    h, w = image.shape[:2]
    if args.k > h * w:
        raise UsageError(f"--k {args.k} exceeds the {h * w} components per channel")
    write_image(args.out, fdtim_image(image, args.k, protect_dc=args.protect_dc))
    if args.spectrum_out:
        write_image(args.spectrum_out, amplitude_image(image))


def cmd_dwt(args) -> None:
    from .mffam import dwt2
    _require_file(args.input)
    bands = dwt2(read_image(args.input))
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = {"input": os.path.basename(args.input), "padding": list(bands.padding), "bands": {}}
    for name in ("ll", "lh", "hl", "hh"):
        data = getattr(bands, name).data
        fname = f"{name.upper()}.png"
        write_image(os.path.join(args.out_dir, fname), normalize_for_display(data.mean(axis=-1)))
        manifest["bands"][name.upper()] = {
            "file": fname, "shape": list(data.shape),
            "energy": float(np.sum(data ** 2)),
            "energy_per_channel": [float(v) for v in np.sum(data ** 2, axis=(0, 1))],
        }
    write_json(os.path.join(args.out_dir, "manifest.json"), manifest)


def cmd_train(args) -> None:
    from .pipeline.train import default_datasets, fit
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    elif not _config_has_seed(args.config):
        raise UsageError("train needs --seed or a config file with a seed")
    _require_parent(args.out)
    if args.log:
        _require_parent(args.log)
    train, _ = default_datasets(cfg, n_train=args.n_train, n_test=0,
                                contrast=args.contrast, blur_sigma=args.blur)
    params, history = fit(train, cfg)
    params.save(args.out)
    if args.log:
        history.write_csv(args.log)
    log.info("trained %d steps, final loss %.5f", cfg.steps, history.losses[-1] if history.losses else float("nan"))


def cmd_infer(args) -> None:
    from .ingest import write_predictions
    from .pipeline.model import forward, predict_instances
    from .tensorkit import ParamStore
    _require_file(args.params, "params")
    _require_file(args.input)
    _require_parent(args.out)
    if args.instances:
        _require_parent(args.instances)
    cfg = _load_config(args)
    params = ParamStore.load(args.params)
    image = read_image(args.input)
    if image.shape[:2] != tuple(cfg.input_hw):
        raise ConfigurationError(f"image is {image.shape[0]}x{image.shape[1]}, "
                                 f"model expects {cfg.input_hw[0]}x{cfg.input_hw[1]}")
    out = forward(image, params, cfg)
    logits = out.mask_logits.data[..., 0]
    instances = predict_instances(out.mask_logits, out.salience, args.threshold)
    mask = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500))) >= args.threshold
    write_image(args.out, mask.astype(np.float64))
    if args.instances:
        for inst in instances:
            inst.image_id = args.image_id
        write_predictions({args.image_id: instances}, args.instances)


def cmd_eval(args) -> None:
    from .evalstat import mask_ap
    from .ingest import load_coco, load_predictions
    _require_file(args.preds, "predictions")
    _require_file(args.gts, "ground-truth")
    _require_parent(args.out)
    gt_set = load_coco(args.gts)
    preds = load_predictions(args.preds)
    unknown = sorted(set(preds) - {i.id for i in gt_set.images})
    if unknown:
        from .errors import ValidationError
        raise ValidationError(f"{args.preds}: predictions for unknown image ids {unknown}", unknown)
    gts = gt_set.masks_by_image()
    ids = sorted(gts)
    report = mask_ap([preds.get(i, []) for i in ids], [gts[i] for i in ids])
    write_json(args.out, report.to_dict(with_curves=args.curves))


def _image_for(item):
    path, info_id = item
    return info_id, read_image(path)


def cmd_stats(args) -> None:
    from .evalstat import dataset_stats
    from .ingest import load_coco
    _require_file(args.annotations, "annotations")
    if args.images and not os.path.isdir(args.images):
        raise UsageError(f"image directory not found: {args.images}")
    anns = load_coco(args.annotations)
    pixels = None
    if args.images:
        wanted = [(os.path.join(args.images, i.file_name), i.id) for i in anns.images
                  if i.file_name and os.path.isfile(os.path.join(args.images, i.file_name))]
        pixels = dict(ordered_map(_image_for, wanted, args.jobs))
        missing = len(anns.images) - len(pixels)
        if missing:
            log.warning("%d image(s) listed in the annotations were not found", missing)
    report = dataset_stats(anns, pixels)
    report.write(args.out)


def cmd_ablate(args) -> None:
    from .pipeline.train import default_datasets, run_ablation, write_rows
    _require_parent(args.out)
    cfg = _load_config(args).replace(seed=args.seed)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    train, test = default_datasets(cfg, n_train=args.n_train, n_test=args.n_test)
    rows = run_ablation(args.grid, cfg, train, test)
    write_rows(rows, args.out)


def _synth_one(job):
    from .ingest import encode_rle
    from .pipeline.synth import synth_sample
    seed, index, contrast, blur, lo, hi, side, out_dir = job
    s = synth_sample(seed, index, contrast, blur, (lo, hi), (side, side))
    fname = f"{index:05d}.png"
    write_image(os.path.join(out_dir, "images", fname), s.image)
    return fname, [encode_rle(m) for m in s.instance_masks]


def cmd_synth(args) -> None:
    if not 1 <= args.min_instances <= args.max_instances <= 8:
        raise UsageError("instance range must satisfy 1 <= min <= max <= 8")
    if args.size < 16 or args.size % 16:
        raise UsageError("--size must be a positive multiple of 16")
    os.makedirs(os.path.join(args.out_dir, "images"), exist_ok=True)
    jobs = [(args.seed, i, args.contrast, args.blur, args.min_instances, args.max_instances,
             args.size, args.out_dir) for i in range(args.n)]
    results = ordered_map(_synth_one, jobs, args.jobs)
    doc = {"images": [], "annotations": []}
    ann_id = 1
    for i, (fname, rles) in enumerate(results):
        doc["images"].append({"id": i, "file_name": fname, "width": args.size, "height": args.size})
        for rle in rles:
            doc["annotations"].append({"id": ann_id, "image_id": i, "iscrowd": 0, "segmentation": rle,
                                       "area": int(sum(rle["counts"][1::2]))})
            ann_id += 1
    write_json(os.path.join(args.out_dir, "annotations.json"), doc)


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camofreq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"camofreq {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--version", action="version", version=f"camofreq {__version__}")
        p.set_defaults(func=func)
        return p

    p = add("cbom", cmd_cbom, "channel-balance correction of an RGB image")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=_unit_float, default=0.2)
    p.add_argument("--params", help="parameter file holding cbom_rgb.* weights")
    p.add_argument("--seed", type=_nonneg_int, help="initialise fresh weights from this seed")

    p = add("fdtim", cmd_fdtim, "remove the top-K spectral components of each channel")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=_nonneg_int, default=1000)
    p.add_argument("--protect-dc", action="store_true", help="never remove the DC component")
    p.add_argument("--spectrum-out", help="also write the log amplitude spectrum")

    p = add("dwt", cmd_dwt, "single-level Haar bands as PNGs plus an energy manifest")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)

    p = add("train", cmd_train, "train the toy model on synthetic data")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="parameter file to write")
    p.add_argument("--log", help="per-step loss CSV")
    p.add_argument("--seed", type=_nonneg_int, help="overrides the config seed")
    p.add_argument("--n-train", type=_pos_int, default=256)
    p.add_argument("--contrast", type=_unit_float, default=0.6)
    p.add_argument("--blur", type=_nonneg_float, default=1.0)

    p = add("infer", cmd_infer, "predict a mask and instances for one image")
    p.add_argument("--params", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="binary mask PNG {0, 255}")
    p.add_argument("--instances", help="COCO results JSON")
    p.add_argument("--config")
    p.add_argument("--threshold", type=_unit_float, default=0.5)
    p.add_argument("--image-id", type=_nonneg_int, default=0)

    p = add("eval", cmd_eval, "class-agnostic mask AP")
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curves", action="store_true", help="include precision-recall curves")

    p = add("stats", cmd_stats, "dataset distribution and camouflage statistics")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images", help="directory holding the listed image files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=_pos_int, default=1)

    p = add("ablate", cmd_ablate, "train and evaluate one model per grid setting")
    p.add_argument("--grid", required=True, choices=("lambda", "k", "modules", "freq"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_nonneg_int, required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=_nonneg_int, help="override training steps per setting")
    p.add_argument("--n-train", type=_pos_int, default=256)
    p.add_argument("--n-test", type=_pos_int, default=64)

    p = add("synth", cmd_synth, "write a synthetic camouflage dataset")
    p.add_argument("--seed", type=_nonneg_int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=_nonneg_int, default=16)
    p.add_argument("--contrast", type=_unit_float, default=0.6)
    p.add_argument("--blur", type=_nonneg_float, default=1.0)
    p.add_argument("--min-instances", type=int, default=1)
    p.add_argument("--max-instances", type=int, default=3)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--jobs", type=_pos_int, default=1)
    return parser


def _error_payload(exc: Exception) -> dict:
    out = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("path", "offset", "offending", "step"):
        val = getattr(exc, attr, None)
        if val is not None:
            out[attr] = val
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"camofreq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CamoFreqError, OSError) as exc:
        print(json.dumps(_error_payload(exc), sort_keys=True, default=str), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
