"""Command-line entry point: ``fisheye-bev <command> ...``.

Exit codes: 0 success, 1 a check failed (gradcheck, eval thresholds),
2 invalid input. Machine-readable results go to stdout as CSV; human
tables and messages go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .camera import load_calibration, save_calibration
from .errors import FisheyeBevError
from .formats import load_field, load_pgm, save_field, save_pgm, save_visualization
from .lift import DEFAULT_EPS_FLOOR, DEFAULT_PRUNE, DEFAULT_SIGMA, DepthBinSpec, softmax
from .lut import build_lut, load_lut, save_lut
from .parallel import THREADS_ENV, resolve_threads
from .pipeline import splat_cameras
from .splat import DEFAULT_TRUNC, BevGridSpec, load_raster, resample_raster, save_raster
from .synth import (RenderedView, SceneBundle, SceneConfig, default_rig, gen_scene, load_scene, make_bundle,
                    make_oracle_inputs, save_scene)
from .training import CLASS_NAMES, BevLabels, ClassWeights, iou, predict_classes, weighted_ce

log = logging.getLogger("fisheye_bev")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT = 0, 1, 2


class InputError(FisheyeBevError):
    """Bad flag value or missing input file."""


# --- argument helpers --------------------------------------------------------------

def _floats(text, n=None, flag=""):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{flag} expects comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"{flag} expects {n} values, got {len(vals)}")
    return vals


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_grid(p):
    g = p.add_argument_group("BEV grid")
    g.add_argument("--x-range", type=lambda s: _floats(s, 2, "--x-range"), default=[-12.0, 12.0],
                   metavar="LO,HI", help="longitudinal extent in metres (default -12,12)")
    g.add_argument("--y-range", type=lambda s: _floats(s, 2, "--y-range"), default=[-9.0, 9.0],
                   metavar="LO,HI", help="lateral extent in metres (default -9,9)")
    g.add_argument("--resolution", type=float, default=0.375, help="metres per cell (default 0.375)")


def _add_bins(p):
    g = p.add_argument_group("depth bins")
    g.add_argument("--bins", type=_positive_int, default=64, help="number of depth bins (default 64)")
    g.add_argument("--z-range", type=lambda s: _floats(s, 2, "--z-range"), default=[1.0, 30.0],
                   metavar="MIN,MAX", help="bin range in metres (default 1,30)")


def _grid(args, channels=3) -> BevGridSpec:
    return BevGridSpec(tuple(args.x_range), tuple(args.y_range), args.resolution, channels)


def _bins(args) -> DepthBinSpec:
    return DepthBinSpec(args.bins, *args.z_range)


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise InputError(f"{what} not found: {path}")
    return path


def _table(rows, header):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    print(fmt.format(*header), file=sys.stderr)
    for r in rows:
        print(fmt.format(*r), file=sys.stderr)


# --- commands ----------------------------------------------------------------------

def cmd_lut(args) -> int:
    cams = load_calibration(_require(Path(args.calibration), "calibration file"))
    if args.camera:
        cams = [c for c in cams if c.name == args.camera]
        if not cams:
            raise InputError(f"--camera {args.camera!r} not found in {args.calibration}")
    out = Path(args.out)
    if len(cams) == 1 and out.suffix:
        targets = [(cams[0], out)]
    else:
        out.mkdir(parents=True, exist_ok=True)
        targets = [(c, out / f"{c.name}.flut") for c in cams]
    print("camera,path,width,height,valid")
    for cam, path in targets:
        lut = build_lut(cam.intrinsics, args.stride, args.threads)
        save_lut(lut, path)
        print(f"{cam.name},{path},{lut.width},{lut.height},{lut.num_valid}")
    return EXIT_OK


def _camera_inputs(cam, lut, field_dir: Path, bins: DepthBinSpec, args):
    depth = load_field(_require(field_dir / f"{cam.name}.depth.fpfd", "depth field")).astype(np.float64)
    if depth.shape != (lut.height, lut.width, bins.count):
        raise InputError(f"{cam.name}: depth field {depth.shape} does not match LUT "
                         f"({lut.height}, {lut.width}) with {bins.count} bins")
    if args.depth_logits:
        depth = softmax(depth, axis=-1)
    feats = load_field(_require(field_dir / f"{cam.name}.feat.fpfd", "feature field")).astype(np.float64)
    if feats.shape[:2] != (lut.height, lut.width):
        raise InputError(f"{cam.name}: feature field {feats.shape} does not match LUT")
    sigma_path = field_dir / f"{cam.name}.sigma.fpfd"
    sigma = load_field(sigma_path)[..., 0].astype(np.float64) if sigma_path.is_file() else args.sigma
    return depth, sigma, feats


def cmd_splat(args) -> int:
    cams = load_calibration(_require(Path(args.calibration), "calibration file"))
    lut_dir, field_dir = Path(args.luts), Path(args.fields)
    bins = _bins(args)
    luts, depth, sigma, feats = [], [], [], []
    for cam in cams:
        lut = load_lut(_require(lut_dir / f"{cam.name}.flut", "LUT"))
        d, s, f = _camera_inputs(cam, lut, field_dir, bins, args)
        luts.append(lut)
        depth.append(d)
        sigma.append(s)
        feats.append(f)
    channels = {f.shape[-1] for f in feats}
    if len(channels) != 1:
        raise InputError(f"feature channel counts differ between cameras: {sorted(channels)}")
    grid = _grid(args, channels.pop())
    raster = splat_cameras(cams, luts, depth, sigma, feats, bins, grid, args.trunc_sigma, args.normalize,
                           args.prune_below, DEFAULT_EPS_FLOOR, args.threads)
    save_raster(raster, args.out)
    if args.ppm:
        save_visualization(raster.features, args.ppm)
    if args.resample:
        rows, cols = args.resample
        save_raster(resample_raster(raster, rows, cols, args.resample_mode), Path(args.out).with_suffix(".resampled.bevr"))
    print("rows,cols,channels,total_mass")
    print(f"{grid.rows},{grid.cols},{grid.channels},{raster.mass.sum()!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    tol = args.tolerance
    rep = run_gradcheck(args.seed, args.count,
                        tol=tol, cov_tol=tol * 10 if args.cov_tolerance is None else args.cov_tolerance,
                        ce_tol=args.ce_tolerance, e2e_tol=args.e2e_tolerance, perturb=args.perturb,
                        threads=args.threads)
    print("check,max_rel_err,tolerance,pass")
    rows = []
    for name, err, t, ok in rep.rows():
        print(f"{name},{err:.6e},{t:.3e},{int(ok)}")
        rows.append((name, f"{err:.3e}", f"{t:.1e}", "ok" if ok else "FAIL"))
    _table(rows, ("check", "worst rel err", "tol", ""))
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


def _write_bundle(bundle: SceneBundle, out: Path, bins: DepthBinSpec, oracle: bool):
    out.mkdir(parents=True, exist_ok=True)
    save_scene(bundle.scene, out / "scene.json")
    save_calibration(bundle.cameras, out / "rig.ini")
    save_pgm(bundle.labels.class_ids(), out / "labels.pgm")
    inputs = make_oracle_inputs(bundle.views, bins) if oracle else [None] * len(bundle.views)
    for cam, lut, view, o in zip(bundle.cameras, bundle.luts, bundle.views, inputs):
        save_lut(lut, out / f"{cam.name}.flut")
        save_pgm(view.semantic, out / f"{cam.name}.semantic.pgm")
        save_field(view.depth, out / f"{cam.name}.range.fpfd")
        if o is not None:
            save_field(o.depth_probs, out / f"{cam.name}.depth.fpfd")
            save_field(o.features, out / f"{cam.name}.feat.fpfd")
            save_field(o.sigma, out / f"{cam.name}.sigma.fpfd")


def cmd_synth(args) -> int:
    grid = _grid(args)
    if args.rig:
        cams = load_calibration(_require(Path(args.rig), "rig file"))
    else:
        cams = default_rig(tuple(args.image_size), args.pitch)
    cfg = SceneConfig(box_count=tuple(args.boxes), grid=grid)
    luts = [build_lut(c.intrinsics, args.stride, args.threads) for c in cams]
    out = Path(args.out)
    print("seed,path,boxes,valid_pixels")
    for seed in range(args.seed, args.seed + args.count):
        scene = gen_scene(seed, cfg)
        bundle = make_bundle(scene, cams, luts, grid, args.threads)
        path = out / f"scene_{seed:05d}"
        _write_bundle(bundle, path, _bins(args), args.oracle)
        print(f"{seed},{path},{len(scene.boxes)},{sum(l.num_valid for l in luts)}")
    return EXIT_OK


def load_bundle(path: Path) -> SceneBundle:
    """Read a scene directory written by ``synth``."""
    scene = load_scene(_require(path / "scene.json", "scene file"))
    cams = load_calibration(_require(path / "rig.ini", "rig file"))
    luts, views = [], []
    for cam in cams:
        lut = load_lut(_require(path / f"{cam.name}.flut", "LUT"))
        sem = load_pgm(_require(path / f"{cam.name}.semantic.pgm", "semantic image"))
        rng = load_field(_require(path / f"{cam.name}.range.fpfd", "range field"))[..., 0].astype(np.float64)
        if sem.shape != (lut.height, lut.width) or rng.shape != sem.shape:
            raise InputError(f"{path}: {cam.name} view does not match its LUT")
        luts.append(lut)
        views.append(RenderedView(sem, rng))
    ids = load_pgm(_require(path / "labels.pgm", "label image"))
    return SceneBundle(scene, cams, luts, views, BevLabels.from_class_ids(ids.astype(np.int64)))


def cmd_train_toy(args) -> int:
    from .toy import ToyConfig, build_cache, evaluate, toy_train

    root = Path(args.dataset)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "scene.json").is_file()) if root.is_dir() else []
    if len(dirs) <= args.holdout:
        raise InputError(f"{root}: found {len(dirs)} scene directories, need more than --holdout {args.holdout}")
    bundles = [load_bundle(d) for d in dirs]
    train, held = bundles[:len(bundles) - args.holdout], bundles[len(bundles) - args.holdout:]
    grid = _grid(args)
    if train[0].labels.onehot.shape[:2] != grid.shape:
        raise InputError(f"labels are {train[0].labels.onehot.shape[:2]} but the grid is {grid.shape}")
    weights = ClassWeights(tuple(args.class_weights)) if args.class_weights else None
    cfg = ToyConfig(learning_rate=args.lr, iterations=args.iterations, class_weights=weights, grid=grid,
                    bins=_bins(args), sigma=args.sigma, trunc_sigma=args.trunc_sigma, normalize=args.normalize,
                    threads=args.threads)

    def progress(it, step):
        if args.verbose and (it % 10 == 0 or it == cfg.iterations):
            print(f"iter {it:4d}  loss {step.loss:.5f}", file=sys.stderr)

    result = toy_train(train, cfg, progress)
    with open(args.metrics, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"] + [f"iou_{n}" for n in CLASS_NAMES[:grid.channels]])
        for it, loss, *ious in result.history:
            w.writerow([it, repr(loss)] + [repr(float(v)) for v in ious])
    first, last = result.history[0][1], result.history[-1][1]
    print("split,loss," + ",".join(f"iou_{n}" for n in CLASS_NAMES[:grid.channels]))
    print(f"train,{last!r}," + ",".join(repr(float(v)) for v in result.history[-1][2:]))
    rows = [("train", f"{last:.4f}", *(f"{v:.3f}" for v in result.history[-1][2:]))]
    if held:
        caches = [build_cache(b, cfg) for b in held]
        step = evaluate(result.params, caches, result.weights, cfg, backward=False)
        held_iou = step.counts.iou()
        print(f"heldout,{step.loss!r}," + ",".join(repr(float(v)) for v in held_iou))
        rows.append(("heldout", f"{step.loss:.4f}", *(f"{v:.3f}" for v in held_iou)))
        if args.pred_out:
            from .toy import predict_raster

            pred_dir = Path(args.pred_out)
            pred_dir.mkdir(parents=True, exist_ok=True)
            for d, cache in zip(dirs[len(train):], caches):
                save_raster(predict_raster(result.params, cache, cfg), pred_dir / f"{d.name}.bevr")
    _table(rows, ("split", "loss", *CLASS_NAMES[:grid.channels]))
    print(f"loss {first:.4f} -> {last:.4f} ({100 * (1 - last / first):.1f}% reduction)", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    raster = load_raster(_require(Path(args.prediction), "prediction raster"))
    ids = load_pgm(_require(Path(args.labels), "label image")).astype(np.int64)
    C = raster.spec.channels
    if ids.shape != raster.spec.shape:
        raise InputError(f"label image {ids.shape} does not match raster grid {raster.spec.shape}")
    if ids.max(initial=0) >= C:
        raise InputError(f"label ids reach {ids.max()} but the raster has {C} channels")
    labels = BevLabels.from_class_ids(ids, C)
    pred = predict_classes(raster.features)
    values, counts = iou(pred, labels)
    names = [CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}" for c in range(C)]
    print("class,iou,tp,fp,fn")
    rows = []
    for c in range(C):
        v = "nan" if math.isnan(values[c]) else repr(float(values[c]))
        print(f"{names[c]},{v},{counts.tp[c]},{counts.fp[c]},{counts.fn[c]}")
        rows.append((names[c], "n/a" if math.isnan(values[c]) else f"{values[c]:.4f}",
                     counts.tp[c], counts.fp[c], counts.fn[c]))
    _table(rows, ("class", "IoU", "TP", "FP", "FN"))
    if args.class_weights:
        if len(args.class_weights) != C:
            raise InputError(f"--class-weights has {len(args.class_weights)} values for {C} classes")
        loss, _ = weighted_ce(raster.features, labels, ClassWeights(tuple(args.class_weights)))
        print(f"weighted_ce,{loss!r}")
        print(f"weighted cross-entropy (features as logits): {loss:.5f}", file=sys.stderr)
    failed = False
    for spec in args.min_iou or []:
        name, _, thr = spec.partition("=")
        if name not in names or not thr:
            raise InputError(f"--min-iou expects CLASS=VALUE with CLASS in {names}, got {spec!r}")
        v = values[names.index(name)]
        if not v >= float(thr):
            print(f"{name} IoU {v:.4f} below required {float(thr)}", file=sys.stderr)
            failed = True
    return EXIT_CHECK_FAILED if failed else EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fisheye-bev", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or 1); never changes results")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lut", help="precompute ray lookup tables from a calibration file")
    p.add_argument("calibration", help="INI calibration file, one section per camera")
    p.add_argument("--camera", help="only this camera section")
    p.add_argument("--stride", type=_positive_int, default=1)
    p.add_argument("--out", required=True,
                   help="output .flut path (single camera) or directory receiving <camera>.flut")
    p.set_defaults(func=cmd_lut)

    p = sub.add_parser("splat", help="lift per-pixel fields of every camera and splat them to a BEV raster")
    p.add_argument("--calibration", required=True, help="INI calibration file (extrinsics and camera names)")
    p.add_argument("--luts", required=True, help="directory with <camera>.flut")
    p.add_argument("--fields", required=True,
                   help="directory with <camera>.depth.fpfd, <camera>.feat.fpfd and optional <camera>.sigma.fpfd")
    p.add_argument("--out", required=True, help="output BEVR raster")
    p.add_argument("--ppm", help="also write a min-max scaled PPM/PGM visualisation")
    p.add_argument("--depth-logits", action="store_true", help="depth fields hold logits; apply softmax")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA, help="constant sigma when no sigma field exists")
    p.add_argument("--trunc-sigma", type=float, default=DEFAULT_TRUNC)
    p.add_argument("--prune-below", type=float, default=DEFAULT_PRUNE)
    p.add_argument("--normalize", action="store_true", help="divide features by accumulated mass per cell")
    p.add_argument("--resample", type=lambda s: [int(v) for v in s.split("x")], metavar="ROWSxCOLS",
                   help="also write a resampled copy, e.g. 180x240")
    p.add_argument("--resample-mode", choices=("nearest", "bilinear"), default="nearest")
    _add_grid(p)
    _add_bins(p)
    p.set_defaults(func=cmd_splat)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=_positive_int, default=100, help="random Gaussians in the splat check")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="relative tolerance for weights, means and features")
    p.add_argument("--cov-tolerance", type=float, default=None, help="covariance tolerance (default 10x --tolerance)")
    p.add_argument("--ce-tolerance", type=float, default=1e-6)
    p.add_argument("--e2e-tolerance", type=float, default=1e-3)
    p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate synthetic scenes, rendered views and BEV labels")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--count", type=_positive_int, default=1, help="number of consecutive seeds")
    p.add_argument("--out", required=True, help="directory receiving scene_<seed>/ folders")
    p.add_argument("--rig", help="INI calibration of the rig (default: built-in four-camera rig)")
    p.add_argument("--image-size", type=lambda s: [int(v) for v in s.split("x")], default=[128, 108],
                   metavar="WxH", help="image size of the built-in rig (default 128x108)")
    p.add_argument("--pitch", type=float, default=20.0, help="downward pitch of the built-in rig, degrees")
    p.add_argument("--stride", type=_positive_int, default=1, help="LUT stride")
    p.add_argument("--boxes", type=lambda s: [int(v) for v in s.split(",")], default=[2, 5], metavar="MIN,MAX")
    p.add_argument("--oracle", action="store_true", help="also write perfect depth/feature/sigma fields")
    _add_grid(p)
    _add_bins(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-toy", help="gradient descent through lift, splat and loss on synthetic scenes")
    p.add_argument("dataset", help="directory of scene_<seed>/ folders written by synth")
    p.add_argument("--holdout", type=int, default=0, help="last N scenes are held out for evaluation")
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: library default)")
    p.add_argument("--class-weights", type=lambda s: _floats(s, None, "--class-weights"),
                   help="comma-separated weights (default: inverse frequency of training labels)")
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--trunc-sigma", type=float, default=DEFAULT_TRUNC)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--metrics", required=True, help="output CSV: iteration, loss, per-class IoU")
    p.add_argument("--pred-out", help="directory for held-out prediction rasters (BEVR, logits)")
    _add_grid(p)
    _add_bins(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", help="per-class IoU of a BEVR prediction against a label PGM")
    p.add_argument("prediction", help="BEVR raster whose features are class scores")
    p.add_argument("labels", help="8-bit PGM of class ids")
    p.add_argument("--class-weights", type=lambda s: _floats(s, None, "--class-weights"),
                   help="also report weighted cross-entropy with the features as logits")
    p.add_argument("--min-iou", action="append", metavar="CLASS=VALUE",
                   help="exit 1 if the class IoU is below VALUE (repeatable)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = resolve_threads(args.threads)
        if getattr(args, "lr", None) is None and args.command == "train-toy":
            from .toy import ToyConfig
            args.lr = ToyConfig.learning_rate
        return args.func(args)
    except (FisheyeBevError, ValueError, OSError) as exc:
        print(f"fisheye-bev {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
