"""End-to-end toy optimisation through lift -> splat -> weighted cross-entropy.

There is no image backbone. Per-pixel depth logits and feature logits are
produced by per-camera lookup tables indexed by what the pixel observes in
the rendered view: its class id and its range bin (one extra code for
"no hit"). Gradient descent updates the tables and a per-class BEV logit
bias, so the trained parameters apply to unseen scenes.

Table rows differ in how many pixels read them by orders of magnitude, so a
single raw step size is either unstable for common codes or frozen for rare
ones. The step of each row is therefore scaled by (valid cells) / (pixels
using the row), a fixed diagonal preconditioner computed once from the
training scenes. It is not adaptive: the update stays a fixed-step linear
map of the gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FisheyeBevError
from .lift import DEFAULT_EPS_FLOOR, DEFAULT_SIGMA, DepthBinSpec, lift_geometry, softmax
from .splat import (BevGridSpec, Gaussians2, MASS_EPS, marginalize_to_ground, normalize_backward,
                    prepare_splat, splat_backward, splat_forward)
from .synth import SceneBundle
from .training import ClassWeights, ConfusionCounts, confusion, predict_classes, weighted_ce

log = logging.getLogger(__name__)


class TrainingDivergedError(FisheyeBevError, ArithmeticError):
    def __init__(self, iteration, loss):
        super().__init__(f"non-finite loss or parameters ({loss}) at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class ToyConfig:
    learning_rate: float = 4.0
    iterations: int = 500
    class_weights: ClassWeights | None = None  # None: inverse frequency on the training labels
    grid: BevGridSpec = field(default_factory=BevGridSpec)
    bins: DepthBinSpec = field(default_factory=DepthBinSpec)
    sigma: float = DEFAULT_SIGMA
    trunc_sigma: float = 3.0
    normalize: bool = False
    seed: int = 0
    init_scale: float = 0.0
    threads: int | None = None
    precondition: bool = True


@dataclass(eq=False)
class ToyParams:
    depth_table: np.ndarray  # (cams, classes_in, bins + 1, bins)
    feature_table: np.ndarray  # (cams, classes_in, bins + 1, C)
    bias: np.ndarray  # (C,)
    sigma: np.ndarray  # (cams,)

    @classmethod
    def init(cls, n_cams, cfg: ToyConfig, classes_in=3) -> ToyParams:
        D, C = cfg.bins.count, cfg.grid.channels
        depth = np.zeros((n_cams, classes_in, D + 1, D))
        feats = np.zeros((n_cams, classes_in, D + 1, C))
        if cfg.init_scale > 0:
            rng = np.random.default_rng(cfg.seed)
            depth += cfg.init_scale * rng.standard_normal(depth.shape)
            feats += cfg.init_scale * rng.standard_normal(feats.shape)
        return cls(depth, feats, np.zeros(C), np.full(n_cams, float(cfg.sigma)))

    def copy(self) -> ToyParams:
        return ToyParams(self.depth_table.copy(), self.feature_table.copy(), self.bias.copy(),
                         self.sigma.copy())


@dataclass(eq=False)
class SceneCache:
    """Geometry of every (valid pixel, bin) Gaussian of one scene, all cameras.

    Gaussians that cannot reach the grid are dropped: their contribution and
    gradient are exactly zero.
    """

    bundle: SceneBundle
    codes: np.ndarray  # (P,) flat table index cam * (K * (D + 1)) + class * (D + 1) + bin
    cam_of_pixel: np.ndarray  # (P,)
    pixel_slices: list  # per camera: slice into the P axis
    lut_pixels: list  # per camera: flat LUT indices of valid pixels
    gaussians: Gaussians2  # pixel = index into P, bin = depth bin
    plan: object


def build_cache(bundle: SceneBundle, cfg: ToyConfig, sigma=None, classes_in=3) -> SceneCache:
    D = cfg.bins.count
    codes, cams, parts, slices, lut_pixels = [], [], [], [], []
    start = 0
    for c, (cam, lut, view) in enumerate(zip(bundle.cameras, bundle.luts, bundle.views)):
        pix = np.flatnonzero(lut.valid.ravel())
        depth = view.depth.ravel()[pix]
        finite = np.isfinite(depth)
        obs_bin = np.where(finite, cfg.bins.bin_index(np.where(finite, depth, cfg.bins.z_min)), D)
        obs_cls = view.semantic.ravel()[pix].astype(np.int64)
        codes.append(c * classes_in * (D + 1) + obs_cls * (D + 1) + obs_bin)
        cams.append(np.full(pix.size, c))
        s = cfg.sigma if sigma is None else float(sigma[c])
        g = marginalize_to_ground(lift_geometry(lut, cam.extrinsics, cfg.bins, s, DEFAULT_EPS_FLOOR))
        # lift_geometry numbers pixels by LUT index; renumber into the scene-wide P axis
        g.pixel = np.searchsorted(pix, g.pixel) + start
        parts.append(g)
        slices.append(slice(start, start + pix.size))
        lut_pixels.append(pix)
        start += pix.size
    g = Gaussians2(np.concatenate([p.means for p in parts]), np.concatenate([p.covs for p in parts]),
                   np.ones(sum(len(p) for p in parts)), np.zeros((sum(len(p) for p in parts), 0)),
                   np.concatenate([p.pixel for p in parts]), np.concatenate([p.bin for p in parts]))
    plan = prepare_splat(g.means, g.covs, cfg.grid, cfg.trunc_sigma)
    keep = plan.active
    g = Gaussians2(g.means[keep], g.covs[keep], g.weights[keep], g.features[keep], g.pixel[keep], g.bin[keep])
    plan = prepare_splat(g.means, g.covs, cfg.grid, cfg.trunc_sigma)
    return SceneCache(bundle, np.concatenate(codes), np.concatenate(cams), slices, lut_pixels, g, plan)


@dataclass(eq=False)
class SceneResult:
    loss: float
    logits: np.ndarray
    grad_depth_logits: np.ndarray | None  # (P, D)
    grad_features: np.ndarray | None  # (P, C)
    grad_bias: np.ndarray | None
    mass: np.ndarray | None = None


def scene_loss(cache: SceneCache, depth_logits, features, bias, weights: ClassWeights,
               cfg: ToyConfig, backward=True) -> SceneResult:
    """Loss of one scene given per-pixel depth logits (P, D) and features (P, C)."""
    probs = softmax(depth_logits, axis=-1)
    g = cache.gaussians
    gw = probs[g.pixel, g.bin]
    gf = np.asarray(features, dtype=np.float64)[g.pixel]
    batch = Gaussians2(g.means, g.covs, gw, gf)
    raster = splat_forward(batch, cfg.grid, cfg.trunc_sigma, threads=cfg.threads, plan=cache.plan)
    feats = raster.features
    if cfg.normalize:
        feats = feats / np.maximum(raster.mass, MASS_EPS)[..., None]
    logits = feats + bias
    loss, grad_logits = weighted_ce(logits, cache.bundle.labels, weights)
    if not backward:
        return SceneResult(loss, logits, None, None, None, raster.mass)
    if cfg.normalize:
        grad_f, grad_m = normalize_backward(raster, grad_logits)
    else:
        grad_f, grad_m = grad_logits, np.zeros(cfg.grid.shape)
    sg = splat_backward(grad_f, grad_m, batch, cfg.grid, cfg.trunc_sigma, threads=cfg.threads,
                        plan=cache.plan)
    grad_w = np.zeros_like(probs)
    grad_w[g.pixel, g.bin] = sg.weights
    grad_a = probs * (grad_w - np.sum(probs * grad_w, axis=-1, keepdims=True))
    P, C = probs.shape[0], cfg.grid.channels
    grad_feat = np.stack([np.bincount(g.pixel, weights=sg.features[:, c], minlength=P)
                          for c in range(C)], axis=1) if C else np.zeros((P, 0))
    return SceneResult(loss, logits, grad_a, grad_feat, grad_logits.sum(axis=(0, 1)), raster.mass)


def _scatter_rows(codes, rows, n_codes):
    return np.stack([np.bincount(codes, weights=rows[:, k], minlength=n_codes)
                     for k in range(rows.shape[1])], axis=1)


def head_outputs(params: ToyParams, cache: SceneCache):
    D = params.depth_table.shape[-1]
    C = params.feature_table.shape[-1]
    return (params.depth_table.reshape(-1, D)[cache.codes],
            params.feature_table.reshape(-1, C)[cache.codes])


@dataclass
class ToyStep:
    loss: float
    counts: ConfusionCounts
    grads: ToyParams | None


def evaluate(params: ToyParams, caches, weights: ClassWeights, cfg: ToyConfig, backward=True) -> ToyStep:
    """Mean loss over scenes, pooled confusion counts, and parameter gradients."""
    D = params.depth_table.shape[-1]
    C = params.feature_table.shape[-1]
    n_codes = params.depth_table.reshape(-1, D).shape[0]
    gd = np.zeros((n_codes, D))
    gf = np.zeros((n_codes, C))
    gb = np.zeros(C)
    total = 0.0
    counts = None
    for cache in caches:
        a, f = head_outputs(params, cache)
        res = scene_loss(cache, a, f, params.bias, weights, cfg, backward)
        total += res.loss
        cc = confusion(predict_classes(res.logits), cache.bundle.labels)
        counts = cc if counts is None else counts + cc
        if backward:
            gd += _scatter_rows(cache.codes, res.grad_depth_logits, n_codes)
            gf += _scatter_rows(cache.codes, res.grad_features, n_codes)
            gb += res.grad_bias
    n = len(caches)
    grads = None
    if backward:
        grads = ToyParams((gd / n).reshape(params.depth_table.shape),
                          (gf / n).reshape(params.feature_table.shape), gb / n,
                          np.zeros_like(params.sigma))
    return ToyStep(total / n, counts, grads)


@dataclass(eq=False)
class ToyResult:
    params: ToyParams
    history: list  # rows: (iteration, loss, iou_0, ..., iou_{C-1})
    weights: ClassWeights

    def per_camera_fields(self, cache: SceneCache):
        """Per-camera (depth logits, feature logits, sigma) fields on the LUT grid."""
        a, f = head_outputs(self.params, cache)
        out = []
        for c, (lut, sl, pix) in enumerate(zip(cache.bundle.luts, cache.pixel_slices, cache.lut_pixels)):
            depth = np.zeros((lut.height * lut.width, a.shape[1]))
            feats = np.zeros((lut.height * lut.width, f.shape[1]))
            depth[pix] = a[sl]
            feats[pix] = f[sl]
            out.append((depth.reshape(lut.height, lut.width, -1), feats.reshape(lut.height, lut.width, -1),
                        np.full((lut.height, lut.width), self.params.sigma[c])))
        return out


def table_step_scale(params: ToyParams, caches) -> np.ndarray:
    """Per table row: mean valid cells per scene / mean pixels per scene using the row.

    Rows no pixel uses get scale 0 (their gradient is 0 anyway).
    """
    shape = params.depth_table.shape[:-1]
    n_rows = int(np.prod(shape))
    counts = sum(np.bincount(c.codes, minlength=n_rows) for c in caches) / len(caches)
    cells = np.mean([np.count_nonzero(~c.bundle.labels.ignore) for c in caches])
    with np.errstate(divide="ignore"):
        scale = np.where(counts > 0, cells / np.maximum(counts, 1e-300), 0.0)
    return scale.reshape(shape)


def predict_raster(params: ToyParams, cache: SceneCache, cfg: ToyConfig):
    """BEV raster whose features are the class logits of the trained model."""
    from .splat import BevRaster

    a, f = head_outputs(params, cache)
    res = scene_loss(cache, a, f, params.bias, ClassWeights.uniform(cfg.grid.channels), cfg, backward=False)
    return BevRaster(cfg.grid, res.logits, res.mass)


def toy_train(scenes, cfg: ToyConfig = ToyConfig(), callback=None) -> ToyResult:
    """Fixed-step gradient descent. History has ``cfg.iterations + 1`` rows:
    row t is measured with the parameters after t updates."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("toy_train needs at least one scene")
    weights = cfg.class_weights or ClassWeights.inverse_frequency([b.labels for b in scenes])
    caches = [build_cache(b, cfg) for b in scenes]
    params = ToyParams.init(len(scenes[0].cameras), cfg)
    scale = table_step_scale(params, caches) if cfg.precondition else None
    history = []
    for it in range(cfg.iterations + 1):
        step = evaluate(params, caches, weights, cfg, backward=it < cfg.iterations)
        if not math.isfinite(step.loss):
            raise TrainingDivergedError(it, step.loss)
        history.append((it, step.loss, *step.counts.iou()))
        if callback is not None:
            callback(it, step)
        log.debug("iter %d loss %.6f", it, step.loss)
        if it == cfg.iterations:
            break
        lr = cfg.learning_rate
        gd, gf = step.grads.depth_table, step.grads.feature_table
        if scale is not None:
            gd = gd * scale[..., None]
            gf = gf * scale[..., None]
        with np.errstate(over="ignore", invalid="ignore"):
            params.depth_table -= lr * gd
            params.feature_table -= lr * gf
            params.bias -= lr * step.grads.bias
        if not all(np.all(np.isfinite(a)) for a in (params.depth_table, params.feature_table, params.bias)):
            raise TrainingDivergedError(it + 1, math.nan)
    return ToyResult(params, history, weights)


def evaluate_scenes(params: ToyParams, scenes, cfg: ToyConfig, weights: ClassWeights):
    """Loss and pooled per-class IoU of trained parameters on (held-out) scenes."""
    caches = [build_cache(b, cfg) for b in scenes]
    step = evaluate(params, caches, weights, cfg, backward=False)
    return step.loss, step.counts.iou()
