"""Differentiable anisotropic splatting of ground-plane Gaussians onto a BEV grid.

Cell (i, j) has its centre at (x_lo + (j + 0.5) res, y_lo + (i + 0.5) res):
columns run along world x (forward), rows along world y (left). A Gaussian
contributes ``weight * N(centre; mean, cov) * res**2`` to every cell centre
within Mahalanobis radius ``trunc_sigma``.

Forward accumulation is tiled (16 x 16 cells). Each tile visits its
Gaussians in index order and owns its output cells, so every cell is summed
in the same order whatever the worker count. The backward pass is
parallel over fixed-size Gaussian chunks; each Gaussian's gradient is a
private sequential sum.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage

from .errors import DomainError, FormatError
from .formats import read_header, take
from .lift import Gaussian3, Gaussians3
from .parallel import ordered_map

TILE = 16
BACKWARD_CHUNK = 4096
MASS_EPS = 1e-12
DEFAULT_TRUNC = 3.0


@dataclass(frozen=True)
class BevGridSpec:
    x_range: tuple[float, float] = (-12.0, 12.0)
    y_range: tuple[float, float] = (-9.0, 9.0)
    resolution: float = 0.375
    channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        if not self.resolution > 0:
            raise DomainError(f"resolution must be positive, got {self.resolution}")
        if self.channels < 0:
            raise DomainError("channels must be non-negative")
        for lo, hi in (self.x_range, self.y_range):
            n = (hi - lo) / self.resolution
            if not hi > lo or abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise DomainError(f"extent [{lo}, {hi}] is not a whole number of {self.resolution} m cells")

    @property
    def cols(self) -> int:
        return round((self.x_range[1] - self.x_range[0]) / self.resolution)

    @property
    def rows(self) -> int:
        return round((self.y_range[1] - self.y_range[0]) / self.resolution)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def cell_area(self) -> float:
        return self.resolution * self.resolution

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(rows, cols) arrays of cell-centre x and y in metres."""
        x = self.x_range[0] + (np.arange(self.cols) + 0.5) * self.resolution
        y = self.y_range[0] + (np.arange(self.rows) + 0.5) * self.resolution
        return np.meshgrid(x, y)

    def with_channels(self, channels: int) -> BevGridSpec:
        return BevGridSpec(self.x_range, self.y_range, self.resolution, channels)


def world_to_cell(p, spec: BevGridSpec) -> np.ndarray:
    """Fractional (col, row) of a ground point; cell centres are integers."""
    p = np.asarray(p, dtype=np.float64)
    col = (p[..., 0] - spec.x_range[0]) / spec.resolution - 0.5
    row = (p[..., 1] - spec.y_range[0]) / spec.resolution - 0.5
    return np.stack([col, row], axis=-1)


@dataclass(eq=False)
class BevRaster:
    spec: BevGridSpec
    features: np.ndarray  # (rows, cols, C)
    mass: np.ndarray  # (rows, cols)

    @classmethod
    def zeros(cls, spec: BevGridSpec) -> BevRaster:
        return cls(spec, np.zeros(spec.shape + (spec.channels,)), np.zeros(spec.shape))

    def argmax(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class id
        return np.argmax(self.features, axis=-1)


@dataclass(eq=False)
class Gaussians2:
    means: np.ndarray  # (N, 2)
    covs: np.ndarray  # (N, 2, 2)
    weights: np.ndarray  # (N,)
    features: np.ndarray  # (N, C)
    pixel: np.ndarray | None = None
    bin: np.ndarray | None = None

    def __len__(self):
        return self.weights.shape[0]

    @classmethod
    def concat(cls, parts, channels=0) -> Gaussians2:
        parts = list(parts)
        if not parts:
            return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, channels)))
        return cls(np.concatenate([p.means for p in parts]),
                   np.concatenate([p.covs for p in parts]),
                   np.concatenate([p.weights for p in parts]),
                   np.concatenate([p.features for p in parts]))


def marginalize_to_ground(g):
    """Drop the vertical axis: mean (mu_x, mu_y), covariance = top-left 2x2 block."""
    if isinstance(g, Gaussian3):
        return Gaussians2(g.mean[None, :2].copy(), g.cov[None, :2, :2].copy(),
                          np.array([g.weight]), np.asarray(g.feature, dtype=np.float64)[None])
    if not isinstance(g, Gaussians3):
        raise TypeError(f"expected Gaussian3 or Gaussians3, got {type(g).__name__}")
    return Gaussians2(g.means[:, :2].copy(), g.covs[:, :2, :2].copy(), g.weights, g.features,
                      g.pixel, g.bin)


# --- geometry plan ------------------------------------------------------------

@dataclass(eq=False)
class SplatPlan:
    """Per-Gaussian geometry that depends only on means, covariances, the grid
    and the truncation radius. Reusable while those stay fixed."""

    spec: BevGridSpec
    trunc_sigma: float
    means: np.ndarray
    inv: np.ndarray  # (N, 3): inverse covariance entries xx, xy, yy
    norm: np.ndarray  # (N,): cell_area / (2 pi sqrt(det))
    bbox: np.ndarray  # (N, 4) int64: c0, c1, r0, r1 inclusive
    active: np.ndarray  # indices of Gaussians whose box meets the grid
    tile_offsets: np.ndarray
    tile_items: np.ndarray

    @property
    def size(self) -> int:
        return self.means.shape[0]


def _check_covs(covs: np.ndarray) -> None:
    a, b, b2, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 0], covs[:, 1, 1]
    det = a * c - b * b
    scale = np.maximum(np.abs(a), np.abs(c))
    bad = ~np.isfinite(det) | (a <= 0) | (c <= 0) | (det <= 0) | (np.abs(b - b2) > 1e-9 * scale)
    if np.any(bad):
        raise DomainError(f"{int(bad.sum())} ground covariances are not symmetric positive definite")


def prepare_splat(means2, covs2, spec: BevGridSpec, trunc_sigma=DEFAULT_TRUNC) -> SplatPlan:
    if not trunc_sigma > 0:
        raise DomainError(f"trunc_sigma must be positive, got {trunc_sigma}")
    means = np.ascontiguousarray(means2, dtype=np.float64).reshape(-1, 2)
    covs = np.asarray(covs2, dtype=np.float64).reshape(-1, 2, 2)
    if not np.all(np.isfinite(means)):
        raise DomainError("Gaussian means must be finite")
    _check_covs(covs)
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * c - b * b
    inv = np.ascontiguousarray(np.stack([c / det, -b / det, a / det], axis=1))
    norm = spec.cell_area / (2.0 * math.pi * np.sqrt(det))

    res = spec.resolution
    with np.errstate(invalid="ignore"):
        hx = trunc_sigma * np.sqrt(a)
        hy = trunc_sigma * np.sqrt(c)
    big = float(max(spec.cols, spec.rows) + 2)
    fc0 = np.clip((means[:, 0] - hx - spec.x_range[0]) / res - 0.5, -big, big)
    fc1 = np.clip((means[:, 0] + hx - spec.x_range[0]) / res - 0.5, -big, big)
    fr0 = np.clip((means[:, 1] - hy - spec.y_range[0]) / res - 0.5, -big, big)
    fr1 = np.clip((means[:, 1] + hy - spec.y_range[0]) / res - 0.5, -big, big)
    # one-cell safety margin; the Mahalanobis test decides membership
    bbox = np.stack([
        np.maximum(np.ceil(fc0) - 1, 0), np.minimum(np.floor(fc1) + 1, spec.cols - 1),
        np.maximum(np.ceil(fr0) - 1, 0), np.minimum(np.floor(fr1) + 1, spec.rows - 1),
    ], axis=1).astype(np.int64)
    active = np.flatnonzero((bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3]))
    ntr = -(-spec.rows // TILE)
    ntc = -(-spec.cols // TILE)
    offsets, items = _bin_tiles(bbox, active, TILE, ntr, ntc)
    return SplatPlan(spec, float(trunc_sigma), means, inv, norm, bbox, active, offsets, items)


@numba.njit(nogil=True, cache=True)
def _bin_tiles(bbox, active, tile, ntr, ntc):
    counts = np.zeros(ntr * ntc + 1, dtype=np.int64)
    for g in active:
        for tr in range(bbox[g, 2] // tile, bbox[g, 3] // tile + 1):
            for tc in range(bbox[g, 0] // tile, bbox[g, 1] // tile + 1):
                counts[tr * ntc + tc + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], dtype=np.int64)
    for g in active:
        for tr in range(bbox[g, 2] // tile, bbox[g, 3] // tile + 1):
            for tc in range(bbox[g, 0] // tile, bbox[g, 1] // tile + 1):
                t = tr * ntc + tc
                items[fill[t]] = g
                fill[t] += 1
    return offsets, items


@numba.njit(nogil=True, cache=True)
def _forward_tile(items, means, inv, norm, bbox, weights, feats, x_lo, y_lo, res, t2,
                  r0, r1, c0, c1, out_f, out_m):
    nch = feats.shape[1]
    for g in items:
        w = weights[g]
        if w == 0.0:
            continue
        mx = means[g, 0]
        my = means[g, 1]
        ia = inv[g, 0]
        ib = inv[g, 1]
        ic = inv[g, 2]
        k0 = w * norm[g]
        ra = max(bbox[g, 2], r0)
        rb = min(bbox[g, 3], r1 - 1)
        ca = max(bbox[g, 0], c0)
        cb = min(bbox[g, 1], c1 - 1)
        for r in range(ra, rb + 1):
            dy = y_lo + (r + 0.5) * res - my
            for c in range(ca, cb + 1):
                dx = x_lo + (c + 0.5) * res - mx
                m2 = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                if m2 <= t2:
                    k = k0 * math.exp(-0.5 * m2)
                    out_m[r, c] += k
                    for ch in range(nch):
                        out_f[r, c, ch] += k * feats[g, ch]


@numba.njit(nogil=True, cache=True)
def _backward_chunk(items, means, inv, norm, bbox, weights, feats, x_lo, y_lo, res, t2,
                    grad_f, grad_m, out_w, out_mu, out_cov, out_feat):
    nch = feats.shape[1]
    for g in items:
        w = weights[g]
        mx = means[g, 0]
        my = means[g, 1]
        ia = inv[g, 0]
        ib = inv[g, 1]
        ic = inv[g, 2]
        nrm = norm[g]
        dw = 0.0
        dmx = 0.0
        dmy = 0.0
        dxx = 0.0
        dxy = 0.0
        dyy = 0.0
        for r in range(bbox[g, 2], bbox[g, 3] + 1):
            dy = y_lo + (r + 0.5) * res - my
            for c in range(bbox[g, 0], bbox[g, 1] + 1):
                dx = x_lo + (c + 0.5) * res - mx
                m2 = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                if m2 <= t2:
                    base = nrm * math.exp(-0.5 * m2)
                    k = w * base
                    s = grad_m[r, c]
                    for ch in range(nch):
                        s += grad_f[r, c, ch] * feats[g, ch]
                        out_feat[g, ch] += k * grad_f[r, c, ch]
                    dw += s * base
                    ks = k * s
                    ax = ia * dx + ib * dy
                    ay = ib * dx + ic * dy
                    dmx += ks * ax
                    dmy += ks * ay
                    dxx += 0.5 * ks * (ax * ax - ia)
                    dxy += 0.5 * ks * (ax * ay - ib)
                    dyy += 0.5 * ks * (ay * ay - ic)
        out_w[g] = dw
        out_mu[g, 0] = dmx
        out_mu[g, 1] = dmy
        out_cov[g, 0] = dxx
        out_cov[g, 1] = dxy
        out_cov[g, 2] = dyy


def _features(gaussians: Gaussians2) -> np.ndarray:
    f = np.ascontiguousarray(gaussians.features, dtype=np.float64)
    return f if f.ndim == 2 else f.reshape(len(gaussians), -1)


def _plan_for(gaussians: Gaussians2, spec, trunc_sigma, plan):
    if plan is None:
        return prepare_splat(gaussians.means, gaussians.covs, spec, trunc_sigma)
    if plan.size != len(gaussians) or plan.spec != spec or plan.trunc_sigma != float(trunc_sigma):
        raise DomainError("splat plan does not match the Gaussians, grid or truncation")
    return plan


def _t2(trunc_sigma):
    return math.inf if math.isinf(trunc_sigma) else float(trunc_sigma) ** 2


def splat_forward(gaussians: Gaussians2, spec: BevGridSpec, trunc_sigma=DEFAULT_TRUNC,
                  normalize=False, threads=None, plan: SplatPlan | None = None) -> BevRaster:
    """Accumulate weighted Gaussian densities (and density-weighted features)."""
    feats = _features(gaussians)
    if feats.shape[1] != spec.channels:
        raise DomainError(f"feature width {feats.shape[1]} != grid channels {spec.channels}")
    weights = np.ascontiguousarray(gaussians.weights, dtype=np.float64)
    if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(feats))):
        raise DomainError("weights and features must be finite")
    raster = BevRaster.zeros(spec)
    if len(gaussians) == 0:
        return raster
    plan = _plan_for(gaussians, spec, trunc_sigma, plan)
    t2 = _t2(plan.trunc_sigma)
    ntc = -(-spec.cols // TILE)
    x_lo, y_lo, res = spec.x_range[0], spec.y_range[0], spec.resolution

    def run(t):
        lo, hi = plan.tile_offsets[t], plan.tile_offsets[t + 1]
        if lo == hi:
            return
        tr, tc = divmod(t, ntc)
        r0, c0 = tr * TILE, tc * TILE
        r1, c1 = min(r0 + TILE, spec.rows), min(c0 + TILE, spec.cols)
        _forward_tile(plan.tile_items[lo:hi], plan.means, plan.inv, plan.norm, plan.bbox,
                      weights, feats, x_lo, y_lo, res, t2, r0, r1, c0, c1,
                      raster.features, raster.mass)

    ordered_map(run, range(len(plan.tile_offsets) - 1), threads)
    if normalize:
        raster = normalize_raster(raster)
    return raster


def normalize_raster(raster: BevRaster) -> BevRaster:
    denom = np.maximum(raster.mass, MASS_EPS)
    return BevRaster(raster.spec, raster.features / denom[..., None], raster.mass.copy())


def normalize_backward(raster: BevRaster, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain rule through ``features / max(mass, eps)`` given the un-normalised raster.

    Returns gradients with respect to the un-normalised features and mass.
    """
    denom = np.maximum(raster.mass, MASS_EPS)
    grad_f = grad_out / denom[..., None]
    dd = -np.einsum("rcx,rcx->rc", grad_out, raster.features) / (denom * denom)
    grad_m = np.where(raster.mass > MASS_EPS, dd, 0.0)
    return grad_f, grad_m


@dataclass(eq=False)
class SplatGrads:
    weights: np.ndarray  # (N,)
    means: np.ndarray  # (N, 2)
    covs: np.ndarray  # (N, 2, 2), symmetric; entries treated as independent
    features: np.ndarray  # (N, C)


def splat_backward(grad_features, grad_mass, gaussians: Gaussians2, spec: BevGridSpec,
                   trunc_sigma=DEFAULT_TRUNC, threads=None, plan: SplatPlan | None = None) -> SplatGrads:
    """Gradients of sum(grad_features * F) + sum(grad_mass * M) for the
    un-normalised forward map, restricted to the truncated support."""
    n = len(gaussians)
    feats = _features(gaussians)
    grad_f = np.ascontiguousarray(grad_features, dtype=np.float64)
    grad_m = np.ascontiguousarray(grad_mass, dtype=np.float64)
    if grad_f.shape != spec.shape + (spec.channels,) or grad_m.shape != spec.shape:
        raise DomainError(f"upstream gradient shapes {grad_f.shape}, {grad_m.shape} do not match grid {spec.shape}")
    if feats.shape[1] != spec.channels:
        raise DomainError(f"feature width {feats.shape[1]} != grid channels {spec.channels}")
    out_w = np.zeros(n)
    out_mu = np.zeros((n, 2))
    out_cov = np.zeros((n, 3))
    out_feat = np.zeros((n, spec.channels))
    if n:
        plan = _plan_for(gaussians, spec, trunc_sigma, plan)
        weights = np.ascontiguousarray(gaussians.weights, dtype=np.float64)
        t2 = _t2(plan.trunc_sigma)
        chunks = [plan.active[i:i + BACKWARD_CHUNK] for i in range(0, len(plan.active), BACKWARD_CHUNK)]

        def run(items):
            _backward_chunk(items, plan.means, plan.inv, plan.norm, plan.bbox, weights, feats,
                            spec.x_range[0], spec.y_range[0], spec.resolution, t2,
                            grad_f, grad_m, out_w, out_mu, out_cov, out_feat)

        ordered_map(run, chunks, threads)
    covs = np.empty((n, 2, 2))
    covs[:, 0, 0] = out_cov[:, 0]
    covs[:, 0, 1] = covs[:, 1, 0] = out_cov[:, 1]
    covs[:, 1, 1] = out_cov[:, 2]
    return SplatGrads(out_w, out_mu, covs, out_feat)


def resample_raster(raster: BevRaster, rows: int, cols: int, mode="nearest") -> BevRaster:
    """Resample to another cell count over the same metric extent."""
    src = raster.spec
    res_x = (src.x_range[1] - src.x_range[0]) / cols
    res_y = (src.y_range[1] - src.y_range[0]) / rows
    if abs(res_x - res_y) > 1e-12:
        raise DomainError("target grid must have square cells")
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    x = src.x_range[0] + (np.arange(cols) + 0.5) * res_x
    y = src.y_range[0] + (np.arange(rows) + 0.5) * res_y
    cc = (x - src.x_range[0]) / src.resolution - 0.5
    rr = (y - src.y_range[0]) / src.resolution - 0.5
    R, C = np.meshgrid(rr, cc, indexing="ij")
    stack = np.concatenate([raster.features, raster.mass[..., None]], axis=-1)
    if mode == "nearest":
        ri = np.clip(np.floor(R + 0.5).astype(int), 0, src.rows - 1)
        ci = np.clip(np.floor(C + 0.5).astype(int), 0, src.cols - 1)
        out = stack[ri, ci]
    else:
        out = np.stack([ndimage.map_coordinates(stack[..., k], [R, C], order=1, mode="nearest")
                        for k in range(stack.shape[-1])], axis=-1)
    spec = BevGridSpec(src.x_range, src.y_range, res_x, src.channels)
    return BevRaster(spec, out[..., :-1], out[..., -1])


# --- BEVR files -----------------------------------------------------------------

BEVR_MAGIC = b"BEVR"
BEVR_VERSION = 1
_BEVR_HEADER = struct.Struct("<4sIIIIddddd")


def raster_bytes(raster: BevRaster) -> bytes:
    s = raster.spec
    header = _BEVR_HEADER.pack(BEVR_MAGIC, BEVR_VERSION, s.rows, s.cols, s.channels,
                               *s.x_range, *s.y_range, s.resolution)
    return header + np.asarray(raster.features, dtype="<f4").tobytes() \
        + np.asarray(raster.mass, dtype="<f4").tobytes()


def save_raster(raster: BevRaster, path) -> None:
    Path(path).write_bytes(raster_bytes(raster))


def load_raster(path) -> BevRaster:
    data = Path(path).read_bytes()
    rows, cols, ch, x_lo, x_hi, y_lo, y_hi, res = read_header(data, BEVR_MAGIC, _BEVR_HEADER, BEVR_VERSION)
    try:
        spec = BevGridSpec((x_lo, x_hi), (y_lo, y_hi), res, ch)
    except DomainError as exc:
        raise FormatError(f"invalid grid in BEVR header: {exc}", offset=20) from None
    if spec.shape != (rows, cols):
        raise FormatError("BEVR row/column counts disagree with extent and resolution", offset=8)
    off = _BEVR_HEADER.size
    nf = rows * cols * ch * 4
    feats = take(data, off, nf, "BEVR feature payload")
    mass = take(data, off + nf, rows * cols * 4, "BEVR mass plane")
    if off + nf + rows * cols * 4 != len(data):
        raise FormatError("trailing bytes after BEVR mass plane", offset=off + nf + rows * cols * 4)
    return BevRaster(spec,
                     np.frombuffer(feats, dtype="<f4").reshape(rows, cols, ch).astype(np.float64),
                     np.frombuffer(mass, dtype="<f4").reshape(rows, cols).astype(np.float64))
