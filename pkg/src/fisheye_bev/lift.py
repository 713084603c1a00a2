"""Lift (pixel, depth bin) pairs into weighted 3-D Gaussians.

Each valid LUT pixel i and depth bin d yields a Gaussian with mean
R (u_i z_d) + t and covariance max(sigma_i, eps)^2 I + delta delta^T, where
delta is the world-frame ray scaled by half the bin width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import CameraExtrinsics
from .errors import DomainError
from .lut import RayLut

DEFAULT_SIGMA = 0.15
DEFAULT_EPS_FLOOR = 1e-4
DEFAULT_PRUNE = 1e-4


@dataclass(frozen=True)
class DepthBinSpec:
    count: int = 64
    z_min: float = 1.0
    z_max: float = 30.0

    def __post_init__(self):
        if int(self.count) != self.count or self.count < 1:
            raise DomainError(f"bin count must be a positive integer, got {self.count}")
        if not (self.z_min > 0 and self.z_max > self.z_min):
            raise DomainError(f"need 0 < z_min < z_max, got [{self.z_min}, {self.z_max}]")

    @property
    def width(self) -> float:
        return (self.z_max - self.z_min) / self.count

    @property
    def half_width(self) -> float:
        return 0.5 * self.width

    def bin_index(self, z):
        """Containing bin of range ``z``, clamped to [0, count-1]."""
        idx = np.floor((np.asarray(z, dtype=np.float64) - self.z_min) / self.width)
        return np.clip(idx, 0, self.count - 1).astype(np.int64)


def bin_centers(spec: DepthBinSpec) -> np.ndarray:
    return spec.z_min + (np.arange(spec.count) + 0.5) * spec.width


@dataclass(frozen=True)
class Gaussian3:
    mean: np.ndarray
    cov: np.ndarray
    weight: float
    feature: np.ndarray


@dataclass(eq=False)
class Gaussians3:
    """Struct-of-arrays batch of 3-D Gaussians.

    ``pixel`` (flat LUT index) and ``bin`` record provenance so gradients can
    be routed back to per-pixel parameters.
    """

    means: np.ndarray  # (N, 3)
    covs: np.ndarray  # (N, 3, 3)
    weights: np.ndarray  # (N,)
    features: np.ndarray  # (N, C)
    pixel: np.ndarray | None = None
    bin: np.ndarray | None = None

    def __len__(self):
        return self.weights.shape[0]

    def __getitem__(self, i) -> Gaussian3:
        return Gaussian3(self.means[i], self.covs[i], float(self.weights[i]), self.features[i])

    @classmethod
    def from_list(cls, items, channels=None):
        items = list(items)
        if not items:
            c = channels or 0
            return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0), np.zeros((0, c)))
        return cls(np.array([g.mean for g in items], dtype=np.float64),
                   np.array([g.cov for g in items], dtype=np.float64),
                   np.array([g.weight for g in items], dtype=np.float64),
                   np.array([g.feature for g in items], dtype=np.float64).reshape(len(items), -1))


def softmax(logits, axis=-1) -> np.ndarray:
    """Max-shifted softmax."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def check_depth_distribution(probs, tol=1e-6) -> np.ndarray:
    """Validate a per-pixel categorical distribution (last axis = bins).

    All-zero rows are accepted and mean the pixel is excluded.
    """
    p = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise DomainError("depth probabilities must be finite and non-negative")
    s = p.sum(axis=-1)
    bad = (np.abs(s - 1.0) > tol) & (s != 0.0)
    if np.any(bad):
        raise DomainError(f"{int(bad.sum())} pixels have depth probabilities not summing to 1")
    return p


def lift_mean(direction, z, ext: CameraExtrinsics) -> np.ndarray:
    u = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1.0) > 1e-6:
        raise DomainError(f"direction must be unit length, got norm {np.linalg.norm(u)}")
    if not z > 0:
        raise DomainError(f"bin range must be positive, got {z}")
    return ext.rotation @ (u * z) + ext.translation


def compose_covariance(sigma, delta, eps_floor=DEFAULT_EPS_FLOOR) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64).reshape(3)
    if not (math.isfinite(sigma) and np.all(np.isfinite(delta)) and math.isfinite(eps_floor)):
        raise DomainError("covariance inputs must be finite")
    if sigma < 0 or eps_floor <= 0:
        raise DomainError("need sigma >= 0 and eps_floor > 0")
    s = max(sigma, eps_floor)
    return s * s * np.eye(3) + np.outer(delta, delta)


def lift_camera(lut: RayLut, ext: CameraExtrinsics, spec: DepthBinSpec, depth, sigma_map,
                features, prune_below=DEFAULT_PRUNE, eps_floor=DEFAULT_EPS_FLOOR) -> Gaussians3:
    """Lift every valid LUT pixel at every depth bin with weight >= ``prune_below``.

    ``depth`` is (H, W, D) probabilities, ``sigma_map`` a scalar or (H, W)
    field, ``features`` (H, W, C). Output is ordered pixel-major, then bin.
    """
    H, W = lut.height, lut.width
    depth = check_depth_distribution(depth)
    features = np.asarray(features, dtype=np.float64)
    if depth.shape != (H, W, spec.count):
        raise DomainError(f"depth shape {depth.shape} != ({H}, {W}, {spec.count})")
    if features.ndim != 3 or features.shape[:2] != (H, W):
        raise DomainError(f"features shape {features.shape} does not match LUT ({H}, {W})")
    sigma = np.broadcast_to(np.asarray(sigma_map, dtype=np.float64), (H, W)) \
        if np.ndim(sigma_map) == 0 else np.asarray(sigma_map, dtype=np.float64)
    if sigma.shape == (H, W, 1):
        sigma = sigma[..., 0]
    if sigma.shape != (H, W):
        raise DomainError(f"sigma map shape {sigma.shape} does not match LUT ({H}, {W})")
    if not np.all(np.isfinite(sigma)) or np.any(sigma < 0):
        raise DomainError("sigma must be finite and non-negative")

    pix = np.flatnonzero(lut.valid.ravel())
    dirs = lut.directions.reshape(-1, 3)[pix].astype(np.float64)
    probs = depth.reshape(-1, spec.count)[pix]
    keep_p, keep_d = np.nonzero(probs >= prune_below)
    z = bin_centers(spec)
    R, t = ext.rotation, ext.translation
    world_dirs = dirs @ R.T
    rays = world_dirs[keep_p]
    means = rays * z[keep_d][:, None] + t
    delta = spec.half_width * rays
    s = np.maximum(sigma.reshape(-1)[pix][keep_p], eps_floor)
    covs = (s * s)[:, None, None] * np.eye(3) + delta[:, :, None] * delta[:, None, :]
    return Gaussians3(
        means=means,
        covs=covs,
        weights=probs[keep_p, keep_d],
        features=features.reshape(H * W, -1)[pix][keep_p],
        pixel=pix[keep_p],
        bin=keep_d,
    )


def lift_geometry(lut: RayLut, ext: CameraExtrinsics, spec: DepthBinSpec, sigma=DEFAULT_SIGMA,
                  eps_floor=DEFAULT_EPS_FLOOR) -> Gaussians3:
    """All (valid pixel, bin) Gaussians with unit weight and an empty payload."""
    depth = np.full((lut.height, lut.width, spec.count), 1.0 / spec.count)
    feats = np.zeros((lut.height, lut.width, 0))
    g = lift_camera(lut, ext, spec, depth, sigma, feats, prune_below=0.0, eps_floor=eps_floor)
    g.weights = np.ones_like(g.weights)
    return g
