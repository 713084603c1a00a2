"""Lift every camera of a rig and splat the union onto one BEV grid."""

from __future__ import annotations

import numpy as np

from .errors import DomainError
from .lift import DEFAULT_EPS_FLOOR, DEFAULT_PRUNE, DepthBinSpec, lift_camera
from .splat import DEFAULT_TRUNC, BevGridSpec, BevRaster, Gaussians2, marginalize_to_ground, splat_forward


def lift_cameras(cameras, luts, depth, sigma, features, bins: DepthBinSpec,
                 prune_below=DEFAULT_PRUNE, eps_floor=DEFAULT_EPS_FLOOR) -> Gaussians2:
    """Ground-plane Gaussians of all cameras, concatenated in camera order."""
    if not (len(cameras) == len(luts) == len(depth) == len(sigma) == len(features)):
        raise DomainError("need one LUT, depth, sigma and feature field per camera")
    parts = [marginalize_to_ground(lift_camera(lut, cam.extrinsics, bins, d, s, f, prune_below, eps_floor))
             for cam, lut, d, s, f in zip(cameras, luts, depth, sigma, features)]
    channels = np.asarray(features[0]).shape[-1] if len(features) else 0
    return Gaussians2.concat(parts, channels)


def splat_cameras(cameras, luts, depth, sigma, features, bins: DepthBinSpec, grid: BevGridSpec,
                  trunc_sigma=DEFAULT_TRUNC, normalize=False, prune_below=DEFAULT_PRUNE,
                  eps_floor=DEFAULT_EPS_FLOOR, threads=None) -> BevRaster:
    g = lift_cameras(cameras, luts, depth, sigma, features, bins, prune_below, eps_floor)
    return splat_forward(g, grid, trunc_sigma, normalize, threads)
