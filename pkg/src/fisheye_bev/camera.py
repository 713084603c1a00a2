"""Fisheye camera model: odd-polynomial radial distortion, its inverse, and
rigid camera-to-world transforms.

Camera frame is the usual optical convention (x right, y down, z along the
optical axis). Rotations map camera coordinates to world coordinates.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, DomainError, FormatError, OutOfFovError

DEFAULT_THETA_MAX = math.radians(95.0)
NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50
BISECT_MAX_ITER = 200
_MONOTONIC_SAMPLES = 1024


@dataclass(frozen=True)
class PixelCoord:
    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise DomainError(f"pixel coordinate must be finite, got ({self.u}, {self.v})")

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class FisheyeIntrinsics:
    """Intrinsics of the radial model r(theta) = f*theta + sum_i k_i theta^(2i+1).

    ``focal`` is in pixels per radian; ``distortion`` holds k_1..k_n in pixels.
    """

    focal: float
    principal_point: tuple[float, float]
    distortion: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    image_size: tuple[int, int] = (128, 108)
    theta_max: float = DEFAULT_THETA_MAX

    def __post_init__(self):
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))
        object.__setattr__(self, "distortion", tuple(float(k) for k in self.distortion))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        if len(self.principal_point) != 2 or len(self.image_size) != 2:
            raise DomainError("principal_point and image_size must have two components")
        values = (self.focal, self.theta_max, *self.principal_point, *self.distortion)
        if not all(math.isfinite(x) for x in values):
            raise DomainError("intrinsics must be finite")
        if self.focal <= 0:
            raise DomainError(f"focal must be positive, got {self.focal}")
        if min(self.image_size) < 1:
            raise DomainError(f"image_size components must be >= 1, got {self.image_size}")
        if not 0 < self.theta_max <= math.pi:
            raise DomainError(f"theta_max must lie in (0, pi], got {self.theta_max}")
        theta = np.linspace(0.0, self.theta_max, _MONOTONIC_SAMPLES)
        if np.any(self.radius_derivative(theta) <= 0):
            raise DomainError("distortion polynomial is not strictly increasing on [0, theta_max]")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def radius(self, theta):
        """Image radius in pixels for incidence angle ``theta`` (scalar or array)."""
        theta = np.asarray(theta, dtype=np.float64)
        r = self.focal * theta
        for i, k in enumerate(self.distortion, start=1):
            r = r + k * theta ** (2 * i + 1)
        return r

    def radius_derivative(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        dr = np.full_like(theta, self.focal)
        for i, k in enumerate(self.distortion, start=1):
            dr = dr + (2 * i + 1) * k * theta ** (2 * i)
        return dr

    @property
    def radius_max(self) -> float:
        return float(self.radius(self.theta_max))


@dataclass(frozen=True)
class CameraExtrinsics:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("extrinsics must be finite")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise DomainError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class FisheyeCamera:
    name: str
    intrinsics: FisheyeIntrinsics
    extrinsics: CameraExtrinsics


def incidence_angle(P) -> float:
    """Angle between the ray through ``P`` and the optical axis, in [0, pi)."""
    X, Y, Z = (float(c) for c in P)
    rho = math.hypot(X, Y)
    if rho == 0.0 and Z == 0.0:
        raise DomainError("incidence angle undefined for the origin")
    return math.atan2(rho, Z)


def incidence_angles(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    rho = np.hypot(P[..., 0], P[..., 1])
    if np.any((rho == 0) & (P[..., 2] == 0)):
        raise DomainError("incidence angle undefined for the origin")
    return np.arctan2(rho, P[..., 2])


def project_point(P, intr: FisheyeIntrinsics) -> PixelCoord:
    theta = incidence_angle(P)
    if theta > intr.theta_max:
        raise OutOfFovError(f"incidence angle {theta:.6f} rad exceeds theta_max {intr.theta_max:.6f}")
    X, Y = float(P[0]), float(P[1])
    rho = math.hypot(X, Y)
    cx, cy = intr.principal_point
    if rho == 0.0:
        return PixelCoord(cx, cy)
    r = float(intr.radius(theta))
    return PixelCoord(cx + r * X / rho, cy + r * Y / rho)


def project_points(P: np.ndarray, intr: FisheyeIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection of an (N, 3) array.

    Returns ``(pixels, valid)``; pixels outside the field of view are NaN.
    """
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    theta = incidence_angles(P)
    valid = theta <= intr.theta_max
    rho = np.hypot(P[:, 0], P[:, 1])
    r = intr.radius(theta)
    safe = np.where(rho > 0, rho, 1.0)
    scale = np.where(rho > 0, r / safe, 0.0)
    uv = np.stack([intr.principal_point[0] + scale * P[:, 0],
                   intr.principal_point[1] + scale * P[:, 1]], axis=1)
    uv[~valid] = np.nan
    return uv, valid


def invert_radius(r_target: np.ndarray, intr: FisheyeIntrinsics) -> np.ndarray:
    """Solve r(theta) = r_target elementwise for theta in [0, theta_max].

    Newton from theta0 = r/f; elements whose iterate leaves the bracket or
    fails to converge within the cap are finished by bisection.
    """
    r_target = np.asarray(r_target, dtype=np.float64)
    shape = r_target.shape
    r_target = r_target.reshape(-1)
    if np.any(r_target < 0) or np.any(r_target > intr.radius_max):
        raise OutOfFovError("radius outside [0, r(theta_max)]")
    theta = r_target / intr.focal
    active = np.ones(r_target.shape, dtype=bool)
    fallback = np.zeros(r_target.shape, dtype=bool)
    for _ in range(NEWTON_MAX_ITER):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        th = theta[idx]
        step = (intr.radius(th) - r_target[idx]) / intr.radius_derivative(th)
        new = th - step
        left = (new < 0) | (new > intr.theta_max) | ~np.isfinite(new)
        fallback[idx[left]] = True
        ok = idx[~left]
        theta[ok] = new[~left]
        done = np.abs(step[~left]) <= NEWTON_TOL
        active[idx] = False
        active[ok[~done]] = True
    fallback |= active
    if fallback.any():
        theta[fallback] = _bisect_radius(r_target[fallback], intr)
    return theta.reshape(shape)


def _bisect_radius(r_target: np.ndarray, intr: FisheyeIntrinsics) -> np.ndarray:
    lo = np.zeros_like(r_target)
    hi = np.full_like(r_target, intr.theta_max)
    for _ in range(BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        below = intr.radius(mid) < r_target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= NEWTON_TOL):
            return 0.5 * (lo + hi)
    raise ConvergenceError(f"bisection did not converge in {BISECT_MAX_ITER} iterations")


def unproject_pixels(uv: np.ndarray, intr: FisheyeIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Unit camera-frame rays for an (N, 2) array of pixels.

    Returns ``(dirs, valid)``; out-of-FOV pixels get the zero vector.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    du = uv[:, 0] - intr.principal_point[0]
    dv = uv[:, 1] - intr.principal_point[1]
    r = np.hypot(du, dv)
    valid = r <= intr.radius_max
    dirs = np.zeros((uv.shape[0], 3))
    if valid.any():
        theta = invert_radius(r[valid], intr)
        rv = r[valid]
        nz = rv > 0
        cos_a = np.where(nz, du[valid] / np.where(nz, rv, 1.0), 1.0)
        sin_a = np.where(nz, dv[valid] / np.where(nz, rv, 1.0), 0.0)
        s = np.sin(theta)
        dirs[valid] = np.stack([s * cos_a, s * sin_a, np.cos(theta)], axis=1)
    return dirs, valid


def unproject_pixel(p, intr: FisheyeIntrinsics) -> np.ndarray:
    if not isinstance(p, PixelCoord):
        p = PixelCoord(*p)
    r = math.hypot(p.u - intr.principal_point[0], p.v - intr.principal_point[1])
    if r > intr.radius_max:
        raise OutOfFovError(f"pixel radius {r:.6f} exceeds r(theta_max) = {intr.radius_max:.6f}")
    dirs, _ = unproject_pixels(np.array([[p.u, p.v]]), intr)
    return dirs[0]


def camera_to_world(P_cam, ext: CameraExtrinsics) -> np.ndarray:
    return ext.rotation @ np.asarray(P_cam, dtype=np.float64) + ext.translation


def world_to_camera(P_world, ext: CameraExtrinsics) -> np.ndarray:
    """Inverse of :func:`camera_to_world`; accepts (3,) or (N, 3)."""
    P = np.asarray(P_world, dtype=np.float64)
    return (P - ext.translation) @ ext.rotation


def look_rotation(yaw: float, pitch_down: float) -> np.ndarray:
    """Camera-to-world rotation for a camera yawed about world z (x forward,
    y left, z up) and pitched down by ``pitch_down`` radians."""
    cp, sp = math.cos(pitch_down), math.sin(pitch_down)
    cy, sy = math.cos(yaw), math.sin(yaw)
    z_axis = np.array([cp * cy, cp * sy, -sp])
    x_axis = np.array([sy, -cy, 0.0])
    y_axis = np.cross(z_axis, x_axis)
    return np.stack([x_axis, y_axis, z_axis], axis=1)


# --- calibration files -------------------------------------------------------

_REQUIRED_KEYS = ("image_width", "image_height", "focal", "principal_point",
                  "distortion", "rotation", "translation")
_OPTIONAL_KEYS = ("theta_max_deg",)


def _floats(text: str, count: int | None, key: str, section: str) -> list[float]:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise FormatError(f"[{section}] {key}: {exc}") from None
    if count is not None and len(vals) != count:
        raise FormatError(f"[{section}] {key}: expected {count} values, got {len(vals)}")
    return vals


def parse_calibration(text: str) -> list[FisheyeCamera]:
    """Parse an INI-style calibration document, one section per camera."""
    parser = configparser.ConfigParser(default_section="\x00unused", interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise FormatError(f"calibration syntax error: {exc}") from None
    cameras = []
    for name in parser.sections():
        sec = parser[name]
        unknown = set(sec) - set(_REQUIRED_KEYS) - set(_OPTIONAL_KEYS)
        if unknown:
            raise FormatError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
        missing = [k for k in _REQUIRED_KEYS if k not in sec]
        if missing:
            raise FormatError(f"[{name}] missing keys: {', '.join(missing)}")
        try:
            size = (int(sec["image_width"]), int(sec["image_height"]))
        except ValueError as exc:
            raise FormatError(f"[{name}] image size: {exc}") from None
        theta_max = math.radians(_floats(sec.get("theta_max_deg", "95"), 1, "theta_max_deg", name)[0])
        try:
            intr = FisheyeIntrinsics(
                focal=_floats(sec["focal"], 1, "focal", name)[0],
                principal_point=tuple(_floats(sec["principal_point"], 2, "principal_point", name)),
                distortion=tuple(_floats(sec["distortion"], None, "distortion", name)),
                image_size=size,
                theta_max=theta_max,
            )
            ext = CameraExtrinsics(
                rotation=np.array(_floats(sec["rotation"], 9, "rotation", name)).reshape(3, 3),
                translation=np.array(_floats(sec["translation"], 3, "translation", name)),
            )
        except DomainError as exc:
            raise DomainError(f"[{name}] {exc}") from None
        cameras.append(FisheyeCamera(name, intr, ext))
    if not cameras:
        raise FormatError("calibration contains no cameras")
    return cameras


def load_calibration(path) -> list[FisheyeCamera]:
    return parse_calibration(Path(path).read_text())


def format_calibration(cameras) -> str:
    lines = []
    for cam in cameras:
        intr, ext = cam.intrinsics, cam.extrinsics
        lines += [
            f"[{cam.name}]",
            f"image_width = {intr.width}",
            f"image_height = {intr.height}",
            f"focal = {intr.focal!r}",
            "principal_point = " + ", ".join(repr(c) for c in intr.principal_point),
            "distortion = " + ", ".join(repr(k) for k in intr.distortion),
            f"theta_max_deg = {math.degrees(intr.theta_max)!r}",
            "rotation = " + ", ".join(repr(float(x)) for x in ext.rotation.ravel()),
            "translation = " + ", ".join(repr(float(x)) for x in ext.translation),
            "",
        ]
    return "\n".join(lines)


def save_calibration(cameras, path) -> None:
    Path(path).write_text(format_calibration(cameras))
