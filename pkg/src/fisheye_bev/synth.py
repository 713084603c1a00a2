"""Synthetic parking scenes, a four-camera fisheye rig and a ray-cast renderer.

World frame: x forward, y left, z up, ground plane z = 0, ego vehicle centred
at the origin. Classes: 0 background, 1 drivable, 2 vehicle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon

from .camera import CameraExtrinsics, FisheyeCamera, FisheyeIntrinsics, look_rotation
from .errors import DomainError, FormatError, GenerationError
from .lift import DEFAULT_SIGMA, DepthBinSpec
from .lut import RayLut, build_lut
from .parallel import ordered_map
from .splat import BevGridSpec
from .training import BACKGROUND, DRIVABLE, VEHICLE, BevLabels

DESK_IMAGE_SIZE = (128, 108)
EGO_KEEP_OUT = (3.1, 1.6)  # half-extents (x, y) of the region reserved for the ego vehicle


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # length (along heading), width, height
    yaw: float
    class_id: int = VEHICLE

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        if len(self.center) != 3 or len(self.size) != 3 or min(self.size) <= 0:
            raise DomainError(f"box needs a 3-D centre and positive 3-D size, got {self.size}")

    def footprint(self) -> np.ndarray:
        """Ground-plane corners (4, 2), counter-clockwise."""
        hl, hw = 0.5 * self.size[0], 0.5 * self.size[1]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        return local @ np.array([[c, s], [-s, c]]) + np.array(self.center[:2])

    def contains_xy(self, x, y) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = np.asarray(x) - self.center[0], np.asarray(y) - self.center[1]
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        return (np.abs(lx) <= 0.5 * self.size[0]) & (np.abs(ly) <= 0.5 * self.size[1])


@dataclass(frozen=True)
class Scene:
    drivable_polygon: tuple[tuple[float, float], ...]
    boxes: tuple[Box, ...] = ()
    seed: int = 0

    def __post_init__(self):
        poly = tuple(tuple(float(c) for c in p) for p in self.drivable_polygon)
        object.__setattr__(self, "drivable_polygon", poly)
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if len(poly) < 3 or not Polygon(poly).is_valid:
            raise DomainError("drivable polygon must be a simple polygon with >= 3 vertices")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "drivable_polygon": [list(p) for p in self.drivable_polygon],
            "boxes": [{"center": list(b.center), "size": list(b.size), "yaw": b.yaw,
                       "class_id": b.class_id} for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        unknown = set(d) - {"seed", "drivable_polygon", "boxes"}
        if unknown:
            raise FormatError(f"unknown scene keys: {sorted(unknown)}")
        try:
            boxes = tuple(Box(tuple(b["center"]), tuple(b["size"]), float(b["yaw"]),
                              int(b.get("class_id", VEHICLE))) for b in d.get("boxes", []))
            return cls(tuple(map(tuple, d["drivable_polygon"])), boxes, int(d.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed scene: {exc}") from None


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2) + "\n")


def load_scene(path) -> Scene:
    try:
        return Scene.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc.msg}", offset=exc.pos) from None


@dataclass(frozen=True)
class SceneConfig:
    box_count: tuple[int, int] = (2, 5)
    grid: BevGridSpec = field(default_factory=BevGridSpec)
    length: tuple[float, float] = (3.8, 4.8)
    width: tuple[float, float] = (1.7, 2.0)
    height: tuple[float, float] = (1.4, 1.8)
    gap: float = 0.5
    max_retries: int = 2000

    def __post_init__(self):
        lo, hi = self.box_count
        if lo < 0 or hi < lo:
            raise DomainError(f"invalid box count range {self.box_count}")


def gen_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Rectangular drivable lot with non-overlapping yawed vehicle boxes inside it."""
    rng = np.random.default_rng(seed)
    (gx0, gx1), (gy0, gy1) = cfg.grid.x_range, cfg.grid.y_range
    x0 = gx0 + rng.uniform(0.0, 4.0)
    x1 = gx1 - rng.uniform(0.0, 4.0)
    y0 = -rng.uniform(4.0, 0.8 * -gy0)
    y1 = rng.uniform(4.0, 0.8 * gy1)
    polygon = ((x0, y0), (x1, y0), (x1, y1), (x0, y1))
    lot = Polygon(polygon)
    ego = Polygon([(-EGO_KEEP_OUT[0], -EGO_KEEP_OUT[1]), (EGO_KEEP_OUT[0], -EGO_KEEP_OUT[1]),
                   (EGO_KEEP_OUT[0], EGO_KEEP_OUT[1]), (-EGO_KEEP_OUT[0], EGO_KEEP_OUT[1])])
    count = int(rng.integers(cfg.box_count[0], cfg.box_count[1] + 1))
    boxes: list[Box] = []
    shapes = [ego]
    for _ in range(count):
        for _attempt in range(cfg.max_retries):
            size = (rng.uniform(*cfg.length), rng.uniform(*cfg.width), rng.uniform(*cfg.height))
            yaw = float(rng.uniform(-math.pi, math.pi))
            cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
            box = Box((cx, cy, 0.5 * size[2]), size, yaw)
            fp = Polygon(box.footprint())
            if lot.contains(fp) and all(fp.distance(s) >= cfg.gap for s in shapes):
                boxes.append(box)
                shapes.append(fp)
                break
        else:
            raise GenerationError(f"could not place box {len(boxes) + 1} of {count} "
                                  f"after {cfg.max_retries} attempts (seed {seed})")
    return Scene(polygon, tuple(boxes), seed)


# --- camera rig --------------------------------------------------------------------

def desk_intrinsics(image_size=DESK_IMAGE_SIZE) -> FisheyeIntrinsics:
    scale = image_size[0] / 128.0
    return FisheyeIntrinsics(
        focal=36.0 * scale,
        principal_point=(0.5 * image_size[0], 0.5 * image_size[1]),
        distortion=(-1.2 * scale, 0.25 * scale, 0.0, 0.0),
        image_size=image_size,
        theta_max=math.radians(95.0),
    )


def default_rig(image_size=DESK_IMAGE_SIZE, pitch_deg=20.0) -> list[FisheyeCamera]:
    """Front, rear and two mirror cameras, each pitched down ``pitch_deg``."""
    intr = desk_intrinsics(image_size)
    pitch = math.radians(pitch_deg)
    mounts = [
        ("front", (2.3, 0.0, 0.8), 0.0),
        ("rear", (-2.3, 0.0, 0.9), math.pi),
        ("left", (0.9, 1.0, 1.0), 0.5 * math.pi),
        ("right", (0.9, -1.0, 1.0), -0.5 * math.pi),
    ]
    return [FisheyeCamera(name, intr, CameraExtrinsics(look_rotation(yaw, pitch), np.array(t)))
            for name, t, yaw in mounts]


# --- rendering ------------------------------------------------------------------------

@dataclass(eq=False)
class RenderedView:
    semantic: np.ndarray  # (H, W) uint8 class ids
    depth: np.ndarray  # (H, W) float64 range along the ray; +inf where nothing is hit


def world_rays(cam: FisheyeCamera, lut: RayLut) -> np.ndarray:
    """(H, W, 3) unit world-frame ray directions (zero where the LUT is invalid)."""
    d = lut.directions.astype(np.float64)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    d = np.where(n > 0, d / np.where(n > 0, n, 1.0), 0.0)
    return d @ cam.extrinsics.rotation.T


def _ray_box(origin, dirs, box: Box) -> np.ndarray:
    """Entry distance of rays into a yawed box, +inf on a miss or from inside."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot @ (origin - np.array(box.center))
    d = dirs @ rot.T
    half = 0.5 * np.array(box.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(d == 0.0, 1e-300, d)
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t_near = np.max(np.minimum(t1, t2), axis=-1)
    t_far = np.min(np.maximum(t1, t2), axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def render_view(scene: Scene, cam: FisheyeCamera, lut: RayLut, threads=None) -> RenderedView:
    """Nearest-hit ray cast against the ground plane and every box."""
    if (lut.width, lut.height) != (-(-cam.intrinsics.width // lut.stride),
                                   -(-cam.intrinsics.height // lut.stride)):
        raise DomainError("LUT dimensions do not match the camera intrinsics")
    origin = cam.extrinsics.translation
    rays = world_rays(cam, lut)
    poly = Polygon(scene.drivable_polygon)

    def row(i):
        d = rays[i]
        valid = lut.valid[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ground = np.where(d[:, 2] < 0, -origin[2] / d[:, 2], np.inf)
        if origin[2] <= 0:
            t_ground[:] = np.inf
        best = np.where(valid, t_ground, np.inf)
        ground_hit = np.isfinite(best)
        gx = origin[0] + np.where(ground_hit, best, 0.0) * d[:, 0]
        gy = origin[1] + np.where(ground_hit, best, 0.0) * d[:, 1]
        inside = np.zeros_like(ground_hit)
        if ground_hit.any():
            inside[ground_hit] = shapely.contains_xy(poly, gx[ground_hit], gy[ground_hit])
        cls = np.where(ground_hit & inside, DRIVABLE, BACKGROUND)
        for box in scene.boxes:
            t = np.where(valid, _ray_box(origin, d, box), np.inf)
            closer = t < best
            best = np.where(closer, t, best)
            cls = np.where(closer, box.class_id, cls)
        return cls.astype(np.uint8), best

    rows = ordered_map(row, range(lut.height), threads)
    semantic = np.stack([r[0] for r in rows])
    depth = np.stack([r[1] for r in rows])
    return RenderedView(semantic, depth)


def rasterize_gt_bev(scene: Scene, spec: BevGridSpec, num_classes=3) -> BevLabels:
    """Cell-centre point sampling: vehicle box > drivable polygon > background."""
    x, y = spec.cell_centers()
    ids = np.full(x.shape, BACKGROUND, dtype=np.int64)
    ids[shapely.contains_xy(Polygon(scene.drivable_polygon), x, y)] = DRIVABLE
    for box in scene.boxes:
        ids[box.contains_xy(x, y)] = box.class_id
    return BevLabels.from_class_ids(ids, num_classes)


@dataclass(eq=False)
class OracleInputs:
    depth_probs: np.ndarray  # (H, W, D), one-hot at the true bin, zero rows if no hit
    features: np.ndarray  # (H, W, C), one-hot true class
    sigma: np.ndarray  # (H, W)
    bins: np.ndarray  # (H, W) int, -1 where excluded


def make_oracle_inputs(views, spec: DepthBinSpec, num_classes=3, sigma=DEFAULT_SIGMA) -> list[OracleInputs]:
    """Perfect depth and class inputs derived from rendered views."""
    out = []
    for view in views:
        finite = np.isfinite(view.depth)
        bins = np.where(finite, spec.bin_index(np.where(finite, view.depth, spec.z_min)), -1)
        depth = np.zeros(view.depth.shape + (spec.count,))
        ii, jj = np.nonzero(finite)
        depth[ii, jj, bins[ii, jj]] = 1.0
        feats = (view.semantic[..., None] == np.arange(num_classes)).astype(np.float64)
        out.append(OracleInputs(depth, feats, np.full(view.depth.shape, float(sigma)), bins))
    return out


@dataclass(eq=False)
class SceneBundle:
    scene: Scene
    cameras: list[FisheyeCamera]
    luts: list[RayLut]
    views: list[RenderedView]
    labels: BevLabels


def make_bundle(scene: Scene, cameras, luts, grid: BevGridSpec, threads=None) -> SceneBundle:
    views = [render_view(scene, cam, lut, threads) for cam, lut in zip(cameras, luts)]
    return SceneBundle(scene, list(cameras), list(luts), views, rasterize_gt_bev(scene, grid))


def make_dataset(seeds, cameras=None, stride=1, grid=None, scene_cfg=None, threads=None) -> list[SceneBundle]:
    cameras = cameras or default_rig()
    grid = grid or BevGridSpec()
    scene_cfg = scene_cfg or SceneConfig(grid=grid)
    luts = [build_lut(c.intrinsics, stride, threads) for c in cameras]
    return [make_bundle(gen_scene(s, scene_cfg), cameras, luts, grid, threads) for s in seeds]
