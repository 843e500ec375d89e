"""Camera math and registration.

Unprojection of depth images to point clouds, least-squares rigid calibration
between camera frames, ICP refinement, cloud fusion and subsampling, layout
planning for camera rows, and the bandwidth accounting model. Also owns the
on-disk formats for calibration files, correspondence files, and PLY export.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .model import CameraIntrinsics, DepthFrame, ColorFrame, PointCloud, RigidTransform

SIDE_LEFT = "left"
SIDE_RIGHT = "right"


class DegenerateGeometryError(ValueError):
    """Input geometry does not determine a unique solution."""


@dataclass(frozen=True)
class Correspondence:
    """A common point seen by the camera under calibration (a) and the reference (b)."""

    point_a: tuple[float, float, float]
    point_b: tuple[float, float, float]


@dataclass(frozen=True)
class CameraPlacement:
    index: int
    along_m: float
    side: str  # wall the camera hangs on; it faces the opposite wall


@dataclass(frozen=True)
class LayoutPlan:
    coverage_depth_d: float
    half_width_h: float
    camera_spacing: float
    overlap: float = 0.5
    mount_height: float = 1.85
    placements: tuple[CameraPlacement, ...] = ()
    # (index_a, side_in_a, index_b, side_in_b): a person leaving camera a on
    # side_in_a enters adjacent camera b on side_in_b.
    side_links: tuple[tuple[int, str, int, str], ...] = ()


@dataclass(frozen=True)
class BandwidthModel:
    N: int
    D: int = 70000
    F: int = 30

    def __post_init__(self):
        if self.N < 0 or self.D <= 0 or self.F <= 0:
            raise ValueError("bandwidth model fields must be positive")


def bandwidth(model: BandwidthModel) -> int:
    """Required bits per second for N cameras sending D bytes at F fps."""
    return 8 * model.N * model.D * model.F


@lru_cache(maxsize=8)
def pixel_rays(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Per-pixel camera-frame ray directions scaled so z = 1.

    Multiplying a ray by the pixel's depth (meters) gives the 3D point, which
    makes these directly usable for both rendering and unprojection oracles.
    """
    u = np.arange(intrinsics.width, dtype=np.float64)
    v = np.arange(intrinsics.height, dtype=np.float64)
    x = (u - intrinsics.cx) / intrinsics.fx
    y = (v - intrinsics.cy) / intrinsics.fy
    rays = np.empty((intrinsics.height, intrinsics.width, 3))
    rays[:, :, 0] = x[None, :]
    rays[:, :, 1] = y[:, None]
    rays[:, :, 2] = 1.0
    return rays


def unproject(depth: DepthFrame, intrinsics: CameraIntrinsics,
              color: ColorFrame | None = None) -> PointCloud:
    """Pinhole unprojection of nonzero depth pixels to camera-frame points."""
    v, u = np.nonzero(depth.data)
    z = depth.data[v, u].astype(np.float64) / 1000.0
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    points = np.column_stack((x, y, z))
    colors = color.data[v, u] if color is not None else None
    return PointCloud(points, colors)


def subsample(depth: DepthFrame, k: int, intrinsics: CameraIntrinsics,
              color: ColorFrame | None = None) -> PointCloud:
    """Unproject every k**2-th pixel in scan order.

    Scan-order decimation keeps the count at ceil(w*h / k**2) regardless of
    whether k divides the image dimensions, which is what the rendering
    budget arithmetic assumes.
    """
    if k not in (1, 2, 3, 4):
        raise ValueError("subsample factor k must be in {1, 2, 3, 4}")
    if k == 1:
        return unproject(depth, intrinsics, color)
    flat_idx = np.arange(0, depth.width * depth.height, k * k)
    v, u = np.divmod(flat_idx, depth.width)
    z_mm = depth.data[v, u]
    keep = z_mm != 0
    v, u, z_mm = v[keep], u[keep], z_mm[keep]
    z = z_mm.astype(np.float64) / 1000.0
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    colors = color.data[v, u] if color is not None else None
    return PointCloud(np.column_stack((x, y, z)), colors)


def _fit_rigid_arrays(a: np.ndarray, b: np.ndarray) -> RigidTransform:
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    ac = a - ca
    bc = b - cb
    s = np.linalg.svd(ac, compute_uv=False)
    if s[1] <= 1e-12 + 1e-9 * s[0]:
        raise DegenerateGeometryError("correspondence points are collinear")
    h = ac.T @ bc
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cb - r @ ca)


def fit_rigid(correspondences) -> RigidTransform:
    """Least-squares proper rigid transform taking each point_a onto point_b.

    Orthogonal-Procrustes solution: SVD of the cross-covariance with a
    determinant sign correction so reflections are never returned.
    """
    pairs = list(correspondences)
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 correspondences, got {len(pairs)}")
    a = np.array([c.point_a for c in pairs], dtype=np.float64)
    b = np.array([c.point_b for c in pairs], dtype=np.float64)
    return _fit_rigid_arrays(a, b)


@dataclass(frozen=True)
class ICPResult:
    transform: RigidTransform
    rms_trace: tuple[float, ...]
    iterations: int


def icp_refine(source: PointCloud, target: PointCloud, initial: RigidTransform,
               max_iters: int = 30, tolerance: float = 1e-6,
               max_pair_distance: float = 0.5) -> ICPResult:
    """Point-to-point ICP from source onto target starting at `initial`.

    Each iteration pairs transformed source points with their nearest target
    point (pairs beyond max_pair_distance are rejected as outliers), refits
    the rigid transform on the pairing, and records the post-fit RMS. Stops
    when the RMS improvement drops below tolerance.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("ICP requires nonempty clouds")
    if max_iters == 0:
        return ICPResult(initial, (), 0)
    tree = cKDTree(target.points)
    src = source.points
    transform = initial
    trace: list[float] = []
    prev_rms = math.inf
    iterations = 0
    for _ in range(max_iters):
        moved = transform.apply(src)
        dist, idx = tree.query(moved, distance_upper_bound=max_pair_distance)
        valid = np.isfinite(dist)
        if valid.sum() < 3:
            raise DegenerateGeometryError("fewer than 3 ICP pairs within range")
        a = src[valid]
        b = target.points[idx[valid]]
        transform = _fit_rigid_arrays(a, b)
        rms = float(np.sqrt(np.mean(np.sum((transform.apply(a) - b) ** 2, axis=1))))
        trace.append(rms)
        iterations += 1
        if prev_rms - rms < tolerance:
            break
        prev_rms = rms
    return ICPResult(transform, tuple(trace), iterations)


def fuse_clouds(clouds) -> PointCloud:
    """Concatenate clouds after mapping each through its transform."""
    parts = []
    color_parts = []
    all_colored = True
    for cloud, transform in clouds:
        parts.append(transform.apply(cloud.points))
        if cloud.colors is None:
            all_colored = False
        else:
            color_parts.append(cloud.colors)
    if not parts:
        return PointCloud(np.empty((0, 3)))
    points = np.concatenate(parts)
    colors = np.concatenate(color_parts) if (all_colored and color_parts) else None
    return PointCloud(points, colors)


def plan_layout(coverage_depth_d: float, hfov_deg: float = 57.5,
                overlap: float = 0.5, camera_count: int = 0,
                mount_height: float = 1.85) -> LayoutPlan:
    """Plan a row of alternating-side cameras covering a corridor.

    Each camera covers a strip of half-width h = tan(hfov/2) * d at coverage
    depth d; spacing consecutive cameras 2h - overlap apart leaves an overlap
    band where adjacent cameras both see a crossing person.
    """
    if coverage_depth_d <= 0 or not (0 < hfov_deg < 180):
        raise ValueError("coverage depth and hfov must be positive")
    if overlap < 0:
        raise ValueError("overlap must be nonnegative")
    h = math.tan(math.radians(hfov_deg) / 2.0) * coverage_depth_d
    spacing = 2.0 * h - overlap
    placements = tuple(
        CameraPlacement(i, i * spacing, SIDE_LEFT if i % 2 == 0 else SIDE_RIGHT)
        for i in range(camera_count)
    )
    # Opposite-facing adjacent cameras agree on image side: a person leaving
    # one camera's view on its image-right enters the next camera's view on
    # its image-right (the facing flip and the travel direction flip cancel).
    links = []
    for i in range(camera_count - 1):
        links.append((i, SIDE_LEFT, i + 1, SIDE_LEFT))
        links.append((i, SIDE_RIGHT, i + 1, SIDE_RIGHT))
    return LayoutPlan(
        coverage_depth_d=coverage_depth_d,
        half_width_h=h,
        camera_spacing=spacing,
        overlap=overlap,
        mount_height=mount_height,
        placements=placements,
        side_links=tuple(links),
    )


def load_correspondences(path) -> list[Correspondence]:
    """Read a JSON array of {"a": [x,y,z], "b": [x,y,z]} in meters."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError("correspondence file must contain a JSON array")
    out = []
    for i, item in enumerate(raw):
        try:
            a = tuple(float(x) for x in item["a"])
            b = tuple(float(x) for x in item["b"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"bad correspondence at index {i}: {exc}") from exc
        if len(a) != 3 or len(b) != 3:
            raise ValueError(f"correspondence {i} is not a 3-vector pair")
        out.append(Correspondence(a, b))
    return out


def save_calibration(path, transforms: dict[int, RigidTransform]) -> None:
    """Write one line per camera: id then the row-major 3x4 [R|t] block."""
    with open(path, "w", encoding="utf-8") as fh:
        for camera_id in sorted(transforms):
            tf = transforms[camera_id]
            block = np.hstack([tf.rotation, tf.translation[:, None]]).ravel()
            fh.write(str(camera_id) + " " + " ".join(f"{x:.17g}" for x in block) + "\n")


def load_calibration(path) -> dict[int, RigidTransform]:
    out: dict[int, RigidTransform] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 13:
                raise ValueError(f"{path}:{lineno}: expected id + 12 numbers")
            camera_id = int(fields[0])
            block = np.array([float(x) for x in fields[1:]]).reshape(3, 4)
            out[camera_id] = RigidTransform(block[:, :3], block[:, 3])
    return out


def save_ply(path, cloud: PointCloud) -> None:
    """Export an ASCII PLY with x y z and r g b per vertex."""
    colors = cloud.colors
    if colors is None:
        colors = np.full((len(cloud), 3), 200, dtype=np.uint8)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for (x, y, z), (r, g, b) in zip(cloud.points, colors):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")


def load_ply(path) -> PointCloud:
    """Read the ASCII PLY subset written by save_ply (x y z [r g b])."""
    with open(path, "r", encoding="utf-8") as fh:
        if fh.readline().strip() != "ply":
            raise ValueError("not a PLY file")
        count = None
        props = 0
        for line in fh:
            line = line.strip()
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line.startswith("property"):
                props += 1
            elif line == "end_header":
                break
        if count is None:
            raise ValueError("missing vertex element")
        points = np.empty((count, 3))
        colors = np.empty((count, 3), dtype=np.uint8) if props >= 6 else None
        for i in range(count):
            fields = fh.readline().split()
            if len(fields) < 3:
                raise ValueError(f"truncated vertex {i}")
            points[i] = [float(x) for x in fields[:3]]
            if colors is not None:
                colors[i] = [int(x) for x in fields[3:6]]
    return PointCloud(points, colors)
