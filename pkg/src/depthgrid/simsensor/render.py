"""Analytic ray-cast rendering of scenes into depth, color, and label frames.

Rays carry unit z in the camera frame, so the hit parameter is the z-depth
directly. Each frame is a nearest-hit query against a few dozen primitives,
which keeps a 160x120 render in the low milliseconds without a GPU.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from ..geometry import pixel_rays
from ..model import ColorFrame, DepthFrame, LabelFrame
from .scene import CameraRig, Scene, ScenePrimitive, human_primitives

_EPS = 1e-9

# SeedSequence stream tags; keep distinct from the skeleton sensor's.
_STREAM_INTERFERENCE = 101


def _quadratic_entry(a: np.ndarray, b: np.ndarray, c) -> np.ndarray:
    """First positive root of a s^2 + b s + c per ray, inf where none."""
    disc = b * b - 4.0 * a * c
    s = np.full(b.shape[0], np.inf)
    ok = disc >= 0.0
    if not ok.any():
        return s
    root = np.sqrt(disc[ok])
    inv = 0.5 / a[ok]
    b_ok = b[ok]
    near = (-b_ok - root) * inv
    far = (-b_ok + root) * inv
    s[ok] = np.where(near > _EPS, near, np.where(far > _EPS, far, np.inf))
    return s


def _sphere_hits(origin: np.ndarray, dirs: np.ndarray, center, radius: float) -> np.ndarray:
    oc = origin - np.asarray(center, dtype=np.float64)
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * (dirs @ oc)
    c = float(oc @ oc) - radius * radius
    return _quadratic_entry(a, b, c)


def _box_hits(origin: np.ndarray, dirs: np.ndarray, center, size) -> np.ndarray:
    half = np.asarray(size, dtype=np.float64) / 2.0
    lo = np.asarray(center, dtype=np.float64) - half
    hi = np.asarray(center, dtype=np.float64) + half
    # Nudge axis-parallel components so the slab division stays finite.
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t1 = (lo - origin) / safe
    t2 = (hi - origin) / safe
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmax > _EPS)
    entry = np.where(tmin > _EPS, tmin, tmax)
    return np.where(hit, entry, np.inf)


def _capsule_hits(origin: np.ndarray, dirs: np.ndarray, p0, p1, radius: float) -> np.ndarray:
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    ba = p1 - p0
    baba = float(ba @ ba)
    if baba < 1e-18:
        return _sphere_hits(origin, dirs, p0, radius)
    oa = origin - p0
    bard = dirs @ ba
    baoa = float(oa @ ba)
    rdoa = dirs @ oa
    dd = np.einsum("ij,ij->i", dirs, dirs)
    oaoa = float(oa @ oa)
    a = baba * dd - bard * bard
    b = baba * rdoa - baoa * bard
    c = baba * oaoa - baoa * baoa - radius * radius * baba
    h = b * b - a * c
    s = np.full(dirs.shape[0], np.inf)
    ok = h >= 0.0
    if ok.any():
        root = np.sqrt(h[ok])
        a_ok = a[ok]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_body = (-b[ok] - root) / a_ok
        y = baoa + t_body * bard[ok]
        # Wall hits outside the segment are reached through a cap first,
        # so restricting to the near root keeps the union entry exact.
        body = (a_ok > 1e-18) & (t_body > _EPS) & (y > 0.0) & (y < baba)
        s[ok] = np.where(body, t_body, np.inf)
    # End-cap spheres share the ray dot products computed above: with
    # ob = origin - p1, dirs @ ob = rdoa - bard and |ob|^2 folds the same way.
    r2 = radius * radius
    s = np.minimum(s, _quadratic_entry(dd, 2.0 * rdoa, oaoa - r2))
    s = np.minimum(s, _quadratic_entry(
        dd, 2.0 * (rdoa - bard), oaoa - 2.0 * baoa + baba - r2))
    return s


def _primitive_hits(origin: np.ndarray, dirs: np.ndarray, prim: ScenePrimitive) -> np.ndarray:
    if prim.shape == "box":
        return _box_hits(origin, dirs, prim.center, prim.size)
    if prim.shape == "sphere":
        return _sphere_hits(origin, dirs, prim.center, prim.radius)
    return _capsule_hits(origin, dirs, prim.p0, prim.p1, prim.radius)


@lru_cache(maxsize=32)
def _world_ray_grid(intr, yaw_deg: float, pitch_deg: float) -> np.ndarray:
    from .scene import _rig_rotation

    rot = _rig_rotation(yaw_deg, pitch_deg)
    grid = (pixel_rays(intr).reshape(-1, 3) @ rot.T).reshape(
        intr.height, intr.width, 3)
    grid.setflags(write=False)
    return grid


_FULL = "full"


def _sphere_extent(a: float, z: float, radius: float, focal: float) -> tuple[float, float]:
    """Exact screen-axis extent of a sphere silhouette, in focal-scaled units.

    Standard perspective bound: the horizontal extremes of a sphere's image
    depend only on that axis' coordinate, the depth, and the radius.
    """
    rho2 = a * a + z * z
    root = radius * math.sqrt(max(rho2 - radius * radius, 0.0))
    denom = z * z - radius * radius
    return (focal * (a * z - root) / denom, focal * (a * z + root) / denom)


def _sphere_window(center, radius: float, origin, rot, intr):
    c = rot.T @ (np.asarray(center, dtype=np.float64) - origin)
    z = c[2]
    if z + radius <= _EPS:
        return None
    if z - radius < 0.05:
        return _FULL
    u0, u1 = _sphere_extent(float(c[0]), float(z), radius, intr.fx)
    v0, v1 = _sphere_extent(float(c[1]), float(z), radius, intr.fy)
    return (intr.cx + u0, intr.cx + u1, intr.cy + v0, intr.cy + v1)


def _box_window(center, size, origin, rot, intr):
    half = np.asarray(size, dtype=np.float64) / 2.0
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    corners = np.asarray(center, dtype=np.float64) + signs * half
    cc = (corners - origin) @ rot
    z = cc[:, 2]
    if (z <= _EPS).all():
        return None
    if (z < 0.05).any():
        return _FULL
    us = intr.cx + intr.fx * cc[:, 0] / z
    vs = intr.cy + intr.fy * cc[:, 1] / z
    return (us.min(), us.max(), vs.min(), vs.max())


def _view_window(prim: ScenePrimitive, origin: np.ndarray, rot: np.ndarray, intr,
                 ) -> tuple[int, int, int, int] | None:
    """Pixel rect that conservatively contains every ray the primitive can hit.

    Hits need positive camera-frame z, so a primitive fully behind the camera
    is skipped outright. Anything crossing the image plane projects unstably
    and falls back to the full frame. Convexity makes the box corner hull and
    the capsule's endpoint-sphere union exact silhouette bounds.
    """
    w, h = intr.width, intr.height
    if prim.shape == "box":
        window = _box_window(prim.center, prim.size, origin, rot, intr)
    elif prim.shape == "sphere":
        window = _sphere_window(prim.center, prim.radius, origin, rot, intr)
    else:
        w0 = _sphere_window(prim.p0, prim.radius, origin, rot, intr)
        w1 = _sphere_window(prim.p1, prim.radius, origin, rot, intr)
        if w0 is None and w1 is None:
            return None
        if w0 is None or w1 is None or _FULL in (w0, w1):
            window = _FULL
        else:
            window = (min(w0[0], w1[0]), max(w0[1], w1[1]),
                      min(w0[2], w1[2]), max(w0[3], w1[3]))
    if window is None:
        return None
    if window == _FULL:
        return 0, h, 0, w
    ul, ur, vt, vb = window
    u0, u1 = max(0, int(ul) - 1), min(w, int(ur) + 2)
    v0, v1 = max(0, int(vt) - 1), min(h, int(vb) + 2)
    if u0 >= u1 or v0 >= v1:
        return None
    return v0, v1, u0, u1


def _composite(prims, origin, rot, grid, intr, best, owner, color) -> None:
    for prim in prims:
        window = _view_window(prim, origin, rot, intr)
        if window is None:
            continue
        v0, v1, u0, u1 = window
        sub = grid[v0:v1, u0:u1]
        s = _primitive_hits(origin, sub.reshape(-1, 3), prim).reshape(sub.shape[:2])
        patch = best[v0:v1, u0:u1]
        closer = s < patch
        if closer.any():
            patch[closer] = s[closer]
            owner[v0:v1, u0:u1][closer] = prim.owner
            color[v0:v1, u0:u1][closer] = prim.color


@lru_cache(maxsize=64)
def _static_layer(room: tuple, rig: CameraRig):
    """Nearest-hit buffers for the immobile scenery, shared across frames."""
    intr = rig.intrinsics
    h, w = intr.height, intr.width
    best = np.full((h, w), np.inf)
    owner = np.zeros((h, w), np.uint8)
    color = np.zeros((h, w, 3), np.uint8)
    origin = np.asarray(rig.position, dtype=np.float64)
    _composite(room, origin, rig.rotation(),
               _world_ray_grid(intr, rig.yaw_deg, rig.pitch_deg), intr,
               best, owner, color)
    for arr in (best, owner, color):
        arr.setflags(write=False)
    return best, owner, color


def render_frame(scene: Scene, rig: CameraRig, t: float):
    """Render one camera at time t into (DepthFrame, ColorFrame, LabelFrame).

    Depth is the camera-frame z of the nearest hit in millimeters; hits
    outside the sensing range report 0 in all three frames. A covered camera
    emits all zeros.
    """
    intr = rig.intrinsics
    w, h = intr.width, intr.height
    stamp = int(round(t * 1_000_000))
    if rig.covered_at(t):
        return (
            DepthFrame(w, h, np.zeros((h, w), np.uint16), stamp),
            ColorFrame(w, h, np.zeros((h, w, 3), np.uint8), stamp),
            LabelFrame(w, h, np.zeros((h, w), np.uint8), stamp),
        )
    rot = rig.rotation()
    grid = _world_ray_grid(intr, rig.yaw_deg, rig.pitch_deg)
    origin = np.asarray(rig.position, dtype=np.float64)
    # Scenery never moves, so its nearest-hit buffers are rendered once per
    # camera and each frame only composites the humans on top. Room shapes
    # come first, matching the tie behavior of a single pass over all of them.
    s_best, s_owner, s_color = _static_layer(scene.room, rig)
    best = s_best.copy()
    owner = s_owner.copy()
    color = s_color.copy()
    moving = []
    for human in scene.humans:
        moving.extend(human_primitives(human, t))
    _composite(moving, origin, rot, grid, intr, best, owner, color)
    mm = np.where(np.isfinite(best), np.round(best * 1000.0), 0.0)
    ok = (mm >= intr.min_range_mm) & (mm <= intr.max_range_mm) & (mm <= 65535)
    depth = np.where(ok, mm, 0.0).astype(np.uint16)
    labels = np.where(ok, owner, 0).astype(np.uint8)
    rgb = np.where(ok[:, :, None], color, 0).astype(np.uint8)
    return (
        DepthFrame(w, h, depth, stamp),
        ColorFrame(w, h, rgb, stamp),
        LabelFrame(w, h, labels, stamp),
    )


def _inside_frustum(points_world: np.ndarray, rig: CameraRig) -> np.ndarray:
    """Mask of world points inside the rig's view frustum and depth range."""
    pc = rig.world_to_camera(points_world)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xr = np.abs(pc[:, 0] / z)
        yr = np.abs(pc[:, 1] / z)
    intr = rig.intrinsics
    zmm = z * 1000.0
    tan_h = math.tan(math.radians(intr.hfov_deg) / 2.0)
    tan_v = math.tan(math.radians(intr.vfov_deg) / 2.0)
    return (
        (z > 0.0)
        & (zmm >= intr.min_range_mm)
        & (zmm <= intr.max_range_mm)
        & (xr <= tan_h)
        & (yr <= tan_v)
    )


def _interference_mask(flat: np.ndarray, idx: np.ndarray, rig: CameraRig,
                       peers, angle_deg: float) -> np.ndarray:
    """Which of the pixels at flat indices idx interfere with any peer camera.

    A pixel interferes when its 3D point falls inside some peer's frustum and
    the two viewing directions at that point differ by more than angle_deg.
    One batched pass covers all peers at once.
    """
    dirs = pixel_rays(rig.intrinsics).reshape(-1, 3)[idx]
    z = flat[idx].astype(np.float64) / 1000.0
    pts_world = (dirs * z[:, None]) @ rig.rotation().T + np.asarray(rig.position)
    view_a = pts_world - np.asarray(rig.position)
    norm_a = np.linalg.norm(view_a, axis=1)
    cos_limit = math.cos(math.radians(angle_deg))
    pos = np.stack([np.asarray(o.position, dtype=np.float64) for o in peers])
    rots = np.stack([o.rotation() for o in peers])
    rel = pts_world[None, :, :] - pos[:, None, :]
    pc = np.einsum("mnj,mjk->mnk", rel, rots)
    zc = pc[:, :, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xr = np.abs(pc[:, :, 0] / zc)
        yr = np.abs(pc[:, :, 1] / zc)
    tan_h = np.array([math.tan(math.radians(o.intrinsics.hfov_deg) / 2.0) for o in peers])
    tan_v = np.array([math.tan(math.radians(o.intrinsics.vfov_deg) / 2.0) for o in peers])
    lo = np.array([o.intrinsics.min_range_mm for o in peers])
    hi = np.array([o.intrinsics.max_range_mm for o in peers])
    zmm = zc * 1000.0
    inside = ((zc > 0.0) & (zmm >= lo[:, None]) & (zmm <= hi[:, None])
              & (xr <= tan_h[:, None]) & (yr <= tan_v[:, None]))
    dot = np.einsum("mnj,nj->mn", rel, view_a)
    norms = norm_a[None, :] * np.linalg.norm(rel, axis=2)
    with np.errstate(invalid="ignore"):
        cos_angle = dot / np.maximum(norms, 1e-12)
    return (inside & (cos_angle < cos_limit)).any(axis=0)


@lru_cache(maxsize=64)
def _static_interference(room: tuple, rig: CameraRig, peers: tuple, angle_deg: float):
    """Depth and interference mask of the immobile scenery, frame-invariant.

    Pixels whose live depth equals the static depth have identical world
    points, so their interference verdict can be reused as-is.
    """
    best, _, _ = _static_layer(room, rig)
    intr = rig.intrinsics
    mm = np.where(np.isfinite(best), np.round(best * 1000.0), 0.0)
    ok = (mm >= intr.min_range_mm) & (mm <= intr.max_range_mm) & (mm <= 65535)
    flat = np.where(ok, mm, 0.0).astype(np.uint16).ravel()
    interfered = np.zeros(flat.size, dtype=bool)
    valid = np.flatnonzero(flat > 0)
    if valid.size and peers:
        interfered[valid] = _interference_mask(flat, valid, rig, peers, angle_deg)
    flat.setflags(write=False)
    interfered.setflags(write=False)
    return flat, interfered


def punch_interference_holes(
    depth: DepthFrame,
    rig: CameraRig,
    others,
    p_hole: float,
    angle_deg: float,
    rng: np.random.Generator,
    static_hint: tuple | None = None,
) -> DepthFrame:
    """Zero depth pixels corrupted by another camera's structured light.

    Each interfering pixel (see _interference_mask) is zeroed with
    probability p_hole. static_hint, if given, is the (flat depth, mask)
    pair of the static scenery so only pixels that deviate from it are
    re-evaluated; the result is identical either way.
    """
    if not others or p_hole <= 0.0:
        return depth
    peers = [o for o in others if o.camera_id != rig.camera_id]
    if not peers:
        return depth
    flat = np.asarray(depth.data).reshape(-1)
    valid = np.flatnonzero(flat > 0)
    if valid.size == 0:
        return depth
    if static_hint is not None:
        static_flat, static_mask = static_hint
        same = flat[valid] == static_flat[valid]
        interfered = np.empty(valid.size, dtype=bool)
        interfered[same] = static_mask[valid[same]]
        dyn = ~same
        if dyn.any():
            interfered[dyn] = _interference_mask(flat, valid[dyn], rig, peers, angle_deg)
    else:
        interfered = _interference_mask(flat, valid, rig, peers, angle_deg)
    punched = interfered & (rng.random(valid.size) < p_hole)
    if not punched.any():
        return depth
    out = flat.copy()
    out[valid[punched]] = 0
    return DepthFrame(
        depth.width, depth.height, out.reshape(depth.height, depth.width), depth.timestamp_us
    )


def apply_interference(frames: dict, scene: Scene, frame_index: int) -> dict:
    """Apply cross-camera hole punching to a dict of camera_id -> DepthFrame.

    Every uncovered camera in the scene emits a pattern, so a frame dict
    holding only some cameras (one server's share) still collects holes from
    the rest. Covered cameras neither suffer nor cause interference. Hole
    draws are seeded by (scene seed, camera, frame), so a given camera-frame
    is reproducible regardless of render order or host process.
    """
    t = frame_index / scene.fps
    active = [rig for rig in scene.cameras if not rig.covered_at(t)]
    out = dict(frames)
    if len(active) < 2:
        return out
    for rig in active:
        if rig.camera_id not in frames:
            continue
        rng = np.random.default_rng(
            np.random.SeedSequence([scene.seed, _STREAM_INTERFERENCE, rig.camera_id, frame_index])
        )
        others = tuple(o for o in active if o.camera_id != rig.camera_id)
        hint = _static_interference(scene.room, rig, others, scene.interference_angle_deg)
        out[rig.camera_id] = punch_interference_holes(
            frames[rig.camera_id], rig, others, scene.p_hole,
            scene.interference_angle_deg, rng, static_hint=hint,
        )
    return out
