"""Scene description: room primitives, camera rigs, and scripted humans.

Scenes are plain JSON. Humans are capsule assemblies posed from a 15-joint
template scaled by body height; they follow waypoint paths at a walk speed
and blend between standing and sitting postures on a keyed schedule. The
world frame is z-up with the floor at z = 0, units in meters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..model import CameraIntrinsics, JointKind, RigidTransform

POSE_STAND = "stand"
POSE_SIT = "sit"
POSTURE_BLEND_SECONDS = 1.0

# Joint offsets in the body-local frame (right, forward, up) as fractions of
# body height. Values approximate adult proportions; the sitting pose drops
# the pelvis to chair height and folds the legs forward.
STAND_TEMPLATE = {
    JointKind.HEAD: (0.00, 0.00, 0.93),
    JointKind.NECK: (0.00, 0.00, 0.84),
    JointKind.TORSO: (0.00, 0.00, 0.60),
    JointKind.LEFT_SHOULDER: (-0.12, 0.00, 0.80),
    JointKind.RIGHT_SHOULDER: (0.12, 0.00, 0.80),
    JointKind.LEFT_ELBOW: (-0.16, 0.00, 0.65),
    JointKind.RIGHT_ELBOW: (0.16, 0.00, 0.65),
    JointKind.LEFT_HAND: (-0.18, 0.00, 0.50),
    JointKind.RIGHT_HAND: (0.18, 0.00, 0.50),
    JointKind.LEFT_HIP: (-0.07, 0.00, 0.52),
    JointKind.RIGHT_HIP: (0.07, 0.00, 0.52),
    JointKind.LEFT_KNEE: (-0.08, 0.00, 0.28),
    JointKind.RIGHT_KNEE: (0.08, 0.00, 0.28),
    JointKind.LEFT_FOOT: (-0.09, 0.02, 0.02),
    JointKind.RIGHT_FOOT: (0.09, 0.02, 0.02),
}
SIT_TEMPLATE = {
    JointKind.HEAD: (0.00, 0.00, 0.67),
    JointKind.NECK: (0.00, 0.00, 0.58),
    JointKind.TORSO: (0.00, 0.00, 0.40),
    JointKind.LEFT_SHOULDER: (-0.12, 0.00, 0.55),
    JointKind.RIGHT_SHOULDER: (0.12, 0.00, 0.55),
    JointKind.LEFT_ELBOW: (-0.16, 0.05, 0.42),
    JointKind.RIGHT_ELBOW: (0.16, 0.05, 0.42),
    JointKind.LEFT_HAND: (-0.18, 0.15, 0.35),
    JointKind.RIGHT_HAND: (0.18, 0.15, 0.35),
    JointKind.LEFT_HIP: (-0.07, 0.00, 0.26),
    JointKind.RIGHT_HIP: (0.07, 0.00, 0.26),
    JointKind.LEFT_KNEE: (-0.08, 0.22, 0.25),
    JointKind.RIGHT_KNEE: (0.08, 0.22, 0.25),
    JointKind.LEFT_FOOT: (-0.09, 0.25, 0.02),
    JointKind.RIGHT_FOOT: (0.09, 0.25, 0.02),
}
JOINT_ORDER = tuple(JointKind)

# Body-segment capsule radii as fractions of height.
_HEAD_RADIUS = 0.065
_TORSO_RADIUS = 0.085
_ARM_RADIUS = 0.028
_LEG_RADIUS = 0.040


@dataclass(frozen=True)
class ScenePrimitive:
    """One renderable solid: axis-aligned box, sphere, or capsule."""

    shape: str
    color: tuple[int, int, int] = (128, 128, 128)
    owner: int = 0  # human id for body parts, 0 for scenery
    center: tuple[float, float, float] | None = None
    size: tuple[float, float, float] | None = None
    radius: float = 0.0
    p0: tuple[float, float, float] | None = None
    p1: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.shape == "box":
            if self.center is None or self.size is None or min(self.size) <= 0:
                raise ValueError("box needs center and positive size")
        elif self.shape == "sphere":
            if self.center is None or self.radius <= 0:
                raise ValueError("sphere needs center and positive radius")
        elif self.shape == "capsule":
            if self.p0 is None or self.p1 is None or self.radius <= 0:
                raise ValueError("capsule needs endpoints and positive radius")
        else:
            raise ValueError(f"unknown shape {self.shape!r}")


@dataclass(frozen=True)
class Waypoint:
    pos: tuple[float, float]
    dwell: float = 0.0


@dataclass(frozen=True)
class PostureKey:
    t: float
    pose: str

    def __post_init__(self):
        if self.pose not in (POSE_STAND, POSE_SIT):
            raise ValueError(f"unknown pose {self.pose!r}")


@dataclass(frozen=True)
class HumanFigure:
    human_id: int
    height: float = 1.75
    speed: float = 1.0
    color: tuple[int, int, int] = (200, 160, 120)
    path: tuple[Waypoint, ...] = (Waypoint((0.0, 0.0)),)
    loop: bool = False
    posture: tuple[PostureKey, ...] = ()

    def __post_init__(self):
        if not 1 <= self.human_id <= 15:
            raise ValueError("human_id must be in [1, 15]")
        if not 1.4 <= self.height <= 2.1:
            raise ValueError("height must be in [1.4, 2.1] m")
        if not 0.0 <= self.speed <= 2.5:
            raise ValueError("speed must be in [0, 2.5] m/s")
        if not self.path:
            raise ValueError("path needs at least one waypoint")


@lru_cache(maxsize=64)
def _path_segments(human: HumanFigure):
    """Timeline of (t0, t1, p0, p1) legs; dwells are zero-motion legs."""
    pts = [np.asarray(w.pos, dtype=np.float64) for w in human.path]
    dwells = [w.dwell for w in human.path]
    if human.loop and len(pts) > 1:
        # The wrap lands back on the first waypoint, whose own dwell then
        # applies at t = 0 of the next cycle; don't count it twice.
        pts.append(pts[0])
        dwells.append(0.0)
    segments = []
    t = 0.0
    for i, (p, dwell) in enumerate(zip(pts, dwells)):
        if dwell > 0:
            segments.append((t, t + dwell, p, p))
            t += dwell
        if i + 1 < len(pts):
            dist = float(np.linalg.norm(pts[i + 1] - p))
            if dist > 0:
                if human.speed <= 0:
                    raise ValueError(
                        f"human {human.human_id} has distinct waypoints but zero speed"
                    )
                segments.append((t, t + dist / human.speed, p, pts[i + 1]))
                t += dist / human.speed
    if not segments:
        segments.append((0.0, math.inf, pts[0], pts[0]))
    return tuple(segments), t


def human_position_facing(human: HumanFigure, t: float):
    """Ground position and facing unit vector (2-d each) at time t."""
    segments, total = _path_segments(human)
    if human.loop and total > 0:
        t = t % total
    facing = None
    for t0, t1, p0, p1 in segments:
        if not np.array_equal(p0, p1):
            facing = (p1 - p0) / np.linalg.norm(p1 - p0)
            break
    if facing is None:
        facing = np.array([1.0, 0.0])
    pos = segments[-1][3]
    for t0, t1, p0, p1 in segments:
        moving = not np.array_equal(p0, p1)
        if moving:
            facing = (p1 - p0) / np.linalg.norm(p1 - p0)
        if t < t1:
            if moving:
                frac = (t - t0) / (t1 - t0)
                pos = p0 + frac * (p1 - p0)
            else:
                pos = p0
            return pos, facing
    return pos, facing


def sit_fraction(human: HumanFigure, t: float) -> float:
    """0 = standing, 1 = seated; each posture key starts a 1 s linear blend.

    Figures start standing. A key whose blend is cut short by the next key
    hands its mid-blend value on, so dense schedules stay continuous.
    """
    keys = sorted(human.posture, key=lambda k: k.t)
    value = 0.0
    for i, key in enumerate(keys):
        if t < key.t:
            break
        target = 1.0 if key.pose == POSE_SIT else 0.0
        end = keys[i + 1].t if i + 1 < len(keys) else math.inf
        dt = min(t, end) - key.t
        alpha = min(1.0, dt / POSTURE_BLEND_SECONDS)
        value = value + (target - value) * alpha
    return value


def human_joints_world(human: HumanFigure, t: float) -> np.ndarray:
    """(15, 3) world-frame joint positions in JointKind order."""
    pos, facing = human_position_facing(human, t)
    frac = sit_fraction(human, t)
    right = np.array([facing[1], -facing[0]])
    out = np.empty((len(JOINT_ORDER), 3))
    for i, kind in enumerate(JOINT_ORDER):
        sx, sy, sz = STAND_TEMPLATE[kind]
        tx, ty, tz = SIT_TEMPLATE[kind]
        lx = (sx + (tx - sx) * frac) * human.height
        ly = (sy + (ty - sy) * frac) * human.height
        lz = (sz + (tz - sz) * frac) * human.height
        xy = pos + lx * right + ly * facing
        out[i] = (xy[0], xy[1], lz)
    return out


def human_primitives(human: HumanFigure, t: float) -> list[ScenePrimitive]:
    """Capsule assembly for rendering and occlusion, owned by the human."""
    joints = human_joints_world(human, t)
    J = {kind: tuple(joints[i]) for i, kind in enumerate(JOINT_ORDER)}
    h = human.height
    hip_mid = tuple((np.asarray(J[JointKind.LEFT_HIP]) +
                     np.asarray(J[JointKind.RIGHT_HIP])) / 2.0)
    segs = [
        (J[JointKind.NECK], hip_mid, _TORSO_RADIUS * h),
        (J[JointKind.LEFT_SHOULDER], J[JointKind.LEFT_ELBOW], _ARM_RADIUS * h),
        (J[JointKind.LEFT_ELBOW], J[JointKind.LEFT_HAND], _ARM_RADIUS * h),
        (J[JointKind.RIGHT_SHOULDER], J[JointKind.RIGHT_ELBOW], _ARM_RADIUS * h),
        (J[JointKind.RIGHT_ELBOW], J[JointKind.RIGHT_HAND], _ARM_RADIUS * h),
        (J[JointKind.LEFT_HIP], J[JointKind.LEFT_KNEE], _LEG_RADIUS * h),
        (J[JointKind.LEFT_KNEE], J[JointKind.LEFT_FOOT], _LEG_RADIUS * h),
        (J[JointKind.RIGHT_HIP], J[JointKind.RIGHT_KNEE], _LEG_RADIUS * h),
        (J[JointKind.RIGHT_KNEE], J[JointKind.RIGHT_FOOT], _LEG_RADIUS * h),
    ]
    prims = [
        ScenePrimitive("sphere", human.color, human.human_id,
                       center=J[JointKind.HEAD], radius=_HEAD_RADIUS * h)
    ]
    for p0, p1, r in segs:
        prims.append(
            ScenePrimitive("capsule", human.color, human.human_id, p0=p0, p1=p1, radius=r)
        )
    return prims


@lru_cache(maxsize=64)
def _rig_rotation(yaw_deg: float, pitch_deg: float) -> np.ndarray:
    """Camera-to-world rotation; camera axes are (right, down, forward).

    Yaw turns about world +z from +x; positive pitch tilts the view down.
    """
    y = math.radians(yaw_deg)
    p = math.radians(pitch_deg)
    forward = np.array([math.cos(p) * math.cos(y), math.cos(p) * math.sin(y), -math.sin(p)])
    right = np.array([math.sin(y), -math.cos(y), 0.0])
    down = np.cross(forward, right)
    r = np.column_stack([right, down, forward])
    r.flags.writeable = False
    return r


@dataclass(frozen=True)
class CameraRig:
    camera_id: int
    position: tuple[float, float, float]
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0
    intrinsics: CameraIntrinsics = CameraIntrinsics()
    cover: tuple[tuple[float, float], ...] = ()

    def rotation(self) -> np.ndarray:
        return _rig_rotation(self.yaw_deg, self.pitch_deg)

    def pose(self) -> RigidTransform:
        """Camera-to-world transform; doubles as the true calibration."""
        return RigidTransform(self.rotation(), np.asarray(self.position))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.asarray(self.position)) @ self.rotation()

    def covered_at(self, t: float) -> bool:
        return any(t0 <= t < t1 for t0, t1 in self.cover)


@dataclass(frozen=True)
class Scene:
    room: tuple[ScenePrimitive, ...] = ()
    cameras: tuple[CameraRig, ...] = ()
    humans: tuple[HumanFigure, ...] = ()
    seed: int = 0
    fps: int = 30
    p_hole: float = 0.25
    interference_angle_deg: float = 90.0
    detection_latency: int = 10

    def primitives_at(self, t: float) -> list[ScenePrimitive]:
        prims = list(self.room)
        for human in self.humans:
            prims.extend(human_primitives(human, t))
        return prims

    def rig(self, camera_id: int) -> CameraRig:
        for rig in self.cameras:
            if rig.camera_id == camera_id:
                return rig
        raise KeyError(f"no camera {camera_id} in scene")

    def rig_transforms(self) -> dict[int, RigidTransform]:
        return {rig.camera_id: rig.pose() for rig in self.cameras}


def _tuple3(x) -> tuple[float, float, float]:
    a, b, c = (float(v) for v in x)
    return (a, b, c)


def _color(x) -> tuple[int, int, int]:
    a, b, c = (int(v) for v in x)
    return (a, b, c)


def scene_from_dict(raw: dict) -> Scene:
    room = []
    for p in raw.get("room", []):
        room.append(
            ScenePrimitive(
                shape=p["shape"],
                color=_color(p.get("color", (128, 128, 128))),
                owner=0,
                center=_tuple3(p["center"]) if "center" in p else None,
                size=_tuple3(p["size"]) if "size" in p else None,
                radius=float(p.get("radius", 0.0)),
                p0=_tuple3(p["p0"]) if "p0" in p else None,
                p1=_tuple3(p["p1"]) if "p1" in p else None,
            )
        )
    cameras = []
    for c in raw.get("cameras", []):
        inner = c.get("intrinsics", {})
        intr = CameraIntrinsics(
            width=int(inner.get("width", 160)),
            height=int(inner.get("height", 120)),
            hfov_deg=float(inner.get("hfov_deg", 57.5)),
            vfov_deg=float(inner.get("vfov_deg", 45.0)),
            min_range_mm=int(inner.get("min_range_mm", 500)),
            max_range_mm=int(inner.get("max_range_mm", 3500)),
        )
        cameras.append(
            CameraRig(
                camera_id=int(c["camera_id"]),
                position=_tuple3(c["position"]),
                yaw_deg=float(c.get("yaw_deg", 0.0)),
                pitch_deg=float(c.get("pitch_deg", 0.0)),
                intrinsics=intr,
                cover=tuple((float(a), float(b)) for a, b in c.get("cover", [])),
            )
        )
    humans = []
    for hval in raw.get("humans", []):
        humans.append(
            HumanFigure(
                human_id=int(hval["human_id"]),
                height=float(hval.get("height", 1.75)),
                speed=float(hval.get("speed", 1.0)),
                color=_color(hval.get("color", (200, 160, 120))),
                path=tuple(
                    Waypoint((float(w["pos"][0]), float(w["pos"][1])),
                             float(w.get("dwell", 0.0)))
                    for w in hval.get("path", [{"pos": [0, 0]}])
                ),
                loop=bool(hval.get("loop", False)),
                posture=tuple(
                    PostureKey(float(k["t"]), k["pose"]) for k in hval.get("posture", [])
                ),
            )
        )
    return Scene(
        room=tuple(room),
        cameras=tuple(cameras),
        humans=tuple(humans),
        seed=int(raw.get("seed", 0)),
        fps=int(raw.get("fps", 30)),
        p_hole=float(raw.get("p_hole", 0.25)),
        interference_angle_deg=float(raw.get("interference_angle_deg", 90.0)),
        detection_latency=int(raw.get("detection_latency", 10)),
    )


def scene_to_dict(scene: Scene) -> dict:
    room = []
    for p in scene.room:
        entry = {"shape": p.shape, "color": list(p.color)}
        if p.center is not None:
            entry["center"] = list(p.center)
        if p.size is not None:
            entry["size"] = list(p.size)
        if p.radius:
            entry["radius"] = p.radius
        if p.p0 is not None:
            entry["p0"] = list(p.p0)
            entry["p1"] = list(p.p1)
        room.append(entry)
    cameras = [
        {
            "camera_id": c.camera_id,
            "position": list(c.position),
            "yaw_deg": c.yaw_deg,
            "pitch_deg": c.pitch_deg,
            "intrinsics": {
                "width": c.intrinsics.width,
                "height": c.intrinsics.height,
                "hfov_deg": c.intrinsics.hfov_deg,
                "vfov_deg": c.intrinsics.vfov_deg,
                "min_range_mm": c.intrinsics.min_range_mm,
                "max_range_mm": c.intrinsics.max_range_mm,
            },
            "cover": [list(iv) for iv in c.cover],
        }
        for c in scene.cameras
    ]
    humans = [
        {
            "human_id": h.human_id,
            "height": h.height,
            "speed": h.speed,
            "color": list(h.color),
            "path": [{"pos": list(w.pos), "dwell": w.dwell} for w in h.path],
            "loop": h.loop,
            "posture": [{"t": k.t, "pose": k.pose} for k in h.posture],
        }
        for h in scene.humans
    ]
    return {
        "seed": scene.seed,
        "fps": scene.fps,
        "p_hole": scene.p_hole,
        "interference_angle_deg": scene.interference_angle_deg,
        "detection_latency": scene.detection_latency,
        "room": room,
        "cameras": cameras,
        "humans": humans,
    }


def load_scene(path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))
