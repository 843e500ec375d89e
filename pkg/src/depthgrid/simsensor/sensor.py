"""Skeleton extraction from the simulated scene, one sensor per camera.

Mimics how an on-device body tracker behaves: people are detected only
after a short latency, keep a small local user id while they stay in view,
lose it on exit (ids are recycled for the next arrival), and joints whose
line of sight is blocked report low confidence.
"""
from __future__ import annotations

import numpy as np

from ..model import InputSkeleton, Joint, JointKind
from .render import _inside_frustum, _primitive_hits
from .scene import CameraRig, HumanFigure, Scene, human_joints_world

_STREAM_SKELETON = 102

JOINT_NOISE_SIGMA_M = 0.01
MAX_LOCAL_IDS = 15
_TORSO_INDEX = list(JointKind).index(JointKind.TORSO)


def ground_truth(scene: Scene, t: float) -> list[tuple[int, np.ndarray]]:
    """Exact world-frame joints of every human at time t, no noise."""
    humans = sorted(scene.humans, key=lambda human: human.human_id)
    return [(human.human_id, human_joints_world(human, t)) for human in humans]


def _occluder_geometry(prims) -> list:
    """Pair each primitive with its AABB and bounding sphere for fast rejects."""
    geo = []
    for prim in prims:
        if prim.shape == "box":
            half = np.asarray(prim.size, dtype=np.float64) / 2.0
            c = np.asarray(prim.center, dtype=np.float64)
            lo, hi = c - half, c + half
            rb = float(np.linalg.norm(half))
        elif prim.shape == "sphere":
            c = np.asarray(prim.center, dtype=np.float64)
            rb = prim.radius
            lo, hi = c - rb, c + rb
        else:
            p0 = np.asarray(prim.p0, dtype=np.float64)
            p1 = np.asarray(prim.p1, dtype=np.float64)
            lo = np.minimum(p0, p1) - prim.radius
            hi = np.maximum(p0, p1) + prim.radius
            c = (p0 + p1) / 2.0
            rb = float(np.linalg.norm(p1 - p0)) / 2.0 + prim.radius
        geo.append((prim, lo, hi, c, rb))
    return geo


def _blocked_joints(occluders: list, rig: CameraRig, human: HumanFigure,
                    joints_world: np.ndarray) -> np.ndarray:
    """Mask of joints whose sight line hits a primitive the human doesn't own."""
    origin = np.asarray(rig.position, dtype=np.float64)
    rays = joints_world - origin
    dd = np.einsum("ij,ij->i", rays, rays)
    bundle_lo = np.minimum(joints_world.min(axis=0), origin)
    bundle_hi = np.maximum(joints_world.max(axis=0), origin)
    blocked = np.zeros(len(joints_world), dtype=bool)
    for prim, lo, hi, c, rb in occluders:
        if prim.owner == human.human_id:
            continue
        if (lo > bundle_hi).any() or (hi < bundle_lo).any():
            continue
        # Segment-to-bounding-sphere distance rejects most remaining shapes
        # before the exact intersection runs.
        rel = c - origin
        tt = np.clip((rays @ rel) / dd, 0.0, 1.0)
        d2 = ((rel[None, :] - tt[:, None] * rays) ** 2).sum(axis=1)
        near = (d2 <= rb * rb) & ~blocked
        if not near.any():
            continue
        idx = np.flatnonzero(near)
        s = _primitive_hits(origin, rays[idx], prim)
        # s is in units of the camera-to-joint segment; a hit short of the
        # joint (with a small slack for grazing contact) blocks it.
        blocked[idx[s < 1.0 - 1e-3]] = True
        if blocked.all():
            break
    return blocked


class SkeletonSensor:
    """Stateful per-camera extractor of noisy, confidence-rated skeletons.

    Call extract(frame_index) once per frame in order; the detection
    latency and local user id lifecycle depend on the call sequence.
    """

    def __init__(self, scene: Scene, rig: CameraRig, detection_latency: int | None = None):
        self.scene = scene
        self.rig = rig
        self.latency = scene.detection_latency if detection_latency is None else detection_latency
        self._local_ids: dict[int, int] = {}
        self._visible_frames: dict[int, int] = {}

    def _lowest_free_id(self) -> int | None:
        used = set(self._local_ids.values())
        for candidate in range(1, MAX_LOCAL_IDS + 1):
            if candidate not in used:
                return candidate
        return None

    def extract(self, frame_index: int) -> list[InputSkeleton]:
        scene, rig = self.scene, self.rig
        t = frame_index / scene.fps
        if rig.covered_at(t):
            # A covered sensor loses all its users; ids free up immediately.
            self._local_ids.clear()
            self._visible_frames.clear()
            return []

        humans = sorted(scene.humans, key=lambda human: human.human_id)
        world = {human.human_id: human_joints_world(human, t) for human in humans}
        visible = set()
        for human in humans:
            torso = world[human.human_id][_TORSO_INDEX][None, :]
            if _inside_frustum(torso, rig)[0]:
                visible.add(human.human_id)

        for gone in [hid for hid in self._local_ids if hid not in visible]:
            del self._local_ids[gone]
            del self._visible_frames[gone]
        for human in humans:
            hid = human.human_id
            if hid not in visible:
                continue
            if hid not in self._local_ids:
                free = self._lowest_free_id()
                if free is None:
                    continue
                self._local_ids[hid] = free
                self._visible_frames[hid] = 0
            self._visible_frames[hid] += 1

        rng = np.random.default_rng(
            np.random.SeedSequence([scene.seed, _STREAM_SKELETON, rig.camera_id, frame_index])
        )
        out = []
        occluders = None
        for human in humans:
            hid = human.human_id
            if self._visible_frames.get(hid, 0) <= self.latency:
                continue
            if occluders is None:
                occluders = _occluder_geometry(scene.primitives_at(t))
            joints_world = world[hid]
            joints_cam = rig.world_to_camera(joints_world)
            noisy = joints_cam + rng.normal(0.0, JOINT_NOISE_SIGMA_M, joints_cam.shape)
            bad = _blocked_joints(occluders, rig, human, joints_world)
            u = rng.random(len(joints_world))
            conf = np.where(bad, u * 0.5, 0.85 + u * 0.15)
            joints = tuple(
                Joint(kind, tuple(noisy[i]), float(conf[i]))
                for i, kind in enumerate(JointKind)
            )
            out.append(InputSkeleton(rig.camera_id, self._local_ids[hid], joints))
        return out
