"""Core domain types shared by every module.

All types here are value objects: frames and skeletons are immutable after
construction (their numpy buffers are marked read-only) so they can be handed
between threads without locking. The one deliberately mutable type is
OutputSkeleton, which is owned exclusively by the fusion tracker.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from functools import singledispatch

import numpy as np

DEFAULT_MIN_RANGE_MM = 500
DEFAULT_MAX_RANGE_MM = 3500
MAX_USER_LABEL = 15
JOINT_COUNT = 15
DEFAULT_HISTORY_CAPACITY = 30


class JointKind(IntEnum):
    HEAD = 1
    NECK = 2
    TORSO = 3
    LEFT_SHOULDER = 4
    RIGHT_SHOULDER = 5
    LEFT_ELBOW = 6
    RIGHT_ELBOW = 7
    LEFT_HAND = 8
    RIGHT_HAND = 9
    LEFT_HIP = 10
    RIGHT_HIP = 11
    LEFT_KNEE = 12
    RIGHT_KNEE = 13
    LEFT_FOOT = 14
    RIGHT_FOOT = 15


class TrackState(IntEnum):
    PENDING = 0
    CONFIRMED = 1
    LOST = 2

    @property
    def label(self) -> str:
        return self.name.lower()


def _own_array(data, dtype, shape=None) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class DepthFrame:
    """Row-major uint16 depth grid in millimeters; 0 means no reading."""

    width: int
    height: int
    data: np.ndarray
    timestamp_us: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "data", _own_array(self.data, np.uint16, (self.height, self.width))
        )


@dataclass(frozen=True, eq=False)
class LabelFrame:
    """Row-major uint8 grid of user ids in [0, 15]; 0 means background."""

    width: int
    height: int
    data: np.ndarray
    timestamp_us: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "data", _own_array(self.data, np.uint8, (self.height, self.width))
        )


@dataclass(frozen=True, eq=False)
class ColorFrame:
    """Row-major uint8 grid of (r, g, b) triples."""

    width: int
    height: int
    data: np.ndarray
    timestamp_us: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "data", _own_array(self.data, np.uint8, (self.height, self.width, 3))
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 640
    height: int = 480
    hfov_deg: float = 57.5
    vfov_deg: float = 45.0
    min_range_mm: int = DEFAULT_MIN_RANGE_MM
    max_range_mm: int = DEFAULT_MAX_RANGE_MM

    @property
    def fx(self) -> float:
        return (self.width / 2.0) / math.tan(math.radians(self.hfov_deg) / 2.0)

    @property
    def fy(self) -> float:
        return (self.height / 2.0) / math.tan(math.radians(self.vfov_deg) / 2.0)

    # Principal point at the center of the pixel grid, so that for an
    # odd-sized image the middle pixel maps exactly onto the optical axis.
    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2.0


@dataclass(frozen=True)
class Joint:
    kind: JointKind
    position: tuple[float, float, float]
    confidence: float
    orientation: tuple[float, float, float, float] | None = None

    def position_array(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)


def compute_center_of_mass(joints, confidence_floor: float = 0.5) -> tuple[float, float, float]:
    """Confidence-weighted mean of joints at or above the floor.

    Falls back to the plain mean of all joints when none qualifies, so a
    fully occluded skeleton still has a usable summary position.
    """
    pos = np.array([j.position for j in joints], dtype=np.float64)
    conf = np.array([j.confidence for j in joints], dtype=np.float64)
    keep = conf >= confidence_floor
    if keep.any():
        w = conf[keep]
        com = (pos[keep] * w[:, None]).sum(axis=0) / w.sum()
    else:
        com = pos.mean(axis=0)
    return (float(com[0]), float(com[1]), float(com[2]))


@dataclass(frozen=True)
class InputSkeleton:
    """A 15-joint pose detected by one camera, in that camera's frame."""

    camera_id: int
    local_user_id: int
    joints: tuple[Joint, ...]
    center_of_mass: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.center_of_mass is None:
            object.__setattr__(self, "center_of_mass", compute_center_of_mass(self.joints))

    def joint_positions(self) -> np.ndarray:
        return np.array([j.position for j in self.joints], dtype=np.float64)


@dataclass
class OutputSkeleton:
    """A fused, labeled skeleton maintained by the tracker.

    Mutable by design: the tracker is its single owner and rewrites joints,
    history, and state once per ingested frame.
    """

    output_id: int
    label: str = ""
    joints: tuple[Joint, ...] = ()
    contributors: list[tuple[int, int]] = field(default_factory=list)
    state: TrackState = TrackState.PENDING
    com_history: deque = field(
        default_factory=lambda: deque(maxlen=DEFAULT_HISTORY_CAPACITY)
    )
    lost_age: int = 0

    @property
    def center_of_mass(self) -> tuple[float, float, float]:
        if not self.com_history:
            return (0.0, 0.0, 0.0)
        return self.com_history[-1][1]

    @property
    def velocity(self) -> np.ndarray:
        """Mean per-frame displacement over the retained history window."""
        if len(self.com_history) < 2:
            return np.zeros(3)
        f0, c0 = self.com_history[0]
        f1, c1 = self.com_history[-1]
        span = f1 - f0
        if span <= 0:
            return np.zeros(3)
        return (np.asarray(c1, dtype=np.float64) - np.asarray(c0, dtype=np.float64)) / span


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            object.__setattr__(
                self, "colors", _own_array(self.colors, np.uint8, (len(pts), 3))
            )

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion p -> R p + t mapping camera frame to common frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _own_array(self.rotation, np.float64, (3, 3)))
        object.__setattr__(self, "translation", _own_array(self.translation, np.float64, (3,)))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying `other` first, then self."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def almost_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=tol)
            and np.allclose(self.translation, other.translation, atol=tol)
        )


@singledispatch
def validate(obj) -> list[str]:
    """Return every violated invariant of a core type; empty list when valid."""
    return [f"unsupported type {type(obj).__name__}"]


@validate.register
def _(frame: DepthFrame, min_range_mm: int = DEFAULT_MIN_RANGE_MM,
      max_range_mm: int = DEFAULT_MAX_RANGE_MM) -> list[str]:
    out = []
    if frame.data.shape != (frame.height, frame.width):
        out.append("data dimensions do not match width/height")
    nz = frame.data[frame.data != 0]
    if nz.size and (nz.min() < min_range_mm or nz.max() > max_range_mm):
        out.append(
            f"nonzero depth outside [{min_range_mm}, {max_range_mm}] mm"
        )
    return out


@validate.register
def _(frame: LabelFrame) -> list[str]:
    out = []
    if frame.data.shape != (frame.height, frame.width):
        out.append("data dimensions do not match width/height")
    if frame.data.size and frame.data.max() > MAX_USER_LABEL:
        out.append(f"label > {MAX_USER_LABEL}")
    return out


@validate.register
def _(frame: ColorFrame) -> list[str]:
    out = []
    if frame.data.shape != (frame.height, frame.width, 3):
        out.append("data dimensions do not match width/height")
    return out


@validate.register
def _(intr: CameraIntrinsics) -> list[str]:
    out = []
    if not (0 < intr.hfov_deg < 180):
        out.append("hfov out of (0, 180)")
    if not (0 < intr.vfov_deg < 180):
        out.append("vfov out of (0, 180)")
    if not intr.min_range_mm < intr.max_range_mm:
        out.append("min_range_mm >= max_range_mm")
    return out


@validate.register
def _(joint: Joint) -> list[str]:
    out = []
    if not (0.0 <= joint.confidence <= 1.0):
        out.append("confidence out of [0, 1]")
    if not all(math.isfinite(c) for c in joint.position):
        out.append("position not finite")
    if joint.orientation is not None and len(joint.orientation) != 4:
        out.append("orientation must be a quaternion")
    return out


@validate.register
def _(skel: InputSkeleton) -> list[str]:
    out = []
    if skel.local_user_id < 1:
        out.append("local_user_id < 1")
    if len(skel.joints) != JOINT_COUNT:
        out.append(f"expected {JOINT_COUNT} joints, got {len(skel.joints)}")
    kinds = [j.kind for j in skel.joints]
    if len(set(kinds)) != len(kinds):
        out.append("duplicate joint kinds")
    for j in skel.joints:
        out.extend(validate(j))
    return out


@validate.register
def _(skel: OutputSkeleton) -> list[str]:
    out = []
    if skel.state != TrackState.LOST and not skel.contributors:
        out.append("contributors empty while not lost")
    for j in skel.joints:
        out.extend(validate(j))
    return out


@validate.register
def _(cloud: PointCloud) -> list[str]:
    out = []
    if cloud.points.size and not np.isfinite(cloud.points).all():
        out.append("non-finite coordinates")
    return out


@validate.register
def _(tf: RigidTransform) -> list[str]:
    out = []
    if not np.allclose(tf.rotation.T @ tf.rotation, np.eye(3), atol=1e-6):
        out.append("not orthonormal")
    if abs(np.linalg.det(tf.rotation) - 1.0) > 1e-6:
        out.append("determinant not +1")
    return out
