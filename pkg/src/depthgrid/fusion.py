"""Multi-camera skeleton fusion: merging, tracking, and handoff.

Per-camera skeletons arrive in their camera's frame and are rotated into the
common frame by the calibration transforms. The tracker maintains one output
skeleton per physical person by linking each (camera, local user id) stream
to at most one output. New links form only after the merge conditions (close
centers of mass, similar velocity direction and magnitude) hold for a full
confirmation window; outputs that lose every contributor are kept for a
retention window with their position extrapolated, so a person crossing
between cameras keeps their identity and label.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import SIDE_LEFT, SIDE_RIGHT
from .model import (
    InputSkeleton,
    Joint,
    JointKind,
    OutputSkeleton,
    TrackState,
    compute_center_of_mass,
)

# Below this speed (m/frame) a velocity direction is dominated by noise, so
# the angle condition is treated as satisfied when both sides are this slow.
NEAR_STATIONARY_SPEED = 0.005


class MissingCalibrationError(ValueError):
    """A camera reported skeletons but has no calibration transform."""


@dataclass(frozen=True)
class FusionParams:
    com_distance_threshold: float = 0.15
    velocity_angle_threshold_deg: float = 30.0
    velocity_magnitude_tolerance: float = 0.05
    confirmation_window: int = 15
    lost_retention: int = 15
    joint_confidence_floor: float = 0.5
    history_capacity: int = 30

    def __post_init__(self):
        numeric = (
            self.com_distance_threshold,
            self.velocity_angle_threshold_deg,
            self.velocity_magnitude_tolerance,
            self.confirmation_window,
            self.lost_retention,
            self.history_capacity,
        )
        if any(v <= 0 for v in numeric):
            raise ValueError("all fusion parameters must be positive")
        if not 0.0 < self.joint_confidence_floor < 1.0:
            raise ValueError("joint_confidence_floor must be in (0, 1)")


@dataclass(frozen=True)
class _Observation:
    """One transformed input this frame, plus its raw camera-frame x."""

    skeleton: InputSkeleton
    com: np.ndarray
    camera_x: float

    @property
    def side(self) -> str:
        return SIDE_LEFT if self.camera_x < 0.0 else SIDE_RIGHT


@dataclass
class _LostInfo:
    com_frame: int
    com: np.ndarray
    velocity: np.ndarray
    exit_camera: int
    exit_side: str


def _velocity_conditions(va, vb, params: FusionParams) -> dict[str, bool]:
    """Angle and magnitude checks; vacuous when either velocity is unknown."""
    if va is None or vb is None:
        return {"velocity_angle": True, "velocity_magnitude": True}
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    magnitude_ok = abs(na - nb) < params.velocity_magnitude_tolerance
    if na < NEAR_STATIONARY_SPEED and nb < NEAR_STATIONARY_SPEED:
        return {"velocity_angle": True, "velocity_magnitude": magnitude_ok}
    if na < 1e-12 or nb < 1e-12:
        return {"velocity_angle": False, "velocity_magnitude": magnitude_ok}
    cos_angle = float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))
    angle_ok = math.degrees(math.acos(cos_angle)) < params.velocity_angle_threshold_deg
    return {"velocity_angle": angle_ok, "velocity_magnitude": magnitude_ok}


def match_candidates(
    output: OutputSkeleton, com, velocity, params: FusionParams
) -> tuple[bool, dict[str, bool]]:
    """Evaluate the merge conditions between an output and one observation.

    com is the observation's center of mass in the common frame; velocity is
    its per-frame displacement, or None while its history is too short, in
    which case the velocity conditions are vacuously satisfied.
    """
    com = np.asarray(com, dtype=np.float64)
    distance = float(np.linalg.norm(com - np.asarray(output.center_of_mass)))
    conditions = {"com_distance": distance < params.com_distance_threshold}
    output_velocity = output.velocity if len(output.com_history) >= 2 else None
    conditions.update(_velocity_conditions(velocity, output_velocity, params))
    return all(conditions.values()), conditions


def average_joints(skeletons, params: FusionParams) -> tuple[Joint, ...]:
    """Fuse joints across contributors with confidence gating.

    Per joint kind, estimates at or above the confidence floor are averaged
    (fused confidence = their mean); when none clears the floor the single
    highest-confidence estimate passes through, still flagged low.
    """
    fused = []
    for kind in JointKind:
        entries = [j for skel in skeletons for j in skel.joints if j.kind == kind]
        if not entries:
            continue
        good = [j for j in entries if j.confidence >= params.joint_confidence_floor]
        if good:
            pos = np.mean([j.position for j in good], axis=0)
            conf = float(np.mean([j.confidence for j in good]))
        else:
            best = max(entries, key=lambda j: j.confidence)
            pos = np.asarray(best.position)
            conf = best.confidence
        fused.append(Joint(kind, (float(pos[0]), float(pos[1]), float(pos[2])), conf))
    return tuple(fused)


def build_side_map(plan, camera_ids) -> dict[tuple[int, str], tuple[tuple[int, str], ...]]:
    """Expand a layout plan's side links into a camera-id keyed handoff table.

    camera_ids maps placement index to the deployed camera id. The table is
    symmetric: exiting camera A on side s may re-enter at any listed pair.
    """
    table: dict[tuple[int, str], set] = {}
    for index_a, side_a, index_b, side_b in plan.side_links:
        a = (camera_ids[index_a], side_a)
        b = (camera_ids[index_b], side_b)
        table.setdefault(a, set()).add(b)
        table.setdefault(b, set()).add(a)
    return {key: tuple(sorted(val)) for key, val in table.items()}


class SkeletonFusion:
    """Single-owner tracker; call ingest_frame once per tick.

    calibrations maps camera_id to its camera-to-common-frame transform.
    side_map, when given, restricts handoff to (camera, side) pairs listed
    for the exit (camera, side); without it the side condition is waived.
    """

    def __init__(self, calibrations: dict, params: FusionParams | None = None,
                 side_map: dict | None = None):
        self.calibrations = dict(calibrations)
        self.params = params or FusionParams()
        self.side_map = side_map
        self.frame_index = -1
        self.outputs: dict[int, OutputSkeleton] = {}
        self.link_table: dict[tuple[int, int], int] = {}
        self.pending_matches: dict[tuple[tuple[int, int], int], int] = {}
        self._next_output_id = 1
        self._pending_age: dict[int, int] = {}
        self._lost_info: dict[int, _LostInfo] = {}
        self._input_history: dict[tuple[int, int], deque] = {}
        self._last_seen: dict[tuple[int, int], int] = {}
        self._last_camera_x: dict[tuple[int, int], float] = {}

    # -- small helpers -----------------------------------------------------

    def _track_velocity(self, key) -> np.ndarray | None:
        hist = self._input_history.get(key)
        if hist is None or len(hist) < 2:
            return None
        f0, c0 = hist[0]
        f1, c1 = hist[-1]
        if f1 <= f0:
            return None
        return (np.asarray(c1, dtype=np.float64) - np.asarray(c0, dtype=np.float64)) / (f1 - f0)

    def _forget_track(self, key) -> None:
        self._input_history.pop(key, None)
        self._last_seen.pop(key, None)
        self._last_camera_x.pop(key, None)
        for pair in [p for p in self.pending_matches if p[0] == key]:
            del self.pending_matches[pair]

    def _delete_output(self, output_id: int) -> None:
        self.outputs.pop(output_id, None)
        self._pending_age.pop(output_id, None)
        self._lost_info.pop(output_id, None)
        for pair in [p for p in self.pending_matches if p[1] == output_id]:
            del self.pending_matches[pair]

    def _drop_link(self, key) -> None:
        output_id = self.link_table.pop(key, None)
        if output_id is None:
            return
        out = self.outputs.get(output_id)
        if out is None:
            return
        if key in out.contributors:
            out.contributors.remove(key)
        if out.contributors:
            return
        if out.state is TrackState.CONFIRMED:
            out.state = TrackState.LOST
            out.lost_age = 0
            if out.com_history:
                com_frame = out.com_history[-1][0]
            else:
                com_frame = self.frame_index
            side = SIDE_LEFT if self._last_camera_x.get(key, 0.0) < 0.0 else SIDE_RIGHT
            self._lost_info[output_id] = _LostInfo(
                com_frame=com_frame,
                com=np.asarray(out.center_of_mass, dtype=np.float64),
                velocity=np.asarray(out.velocity, dtype=np.float64),
                exit_camera=key[0],
                exit_side=side,
            )
            for pair in [p for p in self.pending_matches if p[1] == output_id]:
                del self.pending_matches[pair]
        else:
            # A pending output with no contributors has no evidence left.
            self._delete_output(output_id)

    def _link(self, key, output_id: int) -> None:
        self.link_table[key] = output_id
        self.outputs[output_id].contributors.append(key)
        for pair in [p for p in self.pending_matches if p[0] == key]:
            del self.pending_matches[pair]

    def _spawn(self, key, obs: _Observation, frame: int) -> OutputSkeleton:
        out = OutputSkeleton(
            output_id=self._next_output_id,
            com_history=deque(maxlen=self.params.history_capacity),
        )
        self._next_output_id += 1
        out.com_history.append((frame, tuple(obs.com)))
        self.outputs[out.output_id] = out
        self._pending_age[out.output_id] = 0
        self._link(key, out.output_id)
        return out

    def set_label(self, output_id: int, text: str) -> None:
        if output_id not in self.outputs:
            raise KeyError(f"no output skeleton {output_id}")
        self.outputs[output_id].label = text

    def extrapolated_com(self, output_id: int) -> tuple[float, float, float]:
        """Current best position; lost outputs extrapolate from their history."""
        out = self.outputs[output_id]
        info = self._lost_info.get(output_id)
        if out.state is not TrackState.LOST or info is None:
            return out.center_of_mass
        delta = self.frame_index - info.com_frame
        com = info.com + info.velocity * delta
        return (float(com[0]), float(com[1]), float(com[2]))

    def trace_lines(self) -> list[str]:
        """One structured line per live output for the current frame."""
        lines = []
        for output_id in sorted(self.outputs):
            out = self.outputs[output_id]
            x, y, z = self.extrapolated_com(output_id)
            lines.append(
                f"{self.frame_index} {output_id} {out.state.label} "
                f"{out.label or '-'} {x:.3f} {y:.3f} {z:.3f} {len(out.contributors)}"
            )
        return lines

    # -- handoff -----------------------------------------------------------

    def _try_handoff(self, key, obs: _Observation, frame: int):
        """Match an unlinked observation against lost outputs.

        Returns (matched output_id or None, whether some lost output is
        within the distance gate). The latter defers spawning while the
        observation's own velocity history is still warming up.
        """
        velocity = self._track_velocity(key)
        defer = False
        best = None
        for output_id, info in self._lost_info.items():
            out = self.outputs.get(output_id)
            if out is None or out.state is not TrackState.LOST:
                continue
            delta = frame - info.com_frame
            target = info.com + info.velocity * delta
            distance = float(np.linalg.norm(obs.com - target))
            if distance >= self.params.com_distance_threshold:
                continue
            if velocity is None:
                # In range but the observation can't prove its velocity yet;
                # hold off spawning so the decision happens with evidence.
                defer = True
                continue
            conditions = _velocity_conditions(velocity, info.velocity, self.params)
            if not all(conditions.values()):
                continue
            if self.side_map is not None:
                allowed = self.side_map.get((info.exit_camera, info.exit_side), ())
                if (key[0], obs.side) not in allowed:
                    continue
            if best is None or distance < best[0]:
                best = (distance, output_id)
        if best is None:
            return None, defer
        return best[1], defer

    # -- main entry point ----------------------------------------------------

    def ingest_frame(self, inputs: dict) -> list[OutputSkeleton]:
        """Advance one frame with per-camera skeleton lists; returns outputs.

        inputs maps camera_id to the skeletons that camera reported this
        tick; an empty list is positive evidence that its users are gone,
        while an absent camera leaves its links untouched until stale.
        """
        self.frame_index += 1
        frame = self.frame_index
        params = self.params

        # (1) rotate every observation into the common frame
        observations: dict[tuple[int, int], _Observation] = {}
        for camera_id in sorted(inputs):
            if camera_id not in self.calibrations:
                raise MissingCalibrationError(f"camera {camera_id} has no calibration")
            calib = self.calibrations[camera_id]
            for skel in sorted(inputs[camera_id], key=lambda s: s.local_user_id):
                if skel.camera_id != camera_id:
                    raise ValueError(
                        f"skeleton tagged camera {skel.camera_id} listed under {camera_id}"
                    )
                moved = calib.apply(skel.joint_positions())
                joints = tuple(
                    Joint(j.kind, (float(p[0]), float(p[1]), float(p[2])), j.confidence)
                    for j, p in zip(skel.joints, moved)
                )
                common = InputSkeleton(camera_id, skel.local_user_id, joints)
                observations[(camera_id, skel.local_user_id)] = _Observation(
                    skeleton=common,
                    com=np.asarray(common.center_of_mass, dtype=np.float64),
                    camera_x=skel.center_of_mass[0],
                )

        # (2) negative evidence and staleness on existing links
        reporting = set(inputs)
        for key in list(self.link_table):
            vanished = key[0] in reporting and key not in observations
            stale = frame - self._last_seen.get(key, frame) > params.lost_retention
            if vanished or stale:
                self._drop_link(key)
                self._forget_track(key)
        for key in list(self._input_history):
            if key[0] in reporting and key not in observations:
                self._forget_track(key)

        # (3) per-input track histories drive the velocity conditions
        for key, obs in observations.items():
            hist = self._input_history.setdefault(key, deque(maxlen=params.history_capacity))
            hist.append((frame, tuple(obs.com)))
            self._last_seen[key] = frame
            self._last_camera_x[key] = obs.camera_x

        # (4) unlinked observations: accumulate matches, hand off, or spawn
        fresh_matches: dict[tuple[tuple[int, int], int], int] = {}
        for key in sorted(k for k in observations if k not in self.link_table):
            obs = observations[key]
            velocity = self._track_velocity(key)
            satisfied: list[tuple[float, int]] = []
            plausible_existing = False
            for output_id, out in self.outputs.items():
                if out.state is TrackState.LOST:
                    continue
                if any(c[0] == key[0] for c in out.contributors):
                    continue
                ok, conditions = match_candidates(out, obs.com, velocity, params)
                if conditions["com_distance"]:
                    plausible_existing = True
                if ok:
                    distance = float(
                        np.linalg.norm(obs.com - np.asarray(out.center_of_mass))
                    )
                    satisfied.append((distance, output_id))
            joined = False
            for distance, output_id in sorted(satisfied):
                pair = (key, output_id)
                count = self.pending_matches.get(pair, 0) + 1
                if count >= params.confirmation_window and not joined:
                    out = self.outputs[output_id]
                    if not any(c[0] == key[0] for c in out.contributors):
                        self._link(key, output_id)
                        joined = True
                        continue
                fresh_matches[pair] = count
            if joined:
                for pair in [p for p in fresh_matches if p[0] == key]:
                    del fresh_matches[pair]
                continue
            handoff_id, plausible_lost = self._try_handoff(key, obs, frame)
            if handoff_id is not None:
                out = self.outputs[handoff_id]
                out.state = TrackState.CONFIRMED
                out.lost_age = 0
                self._lost_info.pop(handoff_id, None)
                self._link(key, handoff_id)
                continue
            if not plausible_existing and not plausible_lost:
                self._spawn(key, obs, frame)
        for pair in [p for p in self.pending_matches if p not in fresh_matches]:
            # A frame that fails the conditions breaks the consecutive run.
            if pair[0] in observations and pair[0] not in self.link_table:
                del self.pending_matches[pair]
        self.pending_matches.update(fresh_matches)

        # (5) lifecycle: confirmation, loss aging, deletion
        for output_id in list(self.outputs):
            out = self.outputs[output_id]
            if not out.contributors:
                if out.state is TrackState.LOST:
                    out.lost_age += 1
                    if out.lost_age > params.lost_retention:
                        self._delete_output(output_id)
                else:
                    self._delete_output(output_id)
                continue
            observed = any(k in observations for k in out.contributors)
            if out.state is TrackState.PENDING and observed:
                self._pending_age[output_id] = self._pending_age.get(output_id, 0) + 1
                if self._pending_age[output_id] >= params.confirmation_window:
                    out.state = TrackState.CONFIRMED
                    del self._pending_age[output_id]

        # (6) recompute fused joints and extend the com history
        for out in self.outputs.values():
            present = [
                observations[k].skeleton for k in out.contributors if k in observations
            ]
            if not present:
                continue
            out.joints = average_joints(present, params)
            com = compute_center_of_mass(out.joints, params.joint_confidence_floor)
            if not out.com_history or out.com_history[-1][0] != frame:
                out.com_history.append((frame, com))

        return [self.outputs[oid] for oid in sorted(self.outputs)]
