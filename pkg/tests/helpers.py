"""Shared driving and analysis helpers for multi-camera tracking tests.

run_scenario feeds per-camera simulated skeleton streams through the fusion
tracker frame by frame and records a compact snapshot per frame, so tests can
assert on confirmed counts, label persistence, joint provenance, and identity
stability against the simulator's ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from depthgrid.fusion import FusionParams, SkeletonFusion
from depthgrid.model import TrackState
from depthgrid.simsensor.scene import Scene, human_joints_world
from depthgrid.simsensor.sensor import SkeletonSensor


@dataclass(frozen=True)
class OutputSnapshot:
    output_id: int
    state: TrackState
    label: str
    com: tuple[float, float, float]
    contributors: tuple[tuple[int, int], ...]
    joints: dict  # JointKind -> (position tuple, confidence)


@dataclass(frozen=True)
class FrameSnapshot:
    frame: int
    outputs: tuple[OutputSnapshot, ...]
    # (camera_id, local_user_id) -> {JointKind: (common-frame position, conf)}
    inputs: dict
    links: dict  # (camera_id, local_user_id) -> output_id

    @property
    def confirmed(self) -> tuple[OutputSnapshot, ...]:
        return tuple(o for o in self.outputs if o.state is TrackState.CONFIRMED)


def run_scenario(scene: Scene, frames: int, *, seed: int | None = None,
                 params: FusionParams | None = None, side_map: dict | None = None,
                 edit=None, label_prefix: str = "person") -> list[FrameSnapshot]:
    """Drive sensors plus fusion for `frames` ticks and snapshot each one.

    seed overrides the scene seed for repeat runs. edit, when given, is
    called as edit(frame, inputs_dict) after extraction and before ingest
    and must return the (possibly rewritten) inputs dict; it models script
    mutations such as covered lenses or displaced reappearances.
    """
    if seed is not None:
        scene = replace(scene, seed=seed)
    sensors = {rig.camera_id: SkeletonSensor(scene, rig) for rig in scene.cameras}
    calib = scene.rig_transforms()
    fusion = SkeletonFusion(calib, params or FusionParams(), side_map=side_map)
    labeled = 0
    trace: list[FrameSnapshot] = []
    for frame in range(frames):
        inputs = {cid: sensor.extract(frame) for cid, sensor in sensors.items()}
        if edit is not None:
            inputs = edit(frame, inputs)
        outputs = fusion.ingest_frame(inputs)
        for out in outputs:
            if out.state is TrackState.CONFIRMED and not out.label:
                labeled += 1
                fusion.set_label(out.output_id, f"{label_prefix}-{labeled}")
        common_inputs = {}
        for cid, skels in inputs.items():
            moved = calib[cid]
            for skel in skels:
                pts = moved.apply(skel.joint_positions())
                common_inputs[(cid, skel.local_user_id)] = {
                    j.kind: (tuple(p), j.confidence)
                    for j, p in zip(skel.joints, pts)
                }
        snaps = tuple(
            OutputSnapshot(
                output_id=out.output_id,
                state=out.state,
                label=out.label,
                com=fusion.extrapolated_com(out.output_id),
                contributors=tuple(out.contributors),
                joints={j.kind: (j.position, j.confidence) for j in out.joints},
            )
            for out in outputs
        )
        trace.append(FrameSnapshot(frame, snaps, common_inputs, dict(fusion.link_table)))
    return trace


def true_coms(scene: Scene, frame: int) -> dict[int, np.ndarray]:
    """Ground-truth plain-mean joint centers per human id at a frame."""
    t = frame / scene.fps
    return {
        h.human_id: human_joints_world(h, t).mean(axis=0) for h in scene.humans
    }


def confirmed_counts(trace) -> list[int]:
    return [len(snap.confirmed) for snap in trace]


def first_frame_with_confirmed(trace, count: int) -> int | None:
    for snap in trace:
        if len(snap.confirmed) >= count:
            return snap.frame
    return None


def assign_to_truth(scene: Scene, snap: FrameSnapshot) -> dict[int, int]:
    """Map each confirmed output to the nearest ground-truth human."""
    truth = true_coms(scene, snap.frame)
    mapping = {}
    for out in snap.confirmed:
        best = min(truth, key=lambda hid: np.linalg.norm(truth[hid] - np.asarray(out.com)))
        mapping[out.output_id] = best
    return mapping


def identity_errors(scene: Scene, trace, start: int) -> list[str]:
    """Swap/duplication complaints from `start` on; empty means clean."""
    stable: dict[int, int] = {}
    problems = []
    for snap in trace[start:]:
        mapping = assign_to_truth(scene, snap)
        humans = list(mapping.values())
        if len(set(humans)) != len(humans):
            problems.append(f"frame {snap.frame}: two outputs share one human")
        for output_id, human_id in mapping.items():
            previous = stable.setdefault(output_id, human_id)
            if previous != human_id:
                problems.append(
                    f"frame {snap.frame}: output {output_id} moved "
                    f"from human {previous} to {human_id}"
                )
    return problems
