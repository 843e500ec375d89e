"""Synthetic depth-camera capture: scene scripting, rendering, and skeletons."""
from .scene import (
    CameraRig,
    HumanFigure,
    PostureKey,
    Scene,
    ScenePrimitive,
    Waypoint,
    human_joints_world,
    human_position_facing,
    load_scene,
    scene_from_dict,
    scene_to_dict,
    sit_fraction,
)
from .render import apply_interference, punch_interference_holes, render_frame
from .sensor import SkeletonSensor, ground_truth

__all__ = [name for name in dir() if not name.startswith("_")]
