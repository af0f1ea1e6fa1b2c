"""Procedural multi-object scenes with injected anomalies, rendering and dataset I/O."""

from .anomalies import ANOMALY_TYPES, AnomalyType, inject_anomaly
from .cameras import Camera, CameraConfig, look_at, sample_cameras
from .dataset import FORMAT_TAG, Scene, build_dataset, build_scene, read_dataset, write_dataset
from .render import RenderedView, render_scene, render_view
from .scenes import Instance, SceneConfig, SceneSpec, generate_scene, scene_seed
from .shapes import PrimitiveShape, sdf_eval

__all__ = [
    "ANOMALY_TYPES",
    "AnomalyType",
    "Camera",
    "CameraConfig",
    "FORMAT_TAG",
    "Instance",
    "PrimitiveShape",
    "RenderedView",
    "Scene",
    "SceneConfig",
    "SceneSpec",
    "build_dataset",
    "build_scene",
    "generate_scene",
    "inject_anomaly",
    "look_at",
    "read_dataset",
    "render_scene",
    "render_view",
    "sample_cameras",
    "scene_seed",
    "sdf_eval",
    "write_dataset",
]
