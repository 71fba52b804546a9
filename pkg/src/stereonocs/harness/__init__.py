"""Synthetic benchmark harness: parametric meshes, scene sampling, NOCS
rendering, prediction-noise injection, experiment orchestration, and the CLI.
"""

from .meshes import (
    BottleParams,
    CupParams,
    InvalidParams,
    MugParams,
    edge_audit,
    generate_parametric_mesh,
    is_watertight,
)
from .noise import NoiseModel, corrupt
from .scene import FrustumPlacementFailed, Scene, SceneConfig, render_scene_nocs, sample_scene

__all__ = [
    "BottleParams",
    "CupParams",
    "MugParams",
    "InvalidParams",
    "generate_parametric_mesh",
    "edge_audit",
    "is_watertight",
    "NoiseModel",
    "corrupt",
    "Scene",
    "SceneConfig",
    "FrustumPlacementFailed",
    "sample_scene",
    "render_scene_nocs",
]
