"""Stereo NOCS pose estimation core.

Geometric pipeline for category-level 6D pose from stereo normalized object
coordinate (NOCS) maps: front/back-view map rendering, cross-view NOCS
matching, decoupled scale / PnP / depth-rescale pose recovery, the joint
similarity-fit baseline, stereo attention fusion math, training losses with
analytic gradients, category-level metrics, and a synthetic benchmark
harness.
"""

from .geometry import (
    CameraIntrinsics,
    NonPositiveDepth,
    Pose,
    Rotation,
    pixel_backproject,
    project_nocs_point,
    transform_nocs_to_camera,
)
from .nocs import (
    NocsMap,
    NocsNormalization,
    TriangleMesh,
    normalize_mesh_to_nocs,
    ray_mesh_intersections,
    read_nocs_map,
    read_obj,
    render_back_nocs,
    render_front_back_nocs,
    render_front_nocs,
    write_nocs_map,
    write_obj,
)
from .solver import (
    DecoupledConfig,
    PoseEstimate,
    RansacPnPConfig,
    estimate_pose_decoupled,
    estimate_pose_joint,
    fit_similarity_3d3d,
    rescale_translation,
    solve_pnp_ransac,
)
from .stereo import (
    CorrespondencePair,
    CorrespondenceSet,
    StereoRig,
    disparity_depth,
    epipolar_residual,
    estimate_scale,
    match_nocs_maps,
    triangulate,
)

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "NonPositiveDepth",
    "Pose",
    "Rotation",
    "pixel_backproject",
    "project_nocs_point",
    "transform_nocs_to_camera",
    "NocsMap",
    "NocsNormalization",
    "TriangleMesh",
    "normalize_mesh_to_nocs",
    "ray_mesh_intersections",
    "read_nocs_map",
    "read_obj",
    "render_back_nocs",
    "render_front_back_nocs",
    "render_front_nocs",
    "write_nocs_map",
    "write_obj",
    "StereoRig",
    "CorrespondencePair",
    "CorrespondenceSet",
    "match_nocs_maps",
    "disparity_depth",
    "triangulate",
    "estimate_scale",
    "epipolar_residual",
    "RansacPnPConfig",
    "DecoupledConfig",
    "PoseEstimate",
    "solve_pnp_ransac",
    "rescale_translation",
    "fit_similarity_3d3d",
    "estimate_pose_decoupled",
    "estimate_pose_joint",
    "__version__",
]
