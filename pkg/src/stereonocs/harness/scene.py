"""Scene sampling: place a random category instance in front of a rectified
stereo rig so it is fully visible in both views, and render its four NOCS
maps (left/right x front/back).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import CameraIntrinsics, Pose, Rotation, project_camera_points
from ..nocs import (
    NocsMap,
    NocsNormalization,
    TriangleMesh,
    normalize_mesh_to_nocs,
    render_front_back_nocs,
)
from ..stereo import StereoRig
from .meshes import CATEGORIES, generate_parametric_mesh


class FrustumPlacementFailed(RuntimeError):
    """Could not place the object inside both view frusta within the retry budget."""


@dataclass(frozen=True)
class SceneConfig:
    category: str = "bottle"
    image_width: int = 224
    image_height: int = 224
    focal_px: float = 600.0
    baseline_m: float = 0.06
    distance_range: tuple[float, float] = (0.4, 1.2)
    yaw_range_deg: tuple[float, float] = (-180.0, 180.0)
    pitch_range_deg: tuple[float, float] = (-25.0, 25.0)
    roll_range_deg: tuple[float, float] = (-15.0, 15.0)
    margin_px: float = 10.0
    max_retries: int = 100

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if not (self.distance_range[0] > 0 and self.distance_range[1] >= self.distance_range[0]):
            raise ValueError("distance range must be positive and ordered")
        if self.image_width < 8 or self.image_height < 8:
            raise ValueError("image too small")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.focal_px,
            fy=self.focal_px,
            cx=(self.image_width - 1) / 2.0,
            cy=(self.image_height - 1) / 2.0,
            width=self.image_width,
            height=self.image_height,
        )

    def rig(self) -> StereoRig:
        K = self.intrinsics()
        return StereoRig.rectified(K, K, self.baseline_m)


@dataclass(frozen=True)
class Scene:
    category: str
    mesh_nocs: TriangleMesh
    normalization: NocsNormalization
    pose: Pose  # NOCS -> left camera
    rig: StereoRig
    nocs_extents: np.ndarray  # (3,) tight NOCS bbox extents of the instance

    def right_pose(self) -> Pose:
        """Pose composing the object into the right camera frame."""
        R_right = Rotation(self.rig.R.matrix @ self.pose.R.matrix)
        t_right = self.rig.R.matrix @ self.pose.t + self.rig.t
        return Pose(self.pose.s, R_right, t_right)


def _sample_rotation(cfg: SceneConfig, rng: np.random.Generator) -> Rotation:
    """Object rotation: yaw about the object's up axis, then flip upright into
    the y-down camera frame, then limited pitch and roll in camera axes."""
    yaw = np.radians(rng.uniform(*cfg.yaw_range_deg))
    pitch = np.radians(rng.uniform(*cfg.pitch_range_deg))
    roll = np.radians(rng.uniform(*cfg.roll_range_deg))
    upright = Rotation.rot_x(np.pi)
    return Rotation.rot_z(roll).compose(Rotation.rot_x(pitch)).compose(upright).compose(Rotation.rot_y(yaw))


def _corners_of_unit_cube_bbox(mesh: TriangleMesh) -> np.ndarray:
    lo, hi = mesh.bbox()
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def _fully_visible(corners_nocs: np.ndarray, pose: Pose, scene: SceneConfig, rig: StereoRig) -> bool:
    m = scene.margin_px
    W, H = scene.image_width, scene.image_height
    pts_left = pose.apply(corners_nocs)
    if np.any(pts_left[:, 2] <= 0.05):
        return False
    pts_right = pts_left @ rig.R.matrix.T + rig.t
    if np.any(pts_right[:, 2] <= 0.05):
        return False
    for pts, K in ((pts_left, rig.K_left), (pts_right, rig.K_right)):
        uv = project_camera_points(pts, K)
        if np.any(uv[:, 0] < m) or np.any(uv[:, 0] > W - 1 - m):
            return False
        if np.any(uv[:, 1] < m) or np.any(uv[:, 1] > H - 1 - m):
            return False
    return True


def sample_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    """Sample an instance and a pose with the object fully inside both frusta.

    The pose scale is the instance's metric bbox diagonal (the NOCS
    normalization diagonal). The viewing distance is lower-bounded by the
    distance at which the object still fits inside the image with margins,
    which couples to the sampled instance size.
    """
    mesh_metric = generate_parametric_mesh(cfg.category, rng=rng)
    mesh_nocs, norm = normalize_mesh_to_nocs(mesh_metric)
    corners = _corners_of_unit_cube_bbox(mesh_nocs)
    extents = mesh_nocs.bbox()[1] - mesh_nocs.bbox()[0]
    rig = cfg.rig()
    K = rig.K_left

    s = norm.diagonal
    span_px = min(cfg.image_width, cfg.image_height) - 1 - 2 * cfg.margin_px
    d_min_visible = 1.1 * cfg.focal_px * s / max(span_px, 1.0)
    d_lo = max(cfg.distance_range[0], d_min_visible)
    d_hi = max(cfg.distance_range[1], d_lo * 1.2)

    for _ in range(cfg.max_retries):
        R = _sample_rotation(cfg, rng)
        depth = rng.uniform(d_lo, d_hi)
        u = rng.uniform(cfg.margin_px * 3, cfg.image_width - 1 - cfg.margin_px * 3)
        v = rng.uniform(cfg.margin_px * 3, cfg.image_height - 1 - cfg.margin_px * 3)
        center_cam = depth * np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
        t = center_cam - s * (R.matrix @ np.array([0.5, 0.5, 0.5]))
        pose = Pose(s, R, t)
        if _fully_visible(corners, pose, cfg, rig):
            return Scene(cfg.category, mesh_nocs, norm, pose, rig, extents)
    raise FrustumPlacementFailed(f"no valid placement in {cfg.max_retries} tries")


def render_scene_nocs(scene: Scene) -> tuple[NocsMap, NocsMap, NocsMap, NocsMap]:
    """(left front, left back, right front, right back) maps of the scene."""
    lf, lb = render_front_back_nocs(scene.mesh_nocs, scene.pose, scene.rig.K_left)
    rf, rb = render_front_back_nocs(scene.mesh_nocs, scene.right_pose(), scene.rig.K_right)
    return lf, lb, rf, rb
