"""Camera and pose primitives: similarity transforms, pinhole projection.

Conventions used throughout the package:
  - Camera frame: x right, y down, z forward (camera looks along +z).
  - Pixel coordinates (u, v): u rightward, v downward, origin at the
    top-left pixel center, so integer (u, v) are pixel centers.
  - Intrinsics are zero-skew pinhole (no distortion).
  - A pose maps normalized object coordinates q into the camera frame as
    X = s * R @ q + t, with s in meters per NOCS unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMALITY_TOL = 1e-9
DEPTH_EPS = 1e-9


class NonPositiveDepth(ValueError):
    """Point lies behind (or numerically on) the camera plane."""


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    return v


@dataclass(frozen=True)
class Rotation:
    """A proper rotation: orthonormal 3x3 matrix with determinant +1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("rotation matrix must be finite")
        err = np.abs(m.T @ m - np.eye(3)).max()
        if err > ORTHONORMALITY_TOL:
            raise ValueError(f"matrix is not orthonormal (max residual {err:.3g})")
        d = np.linalg.det(m)
        if abs(d - 1.0) > ORTHONORMALITY_TOL:
            raise ValueError(f"matrix determinant {d:.12g} is not +1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.eye(3))

    @staticmethod
    def from_axis_angle(axis, angle_rad: float) -> "Rotation":
        """Rodrigues formula; ``axis`` need not be unit length."""
        a = _as_vec3(axis)
        n = np.linalg.norm(a)
        if n == 0.0:
            raise ValueError("rotation axis must be nonzero")
        a = a / n
        kx = skew(a)
        m = np.eye(3) + np.sin(angle_rad) * kx + (1.0 - np.cos(angle_rad)) * (kx @ kx)
        return Rotation(project_to_rotation(m))

    @staticmethod
    def rot_x(angle_rad: float) -> "Rotation":
        return Rotation.from_axis_angle((1.0, 0.0, 0.0), angle_rad)

    @staticmethod
    def rot_y(angle_rad: float) -> "Rotation":
        return Rotation.from_axis_angle((0.0, 1.0, 0.0), angle_rad)

    @staticmethod
    def rot_z(angle_rad: float) -> "Rotation":
        return Rotation.from_axis_angle((0.0, 0.0, 1.0), angle_rad)

    @staticmethod
    def random(rng: np.random.Generator) -> "Rotation":
        """Uniform over SO(3) via normalized quaternion."""
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        m = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        return Rotation(project_to_rotation(m))

    def apply(self, pts) -> np.ndarray:
        """Rotate a 3-vector or an (N, 3) array of points."""
        p = np.asarray(pts, dtype=float)
        return p @ self.matrix.T

    def compose(self, other: "Rotation") -> "Rotation":
        """self after other: (self.compose(other)).apply(x) == self.apply(other.apply(x))."""
        return Rotation(project_to_rotation(self.matrix @ other.matrix))

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T.copy())


def skew(v) -> np.ndarray:
    """Skew-symmetric cross-product matrix: skew(v) @ w == cross(v, w)."""
    x, y, z = _as_vec3(v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest proper rotation to ``m`` (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


@dataclass(frozen=True)
class Pose:
    """Similarity transform q -> s * R @ q + t (NOCS units to meters)."""

    s: float
    R: Rotation
    t: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.s) and self.s > 0):
            raise ValueError(f"scale must be positive and finite, got {self.s}")
        t = _as_vec3(self.t)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(1.0, Rotation.identity(), np.zeros(3))

    def apply(self, q) -> np.ndarray:
        """Map NOCS point(s) into the camera frame: s * R @ q + t."""
        return self.s * self.R.apply(q) + self.t

    def invert_point(self, x) -> np.ndarray:
        """Camera-frame point(s) back to NOCS: R^T (x - t) / s."""
        p = np.asarray(x, dtype=float)
        return (p - self.t) @ self.R.matrix / self.s


@dataclass(frozen=True)
class CameraIntrinsics:
    """Zero-skew pinhole intrinsics; principal point may lie outside the image (crops)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


# Pixels and NOCS coordinates are plain length-2 / length-3 arrays; the
# dedicated classes above exist where invariants need enforcing.


def transform_nocs_to_camera(q, pose: Pose) -> np.ndarray:
    """Camera-frame position of NOCS point q: s * R @ q + t."""
    return pose.apply(_as_vec3(q))


def project_camera_point(x, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole-project a camera-frame point; raises NonPositiveDepth for z <= 1e-9."""
    p = _as_vec3(x)
    z = p[2]
    if z <= DEPTH_EPS:
        raise NonPositiveDepth(f"point depth {z:.3g} m is not in front of the camera")
    return np.array([K.fx * p[0] / z + K.cx, K.fy * p[1] / z + K.cy])


def project_camera_points(points, K: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection of (N, 3) camera-frame points with positive depth."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    z = p[:, 2]
    if np.any(z <= DEPTH_EPS):
        raise NonPositiveDepth("at least one point is not in front of the camera")
    return np.stack([K.fx * p[:, 0] / z + K.cx, K.fy * p[:, 1] / z + K.cy], axis=1)


def project_nocs_point(q, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Project a NOCS point through pose and intrinsics to (u, v) pixels."""
    return project_camera_point(pose.apply(_as_vec3(q)), K)


def pixel_backproject(p, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point at the given depth along the ray through pixel (u, v)."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    u, v = np.asarray(p, dtype=float).reshape(2)
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])


def pixel_ray_direction(p, K: CameraIntrinsics) -> np.ndarray:
    """Unit direction of the camera ray through pixel (u, v)."""
    d = pixel_backproject(p, 1.0, K)
    return d / np.linalg.norm(d)
