"""Category-level pose evaluation: oriented-box 3D IoU, symmetry-aware
rotation error, translation error, and threshold mAP aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import Pose, Rotation

CLIP_EPS = 1e-12
NOCS_CENTER = np.array([0.5, 0.5, 0.5])


class EmptyTrials(ValueError):
    """No trial records to aggregate."""


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray  # (3,) meters
    rotation: Rotation
    half_extents: np.ndarray  # (3,) meters

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        h = np.asarray(self.half_extents, dtype=float).reshape(3)
        if not np.all(h > 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def corners(self) -> np.ndarray:
        """(8, 3) corner coordinates; index bit k gives the sign of axis k."""
        signs = np.array([[(i >> k & 1) * 2 - 1 for k in range(3)] for i in range(8)], dtype=float)
        return self.center + (signs * self.half_extents) @ self.rotation.matrix.T

    def half_spaces(self) -> list[tuple[np.ndarray, float]]:
        """Six (normal, offset) pairs; inside means normal . x <= offset."""
        out = []
        for k in range(3):
            axis = self.rotation.matrix[:, k]
            c_proj = float(axis @ self.center)
            h = float(self.half_extents[k])
            out.append((axis, c_proj + h))
            out.append((-axis, -(c_proj - h)))
        return out

    def faces(self) -> list[np.ndarray]:
        """Six face polygons as (4, 3) corner loops."""
        c = self.corners()
        # Corner index bit k encodes the sign along local axis k.
        loops = []
        for k in range(3):
            for bit in (0, 1):
                ids = [i for i in range(8) if (i >> k & 1) == bit]
                a, b = (k + 1) % 3, (k + 2) % 3
                ids.sort(key=lambda i: (i >> a & 1, i >> b & 1))
                ids = [ids[0], ids[1], ids[3], ids[2]]  # grid order -> loop order
                loops.append(c[ids])
        return loops


def box_from_pose(pose: Pose, nocs_extents) -> OrientedBox:
    """Metric oriented box of the object's NOCS bounding box under a pose."""
    ext = np.asarray(nocs_extents, dtype=float).reshape(3)
    if not np.all(ext > 0):
        raise ValueError("extents must be positive")
    return OrientedBox(pose.apply(NOCS_CENTER), pose.R, pose.s * ext / 2.0)


def _clip_polygon(poly: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    """Keep the part of the polygon with normal . x <= offset."""
    if len(poly) == 0:
        return poly
    d = poly @ normal - offset
    keep = d <= CLIP_EPS
    out = []
    m = len(poly)
    for i in range(m):
        j = (i + 1) % m
        if keep[i]:
            out.append(poly[i])
            if not keep[j]:
                frac = d[i] / (d[i] - d[j])
                out.append(poly[i] + frac * (poly[j] - poly[i]))
        elif keep[j]:
            frac = d[i] / (d[i] - d[j])
            out.append(poly[i] + frac * (poly[j] - poly[i]))
    return np.array(out) if out else np.zeros((0, 3))


def _clipped_face_points(a: OrientedBox, b: OrientedBox) -> list[np.ndarray]:
    planes = b.half_spaces()
    pts = []
    for poly in a.faces():
        for normal, offset in planes:
            poly = _clip_polygon(poly, normal, offset)
            if len(poly) == 0:
                break
        if len(poly) > 0:
            pts.append(poly)
    return pts


def iou_3d(a: OrientedBox, b: OrientedBox) -> float:
    """Exact intersection-over-union of two oriented boxes.

    Each box's faces are clipped against the other's six half-spaces; the
    surviving polygon vertices span the intersection polytope, whose volume
    comes from its convex hull. Degenerate or empty intersections score 0.
    """
    pts = _clipped_face_points(a, b) + _clipped_face_points(b, a)
    if not pts:
        return 0.0
    cloud = np.vstack(pts)
    if len(cloud) < 4:
        return 0.0
    try:
        inter = float(ConvexHull(cloud).volume)
    except QhullError:
        return 0.0
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return min(inter / union, 1.0)


@dataclass(frozen=True)
class SymmetrySpec:
    """Rotational symmetry of a category in its canonical frame.

    kind 'none': no symmetry. 'continuous': any rotation about axis is an
    identity of the shape (bottles, cups). 'discrete': the n rotations by
    multiples of 2*pi/n about axis are identities.
    """

    kind: str = "none"
    axis: np.ndarray = None
    order: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "continuous", "discrete"):
            raise ValueError(f"unknown symmetry kind {self.kind!r}")
        axis = self.axis
        if axis is None:
            axis = np.array([0.0, 1.0, 0.0])
        axis = np.asarray(axis, dtype=float).reshape(3)
        n = np.linalg.norm(axis)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("symmetry axis must be a unit vector")
        if self.kind == "discrete" and self.order < 2:
            raise ValueError("discrete symmetry needs order >= 2")
        object.__setattr__(self, "axis", axis)

    @staticmethod
    def none() -> "SymmetrySpec":
        return SymmetrySpec("none")

    @staticmethod
    def continuous(axis=(0.0, 1.0, 0.0)) -> "SymmetrySpec":
        return SymmetrySpec("continuous", np.asarray(axis, dtype=float))

    @staticmethod
    def discrete(order: int, axis=(0.0, 1.0, 0.0)) -> "SymmetrySpec":
        return SymmetrySpec("discrete", np.asarray(axis, dtype=float), order)


def _geodesic_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    c = (np.trace(Ra @ Rb.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def rotation_error_deg(R_pred: Rotation, R_gt: Rotation, sym: SymmetrySpec = SymmetrySpec.none()) -> float:
    """Rotation error in degrees, quotiented by the category symmetry.

    none: geodesic distance on SO(3). continuous: the symmetry axis is the
    only pose-relevant direction, so the error is the angle between the two
    mapped axes (the closed-form minimum of the geodesic distance over all
    rotations of R_gt about the axis). discrete: minimum geodesic distance
    over the n symmetry group elements applied to R_gt.
    """
    if sym.kind == "none":
        return _geodesic_deg(R_pred.matrix, R_gt.matrix)
    if sym.kind == "continuous":
        a_pred = R_pred.matrix @ sym.axis
        a_gt = R_gt.matrix @ sym.axis
        c = np.clip(a_pred @ a_gt, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))
    best = np.inf
    for k in range(sym.order):
        Rk = Rotation.from_axis_angle(sym.axis, 2.0 * np.pi * k / sym.order)
        best = min(best, _geodesic_deg(R_pred.matrix, (R_gt.compose(Rk)).matrix))
    return best


def translation_error_m(t_pred, t_gt) -> float:
    return float(np.linalg.norm(np.asarray(t_pred, dtype=float) - np.asarray(t_gt, dtype=float)))


@dataclass(frozen=True)
class EvalReport:
    """Fractions of trials under the standard category-level thresholds."""

    map_3d_25: float
    map_3d_50: float
    map_10deg_5cm: float
    map_10deg_10cm: float
    trial_count: int

    def __post_init__(self):
        for v in (self.map_3d_25, self.map_3d_50, self.map_10deg_5cm, self.map_10deg_10cm):
            if not 0.0 <= v <= 1.0:
                raise ValueError("mAP values must lie in [0, 1]")

    def as_dict(self) -> dict[str, float]:
        return {
            "3D_25": self.map_3d_25,
            "3D_50": self.map_3d_50,
            "10deg_5cm": self.map_10deg_5cm,
            "10deg_10cm": self.map_10deg_10cm,
        }


def map_at_thresholds(trials, rot_threshold_deg: float = 10.0) -> EvalReport:
    """Aggregate (iou, rot_err_deg, trans_err_m) trial triples into an EvalReport.

    3D_k is the fraction of trials with IoU >= k/100; 10degXcm is the
    fraction with rotation error <= 10 degrees AND translation error <= X cm.
    Failed trials should be fed as (0, inf, inf) so they count against every
    threshold.
    """
    arr = np.asarray(list(trials), dtype=float)
    if arr.size == 0:
        raise EmptyTrials("no trials to aggregate")
    arr = arr.reshape(-1, 3)
    iou, rot, trans = arr[:, 0], arr[:, 1], arr[:, 2]
    n = len(arr)
    ok_rot = rot <= rot_threshold_deg
    return EvalReport(
        map_3d_25=float((iou >= 0.25).sum()) / n,
        map_3d_50=float((iou >= 0.50).sum()) / n,
        map_10deg_5cm=float((ok_rot & (trans <= 0.05)).sum()) / n,
        map_10deg_10cm=float((ok_rot & (trans <= 0.10)).sum()) / n,
        trial_count=n,
    )
