"""Stereo rig geometry, NOCS map matching, triangulation, and scale recovery.

Rig convention: the left camera is the reference frame, and the extrinsics
map left-frame points into the right frame, x_r = R @ x_l + t. A rectified
rig has R = I and t = (-b, 0, 0) with baseline b > 0, which places the right
camera center at (+b, 0, 0) in left-camera coordinates and makes disparity
u_l - u_r positive for points in front of the rig.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CameraIntrinsics, Rotation, skew
from .nocs import NocsMap

RECTIFIED_TOL = 1e-9
DISPARITY_EPS = 1e-6  # pixels
PARALLEL_RAY_EPS = 1e-12


class ViewTagMismatch(ValueError):
    """The two maps being matched carry different view tags."""


class EmptyMask(ValueError):
    """A map has no masked-on pixels to match."""


class NotRectified(ValueError):
    """Operation requires a rectified rig (R = I, t = (-b, 0, 0))."""


class ZeroDisparity(ValueError):
    """Pixel separation is too small to convert to a finite depth."""


class ParallelRays(ValueError):
    """Triangulation rays are parallel; the midpoint is undefined."""


class InsufficientCorrespondences(ValueError):
    """Not enough (or not enough well-separated) matches for the estimate."""


@dataclass(frozen=True)
class StereoRig:
    """Calibrated two-camera rig; see module docstring for the convention."""

    K_left: CameraIntrinsics
    K_right: CameraIntrinsics
    R: Rotation  # left-to-right rotation
    t: np.ndarray  # (3,) left-to-right translation, meters

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("rig translation must be finite")
        if np.linalg.norm(t) < 1e-12:
            raise ValueError("rig translation must be nonzero")
        object.__setattr__(self, "t", t)

    @staticmethod
    def rectified(K_left: CameraIntrinsics, K_right: CameraIntrinsics, baseline: float) -> "StereoRig":
        if not baseline > 0:
            raise ValueError("baseline must be positive")
        return StereoRig(K_left, K_right, Rotation.identity(), np.array([-baseline, 0.0, 0.0]))

    @property
    def is_rectified(self) -> bool:
        r_ok = np.allclose(self.R.matrix, np.eye(3), atol=RECTIFIED_TOL)
        t_ok = abs(self.t[1]) <= RECTIFIED_TOL and abs(self.t[2]) <= RECTIFIED_TOL and self.t[0] < 0
        return bool(r_ok and t_ok)

    @property
    def baseline(self) -> float:
        """Distance between the two camera centers, ‖t‖."""
        return float(np.linalg.norm(self.t))

    def right_camera_center(self) -> np.ndarray:
        """Right camera center expressed in the left (reference) frame."""
        return -self.R.matrix.T @ self.t

    def left_to_right(self, x_left) -> np.ndarray:
        return self.R.apply(x_left) + self.t


@dataclass(frozen=True)
class CorrespondencePair:
    pixel_left: np.ndarray  # (2,) (u, v)
    pixel_right: np.ndarray  # (2,)
    nocs: np.ndarray  # (3,) shared canonical coordinate
    depth: float | None = None  # meters, filled after triangulation
    view: str | None = None


class CorrespondenceSet:
    """Matched left/right pixels with their shared NOCS coordinate.

    Stored as parallel arrays. The NOCS coordinate is the midpoint of the two
    matched map values; for exact maps the two values coincide and the
    midpoint is that value. One-to-one by construction of the matcher.

    Three per-pair diagnostics are carried when the set came from maps (all
    None for analytically built sets, whose values coincide exactly):
      mismatch   NOCS distance between the two matched map values;
      phase      signed column offset (pixels) of the left point's true
                 right-view projection relative to the matched right pixel,
                 recovered by projecting the value difference onto the right
                 map's row gradient (NaN where the gradient is unavailable);
      grad_norm  magnitude of that row gradient (NOCS units per pixel).
    """

    def __init__(
        self,
        pixels_left,
        pixels_right,
        nocs,
        view: str | None = None,
        depths=None,
        mismatch=None,
        phase=None,
        grad_norm=None,
    ):
        pl = np.asarray(pixels_left, dtype=float).reshape(-1, 2)
        pr = np.asarray(pixels_right, dtype=float).reshape(-1, 2)
        q = np.asarray(nocs, dtype=float).reshape(-1, 3)
        if not (pl.shape[0] == pr.shape[0] == q.shape[0]):
            raise ValueError("correspondence arrays must have equal length")
        self.pixels_left = pl
        self.pixels_right = pr
        self.nocs = q
        self.view = view
        self.depths = None if depths is None else np.asarray(depths, dtype=float).reshape(-1)
        self.mismatch = None if mismatch is None else np.asarray(mismatch, dtype=float).reshape(-1)
        self.phase = None if phase is None else np.asarray(phase, dtype=float).reshape(-1)
        self.grad_norm = None if grad_norm is None else np.asarray(grad_norm, dtype=float).reshape(-1)

    def __len__(self):
        return self.pixels_left.shape[0]

    def __getitem__(self, i) -> CorrespondencePair:
        d = None if self.depths is None else float(self.depths[i])
        return CorrespondencePair(self.pixels_left[i], self.pixels_right[i], self.nocs[i], d, self.view)

    def _fields(self, idx):
        take = lambda a: None if a is None else a[idx]
        return (take(self.depths), take(self.mismatch), take(self.phase), take(self.grad_norm))

    def subset(self, idx) -> "CorrespondenceSet":
        d, m, p, g = self._fields(idx)
        return CorrespondenceSet(self.pixels_left[idx], self.pixels_right[idx], self.nocs[idx], self.view, d, m, p, g)

    def with_depths(self, depths) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.pixels_left, self.pixels_right, self.nocs, self.view,
            depths, self.mismatch, self.phase, self.grad_norm,
        )


def _match_phase(map_right: NocsMap, px_r: np.ndarray, dq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed sub-pixel column offset of each match, from the right map's row gradient.

    Moving one column right changes the sampled NOCS value by the local row
    gradient g, so the value difference between the two matched pixels is
    about (true column - matched column) * g. Projecting onto g recovers that
    signed offset without touching the integer match itself. Returns
    (offset px, ‖g‖), NaN/0 where a horizontal neighbor is missing.
    """
    u = px_r[:, 0].astype(int)
    v = px_r[:, 1].astype(int)
    w = map_right.coords.shape[1]
    left_ok = (u > 0) & map_right.mask[v, np.clip(u - 1, 0, w - 1)]
    right_ok = (u < w - 1) & map_right.mask[v, np.clip(u + 1, 0, w - 1)]
    ok = left_ok & right_ok
    g = (
        map_right.coords[v, np.clip(u + 1, 0, w - 1)].astype(float)
        - map_right.coords[v, np.clip(u - 1, 0, w - 1)].astype(float)
    ) / 2.0
    gn2 = np.einsum("ij,ij->i", g, g)
    ok &= gn2 > 1e-18
    safe = np.where(gn2 > 0, gn2, 1.0)
    phase = np.where(ok, np.einsum("ij,ij->i", dq, g) / safe, np.nan)
    return phase, np.where(ok, np.sqrt(gn2), 0.0)


def match_nocs_maps(map_left: NocsMap, map_right: NocsMap, eps: float = 0.01) -> CorrespondenceSet:
    """Match pixels across views by mutual nearest neighbor in NOCS space.

    A pair is kept only when each pixel is the other's nearest neighbor and
    their NOCS distance is at most eps, which makes the matching one-to-one.
    Output order follows the left map's row-major pixel order, so results are
    deterministic for identical inputs.
    """
    if map_left.view != map_right.view:
        raise ViewTagMismatch(f"cannot match {map_left.view!r} against {map_right.view!r}")
    px_l, q_l = map_left.masked_pixels()
    px_r, q_r = map_right.masked_pixels()
    if len(q_l) == 0 or len(q_r) == 0:
        raise EmptyMask("both maps need at least one masked pixel")

    tree_r = cKDTree(q_r)
    d_lr, j_of_i = tree_r.query(q_l, k=1)
    tree_l = cKDTree(q_l)
    _, i_of_j = tree_l.query(q_r, k=1)

    i_all = np.arange(len(q_l))
    mutual = (i_of_j[j_of_i] == i_all) & (d_lr <= eps)
    i_sel = i_all[mutual]
    j_sel = j_of_i[mutual]
    # Mutual NN is one-to-one except under exact distance ties; keep the
    # first left pixel (row-major order) for any duplicated right pixel.
    _, first = np.unique(j_sel, return_index=True)
    keep = np.sort(first)
    i_sel, j_sel = i_sel[keep], j_sel[keep]
    mid = (q_l[i_sel] + q_r[j_sel]) / 2.0
    phase, grad_norm = _match_phase(map_right, px_r[j_sel], q_l[i_sel] - q_r[j_sel])
    return CorrespondenceSet(
        px_l[i_sel], px_r[j_sel], mid, view=map_left.view,
        mismatch=d_lr[i_sel], phase=phase, grad_norm=grad_norm,
    )


def disparity_depth(pair: CorrespondencePair, rig: StereoRig) -> float:
    """Depth of a matched pair on a rectified rig: d = f * b / ‖p_l - p_r‖.

    f is the left camera's horizontal focal length. On a rectified rig the
    matched pixels share a row, so the pixel separation is the horizontal
    disparity.
    """
    if not rig.is_rectified:
        raise NotRectified("disparity depth requires a rectified rig")
    sep = float(np.linalg.norm(np.asarray(pair.pixel_left, dtype=float) - np.asarray(pair.pixel_right, dtype=float)))
    if sep <= DISPARITY_EPS:
        raise ZeroDisparity(f"pixel separation {sep!r} px is too small")
    return rig.K_left.fx * rig.baseline / sep


def triangulate(pixel_left, pixel_right, rig: StereoRig) -> np.ndarray:
    """Midpoint triangulation of one pixel pair, in the left camera frame.

    Each pixel defines a ray from its camera center; the returned point is
    the midpoint of the shortest segment connecting the two rays.
    """
    return triangulate_batch(
        np.asarray(pixel_left, dtype=float).reshape(1, 2),
        np.asarray(pixel_right, dtype=float).reshape(1, 2),
        rig,
    )[0]


def triangulate_batch(pixels_left, pixels_right, rig: StereoRig) -> np.ndarray:
    """Vectorized midpoint triangulation; returns (N, 3) left-frame points."""
    pl = np.asarray(pixels_left, dtype=float).reshape(-1, 2)
    pr = np.asarray(pixels_right, dtype=float).reshape(-1, 2)
    if pl.shape[0] != pr.shape[0]:
        raise ValueError("pixel arrays must have equal length")

    Kl, Kr = rig.K_left, rig.K_right
    d1 = np.stack([(pl[:, 0] - Kl.cx) / Kl.fx, (pl[:, 1] - Kl.cy) / Kl.fy, np.ones(len(pl))], axis=1)
    d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
    d2_cam = np.stack([(pr[:, 0] - Kr.cx) / Kr.fx, (pr[:, 1] - Kr.cy) / Kr.fy, np.ones(len(pr))], axis=1)
    d2 = d2_cam @ rig.R.matrix  # right-frame directions rotated into the left frame
    d2 /= np.linalg.norm(d2, axis=1, keepdims=True)

    o2 = rig.right_camera_center()
    # Closest points p1 = s*d1, p2 = o2 + u*d2 satisfy (p1 - p2) ⟂ d1, d2.
    b = np.einsum("ij,ij->i", d1, d2)
    det = 1.0 - b * b  # a = c = 1 for unit directions
    if np.any(det < PARALLEL_RAY_EPS):
        raise ParallelRays("triangulation rays are (numerically) parallel")
    rd1 = d1 @ o2
    rd2 = d2 @ o2
    s = (rd1 - b * rd2) / det
    u = (b * rd1 - rd2) / det
    p1 = s[:, None] * d1
    p2 = o2 + u[:, None] * d2
    return (p1 + p2) / 2.0


def estimate_scale(
    corr: CorrespondenceSet,
    rig: StereoRig,
    pair_budget: int = 2048,
    rng_seed: int = 0,
    eps_sep: float = 0.05,
    trimmed: bool = False,
) -> tuple[float, np.ndarray]:
    """Object scale from ratios of camera-space to NOCS-space pairwise distances.

    Matched points i, j triangulate to camera points with
    ‖X_i - X_j‖ = s·‖q_i - q_j‖, so each well-separated pair of matches votes
    a scale; the estimate is the mean vote. All pairs are used when their
    count fits the budget, otherwise pair_budget pairs are sampled with a
    seeded generator. Pairs closer than eps_sep in NOCS are skipped as
    noise-dominated. With trimmed=True the mean is taken over the central
    60% of sorted votes (a 20% trimmed mean), which resists the heavy right
    tail that distance ratios develop under triangulation noise.

    Returns (scale, votes used).
    """
    if len(corr) < 2:
        raise InsufficientCorrespondences("need at least two matches to estimate scale")
    X = triangulate_batch(corr.pixels_left, corr.pixels_right, rig)
    q = corr.nocs
    n = len(corr)

    n_all = n * (n - 1) // 2
    if n_all <= pair_budget:
        ii, jj = np.triu_indices(n, k=1)
    else:
        rng = np.random.default_rng(rng_seed)
        ii = rng.integers(0, n, size=pair_budget)
        jj = rng.integers(0, n, size=pair_budget)
        ok = ii != jj
        ii, jj = ii[ok], jj[ok]

    dq = np.linalg.norm(q[ii] - q[jj], axis=1)
    sep = dq >= eps_sep
    if not sep.any():
        raise InsufficientCorrespondences("no pair of matches is separated enough in NOCS")
    dX = np.linalg.norm(X[ii[sep]] - X[jj[sep]], axis=1)
    votes = dX / dq[sep]
    used = votes
    if trimmed:
        cut = int(0.2 * len(votes))
        if len(votes) - 2 * cut > 0:
            used = np.sort(votes)[cut : len(votes) - cut]
    return float(np.mean(used)), votes


def _fundamental_matrix(rig: StereoRig) -> np.ndarray:
    """Bilinear form F with p̂_l^T F p̂_r = 0 on true correspondences.

    With the rig convention x_r = R x_l + t, a left-frame point X projects to
    p̂_l ∝ K_l X and p̂_r ∝ K_r (R X + t). Then

        X^T R^T [t]_x (R X + t) = X^T (R^T [t]_x R) X + X^T R^T [t]_x t = 0

    since R^T [t]_x R is antisymmetric and [t]_x t = 0, so the essential part
    is E = R^T [t]_x and F = K_l^-T E K_r^-1 regardless of the rig geometry.
    On a rectified rig E reduces to [t]_x.
    """
    E = rig.R.matrix.T @ skew(rig.t)
    return rig.K_left.K_inv.T @ E @ rig.K_right.K_inv


def epipolar_residual(pixel_left, pixel_right, rig: StereoRig) -> float:
    """Epipolar constraint value for a pixel pair; 0 iff the pair is consistent."""
    pl = np.append(np.asarray(pixel_left, dtype=float).reshape(2), 1.0)
    pr = np.append(np.asarray(pixel_right, dtype=float).reshape(2), 1.0)
    return float(pl @ _fundamental_matrix(rig) @ pr)


def epipolar_residual_batch(pixels_left, pixels_right, rig: StereoRig) -> np.ndarray:
    """Vectorized epipolar_residual over (N, 2) pixel arrays."""
    pl = np.asarray(pixels_left, dtype=float).reshape(-1, 2)
    pr = np.asarray(pixels_right, dtype=float).reshape(-1, 2)
    hl = np.concatenate([pl, np.ones((len(pl), 1))], axis=1)
    hr = np.concatenate([pr, np.ones((len(pr), 1))], axis=1)
    F = _fundamental_matrix(rig)
    return np.einsum("ij,jk,ik->i", hl, F, hr)
