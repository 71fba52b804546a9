"""Pose solvers: scale-decoupled PnP pipeline and the joint similarity baseline.

The decoupled pipeline recovers the object scale first (pairwise distance
ratios of triangulated stereo matches), fixes it, solves rotation and
translation by RANSAC PnP over the left-view NOCS pixels, and finally
rescales the translation so the mean depth of the matched points agrees with
the mean triangulated depth. The joint baseline instead triangulates every
match and fits one 3D-3D similarity transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    DEPTH_EPS,
    CameraIntrinsics,
    NonPositiveDepth,
    Pose,
    Rotation,
    project_to_rotation,
    skew,
)
from .nocs import NocsMap, smooth_nocs_map
from .stereo import (
    CorrespondenceSet,
    StereoRig,
    estimate_scale,
    match_nocs_maps,
    triangulate_batch,
)

COLLINEAR_TOL = 1e-9


class InsufficientPoints(ValueError):
    """Fewer correspondences than the solver's minimum."""


class DegenerateConfiguration(ValueError):
    """Point configuration admits no unique solution (collinear/coincident)."""


class NoConsensus(RuntimeError):
    """RANSAC found no hypothesis with at least a minimal-sample consensus."""


@dataclass(frozen=True)
class RansacPnPConfig:
    max_iterations: int = 1000
    inlier_threshold_px: float = 2.0
    confidence: float = 0.999
    min_sample: int = 4
    seed: int = 0
    refine_iterations: int = 20

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")
        if not self.inlier_threshold_px > 0:
            raise ValueError("inlier threshold must be positive")


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose
    inlier_count: int
    mean_residual_px: float
    method: str  # 'decoupled' or 'joint'

    def __post_init__(self):
        if self.mean_residual_px < 0:
            raise ValueError("residual must be nonnegative")


def _bearing_rays(pts_2d: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    d = np.stack(
        [(pts_2d[:, 0] - K.cx) / K.fx, (pts_2d[:, 1] - K.cy) / K.fy, np.ones(len(pts_2d))],
        axis=1,
    )
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _p3p_grunert(P: np.ndarray, rays: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Closed-form three-point pose: distances along rays via a quartic.

    P is (3, 3) model points, rays (3, 3) unit bearing vectors. Returns up to
    four (R, t) candidates with R @ P_i + t = s_i * ray_i, found by solving
    the law-of-cosines system in the ratios s2/s1, s3/s1 and then fitting the
    rigid transform to the three recovered camera points.
    """
    a2 = float(np.sum((P[1] - P[2]) ** 2))
    b2 = float(np.sum((P[0] - P[2]) ** 2))
    c2 = float(np.sum((P[0] - P[1]) ** 2))
    if min(a2, b2, c2) < 1e-16 or b2 < 1e-16:
        return []
    ca = float(rays[1] @ rays[2])
    cb = float(rays[0] @ rays[2])
    cg = float(rays[0] @ rays[1])

    A = (a2 - c2) / b2
    B = (a2 + c2) / b2
    a4 = (A - 1.0) ** 2 - 4.0 * (c2 / b2) * ca * ca
    a3 = 4.0 * (A * (1.0 - A) * cb - (1.0 - B) * ca * cg + 2.0 * (c2 / b2) * ca * ca * cb)
    a2c = 2.0 * (
        A * A
        - 1.0
        + 2.0 * A * A * cb * cb
        + 2.0 * ((b2 - c2) / b2) * ca * ca
        - 4.0 * B * ca * cb * cg
        + 2.0 * ((b2 - a2) / b2) * cg * cg
    )
    a1 = 4.0 * (-A * (1.0 + A) * cb + 2.0 * (a2 / b2) * cg * cg * cb - (1.0 - B) * ca * cg)
    a0 = (1.0 + A) ** 2 - 4.0 * (a2 / b2) * cg * cg

    coeffs = np.array([a4, a3, a2c, a1, a0])
    if not np.all(np.isfinite(coeffs)) or np.max(np.abs(coeffs)) < 1e-16:
        return []
    roots = np.roots(coeffs)

    out = []
    for root in roots:
        if abs(root.imag) > 1e-8 * max(1.0, abs(root.real)):
            continue
        v = float(root.real)
        if v <= 0:
            continue
        denom = 2.0 * (cg - v * ca)
        if abs(denom) < 1e-12:
            continue
        u = ((A - 1.0) * v * v - 2.0 * A * cb * v + 1.0 + A) / denom
        if u <= 0:
            continue
        s1_sq = b2 / (1.0 + v * v - 2.0 * v * cb)
        if not s1_sq > 0:
            continue
        s1 = float(np.sqrt(s1_sq))
        s = np.array([s1, u * s1, v * s1])
        X = s[:, None] * rays  # camera-frame points
        Rt = _kabsch(P, X)
        if Rt is not None:
            out.append(Rt)
    return out


def _kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Rigid fit R @ src + t = dst in the least-squares sense."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        return None
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    t = mu_d - R @ mu_s
    return R, t


def _reproj_errors(Rm: np.ndarray, t: np.ndarray, pts3d: np.ndarray, pts2d: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    Xc = pts3d @ Rm.T + t
    z = Xc[:, 2]
    ok = z > DEPTH_EPS
    zz = np.where(ok, z, 1.0)
    u = K.fx * Xc[:, 0] / zz + K.cx
    v = K.fy * Xc[:, 1] / zz + K.cy
    err = np.hypot(u - pts2d[:, 0], v - pts2d[:, 1])
    return np.where(ok, err, np.inf)


def _refine_pose_gn(
    Rm: np.ndarray,
    t: np.ndarray,
    pts3d: np.ndarray,
    pts2d: np.ndarray,
    K: CameraIntrinsics,
    iterations: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton on reprojection error over a rotation increment and t.

    The rotation is updated on the left by the exponential of the solved
    increment, so every iterate stays on SO(3) up to roundoff; a final polar
    projection removes the accumulated drift.
    """
    R = Rm.copy()
    t = t.astype(float).copy()
    prev_cost = np.inf
    for _ in range(iterations):
        Xc = pts3d @ R.T + t
        z = Xc[:, 2]
        if np.any(z <= DEPTH_EPS):
            break
        u = K.fx * Xc[:, 0] / z + K.cx
        v = K.fy * Xc[:, 1] / z + K.cy
        r = np.stack([u - pts2d[:, 0], v - pts2d[:, 1]], axis=1).reshape(-1)
        cost = float(r @ r)
        if cost >= prev_cost:
            # The last step did not help; keep the previous iterate.
            R, t = prev_R, prev_t
            break
        prev_cost, prev_R, prev_t = cost, R.copy(), t.copy()

        inv_z = 1.0 / z
        du_dX = np.stack([K.fx * inv_z, np.zeros_like(z), -K.fx * Xc[:, 0] * inv_z**2], axis=1)
        dv_dX = np.stack([np.zeros_like(z), K.fy * inv_z, -K.fy * Xc[:, 1] * inv_z**2], axis=1)
        # X_c = exp(w) R p + t to first order gives dX_c/dw = -[X_c - t]_x, dX_c/dt = I.
        rot_part = Xc - t
        J = np.zeros((len(z), 2, 6))
        for proj_row, dproj in ((0, du_dX), (1, dv_dX)):
            # J_w = -dproj @ [rot_part]_x = rot_part x dproj, written out per column.
            J[:, proj_row, 0] = rot_part[:, 1] * dproj[:, 2] - rot_part[:, 2] * dproj[:, 1]
            J[:, proj_row, 1] = rot_part[:, 2] * dproj[:, 0] - rot_part[:, 0] * dproj[:, 2]
            J[:, proj_row, 2] = rot_part[:, 0] * dproj[:, 1] - rot_part[:, 1] * dproj[:, 0]
            J[:, proj_row, 3:6] = dproj
        Jf = J.reshape(-1, 6)
        JtJ = Jf.T @ Jf
        Jtr = Jf.T @ r
        try:
            delta = np.linalg.solve(JtJ + 1e-12 * np.eye(6), -Jtr)
        except np.linalg.LinAlgError:
            break
        w, dt = delta[:3], delta[3:]
        angle = np.linalg.norm(w)
        if angle > 0:
            Wx = skew(w / angle)
            dR = np.eye(3) + np.sin(angle) * Wx + (1.0 - np.cos(angle)) * (Wx @ Wx)
            R = dR @ R
        t = t + dt
        if angle < 1e-14 and np.linalg.norm(dt) < 1e-14:
            break
    return project_to_rotation(R), t


def _check_not_collinear(pts3d: np.ndarray) -> None:
    centered = pts3d - pts3d.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= COLLINEAR_TOL * max(sv[0], 1e-300):
        raise DegenerateConfiguration("3D points are collinear")


def solve_pnp_ransac(
    points_2d,
    points_3d,
    K: CameraIntrinsics,
    cfg: RansacPnPConfig = RansacPnPConfig(),
) -> PoseEstimate:
    """Robust PnP: minimal three-point hypotheses inside RANSAC, then
    Gauss-Newton refinement on the consensus set. Scale is not estimated
    (the 3D points are already metric); the returned pose has s = 1.

    Deterministic given cfg.seed: hypotheses are drawn from a seeded
    generator, ties in inlier count are broken by lower mean residual and
    then by earlier hypothesis.
    """
    pts2d = np.asarray(points_2d, dtype=float).reshape(-1, 2)
    pts3d = np.asarray(points_3d, dtype=float).reshape(-1, 3)
    n = len(pts2d)
    if n != len(pts3d):
        raise ValueError("2D and 3D point counts differ")
    if n < cfg.min_sample:
        raise InsufficientPoints(f"need at least {cfg.min_sample} points, got {n}")
    _check_not_collinear(pts3d)

    rays = _bearing_rays(pts2d, K)
    rng = np.random.default_rng(cfg.seed)

    best_R = None
    best_t = None
    best_inliers = -1
    best_resid = np.inf
    max_iter = cfg.max_iterations
    it = 0
    while it < max_iter:
        it += 1
        sample = rng.choice(n, size=cfg.min_sample, replace=False)
        tri = sample[:3]
        probe = sample[3]
        candidates = _p3p_grunert(pts3d[tri], rays[tri])
        if not candidates:
            continue
        # Disambiguate the quartic's solutions with the fourth sampled point.
        best_cand = None
        best_cand_err = np.inf
        for Rm, tv in candidates:
            e = _reproj_errors(Rm, tv, pts3d[probe : probe + 1], pts2d[probe : probe + 1], K)[0]
            if e < best_cand_err:
                best_cand_err = e
                best_cand = (Rm, tv)
        if best_cand is None or not np.isfinite(best_cand_err):
            continue
        Rm, tv = best_cand
        errs = _reproj_errors(Rm, tv, pts3d, pts2d, K)
        inl = errs < cfg.inlier_threshold_px
        count = int(inl.sum())
        if count >= cfg.min_sample:
            resid = float(errs[inl].mean())
            if count > best_inliers or (count == best_inliers and resid < best_resid):
                best_inliers = count
                best_resid = resid
                best_R, best_t = Rm, tv
                w = count / n
                if w > 0:
                    denom = np.log1p(-min(w**cfg.min_sample, 1.0 - 1e-12))
                    needed = int(np.ceil(np.log(1.0 - cfg.confidence) / denom)) if denom < 0 else cfg.max_iterations
                    max_iter = min(cfg.max_iterations, max(needed, it))

    if best_R is None or best_inliers < cfg.min_sample:
        raise NoConsensus("no hypothesis reached a minimal consensus")

    errs = _reproj_errors(best_R, best_t, pts3d, pts2d, K)
    inl = errs < cfg.inlier_threshold_px
    Rref, tref = _refine_pose_gn(best_R, best_t, pts3d[inl], pts2d[inl], K, cfg.refine_iterations)
    errs = _reproj_errors(Rref, tref, pts3d, pts2d, K)
    inl = errs < cfg.inlier_threshold_px
    if not inl.any():
        # Refinement cannot make things worse than the hypothesis; fall back.
        Rref, tref = best_R, best_t
        errs = _reproj_errors(Rref, tref, pts3d, pts2d, K)
        inl = errs < cfg.inlier_threshold_px

    pose = Pose(1.0, Rotation(Rref), tref)
    return PoseEstimate(pose, int(inl.sum()), float(errs[inl].mean()), "decoupled")


def rescale_translation(pose: Pose, target_mean_depth: float, nocs_points) -> Pose:
    """Scale t along its own ray so the mean depth of the points hits the target.

    The mean depth of {s R q + t} is mean_z(s R q) + t_z, affine in the ray
    scale alpha of t' = alpha * t, so alpha solves it exactly in one step:
    alpha = (target - mean_z(s R q)) / t_z. The direction of t (hence the
    pixel it projects to) is unchanged. Raises NonPositiveDepth when t_z or
    the solved alpha is not positive, or the target is not positive.
    """
    if not target_mean_depth > 0:
        raise NonPositiveDepth(f"target mean depth {target_mean_depth!r} must be positive")
    q = np.asarray(nocs_points, dtype=float).reshape(-1, 3)
    if len(q) == 0:
        raise ValueError("need at least one point to rescale against")
    rotated_z = pose.s * (q @ pose.R.matrix.T)[:, 2]
    m = float(rotated_z.mean())
    t_z = float(pose.t[2])
    if t_z <= DEPTH_EPS:
        raise NonPositiveDepth(f"translation depth {t_z!r} is not positive")
    alpha = (target_mean_depth - m) / t_z
    if alpha <= 0:
        raise NonPositiveDepth("target depth is unreachable by scaling t along its ray")
    return Pose(pose.s, pose.R, alpha * pose.t)


def fit_similarity_3d3d(src, dst) -> Pose:
    """Least-squares similarity transform with dst ≈ s R @ src + t.

    Closed form from the centered cross-covariance SVD, with the reflection
    corrected so det(R) = +1 even when a mirror map would fit better.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("source and destination counts differ")
    if len(src) < 3:
        raise InsufficientPoints(f"need at least 3 pairs, got {len(src)}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    var_s = float((cs**2).sum()) / len(src)
    if var_s < 1e-24:
        raise DegenerateConfiguration("source points are coincident")
    cov = cd.T @ cs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    if D[1] <= 1e-12 * max(D[0], 1e-300):
        raise DegenerateConfiguration("points are collinear")
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = U @ np.diag(S) @ Vt
    s = float((D * S).sum()) / var_s
    if not s > 0:
        raise DegenerateConfiguration("fitted scale is not positive")
    t = mu_d - s * (R @ mu_s)
    return Pose(s, Rotation(project_to_rotation(R)), t)


@dataclass(frozen=True)
class DecoupledConfig:
    """Knobs for the decoupled pipeline; defaults follow the design ledger.

    expected_sigma is the caller's estimate of the NOCS prediction noise
    level. When nonzero it widens the matching tolerance, the minimum pair
    separation, and the RANSAC inlier threshold proportionally (the pixel
    impact of coordinate noise is roughly f * s * sigma / depth); at the
    default 0 every knob keeps its fixed value.

    scale_match_fraction keeps only the tightest matches (smallest cross-view
    NOCS mismatch, never fewer than scale_match_floor) for the scale and
    depth-target stages. A match whose two map values nearly coincide pins
    the matched rays to nearly one physical point, so its triangulation
    carries a fraction of the half-pixel quantization error; ranking by
    mismatch selects those pairs without any sub-pixel refinement. Combined
    with the trimmed vote mean this keeps the scale estimate inside the
    pixel-quantization error budget across the whole working distance range.

    When expected_sigma is past denoise_sigma_floor the four maps are first
    smoothed with a mask-aware box filter (denoise_radius pixels), and the
    scale votes are formed between per-NOCS-cell centroids rather than raw
    matches (scale_bucket_cell). Both exploit that the coordinate field is
    smooth while the noise is independent per pixel. Distance-ratio votes
    fold even zero-mean triangulation noise into a positive bias (the norm
    of a perturbed difference vector only grows in expectation), so unlike
    the averaging-based joint baseline they need the noise suppressed before
    the ratio is taken, not after.
    """

    match_eps: float = 0.01
    eps_sep: float = 0.05
    pair_budget: int = 2048
    trimmed_scale: bool = True
    scale_match_fraction: float = 0.2
    scale_match_floor: int = 200
    pnp_budget: int = 2048
    use_back_for_pnp: bool = True
    use_back_for_scale: bool = False
    use_back_for_rescale: bool = False
    sample_seed: int = 0
    ransac: RansacPnPConfig = field(default_factory=RansacPnPConfig)
    expected_sigma: float = 0.0
    match_eps_sigma_gain: float = 4.0
    eps_sep_sigma_gain: float = 10.0
    threshold_sigma_gain: float = 3.0
    phase_correction: bool = True
    phase_sigma_gain: float = 3.0
    denoise: bool = True
    denoise_sigma_floor: float = 0.002
    denoise_px_per_sigma: float = 200.0
    denoise_max_radius: int = 3
    scale_bucket_cell: float = 0.12

    @property
    def denoise_radius(self) -> int:
        """Box half-width for pre-matching map smoothing, chosen so the
        smoothed value noise lands near the pixel-quantization scale."""
        if not self.denoise or self.expected_sigma < self.denoise_sigma_floor:
            return 0
        r = int(np.ceil(self.denoise_px_per_sigma * self.expected_sigma))
        return min(self.denoise_max_radius, r)

    @property
    def effective_value_sigma(self) -> float:
        """Per-channel value noise after smoothing (std of an N-pixel box
        mean falls by the kernel width)."""
        return self.expected_sigma / (2 * self.denoise_radius + 1)

    @property
    def effective_match_eps(self) -> float:
        return max(self.match_eps, self.match_eps_sigma_gain * self.effective_value_sigma)

    @property
    def effective_eps_sep(self) -> float:
        return max(self.eps_sep, self.eps_sep_sigma_gain * self.expected_sigma)

    def effective_ransac(self, fx: float, scale: float, mean_depth: float) -> RansacPnPConfig:
        if self.effective_value_sigma <= 0 or mean_depth <= 0:
            return self.ransac
        px = self.threshold_sigma_gain * self.effective_value_sigma * fx * scale / mean_depth
        if px <= self.ransac.inlier_threshold_px:
            return self.ransac
        return replace(self.ransac, inlier_threshold_px=px)


def _concat_correspondences(a: CorrespondenceSet, b: CorrespondenceSet) -> CorrespondenceSet:
    cat = lambda x, y: None if x is None or y is None else np.concatenate([x, y])
    return CorrespondenceSet(
        np.vstack([a.pixels_left, b.pixels_left]),
        np.vstack([a.pixels_right, b.pixels_right]),
        np.vstack([a.nocs, b.nocs]),
        mismatch=cat(a.mismatch, b.mismatch),
        phase=cat(a.phase, b.phase),
        grad_norm=cat(a.grad_norm, b.grad_norm),
    )


def _correct_disparity(corr: CorrespondenceSet, cfg: "DecoupledConfig") -> CorrespondenceSet:
    """Cancel the quantization offset of matched columns before triangulation.

    Integer matching snaps each right pixel to its grid column; the signed
    residual offset recovered from the NOCS values (corr.phase) is coherent
    across a surface, so it biases every triangulated depth the same way and
    no amount of averaging removes it. Shifting the matched column by that
    offset restores the true disparity to second order. A match is corrected
    only when the local value gradient stands clear of the expected NOCS
    noise, so under heavy noise the correction fades out instead of injecting
    noise-driven shifts; offsets are clamped to +/- 0.75 px, beyond which the
    nearest-neighbor property makes them implausible.
    """
    if not cfg.phase_correction or corr.phase is None or corr.grad_norm is None:
        return corr
    phi = np.clip(corr.phase, -0.75, 0.75)
    ok = np.isfinite(phi) & (corr.grad_norm > cfg.phase_sigma_gain * cfg.effective_value_sigma)
    if not ok.any():
        return corr
    pr = corr.pixels_right.copy()
    pr[:, 0] += np.where(ok, phi, 0.0)
    return CorrespondenceSet(
        corr.pixels_left, pr, corr.nocs, corr.view,
        corr.depths, corr.mismatch, corr.phase, corr.grad_norm,
    )


def _tight_matches(corr: CorrespondenceSet, fraction: float, floor: int) -> CorrespondenceSet:
    """Keep the matches with the smallest cross-view NOCS mismatch.

    Sets without recorded mismatch (analytically built matches) are already
    exact and pass through whole.
    """
    if corr.mismatch is None or fraction >= 1.0 or len(corr) <= floor:
        return corr
    k = min(len(corr), max(floor, int(fraction * len(corr))))
    order = np.argsort(corr.mismatch, kind="stable")[:k]
    return corr.subset(np.sort(order))


def _bucket_average(corr: CorrespondenceSet, cell: float) -> CorrespondenceSet:
    """Collapse matches into per-NOCS-cell centroids (pixels and coordinates).

    Residual per-match triangulation noise is independent across matches, so
    averaging the matched pixel positions inside a NOCS grid cell cuts the
    depth noise of each synthetic match by the square root of its occupancy
    while the distance ratios the scale votes use are unchanged (projection
    is locally linear at this granularity). Falls back to the raw set when
    the grid would be too coarse to form pairs.
    """
    if cell <= 0 or len(corr) == 0:
        return corr
    keys = np.floor(corr.nocs / cell).astype(np.int64)
    uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    k = len(uniq)
    if k < 16:
        return corr

    def mean_by_cell(values: np.ndarray) -> np.ndarray:
        acc = np.zeros((k, values.shape[1]))
        np.add.at(acc, inv, values)
        return acc / counts[:, None]

    return CorrespondenceSet(
        mean_by_cell(corr.pixels_left),
        mean_by_cell(corr.pixels_right),
        mean_by_cell(corr.nocs),
        view=corr.view,
    )


def estimate_pose_decoupled_from_pools(
    corr_front: CorrespondenceSet,
    rig: StereoRig,
    pnp_pixels,
    pnp_nocs,
    cfg: DecoupledConfig = DecoupledConfig(),
    corr_back: CorrespondenceSet | None = None,
) -> PoseEstimate:
    """Decoupled pipeline core over explicit correspondence pools.

    corr_front drives scale and the mean-depth target; (pnp_pixels, pnp_nocs)
    is the 2D-to-NOCS pool for PnP (left camera). Exposed separately so
    analytic correspondences can bypass rendering entirely.
    """
    scale_corr = corr_front
    if cfg.use_back_for_scale and corr_back is not None and len(corr_back) > 0:
        scale_corr = _concat_correspondences(corr_front, corr_back)
    scale_corr = _correct_disparity(_tight_matches(scale_corr, cfg.scale_match_fraction, cfg.scale_match_floor), cfg)
    if cfg.denoise_radius > 0:
        scale_corr = _bucket_average(scale_corr, cfg.scale_bucket_cell)
    s, _ = estimate_scale(
        scale_corr,
        rig,
        pair_budget=cfg.pair_budget,
        rng_seed=cfg.sample_seed,
        eps_sep=cfg.effective_eps_sep,
        trimmed=cfg.trimmed_scale,
    )

    depth_corr = corr_front
    if cfg.use_back_for_rescale and corr_back is not None and len(corr_back) > 0:
        depth_corr = _concat_correspondences(corr_front, corr_back)
    depth_corr = _correct_disparity(_tight_matches(depth_corr, cfg.scale_match_fraction, cfg.scale_match_floor), cfg)
    X = triangulate_batch(depth_corr.pixels_left, depth_corr.pixels_right, rig)
    target = float(X[:, 2].mean())

    px = np.asarray(pnp_pixels, dtype=float).reshape(-1, 2)
    qn = np.asarray(pnp_nocs, dtype=float).reshape(-1, 3)
    if len(px) > cfg.pnp_budget:
        rng = np.random.default_rng([cfg.sample_seed, 1])
        sel = np.sort(rng.choice(len(px), size=cfg.pnp_budget, replace=False))
        px, qn = px[sel], qn[sel]
    est = solve_pnp_ransac(px, s * qn, rig.K_left, cfg.effective_ransac(rig.K_left.fx, s, target))

    pose = Pose(s, est.pose.R, est.pose.t)
    pose = rescale_translation(pose, target, depth_corr.nocs)
    return PoseEstimate(pose, est.inlier_count, est.mean_residual_px, "decoupled")


def estimate_pose_decoupled_from_correspondences(
    corr_front: CorrespondenceSet,
    rig: StereoRig,
    cfg: DecoupledConfig = DecoupledConfig(),
    corr_back: CorrespondenceSet | None = None,
) -> PoseEstimate:
    """Decoupled pipeline over explicit matches (no maps, no rasterization).

    The PnP pool is the left pixel of every match against its NOCS
    coordinate, front plus back when provided and enabled.
    """
    px = [corr_front.pixels_left]
    qn = [corr_front.nocs]
    if cfg.use_back_for_pnp and corr_back is not None and len(corr_back) > 0:
        px.append(corr_back.pixels_left)
        qn.append(corr_back.nocs)
    return estimate_pose_decoupled_from_pools(
        corr_front, rig, np.vstack(px), np.vstack(qn), cfg, corr_back
    )


def estimate_pose_decoupled(
    map_left_front: NocsMap,
    map_left_back: NocsMap,
    map_right_front: NocsMap,
    map_right_back: NocsMap,
    rig: StereoRig,
    cfg: DecoupledConfig = DecoupledConfig(),
) -> PoseEstimate:
    """Full decoupled pipeline over four NOCS maps.

    Front maps are matched cross-view for scale and for the mean-depth
    target; the PnP pool takes every masked left-view pixel (front and,
    by default, back) against its own NOCS value.
    """
    r = cfg.denoise_radius
    if r > 0:
        map_left_front = smooth_nocs_map(map_left_front, r)
        map_left_back = smooth_nocs_map(map_left_back, r)
        map_right_front = smooth_nocs_map(map_right_front, r)
        map_right_back = smooth_nocs_map(map_right_back, r)

    corr_front = match_nocs_maps(map_left_front, map_right_front, eps=cfg.effective_match_eps)
    corr_back = None
    if cfg.use_back_for_scale or cfg.use_back_for_rescale:
        corr_back = match_nocs_maps(map_left_back, map_right_back, eps=cfg.effective_match_eps)

    px_f, q_f = map_left_front.masked_pixels()
    pools = [(px_f, q_f)]
    if cfg.use_back_for_pnp:
        pools.append(map_left_back.masked_pixels())
    pnp_px = np.vstack([p for p, _ in pools])
    pnp_q = np.vstack([q for _, q in pools])

    return estimate_pose_decoupled_from_pools(corr_front, rig, pnp_px, pnp_q, cfg, corr_back)


def estimate_pose_joint(
    map_left_front: NocsMap,
    map_right_front: NocsMap,
    rig: StereoRig,
    match_eps: float = 0.01,
) -> PoseEstimate:
    """Joint baseline: triangulate every front match, fit one similarity."""
    corr = match_nocs_maps(map_left_front, map_right_front, eps=match_eps)
    return estimate_pose_joint_from_correspondences(corr, rig)


def estimate_pose_joint_from_correspondences(corr: CorrespondenceSet, rig: StereoRig) -> PoseEstimate:
    if len(corr) < 3:
        raise InsufficientPoints(f"need at least 3 correspondences, got {len(corr)}")
    X = triangulate_batch(corr.pixels_left, corr.pixels_right, rig)
    pose = fit_similarity_3d3d(corr.nocs, X)
    Xc = pose.apply(corr.nocs)
    z = np.maximum(Xc[:, 2], DEPTH_EPS)
    u = rig.K_left.fx * Xc[:, 0] / z + rig.K_left.cx
    v = rig.K_left.fy * Xc[:, 1] / z + rig.K_left.cy
    resid = float(np.hypot(u - corr.pixels_left[:, 0], v - corr.pixels_left[:, 1]).mean())
    return PoseEstimate(pose, len(corr), resid, "joint")
