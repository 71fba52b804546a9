"""Stereo feature fusion math: whitening, row-wise parallax attention,
attention-weighted warping, MLP fusion, and NOCS point prediction from a
deformed prior model with matching matrices.

Feature grids are plain (H, W, C) float arrays. Attention between rectified
views is computed per image row: each left-view column attends over the
right-view columns of the same row (epipolar lines are rows), which yields
one (W, W) attention matrix per row, stacked to (H, W, W). No module here
carries learned parameters; weights come from the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROW_SUM_TOL = 1e-4


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the operation."""


class NotRowStochastic(ValueError):
    """Matrix rows do not sum to 1 within tolerance, or have negative entries."""


@dataclass(frozen=True)
class MlpWeights:
    """Single affine layer mapping concatenated (2C,) features to (C,)."""

    weight: np.ndarray  # (C, 2C)
    bias: np.ndarray  # (C,)
    nonlinearity: str = "identity"  # 'identity' or 'relu'

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=float)
        b = np.asarray(self.bias, dtype=float).reshape(-1)
        if w.ndim != 2 or w.shape[1] != 2 * w.shape[0]:
            raise ValueError(f"weight must be (C, 2C), got {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise ValueError("bias length must match output channels")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("weights must be finite")
        if self.nonlinearity not in ("identity", "relu"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @staticmethod
    def projection(channels: int) -> "MlpWeights":
        """Weights that return the first input (the unwarped feature) exactly."""
        w = np.zeros((channels, 2 * channels))
        w[:, :channels] = np.eye(channels)
        return MlpWeights(w, np.zeros(channels))

    @staticmethod
    def averaging(channels: int) -> "MlpWeights":
        w = np.zeros((channels, 2 * channels))
        w[:, :channels] = 0.5 * np.eye(channels)
        w[:, channels:] = 0.5 * np.eye(channels)
        return MlpWeights(w, np.zeros(channels))


def _check_grid(F) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    if F.ndim != 3:
        raise ShapeMismatch(f"feature grid must be (H, W, C), got {F.shape}")
    return F


def whiten(F) -> np.ndarray:
    """Subtract the per-channel spatial mean; output channels are zero-mean."""
    F = _check_grid(F)
    return F - F.mean(axis=(0, 1), keepdims=True)


def parallax_attention(F_left, F_right) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise attention maps between two feature grids.

    Both grids are whitened, then for every row h the score between left
    column w_l and right column w_r is the channel dot product. A_rl softmaxes
    the scores over right columns (it warps right-view features into the left
    view); A_lr is the symmetric counterpart. Returns (A_rl, A_lr), both
    (H, W, W) and row-stochastic.
    """
    Fl = _check_grid(F_left)
    Fr = _check_grid(F_right)
    if Fl.shape != Fr.shape:
        raise ShapeMismatch(f"grids differ: {Fl.shape} vs {Fr.shape}")
    Wl = whiten(Fl)
    Wr = whiten(Fr)
    scores = np.einsum("hic,hjc->hij", Wl, Wr)  # (H, W_l, W_r)
    A_rl = _softmax_last(scores)
    A_lr = _softmax_last(np.swapaxes(scores, 1, 2))
    return A_rl, A_lr


def _softmax_last(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def warp_features(A, F) -> np.ndarray:
    """Apply per-row attention: out[h, i, c] = sum_j A[h, i, j] * F[h, j, c]."""
    A = np.asarray(A, dtype=float)
    F = _check_grid(F)
    if A.ndim != 3 or A.shape[0] != F.shape[0] or A.shape[2] != F.shape[1]:
        raise ShapeMismatch(f"attention {A.shape} incompatible with grid {F.shape}")
    return np.einsum("hij,hjc->hic", A, F)


def fuse(F, F_warped, w: MlpWeights) -> np.ndarray:
    """Per-position affine map of the concatenated features, then nonlinearity."""
    F = _check_grid(F)
    Fw = _check_grid(F_warped)
    if F.shape != Fw.shape:
        raise ShapeMismatch(f"grids differ: {F.shape} vs {Fw.shape}")
    C = F.shape[2]
    if w.weight.shape[0] != C:
        raise ShapeMismatch(f"weights expect C={w.weight.shape[0]}, grid has C={C}")
    cat = np.concatenate([F, Fw], axis=2)  # (H, W, 2C)
    out = cat @ w.weight.T + w.bias
    if w.nonlinearity == "relu":
        out = np.maximum(out, 0.0)
    return out


def deform_prior(prior, deformation) -> np.ndarray:
    """Deformed prior model P' = P + D."""
    P = np.asarray(prior, dtype=float)
    D = np.asarray(deformation, dtype=float)
    if P.shape != D.shape or P.ndim != 2 or P.shape[1] != 3:
        raise ShapeMismatch(f"prior {P.shape} and deformation {D.shape} must both be (N, 3)")
    return P + D


def predict_nocs_points(A, prior_deformed) -> np.ndarray:
    """NOCS points as convex combinations of deformed prior points, M = A @ P'.

    A must be (M, N) row-stochastic: nonnegative with rows summing to 1
    within 1e-4. Every output point then lies in the convex hull of the
    prior points.
    """
    A = np.asarray(A, dtype=float)
    P = np.asarray(prior_deformed, dtype=float)
    if A.ndim != 2 or P.ndim != 2 or P.shape[1] != 3 or A.shape[1] != P.shape[0]:
        raise ShapeMismatch(f"matching {A.shape} incompatible with prior {P.shape}")
    if np.any(A < 0):
        raise NotRowStochastic("matching matrix has negative entries")
    row_sums = A.sum(axis=1)
    worst = float(np.abs(row_sums - 1.0).max()) if len(row_sums) else 0.0
    if worst > ROW_SUM_TOL:
        raise NotRowStochastic(f"row sums deviate from 1 by {worst:.3g}")
    return A @ P
