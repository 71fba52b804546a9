"""Training loss terms with analytic gradients.

Every loss returns (value, gradient) where the gradient matches central
finite differences at smooth points. Nondifferentiable points (absolute
value at zero, nearest-neighbor ties, zero deformation rows, zero matching
entries) use the zero subgradient convention and are documented per loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .fusion import ShapeMismatch
from .stereo import StereoRig, _fundamental_matrix


class EmptyPairList(ValueError):
    """No pixel pairs supplied."""


class EmptySet(ValueError):
    """A point set for the Chamfer distance is empty."""


class NegativeEntry(ValueError):
    """Matching matrix entry below zero where a probability is required."""


class NonFiniteComponent(ValueError):
    """A loss component is NaN or infinite."""


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for (epipolar, chamfer, nocs, entropy, deform) terms."""

    epipolar: float = 0.01
    chamfer: float = 5.0
    nocs: float = 1.0
    entropy: float = 0.0001
    deform: float = 0.01

    def __post_init__(self):
        for name in ("epipolar", "chamfer", "nocs", "entropy", "deform"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be nonnegative")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.epipolar, self.chamfer, self.nocs, self.entropy, self.deform)


def loss_epipolar(pairs, rig: StereoRig) -> tuple[float, np.ndarray]:
    """Mean absolute epipolar residual over pixel pairs.

    pairs is (N, 2, 2): pairs[k] = ((u_l, v_l), (u_r, v_r)). The residual of
    a pair is the bilinear epipolar form; the loss takes its absolute value
    (the raw form is signed and would cancel across pairs) and averages.
    Returns (value, gradient) with the gradient shaped like pairs; the
    subgradient at an exactly-zero residual is 0.
    """
    P = np.asarray(pairs, dtype=float)
    if P.size == 0:
        raise EmptyPairList("need at least one pixel pair")
    P = P.reshape(-1, 2, 2)
    n = len(P)
    F = _fundamental_matrix(rig)
    hl = np.concatenate([P[:, 0, :], np.ones((n, 1))], axis=1)
    hr = np.concatenate([P[:, 1, :], np.ones((n, 1))], axis=1)
    r = np.einsum("ij,jk,ik->i", hl, F, hr)
    value = float(np.abs(r).mean())
    sign = np.sign(r)
    grad = np.zeros_like(P)
    grad[:, 0, :] = sign[:, None] * (hr @ F.T)[:, :2] / n
    grad[:, 1, :] = sign[:, None] * (hl @ F)[:, :2] / n
    return value, grad


def loss_chamfer(P_pred, P_gt) -> tuple[float, np.ndarray]:
    """Two-sided Chamfer distance, summed squared nearest-neighbor distances.

    value = sum_x min_y ||x - y||^2 + sum_y min_x ||y - x||^2. The gradient
    with respect to P_pred holds the nearest-neighbor pairings fixed at their
    evaluated argmins, which is exact away from ties.
    """
    X = np.asarray(P_pred, dtype=float).reshape(-1, 3)
    Y = np.asarray(P_gt, dtype=float).reshape(-1, 3)
    if len(X) == 0 or len(Y) == 0:
        raise EmptySet("both point sets must be non-empty")
    d_xy, j = cKDTree(Y).query(X, k=1)
    d_yx, i = cKDTree(X).query(Y, k=1)
    value = float((d_xy**2).sum() + (d_yx**2).sum())
    grad = 2.0 * (X - Y[j])
    np.add.at(grad, i, 2.0 * (X[i] - Y))
    return value, grad


def loss_nocs_l1(M_pred, M_gt) -> tuple[float, np.ndarray]:
    """Mean absolute difference over all entries; zero subgradient at ties."""
    A = np.asarray(M_pred, dtype=float)
    B = np.asarray(M_gt, dtype=float)
    if A.shape != B.shape:
        raise ShapeMismatch(f"shapes differ: {A.shape} vs {B.shape}")
    diff = A - B
    value = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return value, grad


def loss_deform_reg(D) -> tuple[float, np.ndarray]:
    """Mean Euclidean norm of the deformation rows.

    value = (1/N) sum_i ||d_i||. Gradient per row is d_i / (N ||d_i||), with
    the zero subgradient at exactly-zero rows.
    """
    D = np.asarray(D, dtype=float).reshape(-1, 3)
    n = len(D)
    if n < 1:
        raise ValueError("deformation field must have at least one row")
    norms = np.linalg.norm(D, axis=1)
    value = float(norms.mean())
    safe = np.where(norms > 0, norms, 1.0)
    grad = np.where((norms > 0)[:, None], D / safe[:, None] / n, 0.0)
    return value, grad


def loss_entropy(A) -> tuple[float, np.ndarray]:
    """Row-entropy penalty on a matching matrix, averaged over rows.

    value = (1/M) sum_ij -a_ij ln a_ij with 0 ln 0 = 0. Gradient is
    -(ln a_ij + 1) / M; at an exact zero the derivative diverges, so the
    reported gradient there is 0 by convention.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ShapeMismatch(f"matching matrix must be 2D, got {A.shape}")
    if np.any(A < 0):
        raise NegativeEntry("entropy requires nonnegative entries")
    m = A.shape[0]
    pos = A > 0
    logs = np.zeros_like(A)
    logs[pos] = np.log(A[pos])
    value = float(-(A * logs).sum() / m)
    grad = np.where(pos, -(logs + 1.0) / m, 0.0)
    return value, grad


def loss_total(components, weights: LossWeights = LossWeights()) -> float:
    """Weighted sum of (epipolar, chamfer, nocs, entropy, deform) components.

    Accumulated with exact float summation so the result is the correctly
    rounded sum of the five products.
    """
    comps = [float(c) for c in components]
    if len(comps) != 5:
        raise ValueError(f"expected 5 components, got {len(comps)}")
    if not all(math.isfinite(c) for c in comps):
        raise NonFiniteComponent(f"components must be finite, got {comps}")
    return math.fsum(w * c for w, c in zip(weights.as_tuple(), comps))
