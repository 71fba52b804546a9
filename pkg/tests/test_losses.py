"""Training loss values and analytic gradients against finite differences."""

import numpy as np
import pytest

from stereonocs.fusion import ShapeMismatch
from stereonocs.geometry import CameraIntrinsics
from stereonocs.losses import (
    EmptyPairList,
    EmptySet,
    LossWeights,
    NegativeEntry,
    NonFiniteComponent,
    loss_chamfer,
    loss_deform_reg,
    loss_entropy,
    loss_epipolar,
    loss_nocs_l1,
    loss_total,
)
from stereonocs.stereo import StereoRig
from stereonocs.geometry import Rotation

K = CameraIntrinsics(fx=600.0, fy=600.0, cx=111.5, cy=111.5, width=224, height=224)
RIG = StereoRig.rectified(K, K, baseline=0.06)


def central_difference(f, x, h):
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def gradient_rel_error(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-30)


class TestEpipolar:
    def test_exact_projections_are_zero(self):
        rig = StereoRig(K, K, Rotation.rot_y(0.08), np.array([-0.055, 0.004, 0.01]))
        rng = np.random.default_rng(0)
        pairs = []
        for _ in range(25):
            x = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.5, 1.5)])
            xr = rig.left_to_right(x)
            pl = [K.fx * x[0] / x[2] + K.cx, K.fy * x[1] / x[2] + K.cy]
            pr = [K.fx * xr[0] / xr[2] + K.cx, K.fy * xr[1] / xr[2] + K.cy]
            pairs.append([pl, pr])
        value, _ = loss_epipolar(np.array(pairs), rig)
        assert value < 1e-9

    def test_rectified_same_row_is_zero(self):
        pairs = np.array([[[100.3, 57.2], [40.9, 57.2]], [[10.0, 200.0], [210.0, 200.0]]])
        value, _ = loss_epipolar(pairs, RIG)
        assert value < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        pairs = rng.uniform(0.0, 223.0, size=(8, 2, 2))
        _, grad = loss_epipolar(pairs, RIG)
        numeric = central_difference(lambda p: loss_epipolar(p, RIG)[0], pairs, h=1e-4)
        assert gradient_rel_error(grad, numeric) < 1e-5

    def test_gradient_on_general_rig(self):
        rig = StereoRig(K, K, Rotation.rot_y(0.05), np.array([-0.06, 0.002, 0.004]))
        rng = np.random.default_rng(2)
        pairs = rng.uniform(0.0, 223.0, size=(6, 2, 2))
        _, grad = loss_epipolar(pairs, rig)
        numeric = central_difference(lambda p: loss_epipolar(p, rig)[0], pairs, h=1e-4)
        assert gradient_rel_error(grad, numeric) < 1e-5

    def test_empty_pairs(self):
        with pytest.raises(EmptyPairList):
            loss_epipolar(np.zeros((0, 2, 2)), RIG)


class TestChamfer:
    def test_identical_sets_zero_with_zero_gradient(self):
        rng = np.random.default_rng(3)
        P = rng.uniform(size=(15, 3))
        value, grad = loss_chamfer(P, P.copy())
        assert value == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(P))

    def test_single_point_pair(self):
        value, grad = loss_chamfer(np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]]))
        assert value == pytest.approx(2.0, abs=1e-15)
        # Both directed terms pull the prediction toward (1, 0, 0).
        np.testing.assert_allclose(grad, [[-4.0, 0.0, 0.0]], atol=1e-15)

    def test_value_against_quadratic_oracle(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(size=(10, 3))
        Y = rng.uniform(size=(7, 3))
        d2 = ((X[:, None, :] - Y[None, :, :]) ** 2).sum(axis=2)
        expect = d2.min(axis=1).sum() + d2.min(axis=0).sum()
        value, _ = loss_chamfer(X, Y)
        assert value == pytest.approx(expect, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        X = rng.uniform(size=(12, 3))
        Y = rng.uniform(size=(9, 3))
        _, grad = loss_chamfer(X, Y)
        numeric = central_difference(lambda p: loss_chamfer(p, Y)[0], X, h=1e-5)
        assert gradient_rel_error(grad, numeric) < 1e-4

    def test_empty_sets(self):
        with pytest.raises(EmptySet):
            loss_chamfer(np.zeros((0, 3)), np.zeros((3, 3)))
        with pytest.raises(EmptySet):
            loss_chamfer(np.zeros((3, 3)), np.zeros((0, 3)))


class TestNocsL1:
    def test_equal_maps_zero(self):
        rng = np.random.default_rng(6)
        M = rng.uniform(size=(40, 3))
        value, grad = loss_nocs_l1(M, M.copy())
        assert value == 0.0
        np.testing.assert_array_equal(grad, np.zeros_like(M))

    def test_single_entry_offset(self):
        rng = np.random.default_rng(7)
        M = rng.uniform(size=(40, 3))
        M2 = M.copy()
        M2[7, 1] += 0.5
        value, _ = loss_nocs_l1(M2, M)
        assert value == pytest.approx(0.5 / 120.0, abs=1e-16)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        M_gt = rng.uniform(size=(20, 3))
        M = M_gt + rng.choice([-1.0, 1.0], size=(20, 3)) * rng.uniform(0.01, 0.1, size=(20, 3))
        _, grad = loss_nocs_l1(M, M_gt)
        numeric = central_difference(lambda p: loss_nocs_l1(p, M_gt)[0], M, h=1e-6)
        assert gradient_rel_error(grad, numeric) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            loss_nocs_l1(np.zeros((4, 3)), np.zeros((5, 3)))


class TestDeformReg:
    def test_zero_field(self):
        value, grad = loss_deform_reg(np.zeros((6, 3)))
        assert value == 0.0
        np.testing.assert_array_equal(grad, np.zeros((6, 3)))

    def test_three_four_five_row(self):
        value, grad = loss_deform_reg(np.array([[3.0, 4.0, 0.0]]))
        assert value == pytest.approx(5.0, abs=1e-15)
        np.testing.assert_allclose(grad, [[0.6, 0.8, 0.0]], atol=1e-15)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        D = rng.normal(size=(10, 3))
        D += 0.2 * np.sign(D)  # keep rows clear of the zero-norm kink
        _, grad = loss_deform_reg(D)
        numeric = central_difference(lambda p: loss_deform_reg(p)[0], D, h=1e-6)
        assert gradient_rel_error(grad, numeric) < 1e-5

    def test_mixed_zero_rows_get_zero_gradient(self):
        D = np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
        value, grad = loss_deform_reg(D)
        assert value == pytest.approx(2.5, abs=1e-15)
        np.testing.assert_array_equal(grad[0], [0.0, 0.0, 0.0])


class TestEntropy:
    def test_one_hot_rows_zero(self):
        A = np.eye(5)[np.array([0, 2, 4, 1])]
        value, _ = loss_entropy(A)
        assert value == 0.0

    def test_half_half_row(self):
        value, _ = loss_entropy(np.array([[0.5, 0.5]]))
        assert value == pytest.approx(np.log(2.0), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        A = rng.uniform(0.05, 0.95, size=(6, 8))
        _, grad = loss_entropy(A)
        numeric = central_difference(lambda p: loss_entropy(p)[0], A, h=1e-6)
        assert gradient_rel_error(grad, numeric) < 1e-5

    def test_negative_entry(self):
        with pytest.raises(NegativeEntry):
            loss_entropy(np.array([[0.5, -0.1]]))

    def test_zero_entries_contribute_nothing(self):
        value, grad = loss_entropy(np.array([[0.0, 1.0], [0.25, 0.75]]))
        row2 = -(0.25 * np.log(0.25) + 0.75 * np.log(0.75))
        assert value == pytest.approx(row2 / 2.0, abs=1e-12)
        assert grad[0, 0] == 0.0


class TestTotal:
    def test_all_zero(self):
        assert loss_total((0.0, 0.0, 0.0, 0.0, 0.0)) == 0.0

    def test_unit_components_with_default_weights(self):
        assert loss_total((1.0, 1.0, 1.0, 1.0, 1.0)) == pytest.approx(6.0201, abs=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(11)
        c = tuple(rng.uniform(0.1, 2.0, size=5))
        doubled = tuple(2.0 * x for x in c)
        assert loss_total(doubled) == pytest.approx(2.0 * loss_total(c), abs=1e-15)

    def test_custom_weights(self):
        w = LossWeights(epipolar=1.0, chamfer=0.0, nocs=2.0, entropy=0.0, deform=0.0)
        assert loss_total((3.0, 100.0, 0.5, 100.0, 100.0), w) == pytest.approx(4.0, abs=1e-12)

    def test_nonfinite_component(self):
        with pytest.raises(NonFiniteComponent):
            loss_total((np.inf, 0.0, 0.0, 0.0, 0.0))
        with pytest.raises(NonFiniteComponent):
            loss_total((0.0, np.nan, 0.0, 0.0, 0.0))

    def test_wrong_arity(self):
        with pytest.raises(ValueError):
            loss_total((1.0, 2.0, 3.0))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(epipolar=-0.01)
