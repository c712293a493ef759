import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipfed.embedding import DimensionError, gen_orthonormal, inverse_project_rows, project_rows
from ipfed.equivalence import commutation_gap, hinge_active_matrix, scaled_identity
from ipfed.losses import (
    CosineMarginParams,
    DegeneratePairWarning,
    InsufficientClassesError,
    PositiveLossParams,
    SpreadoutParams,
    cosine_margin_loss,
    cosine_margin_loss_grad,
    positive_loss,
    positive_loss_grad,
    spreadout_grad,
    spreadout_loss,
    spreadout_step,
    spreadout_update,
)

from oracles import central_diff, positive_loss_scalar, rel_err, spreadout_loss_loop, spreadout_update_loop

M09 = PositiveLossParams(0.9)


class TestPositiveLoss:
    def test_inner_product_above_margin(self):
        e = np.array([0.0, 1.0, 0.0])
        assert positive_loss(e, e, M09) == 0.0

    def test_boundary(self):
        assert positive_loss([0.9, 0.0], [1.0, 0.0], M09) == 0.0

    def test_value_025(self):
        # oracle: positive_loss_scalar([0.4, 0], [1, 0], 0.9) == 0.25
        assert positive_loss([0.4, 0.0], [1.0, 0.0], M09) == pytest.approx(0.25, abs=1e-15)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            positive_loss([1.0], [1.0, 0.0], M09)

    def test_margin_validation(self):
        with pytest.raises(ValueError):
            PositiveLossParams(0.0)
        with pytest.raises(ValueError):
            PositiveLossParams(1.5)


class TestPositiveGrad:
    def test_flat_region(self):
        gf, gw = positive_loss_grad([1.0, 0.0], [1.0, 0.0], M09)
        assert not gf.any() and not gw.any()

    def test_scalar_case(self):
        # oracle: central_diff of positive_loss_scalar at w=0.5, f=0.2 gives -0.32
        gf, gw = positive_loss_grad([0.2], [0.5], M09)
        assert gw[0] == pytest.approx(-0.32, abs=1e-12)
        assert gf[0] == pytest.approx(-2 * 0.8 * 0.5, abs=1e-12)

    def test_finite_differences(self, rng):
        for _ in range(20):
            f = rng.standard_normal(6) * 0.2
            w = rng.standard_normal(6) * 0.2
            if abs(0.9 - f @ w) < 1e-3:
                continue
            gf, gw = positive_loss_grad(f, w, M09)
            nf = central_diff(lambda x: positive_loss_scalar(x, w, 0.9), f)
            nw = central_diff(lambda x: positive_loss_scalar(f, x, 0.9), w)
            assert rel_err(gf, nf) <= 1e-5
            assert rel_err(gw, nw) <= 1e-5


class TestSpreadoutLoss:
    def test_inactive(self):
        assert spreadout_loss(np.eye(3) * 5, SpreadoutParams(0.7, 25)) == 0.0

    def test_two_classes_v2(self):
        # oracle: spreadout_loss_loop([[1,0],[0,1]], 2) == 0.6862915010152394
        W = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert spreadout_loss(W, SpreadoutParams(2.0, 1.0)) == pytest.approx(0.6862915010152394, abs=1e-12)
        assert spreadout_loss(W, SpreadoutParams(2.0, 1.0)) == pytest.approx(2 * (2 - math.sqrt(2)) ** 2, abs=1e-12)

    def test_two_classes_v07(self):
        assert spreadout_loss([[1.0, 0.0], [0.0, 1.0]], SpreadoutParams(0.7, 1.0)) == 0.0

    def test_needs_two_classes(self):
        with pytest.raises(InsufficientClassesError):
            spreadout_loss([[1.0, 0.0]])
        with pytest.raises(InsufficientClassesError):
            spreadout_update([[1.0, 0.0]])

    def test_matches_loop_oracle(self, rng):
        for C, d in [(3, 2), (7, 5), (12, 16)]:
            W = rng.standard_normal((C, d)) * 0.2
            assert spreadout_loss(W, SpreadoutParams(0.7)) == pytest.approx(spreadout_loss_loop(W.tolist(), 0.7), rel=1e-12)


class TestSpreadoutUpdate:
    def test_fixed_point_when_inactive(self, rng):
        W = np.eye(4) * 3.0
        np.testing.assert_array_equal(spreadout_update(W, SpreadoutParams(0.7, 25.0)), W)

    def test_two_classes_move_apart(self):
        W = np.array([[1.0, 0.0], [0.0, 1.0]])
        W_hat = spreadout_update(W, SpreadoutParams(2.0, 0.01))
        # oracle: spreadout_update_loop(W, 2, 0.01)
        expected = np.array([[1.01656854, -0.01656854], [-0.01656854, 1.01656854]])
        np.testing.assert_allclose(W_hat, expected, atol=1e-8)
        move = W_hat - W
        np.testing.assert_allclose(move[0] / np.linalg.norm(move[0]), [1 / math.sqrt(2), -1 / math.sqrt(2)], atol=1e-12)
        assert np.linalg.norm(W_hat[0] - W_hat[1]) > math.sqrt(2)

    def test_matches_loop_oracle(self, rng):
        W = rng.standard_normal((9, 4)) * 0.15
        np.testing.assert_allclose(
            spreadout_update(W, SpreadoutParams(0.7, 25.0)), spreadout_update_loop(W.tolist(), 0.7, 25.0), atol=1e-10
        )

    def test_direction_is_negative_fd_gradient(self, rng):
        p = SpreadoutParams(0.7, 3.0)
        for _ in range(10):
            W = rng.standard_normal((6, 5)) * 0.2
            numeric = central_diff(lambda X: spreadout_loss_loop(X.tolist(), 0.7), W)
            step = spreadout_update(W, p) - W
            assert rel_err(step, -p.step_lambda * numeric) <= 1e-5

    def test_degenerate_pair_skipped(self):
        W = np.array([[0.1, 0.0], [0.1, 0.0], [0.0, 0.3]])
        with pytest.warns(DegeneratePairWarning):
            W_hat = spreadout_update(W, SpreadoutParams(0.7, 1.0))
        assert np.all(np.isfinite(W_hat))
        _, n = spreadout_step(W, SpreadoutParams(0.7, 1.0))
        assert n == 1

    def test_boundary_contributes_nothing(self):
        W = np.array([[0.0, 0.0], [0.7, 0.0]])
        grad, _ = spreadout_grad(W, SpreadoutParams(0.7, 1.0))
        assert not grad.any()

    def test_descent_small_lambda(self, rng):
        for _ in range(20):
            W = rng.standard_normal((8, 4)) * 0.2
            p = SpreadoutParams(0.7, 1e-4)
            assert spreadout_loss(spreadout_update(W, p), p) <= spreadout_loss(W, p)

    def test_no_renormalization(self):
        W = np.array([[0.05, 0.0], [0.0, 0.05]])
        norms = np.linalg.norm(spreadout_update(W, SpreadoutParams(0.7, 25.0)), axis=1)
        assert np.all(norms > 1.5)


class TestCommutation:
    def test_identity_exact(self, rng):
        from ipfed.embedding import identity_transform

        W = hinge_active_matrix(rng, 5, 4, 0.7)
        assert commutation_gap(W, identity_transform(4)) == 0.0

    def test_scaled_identity_falsifies(self, rng):
        W = hinge_active_matrix(rng, 10, 16, 0.7)
        assert commutation_gap(W, scaled_identity(16)) > 1e-3

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), C=st.integers(2, 20), d=st.integers(1, 24))
    def test_orthonormal_commutes(self, seed, C, d):
        W = hinge_active_matrix(np.random.default_rng(seed), C, d, 0.7)
        r = gen_orthonormal(seed, 1, d)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegeneratePairWarning)
            protected = inverse_project_rows(spreadout_update(project_rows(W, r)), r)
            direct = spreadout_update(W)
        np.testing.assert_allclose(protected, direct, rtol=0, atol=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), C=st.integers(2, 15), d=st.integers(1, 16))
    def test_loss_invariant_under_rotation(self, seed, C, d):
        W = np.random.default_rng(seed).standard_normal((C, d)) * 0.3
        r = gen_orthonormal(seed, 2, d)
        assert abs(spreadout_loss(project_rows(W, r)) - spreadout_loss(W)) <= 1e-9


class TestCosineMargin:
    def test_single_class(self):
        assert cosine_margin_loss([1.0, 0.0], [[0.3, 0.4]], 0, CosineMarginParams(30, 0.35)) == pytest.approx(0.0, abs=1e-15)

    def test_uniform_softmax(self):
        f = np.array([0.0, 0.0, 1.0])
        rows = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        assert cosine_margin_loss(f, rows, 2, CosineMarginParams(30, 0.0)) == pytest.approx(math.log(4), abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            cosine_margin_loss([1.0, 0.0], [[1.0, 0.0]], 1)

    def test_finite_differences(self, rng):
        p = CosineMarginParams(30.0, 0.35)
        for _ in range(10):
            f = rng.standard_normal(5)
            f /= np.linalg.norm(f)
            rows = rng.standard_normal((4, 5))
            y = int(rng.integers(4))
            _, gf, grows = cosine_margin_loss_grad(f, rows, y, p)
            nf = central_diff(lambda x: cosine_margin_loss(x, rows, y, p), f)
            nrows = central_diff(lambda R: cosine_margin_loss(f, R, y, p), rows)
            assert rel_err(gf, nf) <= 1e-5
            assert rel_err(grows, nrows) <= 1e-5
