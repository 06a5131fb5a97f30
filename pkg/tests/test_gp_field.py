import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from gpecm.gp_field import (
    BatchGp,
    ConditioningError,
    GpField,
    GpSubsystem,
    Grid,
    batch_gp_posterior,
    batch_nlml,
    field_transition,
    init_field_cov,
    predict_uncertain_input,
    propagate_field,
    query_weights,
    regression_weights,
    smooth_prediction,
)
from gpecm.kernels import ExpKernelParams, SeKernelParams, WvKernelParams, se_gram
from oracles import gp_moments_given_z, quadrature_moments, r0_field, soc_field


class TestGrid:
    def test_z_major_order(self):
        g = Grid.soc_current((0.0, 1.0), 2, (-1.0, 1.0), 3)
        np.testing.assert_array_equal(g.coords, [[0, -1], [0, 0], [0, 1], [1, -1], [1, 0], [1, 1]])

    def test_duplicate_points_rejected(self):
        with pytest.raises(ValueError):
            Grid(np.array([[0.1], [0.1]]), ("z",))

    def test_constant_grid(self):
        g = Grid.constant()
        assert len(g) == 1 and g.coords.shape == (1, 0)

    def test_dims_must_match_kernel(self):
        with pytest.raises(ValueError):
            GpField("x", Grid.soc((0, 1), 3), SeKernelParams(1.0, {"I": 1.0}), WvKernelParams(1, 1), None)


class TestInitCov:
    def test_single_point_block(self):
        z0 = 3 ** (1 / 3)
        f = GpField("q", Grid.constant(), SeKernelParams(1.0), WvKernelParams(1.0, z0), None)
        expected = np.array([[z0**3 / 3, z0**2 / 2], [z0**2 / 2, z0]])
        np.testing.assert_allclose(init_field_cov(f), expected, rtol=1e-15)
        assert expected[0, 0] == pytest.approx(1.0, rel=1e-15)

    def test_distant_points_give_block_copies(self):
        f = soc_field(3, gz=1e6)
        P = init_field_cov(f)
        p0 = init_field_cov(GpField("c", Grid.constant(), SeKernelParams(1.0), f.wv, None))
        np.testing.assert_allclose(P, linalg.block_diag(p0, p0, p0), atol=1e-14)

    def test_psd_six_points(self):
        f = soc_field(6, s2=2.0, gz=5.0, exp=ExpKernelParams(0.01, 1.0))
        P = init_field_cov(f)
        assert np.allclose(P, P.T)
        assert np.linalg.eigvalsh(P).min() > -1e-10 * np.trace(P)
        assert P[-1, -1] == 0.01

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 1), st.floats(-3, 1))
    def test_bol_variance_equals_magnitude(self, log_sx, log_sz):
        sx2, sz2 = 10 ** (2 * log_sx), 10 ** (2 * log_sz)
        f = soc_field(6, s2=sx2, var_wv=sz2)
        np.testing.assert_allclose(np.diag(init_field_cov(f))[::2], sx2, rtol=1e-10)


class TestPropagate:
    def test_zero_step_unchanged(self, rng):
        f = soc_field(4, exp=ExpKernelParams(0.1, 2.0))
        m = rng.normal(size=9)
        P = init_field_cov(f)
        m2, P2 = propagate_field(f, m, P, 0.0)
        np.testing.assert_array_equal(m2, m)
        np.testing.assert_allclose(P2, P, atol=1e-16)

    def test_kinematics(self):
        f = soc_field(2)
        m = np.array([1.0, 0.5, -2.0, 3.0])
        m2, _ = propagate_field(f, m, np.zeros((4, 4)), 0.4)
        np.testing.assert_allclose(m2, [1.2, 0.5, -0.8, 3.0])

    def test_variance_growth_from_zero(self):
        s2z, dz = 0.3, 2.0
        f = soc_field(3, var_wv=s2z)
        _, P = propagate_field(f, np.zeros(6), np.zeros((6, 6)), dz)
        np.testing.assert_allclose(np.diag(P)[::2], s2z * dz**3 / 3, rtol=1e-14)

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            field_transition(soc_field(2), -0.1)

    def test_subsystem_layout(self):
        a = soc_field(3, exp=ExpKernelParams(0.1, 1.0))
        b = GpField("g", Grid.constant(), SeKernelParams(1.0), WvKernelParams(1.0, 1.0), ExpKernelParams(0.2, 1.0))
        gp = GpSubsystem([a, b])
        assert gp.dim == 6 + 2 + 2
        np.testing.assert_array_equal(gp.value_index("f"), [0, 2, 4])
        np.testing.assert_array_equal(gp.value_index("g"), [6])
        assert gp.noise_index("f") == 8 and gp.noise_index("g") == 9

    def test_semigroup(self, rng):
        f = soc_field(3, exp=ExpKernelParams(0.1, 2.0))
        gp = GpSubsystem([f])
        m = rng.normal(size=gp.dim)
        P = gp.initial_cov()
        m1, P1, _ = gp.propagate(m, P, 0.7)
        m2, P2, _ = gp.propagate(m1, P1, 1.1)
        m3, P3, _ = gp.propagate(m, P, 1.8)
        np.testing.assert_allclose(m2, m3, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(P2, P3, rtol=1e-12, atol=1e-14)


class TestRegressionWeights:
    def test_one_hot_at_knot(self):
        f = soc_field(4, gz=1e4, z_range=(0.0, 0.9))
        w = regression_weights(f, [0.3], np.zeros(4))
        np.testing.assert_allclose(w, [0, 1, 0, 0], atol=1e-6)

    def test_uninformative_states(self):
        f = soc_field(4)
        w = regression_weights(f, [0.37], np.full(4, 1e12))
        assert np.abs(w).max() < 1e-10

    def test_midpoint_matches_batch(self):
        f = GpField("f", Grid.soc((0.0, 2.0), 3), SeKernelParams(1.0, {"z": 1.0}), WvKernelParams(1, 1), None)
        values = np.array([0.3, -0.2, 0.5])
        w = regression_weights(f, [0.5], np.zeros(3))
        b = BatchGp(f.grid.coords, values, lambda A, B: se_gram(A, B, f.se), 0.0)
        mean, _ = batch_gp_posterior(b, np.array([[0.5]]))
        assert w @ values == pytest.approx(mean[0], rel=1e-8)

    def test_singular_system_raises(self):
        with pytest.raises(ConditioningError):
            from gpecm.gp_field import jittered_cholesky

            jittered_cholesky(-np.eye(3))


class TestUncertainInput:
    @pytest.mark.parametrize("make", [soc_field, r0_field], ids=["soc", "soc_current"])
    def test_zero_variance_is_standard_prediction(self, make, rng):
        f = make()
        for _ in range(200):
            values = rng.normal(scale=0.3, size=f.n_points)
            value_var = rng.uniform(0, 0.05, size=f.n_points)
            z = rng.uniform(0.0, 1.0)
            i_now = rng.uniform(-5, 4)
            m, v = predict_uncertain_input(f, z, 0.0, i_now, values, value_var)
            m_ref, v_ref = gp_moments_given_z(f, z, i_now, values, value_var)
            assert abs(m - m_ref) < 1e-10
            assert abs(v - max(v_ref, 0.0)) < 1e-10

    @pytest.mark.parametrize("make,var_z", [(soc_field, 0.01), (soc_field, 1e-4), (r0_field, 0.01), (r0_field, 0.002)])
    def test_matches_quadrature(self, make, var_z, rng):
        f = make()
        for _ in range(5):
            values = rng.normal(scale=0.3, size=f.n_points)
            value_var = rng.uniform(0, 0.02, size=f.n_points)
            mu = rng.uniform(0.2, 0.9)
            i_now = rng.uniform(-5, 4)
            m, v = predict_uncertain_input(f, mu, var_z, i_now, values, value_var)
            m_ref, v_ref = quadrature_moments(f, mu, var_z, i_now, values, value_var)
            assert m == pytest.approx(m_ref, rel=1e-6, abs=1e-12)
            assert v == pytest.approx(v_ref, rel=1e-6, abs=1e-12)

    def test_mean_derivative(self, rng):
        f = soc_field(6)
        values = rng.normal(size=6)
        vv = np.full(6, 0.01)
        h = 1e-6
        p = smooth_prediction(f, 0.5, 0.003, 0.0, values, vv)
        up = smooth_prediction(f, 0.5 + h, 0.003, 0.0, values, vv).mean
        dn = smooth_prediction(f, 0.5 - h, 0.003, 0.0, values, vv).mean
        assert p.dmean_dz == pytest.approx((up - dn) / (2 * h), rel=1e-6)

    def test_total_ignorance_reverts_to_prior(self):
        f = soc_field(5, s2=0.6)
        m, v = predict_uncertain_input(f, 0.5, 1e8, 0.0, np.zeros(5), np.zeros(5))
        assert abs(m) < 1e-12
        assert v == pytest.approx(0.6, rel=1e-3)

    def test_noise_channel_added(self):
        f = soc_field(3, exp=ExpKernelParams(0.01, 1.0))
        m0, v0 = predict_uncertain_input(f, 0.5, 0.0, 0.0, np.ones(3), np.zeros(3))
        m1, v1 = predict_uncertain_input(f, 0.5, 0.0, 0.0, np.ones(3), np.zeros(3), 0.2, 0.03)
        assert m1 == pytest.approx(m0 + 0.2) and v1 == pytest.approx(v0 + 0.03)

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            predict_uncertain_input(soc_field(), 0.5, -1e-3, 0.0, np.zeros(5), np.zeros(5))

    def test_variance_never_negative(self):
        r = np.random.default_rng(3)
        f = soc_field(3, gz=50.0)
        worst = np.inf
        for _ in range(100_000):
            values = r.normal(size=3)
            value_var = r.uniform(0, 1e-3, size=3)
            _, v = predict_uncertain_input(f, r.uniform(-0.2, 1.2), r.uniform(0, 0.05), 0.0, values, value_var)
            worst = min(worst, v)
        assert worst >= 0.0


class TestQueryWeights:
    def test_identity_at_knots(self):
        f = soc_field(5, gz=10.0)
        W, interp = query_weights(f, f.grid.coords)
        np.testing.assert_allclose(W, np.eye(5), atol=1e-8)
        assert np.all(interp >= 0) and interp.max() < 1e-8

    def test_reproduces_smooth_values_on_dense_grid(self, rng):
        # the R0 grid is strongly correlated along I; functions in the span of K are still reproduced
        f = r0_field()
        values = f.gram() @ rng.normal(size=f.n_points)
        W, interp = query_weights(f, f.grid.coords)
        np.testing.assert_allclose(W @ values, values, atol=1e-6 * np.abs(values).max())
        assert np.all(interp >= 0)

    def test_constant_field(self):
        f = GpField("q", Grid.constant(), SeKernelParams(1.0), WvKernelParams(1, 1), None)
        W, interp = query_weights(f, np.zeros((1, 0)))
        np.testing.assert_array_equal(W, [[1.0]])


class TestBatch:
    def test_no_data_is_prior(self):
        b = BatchGp(np.zeros(0), np.zeros(0), lambda a, c: np.exp(-np.subtract.outer(a, c) ** 2), 0.1)
        m, v = batch_gp_posterior(b, np.array([0.0, 1.0]))
        np.testing.assert_array_equal(m, 0)
        np.testing.assert_array_equal(v, 1)

    def test_interpolation_limit(self):
        X = np.array([0.0, 1.0, 2.5])
        y = np.array([1.0, -1.0, 0.5])
        b = BatchGp(X, y, lambda a, c: np.exp(-0.5 * np.subtract.outer(a, c) ** 2), 1e-12)
        m, _ = batch_gp_posterior(b, X)
        np.testing.assert_allclose(m, y, atol=1e-6)

    def test_nlml_worked_value(self):
        b = BatchGp(np.zeros(1), np.zeros(1), lambda a, c: np.zeros((len(a), len(c))), 1.0)
        assert round(batch_nlml(b), 6) == 0.918939
        assert batch_nlml(b) == pytest.approx(0.5 * math.log(2 * math.pi), rel=1e-15)

    def test_nlml_quadratic_scaling(self, rng):
        X = rng.uniform(0, 3, 6)
        y = rng.normal(size=6)
        k = lambda a, c: np.exp(-0.5 * np.subtract.outer(a, c) ** 2)
        base = batch_nlml(BatchGp(X, 0 * y, k, 0.1))
        q1 = batch_nlml(BatchGp(X, y, k, 0.1)) - base
        q2 = batch_nlml(BatchGp(X, 2 * y, k, 0.1)) - base
        assert q2 == pytest.approx(4 * q1, rel=1e-12)
