import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pncuq.network import NetConfig, init_he
from pncuq.ntk import (
    FactorizationError, KernelError, NtkKernel, analytic_ntk, empirical_ntk, factorize, gram,
    kernel_vector, relu_sigma, relu_sigma_prime,
)
from pncuq.rng import RngStream
from pncuq.selfcheck import mc_relu_expectations


class TestReluExpectations:
    def test_closed_points(self):
        assert relu_sigma(1, 1, 1) == pytest.approx(1.0, abs=1e-15)
        assert relu_sigma(1, 1, -1) == pytest.approx(0.0, abs=1e-15)
        assert relu_sigma(1, 1, 0) == pytest.approx(1 / math.pi, abs=1e-15)
        assert relu_sigma_prime(1, 1, 1) == 1.0
        assert relu_sigma_prime(1, 1, 0) == 0.5
        assert relu_sigma_prime(1, 1, -1) == 0.0

    def test_degenerate_marginal(self):
        assert relu_sigma(0.0, 2.0, 0.0) == 0.0
        assert relu_sigma_prime(0.0, 2.0, 0.0) == 0.0

    def test_not_psd(self):
        with pytest.raises(KernelError):
            relu_sigma(1.0, 1.0, 1.1)
        with pytest.raises(KernelError):
            relu_sigma_prime(1.0, 1.0, -1.5)

    def test_rounding_slack(self):
        # c^2 a hair above ab is clipped, not rejected
        assert relu_sigma(1.0, 1.0, 1.0 + 1e-12) == pytest.approx(1.0)

    def test_monte_carlo_spot(self):
        """A 2e6-sample check at rho=0.3; the full 1e7 grid lives in the acceptance suite."""
        s, sp = mc_relu_expectations(0.3, 2 * 10 ** 6, RngStream(31))
        assert abs(s - relu_sigma(1, 1, 0.3)) < 2e-3
        assert abs(sp - relu_sigma_prime(1, 1, 0.3)) < 2e-3

    @settings(max_examples=60, deadline=None)
    @given(a=st.floats(0.01, 10), b=st.floats(0.01, 10), r=st.floats(-1, 1), s=st.floats(0.1, 10))
    def test_scaling(self, a, b, r, s):
        """Sigma is 1-homogeneous in the covariance, Sigma' is scale free."""
        c = r * math.sqrt(a * b)
        assert relu_sigma(s * a, s * b, s * c) == pytest.approx(s * relu_sigma(a, b, c), rel=1e-9, abs=1e-12)
        assert relu_sigma_prime(s * a, s * b, s * c) == pytest.approx(relu_sigma_prime(a, b, c), abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(r1=st.floats(-1, 1), r2=st.floats(-1, 1))
    def test_monotone_in_correlation(self, r1, r2):
        lo, hi = sorted((r1, r2))
        assert relu_sigma(1, 1, lo) <= relu_sigma(1, 1, hi) + 1e-15
        assert relu_sigma_prime(1, 1, lo) <= relu_sigma_prime(1, 1, hi) + 1e-15


class TestAnalyticKernel:
    def test_diagonal_depth1(self):
        """K(x, x) = |x|^2 (1 + Sigma'(rho=1)) + Sigma = 2 |x|^2 for one hidden layer."""
        x = np.array([0.3, -0.2, 0.5])
        assert NtkKernel.analytic(1)(x, x) == pytest.approx(2 * x @ x, rel=1e-14)

    def test_diagonal_depth_l(self):
        x = np.array([0.3, 0.4])
        for L in (1, 2, 3):
            assert NtkKernel.analytic(L)(x, x) == pytest.approx((L + 1) * x @ x, rel=1e-14)

    def test_orthogonal_inputs(self):
        """For orthogonal unit vectors, depth 1: Theta = 0 * 1/2 + 1/pi."""
        assert NtkKernel.analytic(1)(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(1 / math.pi)

    def test_symmetric_and_psd(self):
        xs = RngStream(3).generator().uniform(-1, 1, (30, 4))
        g = gram(NtkKernel.analytic(2), xs)
        np.testing.assert_allclose(g.values, g.values.T, atol=1e-12)
        assert g.min_eigenvalue() >= -1e-8 * np.linalg.norm(g.values)

    def test_homogeneous(self):
        x, y = np.array([0.1, 0.2]), np.array([0.05, 0.12])
        k = NtkKernel.analytic(2)
        assert k(2.0 * x, y) == pytest.approx(2.0 * k(x, y), rel=1e-13)

    def test_mode_checks(self):
        k = NtkKernel.analytic(1)
        x = np.array([0.1, 0.2])
        assert analytic_ntk(k, x, x) == k(x, x)
        with pytest.raises(KernelError):
            empirical_ntk(k, x, x)
        with pytest.raises(KernelError):
            NtkKernel("empirical")
        with pytest.raises(KernelError):
            k(x, np.zeros(3))

    def test_kernel_vector(self):
        xs = RngStream(1).generator().uniform(0, 0.2, (5, 2))
        k = NtkKernel.analytic(1)
        np.testing.assert_allclose(kernel_vector(k, xs[0], xs), [k(xs[0], x) for x in xs])
        with pytest.raises(KernelError):
            kernel_vector(k, np.zeros(3), xs)


class TestEmpiricalKernel:
    def test_matches_jacobian_inner_product(self):
        net = init_he(NetConfig(2, 16), RngStream(2))
        x, y = np.array([0.1, 0.2]), np.array([0.2, 0.05])
        k = NtkKernel.empirical(net)
        from pncuq.network import jacobian

        J = jacobian(net, np.vstack([x, y]))
        assert empirical_ntk(k, x, y) == pytest.approx(J[0] @ J[1])

    def test_wide_net_close_to_analytic(self):
        net = init_he(NetConfig(2, 2 ** 14), RngStream(4))
        xs = RngStream(5).generator().uniform(0, 0.2, (6, 2))
        E = NtkKernel.empirical(net).matrix(xs)
        A = NtkKernel.analytic(1).matrix(xs)
        assert np.median(np.abs(E - A) / A) < 0.05

    def test_dimension_mismatch(self):
        k = NtkKernel.empirical(init_he(NetConfig(2, 8), RngStream(1)))
        with pytest.raises(KernelError):
            k.matrix(np.zeros((2, 3)))


class TestGram:
    def test_ridge_on_diagonal(self):
        xs = RngStream(1).generator().uniform(0, 0.2, (5, 2))
        k = NtkKernel.analytic(1)
        g = gram(k, xs, ridge=0.1)
        np.testing.assert_allclose(g.values - g.kernel_values, 0.1 * 5 * np.eye(5), atol=1e-15)
        with pytest.raises(KernelError):
            gram(k, xs, ridge=-1.0)

    def test_factor_solves(self):
        xs = RngStream(1).generator().uniform(0, 0.2, (20, 2))
        g = gram(NtkKernel.analytic(1), xs, ridge=1e-3)
        f = g.factor()
        b = np.arange(20.0)
        np.testing.assert_allclose(g.values @ f.solve(b), b, rtol=1e-9, atol=1e-9)
        assert f.jitter == 0.0 and not f.rank_deficient

    def test_singular_gets_jitter(self, caplog):
        """Duplicated inputs make K singular; one jitter step rescues the factorization."""
        x = RngStream(1).generator().uniform(0, 0.2, (4, 2))
        xs = np.vstack([x, x])
        g = gram(NtkKernel.analytic(1), xs)
        with caplog.at_level("WARNING"):
            f = g.factor()
        assert f.jitter == pytest.approx(1e-12 * np.trace(g.values) / 8)
        assert f.rank_deficient and f.rank <= 4
        assert "jitter" in caplog.text

    def test_hopeless_matrix_raises(self):
        with pytest.raises(FactorizationError):
            factorize(-np.eye(3))

    def test_export(self, tmp_path):
        xs = RngStream(1).generator().uniform(0, 0.2, (3, 2))
        g = gram(NtkKernel.analytic(1), xs)
        g.export(tmp_path / "g.bin")
        back = np.fromfile(tmp_path / "g.bin", dtype="<f8").reshape(3, 3)
        np.testing.assert_array_equal(back, g.values)
