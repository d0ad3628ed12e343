"""Probability kernels: Gaussians, Dirichlet, Beta machinery, pathwise Jacobian."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special as sp

from unmix import diffcore as dc
from unmix import distributions as ds
from unmix.errors import (ContractError, DegenerateSampleError, DomainError,
                          NumericError, ShapeError)

LOG_2PI = math.log(2 * math.pi)


class TestGaussianLogpdf:
    def test_standard_normal_at_zero(self):
        d = ds.DiagGaussian(mean=dc.constant([0.0]), scale=dc.constant([1.0]))
        val = ds.gaussian_logpdf(np.array([0.0]), d).item()
        assert abs(val - (-0.5 * LOG_2PI)) < 1e-12

    def test_density_at_mean(self):
        sigma = 0.37
        d = ds.DiagGaussian(mean=dc.constant([1.3]), scale=dc.constant([sigma]))
        val = ds.gaussian_logpdf(np.array([1.3]), d).item()
        assert abs(val - (-0.5 * LOG_2PI - math.log(sigma))) < 1e-12

    def test_matches_independent_quadratic_form(self, rng):
        # oracle: separately coded closed form
        x = rng.standard_normal(5)
        mean = rng.standard_normal(5)
        scale = rng.uniform(0.2, 2.0, 5)
        want = float(np.sum(-0.5 * ((x - mean) / scale) ** 2
                            - np.log(scale) - 0.5 * LOG_2PI))
        d = ds.DiagGaussian(mean=dc.constant(mean), scale=dc.constant(scale))
        assert abs(ds.gaussian_logpdf(x, d).item() - want) < 1e-12

    def test_nonpositive_scale_rejected(self):
        d = ds.DiagGaussian(mean=dc.constant([0.0]), scale=dc.constant([0.0]))
        with pytest.raises(DomainError):
            ds.gaussian_logpdf(np.array([0.0]), d)


class TestGaussianRsample:
    def test_zero_noise_returns_mean(self, rng):
        mean = rng.standard_normal(4)
        d = ds.DiagGaussian(mean=dc.constant(mean), scale=dc.constant(np.ones(4)))
        out = ds.gaussian_rsample(d, np.zeros(4))
        np.testing.assert_array_equal(out.data, mean)

    def test_floor_scale_collapses_to_mean(self, rng):
        mean = rng.standard_normal(4)
        noise = rng.standard_normal(4)
        d = ds.DiagGaussian(mean=dc.constant(mean),
                            scale=dc.constant(np.full(4, ds.GAMMA_FLOOR)))
        out = ds.gaussian_rsample(d, noise)
        assert np.all(np.abs(out.data - mean)
                      <= ds.GAMMA_FLOOR * np.abs(noise) + 1e-15)

    def test_scale_gradient_equals_noise(self, rng):
        noise = rng.standard_normal(3)
        scale = dc.parameter(rng.uniform(0.5, 1.5, 3), "scale")
        mean = dc.parameter(rng.standard_normal(3), "mean")
        out = ds.gaussian_rsample(ds.DiagGaussian(mean=mean, scale=scale), noise)
        grads = dc.backward(out.sum(), {"scale": scale, "mean": mean})
        np.testing.assert_allclose(grads["scale"], noise, rtol=1e-12)
        np.testing.assert_allclose(grads["mean"], np.ones(3))
        # finite-difference oracle on the scale path
        h = 1e-6
        for i in range(3):
            old = scale.data[i]
            scale.data[i] = old + h
            up = ds.gaussian_rsample(ds.DiagGaussian(mean=mean, scale=scale),
                                     noise).data.sum()
            scale.data[i] = old - h
            dn = ds.gaussian_rsample(ds.DiagGaussian(mean=mean, scale=scale),
                                     noise).data.sum()
            scale.data[i] = old
            assert abs((up - dn) / (2 * h) - grads["scale"][i]) < 1e-4

    def test_length_mismatch(self):
        d = ds.DiagGaussian(mean=dc.constant([0.0, 1.0]),
                            scale=dc.constant([1.0, 1.0]))
        with pytest.raises(ShapeError):
            ds.gaussian_rsample(d, np.zeros(3))


class TestDirichletLogpdf:
    def test_flat_is_log_factorial(self):
        p = ds.DirichletParams(concentration=dc.constant(np.ones(3)))
        for a in ([0.2, 0.3, 0.5], [0.6, 0.3, 0.1], [1 / 3, 1 / 3, 1 / 3]):
            val = ds.dirichlet_logpdf(np.array(a), p).item()
            assert abs(val - math.log(2.0)) < 1e-9

    def test_beta_reduction_oracle(self):
        # oracle: independently coded Beta(2, 5) log-density
        a = np.array([0.3, 0.7])
        gamma = np.array([2.0, 5.0])
        want = (math.lgamma(7.0) - math.lgamma(2.0) - math.lgamma(5.0)
                + (2.0 - 1) * math.log(0.3) + (5.0 - 1) * math.log(0.7))
        p = ds.DirichletParams(concentration=dc.constant(gamma))
        assert abs(ds.dirichlet_logpdf(a, p).item() - want) < 1e-9

    def test_integrates_to_one_on_grid(self):
        # trapezoid quadrature over the P=2 simplex with 1e4 points
        gamma = np.array([2.5, 1.5])
        p = ds.DirichletParams(concentration=dc.constant(gamma))
        t = np.linspace(1e-6, 1 - 1e-6, 10_000)
        a = np.stack([t, 1 - t], axis=1)
        dens = np.exp(ds.dirichlet_logpdf(a, p).data)
        assert abs(np.trapezoid(dens, t) - 1.0) < 1e-4

    def test_floor_violation_rejected(self):
        p = ds.DirichletParams(concentration=dc.constant([1e-4, 1.0]))
        with pytest.raises(DomainError):
            ds.dirichlet_logpdf(np.array([0.5, 0.5]), p)


class TestDirichletSample:
    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_simplex_and_positive(self, seed):
        r = np.random.default_rng(seed)
        gamma = r.uniform(ds.GAMMA_FLOOR, 8.0, size=4)
        p = ds.DirichletParams(concentration=dc.constant(gamma))
        a = ds.dirichlet_sample(p, r)
        assert np.all(a > 0)
        assert abs(a.sum() - 1.0) <= 1e-12

    def test_moments_match_closed_form(self):
        gamma = np.array([2.0, 2.0, 4.0])
        p = ds.DirichletParams(concentration=dc.constant(gamma))
        r = np.random.default_rng(7)
        draws = ds._sample_dirichlet_data(np.broadcast_to(gamma, (100_000, 3)), r)
        mean = draws.mean(axis=0)
        np.testing.assert_allclose(mean, [0.25, 0.25, 0.5], atol=0.01)
        s = gamma.sum()
        var_want = gamma[0] * (s - gamma[0]) / (s**2 * (s + 1))
        var_got = draws[:, 0].var()
        assert abs(var_got - var_want) / var_want < 0.10

    def test_tiny_concentration_still_valid(self):
        p = ds.DirichletParams(
            concentration=dc.constant([ds.GAMMA_FLOOR, ds.GAMMA_FLOOR, 5.0]))
        r = np.random.default_rng(3)
        for _ in range(50):
            a = ds.dirichlet_sample(p, r)
            assert np.all(a > 0) and np.all(a < 1)
            assert abs(a.sum() - 1.0) <= 1e-9


class TestBetaFunctions:
    def test_uniform_case(self):
        for x in (0.1, 0.5, 0.9):
            pdf, cdf, _ = ds.beta_functions(x, 1.0, 1.0)
            assert abs(pdf - 1.0) < 1e-12
            assert abs(cdf - x) < 1e-12

    @given(st.floats(0.02, 0.98), st.floats(0.2, 20.0), st.floats(0.2, 20.0))
    @settings(max_examples=60, deadline=None)
    def test_reflection_identity(self, x, a, b):
        _, cdf, _ = ds.beta_functions(x, a, b)
        _, cdf_ref, _ = ds.beta_functions(1 - x, b, a)
        assert abs(cdf - (1 - cdf_ref)) < 1e-10

    def test_beta_2_2_closed_form(self):
        pdf, cdf, _ = ds.beta_functions(0.5, 2.0, 2.0)
        assert abs(cdf - 0.5) < 1e-10
        assert abs(pdf - 1.5) < 1e-10

    def test_against_scipy_oracle(self, rng):
        for _ in range(50):
            x = rng.uniform(0.02, 0.98)
            a = rng.uniform(0.3, 15.0)
            b = rng.uniform(0.3, 15.0)
            pdf, cdf, _ = ds.beta_functions(x, a, b)
            assert abs(cdf - sp.betainc(a, b, x)) < 1e-10
            want_pdf = math.exp((a - 1) * math.log(x) + (b - 1) * math.log1p(-x)
                                - sp.betaln(a, b))
            assert abs(pdf - want_pdf) < 1e-9 * max(1.0, want_pdf)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            ds.beta_functions(0.0, 1.0, 1.0)
        with pytest.raises(DomainError):
            ds.beta_functions(0.5, -1.0, 1.0)

    def test_continued_fraction_iteration_cap(self):
        with pytest.raises(NumericError):
            ds._betacf(np.array(5.0), np.array(5.0), np.array(0.4), max_iter=1)


class TestPathwiseJacobian:
    def test_finite_for_random_draws(self, rng):
        for _ in range(20):
            P = int(rng.integers(2, 6))
            gamma = rng.uniform(0.5, 10.0, P)
            p = ds.DirichletParams(concentration=dc.constant(gamma))
            a = ds.dirichlet_sample(p, rng)
            jac = ds.dirichlet_pathwise_jacobian(a, p)
            assert np.all(np.isfinite(jac))

    def test_columns_sum_to_zero(self, rng):
        gamma = rng.uniform(0.5, 10.0, 4)
        p = ds.DirichletParams(concentration=dc.constant(gamma))
        a = ds.dirichlet_sample(p, rng)
        jac = ds.dirichlet_pathwise_jacobian(a, p)
        np.testing.assert_allclose(jac.sum(axis=0), 0.0, atol=1e-6)

    def test_inverse_cdf_oracle_p2(self, rng):
        # oracle: finite difference of the Beta inverse cdf at a fixed base
        worst = 0.0
        for _ in range(100):
            gamma = rng.uniform(0.5, 10.0, 2)
            u = rng.uniform(0.02, 0.98)
            a1 = sp.betaincinv(gamma[0], gamma[1], u)
            a = np.array([a1, 1 - a1])
            p = ds.DirichletParams(concentration=dc.constant(gamma))
            jac = ds.dirichlet_pathwise_jacobian(a, p)
            h = 1e-4
            fd = np.zeros((2, 2))
            for j in range(2):
                gp, gm = gamma.copy(), gamma.copy()
                gp[j] += h
                gm[j] -= h
                up = sp.betaincinv(gp[0], gp[1], u)
                dn = sp.betaincinv(gm[0], gm[1], u)
                fd[0, j] = (up - dn) / (2 * h)
                fd[1, j] = -fd[0, j]
            rel = np.abs(jac - fd) / np.maximum(np.abs(fd), 1e-7)
            worst = max(worst, rel.max())
        assert worst < 1e-3

    def test_mean_derivative_within_three_se(self):
        # analytic oracle: d(gamma_i / sum) / d gamma_j
        gamma = np.array([2.0, 2.0, 4.0])
        s = gamma.sum()
        r = np.random.default_rng(11)
        n = 100_000
        a = ds._sample_dirichlet_data(np.broadcast_to(gamma, (n, 3)), r)
        jac = ds._pathwise_jacobian_data(a, np.broadcast_to(gamma, (n, 3)))
        est = jac.mean(axis=0)
        se = jac.std(axis=0) / np.sqrt(n)
        analytic = (np.eye(3) * s - gamma[:, None]) / s**2
        assert np.all(np.abs(est - analytic) <= 3.0 * se)

    def test_vertex_sample_rejected(self):
        p = ds.DirichletParams(concentration=dc.constant([2.0, 3.0]))
        with pytest.raises(DegenerateSampleError):
            ds.dirichlet_pathwise_jacobian(np.array([1.0, 0.0]), p)


class TestRsampleNode:
    def test_backward_uses_pathwise_jacobian(self, rng):
        gamma = dc.parameter(rng.uniform(1.0, 5.0, 3), "gamma")
        noise = ds.RngNoise(np.random.default_rng(0))
        a = ds.dirichlet_rsample(gamma, noise)
        w = rng.standard_normal(3)
        loss = (a * dc.constant(w)).sum()
        grads = dc.backward(loss, {"gamma": gamma})
        jac = ds._pathwise_jacobian_data(a.data, gamma.data)
        np.testing.assert_allclose(grads["gamma"], w @ jac, rtol=1e-10)


class TestReplayNoise:
    def test_replay_reproduces_recording(self):
        noise = ds.ReplayNoise(np.random.default_rng(0))
        x1 = noise.normal((2, 3))
        g = np.array([2.0, 3.0])
        a1 = noise.dirichlet(g)
        noise.rewind()
        np.testing.assert_array_equal(noise.normal((2, 3)), x1)
        np.testing.assert_array_equal(noise.dirichlet(g), a1)

    def test_replayed_dirichlet_moves_smoothly_with_gamma(self):
        noise = ds.ReplayNoise(np.random.default_rng(1))
        g = np.array([2.0, 3.0])
        a0 = noise.dirichlet(g)
        noise.rewind()
        a1 = noise.dirichlet(g + np.array([1e-6, 0.0]))
        assert abs(a1[0] - a0[0]) < 1e-4

    def test_frozen_base_requires_two_components(self):
        noise = ds.ReplayNoise(np.random.default_rng(1))
        with pytest.raises(ContractError):
            noise.dirichlet(np.array([1.0, 1.0, 1.0]))
