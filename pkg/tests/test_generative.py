"""Mixing model: endmember decoders, mixing mean, likelihood, joint density."""

import math

import numpy as np
import pytest

from conftest import fd_param_grads, max_rel_err, zero_mlp
from unmix import diffcore as dc
from unmix import generative as gen
from unmix.errors import ShapeError

L, P, H = 12, 3, 2


@pytest.fixture
def theta(rng):
    return gen.GenerativeParams.create(L, P, H, rng)


def zero_nonlinearity(theta):
    zero_mlp(theta.nlin_mixing)
    return theta


class TestEmDecode:
    def test_zero_weights_give_constant_sigmoid_mean(self, theta, rng):
        zero_mlp(theta.em_decoders[0])
        d = gen.em_decode(rng.standard_normal(H), 0, theta)
        np.testing.assert_allclose(d.mean.data, 0.5)

    def test_mean_in_unit_interval(self, theta, rng):
        for _ in range(10):
            d = gen.em_decode(rng.standard_normal(H) * 3, 1, theta)
            assert np.all(d.mean.data > 0) and np.all(d.mean.data < 1)

    def test_scale_isotropic_across_bands(self, theta, rng):
        d = gen.em_decode(rng.standard_normal(H), 2, theta)
        assert d.scale.data.shape == (L,)
        assert np.all(d.scale.data == d.scale.data[0])

    def test_bad_index(self, theta):
        with pytest.raises(ShapeError):
            gen.em_decode(np.zeros(H), P, theta)

    def test_decoder_width_sequence(self):
        assert gen.decoder_widths(64, 2) == [2, 7, 19, 82, 64]
        assert gen.decoder_widths(224, 2) == [2, 23, 59, 274, 224]


class TestMixingMean:
    def test_zero_nonlinearity_is_lmm(self, theta, rng):
        zero_nonlinearity(theta)
        a = np.array([0.2, 0.5, 0.3])
        M = rng.uniform(0, 1, (L, P))
        out = gen.mixing_mean(a, M, theta)
        np.testing.assert_allclose(out.data, M @ a, rtol=1e-12)

    def test_pure_pixel_returns_column(self, theta, rng):
        zero_nonlinearity(theta)
        M = rng.uniform(0, 1, (L, P))
        a = np.zeros(P)
        a[1] = 1.0
        out = gen.mixing_mean(a, M, theta)
        np.testing.assert_allclose(out.data, M[:, 1], rtol=1e-12)

    def test_gradient_wrt_abundances(self, theta, rng):
        M = rng.uniform(0, 1, (L, P))
        a = dc.parameter(np.array([0.3, 0.4, 0.3]), "a")
        out = gen.mixing_mean(a, M, theta)
        grads = dc.backward(out.sum(), {"a": a})

        def loss_fn():
            return float(gen.mixing_mean(a, M, theta).data.sum())

        fd = fd_param_grads(loss_fn, {"a": a})
        assert max_rel_err(grads, fd) < 1e-4

    def test_batched_matches_loop(self, theta, rng):
        A = rng.dirichlet(np.ones(P), size=4)
        M = rng.uniform(0, 1, (4, L, P))
        batched = gen.mixing_mean(A, M, theta).data
        rows = np.stack([gen.mixing_mean(A[i], M[i], theta).data
                         for i in range(4)])
        np.testing.assert_allclose(batched, rows, rtol=1e-12)


class TestLogLikelihood:
    def test_maximum_at_exact_reconstruction(self, theta, rng):
        a = np.array([0.5, 0.2, 0.3])
        M = rng.uniform(0, 1, (L, P))
        y = gen.mixing_mean(a, M, theta).data
        sigma = math.exp(theta.obs_log_scale.item())
        want = -L / 2 * math.log(2 * math.pi * sigma**2)
        assert abs(gen.log_likelihood(y, a, M, theta).item() - want) < 1e-9

    def test_decreasing_in_residual(self, theta, rng):
        a = np.array([0.5, 0.2, 0.3])
        M = rng.uniform(0, 1, (L, P))
        y = gen.mixing_mean(a, M, theta).data
        direction = rng.standard_normal(L)
        direction /= np.linalg.norm(direction)
        vals = [gen.log_likelihood(y + eps * direction, a, M, theta).item()
                for eps in (0.0, 0.05, 0.1, 0.2)]
        assert all(v1 > v2 for v1, v2 in zip(vals, vals[1:]))

    def test_hand_computed_toy(self):
        # 3 bands, 2 endmembers, zeroed nonlinearity: plain Gaussian algebra
        rng = np.random.default_rng(0)
        theta = gen.GenerativeParams.create(3, 2, 2, rng)
        zero_nonlinearity(theta)
        theta.obs_log_scale.data = np.array(math.log(0.1))
        M = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        a = np.array([0.6, 0.4])
        y = np.array([0.7, 0.3, 0.6])
        mean = M @ a                       # (0.6, 0.4, 0.5)
        want = float(np.sum(-0.5 * ((y - mean) / 0.1) ** 2
                            - math.log(0.1) - 0.5 * math.log(2 * math.pi)))
        got = gen.log_likelihood(y, a, M, theta).item()
        assert abs(got - want) < 1e-12


class TestLogJoint:
    def _parts(self, theta, y, a, M, Z):
        from unmix.distributions import gaussian_logpdf, std_normal_logpdf
        total = gen.log_likelihood(y, a, M, theta).item()
        total += gen.flat_abundance_logpdf(a, P).item()
        for k in range(P):
            d = gen.em_decode(Z[:, k], k, theta)
            total += gaussian_logpdf(M[:, k], d).item()
            total += std_normal_logpdf(dc.constant(Z[:, k])).item()
        return total

    def test_additivity(self, theta, rng):
        y = rng.uniform(0, 1, L)
        a = np.array([0.2, 0.3, 0.5])
        M = rng.uniform(0, 1, (L, P))
        Z = rng.standard_normal((H, P))
        got = gen.log_joint(y, a, M, Z, theta).item()
        assert abs(got - self._parts(theta, y, a, M, Z)) < 1e-9

    def test_flat_prior_contribution_constant(self):
        for a in ([0.1, 0.2, 0.7], [0.4, 0.4, 0.2]):
            val = gen.flat_abundance_logpdf(np.array(a), 3).item()
            assert abs(val - math.log(2.0)) < 1e-9

    def test_permutation_symmetry_with_tied_decoders(self, theta, rng):
        # tie all decoders and spreads, then permute (a, M, Z) jointly;
        # the free-form nonlinear term is off (it is not index-symmetric)
        zero_nonlinearity(theta)
        for k in range(1, P):
            for w_dst, w_src in zip(theta.em_decoders[k].weights,
                                    theta.em_decoders[0].weights):
                w_dst.data = w_src.data.copy()
            for b_dst, b_src in zip(theta.em_decoders[k].biases,
                                    theta.em_decoders[0].biases):
                b_dst.data = b_src.data.copy()
            theta.em_log_scales[k].data = theta.em_log_scales[0].data.copy()
        y = rng.uniform(0, 1, L)
        a = np.array([0.2, 0.3, 0.5])
        M = rng.uniform(0, 1, (L, P))
        Z = rng.standard_normal((H, P))
        perm = np.array([2, 0, 1])
        base = gen.log_joint(y, a, M, Z, theta).item()
        permuted = gen.log_joint(y, a[perm], M[:, perm], Z[:, perm], theta).item()
        assert abs(base - permuted) < 1e-9

    def test_finite_for_interior_inputs(self, theta, rng):
        for _ in range(5):
            y = rng.uniform(0, 1, L)
            a = rng.dirichlet(np.ones(P))
            a = np.clip(a, 1e-6, 1.0)
            a /= a.sum()
            M = rng.uniform(0, 1, (L, P))
            Z = rng.standard_normal((H, P)) * 2
            assert math.isfinite(gen.log_joint(y, a, M, Z, theta).item())

    def test_gradient_matches_finite_differences(self, rng):
        # toy instance, deterministic path: tolerance 1e-4.  Biases are
        # nudged off zero so no pre-activation sits exactly on a relu kink.
        theta = gen.GenerativeParams.create(6, 2, 2, rng)
        for net in (*theta.em_decoders, theta.nlin_mixing):
            for b in net.biases:
                b.data = b.data + rng.uniform(-0.1, 0.1, b.data.shape)
        y = rng.uniform(0, 1, 6)
        a = np.array([0.4, 0.6])
        M = rng.uniform(0, 1, (6, 2))
        Z = rng.standard_normal((2, 2))
        params = theta.named_parameters()
        grads = dc.backward(gen.log_joint(y, a, M, Z, theta), params)

        def loss_fn():
            return gen.log_joint(y, a, M, Z, theta).item()

        fd = fd_param_grads(loss_fn, params)
        assert max_rel_err(grads, fd) < 1e-4
