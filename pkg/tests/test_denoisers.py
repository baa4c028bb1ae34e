"""Scalar and affine pair estimators against independent oracles."""

import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlvamp import denoisers as dn
from mlvamp.denoisers import (
    BeliefParams,
    divergence_finite_difference,
    gauss_hermite_rule,
    input_denoiser,
    linear_pair,
    map_pair_nonlinear,
    mmse_pair_nonlinear,
    output_linear,
    output_separable,
    scalar_pair_map,
    scalar_pair_mmse,
)
from mlvamp.model import (
    NOISELESS,
    LinearLayerSpec,
    NonlinearLayerSpec,
    sample_haar_orthogonal,
    svd_factorize,
)

GAMMAS = st.floats(min_value=0.05, max_value=20.0)
RS = st.floats(min_value=-4.0, max_value=4.0)


def trapezoid_mmse(activation, rm, rp, gm, gp, lo=-12.0, hi=12.0, step=1e-4):
    """Fine-grid reference for deterministic separable posterior stats.

    Midpoint grids split at zero so activation kinks / jumps never straddle
    a cell.
    """
    from mlvamp.model import apply_activation

    neg = np.arange(lo, 0.0, step) + 0.5 * step
    pos = np.arange(0.0, hi, step) + 0.5 * step
    xs = np.concatenate([neg, pos])
    phi = apply_activation(activation, xs)
    logw = -0.5 * gm * (phi - rm) ** 2 - 0.5 * gp * (xs - rp) ** 2
    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    ex = w @ xs
    ep = w @ phi
    vx = w @ (xs - ex) ** 2
    vp = w @ (phi - ep) ** 2
    return ep, ex, gm * vp, gp * vx


def stable_seed(*parts):
    return zlib.crc32(repr(parts).encode()) % 2**31


def grid_map(activation, nu, rm, rp, gm, gp, lo=-10.0, hi=10.0, step=1e-5):
    """Brute-force minimizer of the (profiled) belief cost."""
    xs = np.arange(lo, hi + step, step)
    cost = dn.scalar_belief_cost(activation, nu, xs, rm, rp, gm, gp)
    return xs[np.argmin(cost)]


def _pair_cost(activation, nu, z_out, x_in, rm, rp, gm, gp):
    """Belief cost at a returned (output, input) pair.

    For deterministic channels the output determines the branch, which
    matters exactly at the sign channel's open boundary.
    """
    if math.isinf(nu):
        g_eff, out = gm, z_out
    else:
        g_eff = nu * gm / (nu + gm)
        out = (z_out * (nu + gm) - gm * rm) / nu  # invert the posterior blend
    return 0.5 * g_eff * (out - rm) ** 2 + 0.5 * gp * (x_in - rp) ** 2


class TestQuadratureRule:
    def test_weights_normalized_and_moments_exact(self):
        rule = gauss_hermite_rule(12)
        assert rule.weights.sum() == pytest.approx(1.0, rel=1e-12)
        # exact standard-normal moments up to degree 2 * order - 1
        for p, want in ((2, 1.0), (4, 3.0), (6, 15.0), (8, 105.0)):
            assert rule.weights @ rule.nodes**p == pytest.approx(want, rel=1e-10)
        assert abs(rule.weights @ rule.nodes**3) < 1e-12


class TestInputDenoiser:
    def test_zero_input(self):
        res = input_denoiser(np.zeros(5), 2.0)
        np.testing.assert_array_equal(res.zhat_plus, 0.0)

    def test_conjugacy_arithmetic(self):
        res = input_denoiser(np.array([2.0]), 1.0)
        assert res.zhat_plus[0] == pytest.approx(1.0)
        assert res.alpha_plus == pytest.approx(0.5)

    def test_large_precision_limit(self):
        res = input_denoiser(np.array([1.7]), 1e9)
        assert res.zhat_plus[0] == pytest.approx(1.7, rel=1e-8)
        assert res.alpha_plus == pytest.approx(1.0, abs=1e-8)

    def test_divergence_matches_finite_difference(self):
        rng = np.random.default_rng(0)
        r = rng.standard_normal(20)
        res = input_denoiser(r, 1.0)

        def fn(rm, rp):
            return input_denoiser(rm, 1.0).zhat_plus, rp

        fd, _ = divergence_finite_difference(fn, r, np.zeros(1))
        assert abs(fd - 0.5) < 1e-7
        assert abs(res.alpha_plus - fd) < 1e-7


class TestLinearPair:
    def _factors(self, n_out, n_in, seed, cond=3.0):
        from mlvamp.model import geometric_singular_values, linear_layer_from_factors

        u = sample_haar_orthogonal(n_out, seed)
        v = sample_haar_orthogonal(n_in, seed + 1)
        s = geometric_singular_values(n_out, n_in, cond)
        rng = np.random.default_rng(seed)
        layer = linear_layer_from_factors(u, s, v, rng.normal(0, 0.3, n_out), 2.0)
        return layer

    def test_zero_inputs_give_zero(self):
        # with zero pseudo-observations and zero bias every output is zero
        layer = self._factors(6, 4, 10)
        f = svd_factorize(layer)
        zero_bias = type(f)(
            left_orthogonal=f.left_orthogonal,
            singular_values=f.singular_values,
            right_orthogonal=f.right_orthogonal,
            transformed_bias=np.zeros(6),
        )
        params = BeliefParams(np.zeros(6), np.zeros(4), 1.3, 0.7)
        res = linear_pair(params, zero_bias, 1.5)
        np.testing.assert_allclose(res.zhat_plus, 0.0, atol=1e-15)
        np.testing.assert_allclose(res.zhat_minus, 0.0, atol=1e-15)

    def test_scalar_case_against_direct_solve(self):
        # s=1, b=0, nu=1, both precisions 1, both observations 1.
        aq, ap, ab = dn.linear_gains_plus(np.array([1.0]), 1.0, 1.0, 1.0)
        bq, bp, bb = dn.linear_gains_minus(np.array([1.0]), 1.0, 1.0, 1.0)
        qhat = aq[0] + ap[0]
        phat = bq[0] + bp[0]
        assert qhat == pytest.approx(1.0, rel=1e-12)
        assert phat == pytest.approx(1.0, rel=1e-12)

    def test_generic_case_against_direct_solve(self):
        # s=0.5, b=0.1, nu=2, gm=1, gp=3, u_out=2, u_in=0 (direct 2x2 oracle).
        s, b, nu, gm, gp, u_out, u_in = 0.5, 0.1, 2.0, 1.0, 3.0, 2.0, 0.0
        mat = np.array([[gm + nu, -nu * s], [-nu * s, gp + nu * s * s]])
        rhs = np.array([gm * u_out + nu * b, gp * u_in - nu * s * b])
        q_ref, p_ref = np.linalg.solve(mat, rhs)
        assert q_ref == pytest.approx(0.8)
        assert p_ref == pytest.approx(0.2)
        aq, ap, ab = dn.linear_gains_plus(np.array([s]), nu, gm, gp)
        bq, bp, bb = dn.linear_gains_minus(np.array([s]), nu, gm, gp)
        assert aq[0] * u_out + ap[0] * u_in + ab[0] * b == pytest.approx(q_ref, rel=1e-12)
        assert bq[0] * u_out + bp[0] * u_in + bb[0] * b == pytest.approx(p_ref, rel=1e-12)

    def test_strong_input_prior_pins_the_input(self):
        layer = self._factors(5, 5, 20)
        f = layer.factors
        rng = np.random.default_rng(1)
        r_plus = rng.standard_normal(5)
        params = BeliefParams(rng.standard_normal(5), r_plus, 1.0, 1e10)
        res = linear_pair(params, f, 2.0)
        np.testing.assert_allclose(res.zhat_minus, r_plus, atol=1e-6)

    @given(
        s=st.floats(min_value=0.0, max_value=5.0),
        nu=st.floats(min_value=0.1, max_value=50.0),
        gm=GAMMAS,
        gp=GAMMAS,
        u_out=RS,
        u_in=RS,
        b=st.floats(min_value=-2.0, max_value=2.0),
    )
    @settings(max_examples=80, deadline=None)
    def test_gains_solve_the_per_component_system(self, s, nu, gm, gp, u_out, u_in, b):
        mat = np.array([[gm + nu, -nu * s], [-nu * s, gp + nu * s * s]])
        rhs = np.array([gm * u_out + nu * b, gp * u_in - nu * s * b])
        q_ref, p_ref = np.linalg.solve(mat, rhs)
        aq, ap, ab = dn.linear_gains_plus(np.array([s]), nu, gm, gp)
        bq, bp, bb = dn.linear_gains_minus(np.array([s]), nu, gm, gp)
        assert aq[0] * u_out + ap[0] * u_in + ab[0] * b == pytest.approx(q_ref, rel=1e-9, abs=1e-12)
        assert bq[0] * u_out + bp[0] * u_in + bb[0] * b == pytest.approx(p_ref, rel=1e-9, abs=1e-12)

    def test_noiseless_limit_matches_large_precision(self):
        s = np.array([1.4, 0.6, 0.0])
        for gm, gp in ((0.5, 2.0), (3.0, 0.2)):
            exact = dn.linear_gains_plus(s, NOISELESS, gm, gp)
            big = dn.linear_gains_plus(s, 1e12, gm, gp)
            for a, b in zip(exact, big):
                np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-11)
            exact = dn.linear_gains_minus(s, NOISELESS, gm, gp)
            big = dn.linear_gains_minus(s, 1e12, gm, gp)
            for a, b in zip(exact, big):
                np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-11)

    def test_map_and_mmse_agree_on_affine_layers(self):
        # The affine solve serves both modes; the engine pair wrappers for
        # separable layers must also coincide when the activation is linear.
        rng = np.random.default_rng(3)
        layer = NonlinearLayerSpec("identity", noise_precision=2.0)
        params = BeliefParams(rng.standard_normal(30), rng.standard_normal(30), 1.2, 0.8)
        a = mmse_pair_nonlinear(params, layer)
        b = map_pair_nonlinear(params, layer)
        np.testing.assert_allclose(a.zhat_plus, b.zhat_plus, atol=1e-10)
        np.testing.assert_allclose(a.zhat_minus, b.zhat_minus, atol=1e-10)

    def test_rotational_consistency(self):
        # Conjugating the orthogonal factors by fixed rotations and rotating
        # the inputs rotates the outputs covariantly.
        layer = self._factors(6, 4, 40)
        f = layer.factors
        rng = np.random.default_rng(4)
        r_minus = rng.standard_normal(6)
        r_plus = rng.standard_normal(4)
        base = linear_pair(BeliefParams(r_minus, r_plus, 1.1, 0.9), f, 2.0)
        for k in range(5):
            rot_out = sample_haar_orthogonal(6, 100 + k)
            rot_in = sample_haar_orthogonal(4, 200 + k)
            f2 = type(f)(
                left_orthogonal=rot_out @ f.left_orthogonal,
                singular_values=f.singular_values,
                right_orthogonal=f.right_orthogonal @ rot_in.T,
                transformed_bias=f.transformed_bias,
            )
            res = linear_pair(
                BeliefParams(rot_out @ r_minus, rot_in @ r_plus, 1.1, 0.9), f2, 2.0
            )
            np.testing.assert_allclose(res.zhat_plus, rot_out @ base.zhat_plus, atol=1e-8)
            np.testing.assert_allclose(res.zhat_minus, rot_in @ base.zhat_minus, atol=1e-8)
            assert res.alpha_plus == pytest.approx(base.alpha_plus, rel=1e-10)
            assert res.alpha_minus == pytest.approx(base.alpha_minus, rel=1e-10)


class TestReluMmse:
    def test_identity_gaussian_symmetric_zero(self):
        layer = NonlinearLayerSpec("identity", noise_precision=1.0)
        params = BeliefParams(np.zeros(3), np.zeros(3), 1.0, 1.0)
        res = mmse_pair_nonlinear(params, layer)
        np.testing.assert_allclose(res.zhat_plus, 0.0, atol=1e-14)
        np.testing.assert_allclose(res.zhat_minus, 0.0, atol=1e-14)

    def test_vacuous_output_message_limit(self):
        # gamma_minus -> 0: the input estimate returns r_plus and the output
        # estimate becomes the prior mean of phi under N(r_plus, 1/gamma_plus).
        gm, gp, rp = 1e-11, 2.0, 0.4
        zp, zm, _, _ = scalar_pair_mmse("relu", NOISELESS, np.array([0.0]), np.array([rp]), gm, gp)
        assert zm[0] == pytest.approx(rp, abs=1e-6)
        sigma = 1.0 / math.sqrt(gp)
        from scipy.stats import norm

        expected = rp * norm.cdf(rp / sigma) + sigma * norm.pdf(rp / sigma)
        assert zp[0] == pytest.approx(expected, rel=1e-6)

    def test_frozen_oracle_case(self):
        # Trapezoid oracle ([-12, 12], step 1e-4) at gm=2, gp=1, rm=0.3,
        # rp=-0.2; values frozen from the oracle run.
        zp, zm, _, _ = scalar_pair_mmse(
            "relu", NOISELESS, np.array([0.3]), np.array([-0.2]), 2.0, 1.0
        )
        assert zp[0] == pytest.approx(0.190880779347, abs=1e-9)
        assert zm[0] == pytest.approx(-0.358335544059, abs=1e-9)
        op, om, odp, odm = trapezoid_mmse("relu", 0.3, -0.2, 2.0, 1.0)
        assert zp[0] == pytest.approx(op, abs=1e-8)
        assert zm[0] == pytest.approx(om, abs=1e-8)

    @pytest.mark.parametrize("activation", ["relu", "sign", "identity", "sigmoid"])
    def test_against_trapezoid_oracle(self, activation):
        rng = np.random.default_rng(stable_seed(activation))
        for _ in range(12):
            rm = rng.uniform(-1.2, 1.2) if activation == "sign" else rng.uniform(-3, 3)
            if activation == "sigmoid":
                rm = rng.uniform(0.1, 0.9)
            rp = rng.uniform(-3, 3)
            gm = rng.uniform(0.1, 5.0)
            gp = rng.uniform(0.1, 5.0)
            zp, zm, dp, dm = scalar_pair_mmse(
                activation, NOISELESS, np.array([rm]), np.array([rp]), gm, gp
            )
            op, om, odp, odm = trapezoid_mmse(activation, rm, rp, gm, gp)
            assert zp[0] == pytest.approx(op, abs=1e-6)
            assert zm[0] == pytest.approx(om, abs=1e-6)
            assert dp[0] == pytest.approx(odp, abs=5e-6)
            assert dm[0] == pytest.approx(odm, abs=5e-6)

    def test_noisy_channel_reduction(self):
        # Additive output noise folds into an effective precision; validate
        # against a 2-d trapezoid over (x, z).
        nu, gm, gp, rm, rp = 3.0, 1.5, 0.8, 0.7, -0.4
        zp, zm, _, _ = scalar_pair_mmse("relu", nu, np.array([rm]), np.array([rp]), gm, gp)
        xs = np.arange(-10, 10, 4e-3)
        zs = np.arange(-10, 10, 4e-3)
        X, Z = np.meshgrid(xs, zs, indexing="ij")
        logw = (
            -0.5 * nu * (Z - np.maximum(X, 0.0)) ** 2
            - 0.5 * gm * (Z - rm) ** 2
            - 0.5 * gp * (X - rp) ** 2
        )
        w = np.exp(logw - logw.max())
        w /= w.sum()
        assert zm[0] == pytest.approx(float((w * X).sum()), abs=2e-5)
        assert zp[0] == pytest.approx(float((w * Z).sum()), abs=2e-5)

    def test_quadrature_order_doubling(self):
        # Sigmoid posterior integrals barely move when the default order
        # doubles.
        rng = np.random.default_rng(11)
        order = dn.DEFAULT_QUAD_ORDER
        worst = 0.0
        for _ in range(40):
            rm = rng.uniform(0.05, 0.95)
            rp = rng.uniform(-3, 3)
            gm = rng.uniform(0.1, 10)
            gp = rng.uniform(0.1, 10)
            a = dn._sigmoid_stats(np.array([rm]), np.array([rp]), gm, gp, order=order)
            b = dn._sigmoid_stats(np.array([rm]), np.array([rp]), gm, gp, order=2 * order)
            worst = max(worst, max(abs(x[0] - y[0]) for x, y in zip(a, b)))
        assert worst <= 1e-8


class TestReluMap:
    def test_consistent_interior_point(self):
        zp, zm, _, _ = scalar_pair_map("relu", NOISELESS, np.array([1.0]), np.array([1.0]), 1.3, 0.7)
        assert zm[0] == pytest.approx(1.0)
        assert zp[0] == pytest.approx(1.0)

    def test_negative_branch(self):
        zp, zm, _, _ = scalar_pair_map(
            "relu", NOISELESS, np.array([-1.0]), np.array([-1.0]), 1.3, 0.7
        )
        assert zm[0] == pytest.approx(-1.0)
        assert zp[0] == pytest.approx(0.0)

    def test_frozen_grid_oracle_case(self):
        # Grid search ([-10, 10], step 1e-5) at gm=gp=1, rm=2, rp=-0.5.
        zp, zm, _, _ = scalar_pair_map("relu", NOISELESS, np.array([2.0]), np.array([-0.5]), 1.0, 1.0)
        assert zm[0] == pytest.approx(0.75, abs=1e-9)
        assert zp[0] == pytest.approx(0.75, abs=1e-9)
        assert grid_map("relu", NOISELESS, 2.0, -0.5, 1.0, 1.0) == pytest.approx(0.75, abs=2e-5)

    def test_tie_break_takes_the_nonnegative_branch(self):
        # Symmetric configuration where both branches cost the same.
        zp, zm, _, _ = scalar_pair_map("relu", NOISELESS, np.array([0.0]), np.array([0.0]), 1.0, 1.0)
        assert zm[0] == 0.0 and zp[0] == 0.0

    @pytest.mark.parametrize("activation,nu", [("relu", NOISELESS), ("relu", 5.0), ("sign", NOISELESS), ("sigmoid", NOISELESS)])
    def test_against_grid_oracle(self, activation, nu):
        rng = np.random.default_rng(17)
        for _ in range(10):
            rm = rng.uniform(-1.2, 1.2) if activation == "sign" else rng.uniform(-2.5, 2.5)
            if activation == "sigmoid":
                rm = rng.uniform(0.1, 0.9)
            rp = rng.uniform(-2.5, 2.5)
            gm = rng.uniform(0.2, 4.0)
            gp = rng.uniform(0.2, 4.0)
            zp, zm, _, _ = scalar_pair_map(activation, nu, np.array([rm]), np.array([rp]), gm, gp)
            ref = grid_map(activation, nu, rm, rp, gm, gp)
            cost_mine = _pair_cost(activation, nu, zp[0], zm[0], rm, rp, gm, gp)
            cost_ref = dn.scalar_belief_cost(activation, nu, ref, rm, rp, gm, gp)
            # the minimizer may sit in a flat region; compare costs
            assert cost_mine <= cost_ref + 1e-8

    def test_proximal_property(self):
        # The maximizer never has a larger cost than the input point.
        rng = np.random.default_rng(23)
        for activation in ("relu", "sign", "identity", "sigmoid"):
            for _ in range(25):
                rm = rng.uniform(0.1, 0.9) if activation == "sigmoid" else rng.uniform(-3, 3)
                rp = rng.uniform(-3, 3)
                gm = rng.uniform(0.1, 5)
                gp = rng.uniform(0.1, 5)
                zp, zm, _, _ = scalar_pair_map(
                    activation, NOISELESS, np.array([rm]), np.array([rp]), gm, gp
                )
                at_opt = _pair_cost(activation, NOISELESS, zp[0], zm[0], rm, rp, gm, gp)
                at_input = dn.scalar_belief_cost(activation, NOISELESS, rp, rm, rp, gm, gp)
                assert at_opt <= at_input + 1e-12


class TestDivergences:
    """Analytic divergences versus central finite differences."""

    def _random_params(self, rng, activation):
        rm = rng.uniform(0.1, 0.9, 25) if activation == "sigmoid" else rng.uniform(-3, 3, 25)
        rp = rng.uniform(-3, 3, 25)
        gm = float(rng.uniform(0.2, 5))
        gp = float(rng.uniform(0.2, 5))
        return rm, rp, gm, gp

    @pytest.mark.parametrize("activation", ["identity", "relu", "sign", "sigmoid"])
    @pytest.mark.parametrize("nu", [NOISELESS, 4.0])
    def test_mmse_alpha_identity(self, activation, nu):
        rng = np.random.default_rng(stable_seed(activation, nu))
        for _ in range(4):
            rm, rp, gm, gp = self._random_params(rng, activation)

            def fn(a, b):
                zp, zm, _, _ = scalar_pair_mmse(activation, nu, a, b, gm, gp)
                return zp, zm

            fd_p, fd_m = divergence_finite_difference(fn, rm, rp, epsilon=1e-5)
            zp, zm, dp, dm = scalar_pair_mmse(activation, nu, rm, rp, gm, gp)
            assert float(np.mean(dp)) == pytest.approx(fd_p, abs=1e-4)
            assert float(np.mean(dm)) == pytest.approx(fd_m, abs=1e-4)

    @pytest.mark.parametrize("activation", ["identity", "relu", "sigmoid"])
    def test_map_alpha_matches_branch_slopes(self, activation):
        rng = np.random.default_rng(stable_seed(activation, "map"))
        for _ in range(4):
            rm, rp, gm, gp = self._random_params(rng, activation)

            def fn(a, b):
                zp, zm, _, _ = scalar_pair_map(activation, NOISELESS, a, b, gm, gp)
                return zp, zm

            fd_p, fd_m = divergence_finite_difference(fn, rm, rp, epsilon=1e-6)
            _, _, dp, dm = scalar_pair_map(activation, NOISELESS, rm, rp, gm, gp)
            assert float(np.mean(dp)) == pytest.approx(fd_p, abs=1e-4)
            assert float(np.mean(dm)) == pytest.approx(fd_m, abs=1e-4)

    def test_constant_map_has_zero_divergence(self):
        def fn(a, b):
            return np.ones_like(a), np.ones_like(b)

        fd_p, fd_m = divergence_finite_difference(fn, np.zeros(4), np.zeros(4))
        assert fd_p == 0.0 and fd_m == 0.0

    def test_linear_pair_divergence(self):
        from mlvamp.model import geometric_singular_values, linear_layer_from_factors

        u = sample_haar_orthogonal(8, 5)
        v = sample_haar_orthogonal(6, 6)
        s = geometric_singular_values(8, 6, 4.0)
        rng = np.random.default_rng(7)
        layer = linear_layer_from_factors(u, s, v, rng.normal(0, 0.3, 8), 2.0)
        f = layer.factors
        gm, gp = 1.3, 0.6

        def fn(a, b):
            res = linear_pair(BeliefParams(a, b, gm, gp), f, 2.0)
            return res.zhat_plus, res.zhat_minus

        rm = rng.standard_normal(8)
        rp = rng.standard_normal(6)
        fd_p, fd_m = divergence_finite_difference(fn, rm, rp, epsilon=1e-6)
        res = linear_pair(BeliefParams(rm, rp, gm, gp), f, 2.0)
        # mean derivative in the original coordinates equals the mean of the
        # per-component gains in the rotated ones
        assert res.alpha_plus == pytest.approx(fd_p, abs=1e-7)
        assert res.alpha_minus == pytest.approx(fd_m, abs=1e-7)


class TestOutputDenoisers:
    def test_exact_identity_observation(self):
        layer = NonlinearLayerSpec("identity", noise_precision=NOISELESS)
        y = np.array([0.3, -1.2])
        res = output_separable(np.array([5.0, 5.0]), 1e-9, y, layer, "mmse")
        np.testing.assert_allclose(res.zhat_minus, y)

    def test_awgn_scalar_channel(self):
        layer = NonlinearLayerSpec("identity", noise_precision=1.0)
        y = np.array([2.0])
        res = output_separable(np.array([0.5]), 1.0, y, layer, "mmse")
        assert res.zhat_minus[0] == pytest.approx(1.25)  # (y + r)/2 with nu=gp=1

    def test_occlusion_rows(self):
        # Selection-matrix measurement: observed coordinates follow the
        # conjugacy formula, erased coordinates return the pseudo-observation.
        keep = np.array([1.0, 0.0, 1.0, 0.0])
        w = np.diag(keep)[keep > -1]  # full 4x4 diag with zero rows
        layer = LinearLayerSpec(weight=np.diag(keep), bias=np.zeros(4), noise_precision=2.0)
        f = svd_factorize(layer)
        rng = np.random.default_rng(9)
        r_plus = rng.standard_normal(4)
        y = np.array([0.7, 0.0, -0.3, 0.0])
        res = output_linear(r_plus, 3.0, y, f, 2.0)
        for i in range(4):
            if keep[i] > 0:
                expected = (3.0 * r_plus[i] + 2.0 * y[i]) / 5.0
            else:
                expected = r_plus[i]
            assert res.zhat_minus[i] == pytest.approx(expected, abs=1e-12)

    def test_relu_exact_observation(self):
        layer = NonlinearLayerSpec("relu", noise_precision=NOISELESS)
        y = np.array([1.5, 0.0])
        r_plus = np.array([0.3, 0.8])
        res = output_separable(r_plus, 2.0, y, layer, "mmse")
        assert res.zhat_minus[0] == pytest.approx(1.5)
        # y == 0 leaves an upper-truncated posterior; reference by trapezoid
        xs = np.arange(-12, 0, 1e-5)
        w = np.exp(-0.5 * 2.0 * (xs - 0.8) ** 2)
        w /= w.sum()
        assert res.zhat_minus[1] == pytest.approx(float(w @ xs), abs=1e-5)

    def test_relu_map_exact_observation(self):
        layer = NonlinearLayerSpec("relu", noise_precision=NOISELESS)
        res = output_separable(np.array([0.8, -0.4]), 2.0, np.array([0.0, 0.0]), layer, "map")
        assert res.zhat_minus[0] == pytest.approx(0.0)
        assert res.zhat_minus[1] == pytest.approx(-0.4)

    def test_unified_dispatch_matches_the_kind_specific_paths(self):
        rng = np.random.default_rng(14)
        sep = NonlinearLayerSpec("identity", noise_precision=1.0)
        r_plus = rng.standard_normal(3)
        y = rng.standard_normal(3)
        a = dn.output_denoiser(r_plus, 1.0, y, sep, "mmse")
        b = output_separable(r_plus, 1.0, y, sep, "mmse")
        np.testing.assert_array_equal(a.zhat_minus, b.zhat_minus)
        lin = LinearLayerSpec(
            weight=rng.standard_normal((4, 3)), bias=np.zeros(4), noise_precision=2.0
        )
        y4 = rng.standard_normal(4)
        c = dn.output_denoiser(r_plus, 1.0, y4, lin)
        d = output_linear(r_plus, 1.0, y4, svd_factorize(lin), 2.0)
        np.testing.assert_allclose(c.zhat_minus, d.zhat_minus)
