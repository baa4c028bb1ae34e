"""Network construction, random ensembles, and sampling."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlvamp import model
from mlvamp.errors import DegenerateModelError, InvalidModelError, UndefinedMetricError
from mlvamp.model import (
    NOISELESS,
    LinearLayerSpec,
    NetworkSpec,
    NonlinearLayerSpec,
    calibrate_noise_to_snr,
    forward_generate,
    geometric_singular_values,
    linear_layer_from_factors,
    network_from_json,
    network_to_json,
    sample_haar_orthogonal,
    svd_factorize,
)


class TestHaarSampling:
    def test_one_by_one_is_sign(self):
        for seed in range(20):
            q = sample_haar_orthogonal(1, seed)
            assert q.shape == (1, 1)
            assert abs(abs(q[0, 0]) - 1.0) < 1e-14

    @pytest.mark.parametrize("n", [2, 4, 50])
    def test_orthogonality(self, n):
        q = sample_haar_orthogonal(n, 123)
        err = np.max(np.abs(q.T @ q - np.eye(n)))
        assert err <= 1e-10

    def test_zero_size_rejected(self):
        with pytest.raises(InvalidModelError):
            sample_haar_orthogonal(0, 1)

    def test_first_and_second_moments(self):
        # Monte-Carlo check of the uniform law: entries have mean 0 and
        # variance 1/n.
        n, draws = 50, 10_000
        vals = np.empty(draws)
        for i in range(draws):
            vals[i] = sample_haar_orthogonal(n, 10_000 + i)[0, 0]
        sigma = math.sqrt(1.0 / n / draws)
        assert abs(np.mean(vals)) < 4 * sigma
        assert abs(np.var(vals) - 1.0 / n) < 0.1 / n

    def test_rotation_invariance(self):
        # Statistics of R @ Q match those of Q for a fixed rotation R.
        n, draws = 8, 2000
        rot = sample_haar_orthogonal(n, 777)
        plain = np.empty(draws)
        rotated = np.empty(draws)
        for i in range(draws):
            q = sample_haar_orthogonal(n, 20_000 + i)
            plain[i] = q[0, 0]
            rotated[i] = (rot @ sample_haar_orthogonal(n, 50_000 + i))[0, 0]
        sigma = math.sqrt(1.0 / n / draws)
        assert abs(np.mean(plain) - np.mean(rotated)) < 4 * math.sqrt(2) * sigma
        assert abs(np.var(plain) - np.var(rotated)) < 8 * math.sqrt(2.0 / n) / math.sqrt(draws)


class TestGeometricSingularValues:
    def test_unit_condition_number_is_constant(self):
        s = geometric_singular_values(3, 3, 1.0)
        assert np.all(s == s[0])

    def test_condition_number_exact(self):
        s = geometric_singular_values(100, 784, 10.0)
        assert s.size == 100
        assert s[0] / s[-1] == pytest.approx(10.0, rel=1e-12)

    def test_normalized_geometric_vector(self):
        # Independent construction: solve the normalization directly.
        ratio = 8.0 ** (-1.0 / 3.0)
        raw = ratio ** np.arange(4)
        expected = raw * math.sqrt(4.0 / np.sum(raw * raw))
        s = geometric_singular_values(4, 4, 8.0)
        np.testing.assert_allclose(s, expected, rtol=1e-12)
        assert np.sum(s * s) == pytest.approx(4.0)
        np.testing.assert_allclose(s[:-1] / s[1:], 8.0 ** (1.0 / 3.0), rtol=1e-12)

    def test_invalid_condition_number(self):
        with pytest.raises(InvalidModelError):
            geometric_singular_values(4, 4, 0.5)

    @given(
        m=st.integers(min_value=1, max_value=40),
        n=st.integers(min_value=1, max_value=40),
        cond=st.floats(min_value=1.0, max_value=1e4),
    )
    @settings(max_examples=60, deadline=None)
    def test_descending_and_normalized(self, m, n, cond):
        s = geometric_singular_values(m, n, cond)
        assert s.size == min(m, n)
        assert np.all(np.diff(s) <= 1e-12)
        assert np.sum(s * s) == pytest.approx(min(m, n), rel=1e-9)


class TestSvdFactorization:
    def test_identity(self):
        layer = LinearLayerSpec(weight=np.eye(3), bias=np.zeros(3), noise_precision=1.0)
        f = svd_factorize(layer)
        np.testing.assert_allclose(f.singular_values, np.ones(3))

    def test_diagonal(self):
        layer = LinearLayerSpec(
            weight=np.diag([3.0, 2.0, 1.0]), bias=np.zeros(3), noise_precision=1.0
        )
        f = svd_factorize(layer)
        np.testing.assert_allclose(f.singular_values, [3.0, 2.0, 1.0])

    def test_reconstruction_residual(self):
        rng = np.random.default_rng(42)
        w = rng.standard_normal((20, 50))
        layer = LinearLayerSpec(weight=w, bias=rng.standard_normal(20), noise_precision=2.0)
        f = svd_factorize(layer)
        err = np.max(np.abs(f.to_weight() - w))
        assert err <= 1e-8 * np.max(np.abs(w))

    def test_synthetic_layers_bypass_the_decomposition(self):
        u = sample_haar_orthogonal(4, 1)
        v = sample_haar_orthogonal(6, 2)
        s = geometric_singular_values(4, 6, 2.0)
        layer = linear_layer_from_factors(u, s, v, np.zeros(4), 1.0)
        assert layer.factors is not None
        assert svd_factorize(layer) is layer.factors

    @pytest.mark.parametrize("shape", [(7, 4), (4, 7), (5, 5)])
    def test_zero_padding_reproduces_the_affine_map(self, shape):
        # diag-extend(s) @ (right @ z) + bbar must equal left.T @ (W z + b).
        rng = np.random.default_rng(shape[0] * 10 + shape[1])
        w = rng.standard_normal(shape)
        b = rng.standard_normal(shape[0])
        f = svd_factorize(LinearLayerSpec(weight=w, bias=b, noise_precision=1.0))
        for _ in range(5):
            z = rng.standard_normal(shape[1])
            u_in = f.right_orthogonal @ z
            k = f.singular_values.size
            lhs = np.zeros(shape[0])
            lhs[:k] = f.singular_values * u_in[:k]
            lhs += f.transformed_bias
            rhs = f.left_orthogonal.T @ (w @ z + b)
            scale = np.max(np.abs(rhs))
            assert np.max(np.abs(lhs - rhs)) <= 1e-8 * scale


class TestNetworkValidation:
    def test_dims_mismatch_rejected(self):
        layer = LinearLayerSpec(weight=np.eye(3), bias=np.zeros(3), noise_precision=1.0)
        with pytest.raises(InvalidModelError):
            NetworkSpec(layers=(layer,), dims=(3, 4))

    def test_consecutive_separable_rejected(self):
        lin = LinearLayerSpec(weight=np.eye(3), bias=np.zeros(3), noise_precision=1.0)
        with pytest.raises(InvalidModelError):
            NetworkSpec.from_layers(
                (lin, NonlinearLayerSpec("relu"), NonlinearLayerSpec("relu"))
            )

    def test_dim_ratios(self):
        lin = LinearLayerSpec(weight=np.zeros((6, 3)), bias=np.zeros(6), noise_precision=1.0)
        spec = NetworkSpec.from_layers((lin,))
        assert spec.dim_ratios == (1.0, 2.0)


class TestForwardGenerate:
    def test_identity_chain_copies_the_input(self):
        lin = LinearLayerSpec(weight=np.eye(5), bias=np.zeros(5), noise_precision=NOISELESS)
        spec = NetworkSpec.from_layers((lin, NonlinearLayerSpec("identity"), lin))
        sig = forward_generate(spec, 3)
        for z in sig.signals[1:]:
            np.testing.assert_array_equal(z, sig.signals[0])

    def test_relu_zeroes_negative_components(self):
        lin = LinearLayerSpec(
            weight=np.eye(1) * -2.5, bias=np.zeros(1), noise_precision=NOISELESS
        )
        spec = NetworkSpec.from_layers((lin, NonlinearLayerSpec("relu")))
        sig = forward_generate(spec, 0)
        pre = sig.signals[1][0]
        assert sig.signals[2][0] == (pre if pre > 0 else 0.0)

    def test_determinism(self):
        rng = np.random.default_rng(0)
        lin = LinearLayerSpec(
            weight=rng.standard_normal((4, 4)), bias=rng.standard_normal(4), noise_precision=2.0
        )
        spec = NetworkSpec.from_layers((lin, NonlinearLayerSpec("relu"), lin))
        a = forward_generate(spec, 99)
        b = forward_generate(spec, 99)
        for za, zb in zip(a.signals, b.signals):
            np.testing.assert_array_equal(za, zb)

    def test_variance_propagation(self):
        # One linear-Gaussian layer: component variance of the output is
        # mean-square singular value + noise variance.  Aggregated over
        # many seeds to reach ~2e5 effective components.
        n, nu = 500, 4.0
        u = sample_haar_orthogonal(n, 1)
        v = sample_haar_orthogonal(n, 2)
        s = geometric_singular_values(n, n, 3.0)
        layer = linear_layer_from_factors(u, s, v, np.zeros(n), nu)
        spec = NetworkSpec.from_layers((layer,))
        total = 0.0
        draws = 400
        for seed in range(draws):
            total += float(np.mean(forward_generate(spec, seed).signals[1] ** 2))
        expected = float(np.mean(s * s)) + 1.0 / nu
        assert total / draws == pytest.approx(expected, rel=0.03)


class TestSnrCalibration:
    def _two_layer(self):
        rng = np.random.default_rng(5)
        w1 = rng.standard_normal((30, 20)) / math.sqrt(20)
        w2 = rng.standard_normal((25, 30)) / math.sqrt(30)
        return NetworkSpec.from_layers(
            (
                LinearLayerSpec(weight=w1, bias=np.zeros(30), noise_precision=NOISELESS),
                NonlinearLayerSpec("relu"),
                LinearLayerSpec(weight=w2, bias=np.zeros(25), noise_precision=1.0),
            )
        )

    def test_zero_db_matches_signal_power(self):
        spec = self._two_layer()
        nu = calibrate_noise_to_snr(spec, 0.0, trials=200, seed=1)
        power = 0.0
        final = spec.layers[-1]
        for t in range(200):
            sig = forward_generate(spec, 10_000 + t)
            power += float(np.sum((final.weight @ sig.signals[-2]) ** 2))
        power /= 200 * final.out_dim
        assert 1.0 / nu == pytest.approx(power, rel=0.1)

    def test_thirty_db_algebra(self):
        spec = self._two_layer()
        nu0 = calibrate_noise_to_snr(spec, 0.0, trials=100, seed=2)
        nu30 = calibrate_noise_to_snr(spec, 30.0, trials=100, seed=2)
        assert nu30 / nu0 == pytest.approx(1e3, rel=1e-9)

    def test_realized_snr_on_fresh_draws(self):
        spec = self._two_layer()
        nu = calibrate_noise_to_snr(spec, 30.0, trials=300, seed=3)
        final = spec.layers[-1]
        spec2 = NetworkSpec(
            layers=spec.layers[:-1]
            + (
                LinearLayerSpec(
                    weight=final.weight, bias=final.bias, noise_precision=nu
                ),
            ),
            dims=spec.dims,
        )
        sig_power = 0.0
        noise_power = 0.0
        for t in range(300):
            sig = forward_generate(spec2, 777_000 + t)
            clean = final.weight @ sig.signals[-2]
            sig_power += float(clean @ clean)
            noise_power += float(np.sum((sig.y - clean) ** 2))
        realized = 10.0 * math.log10(sig_power / noise_power)
        assert abs(realized - 30.0) <= 0.5

    def test_degenerate_model_rejected(self):
        spec = NetworkSpec.from_layers(
            (LinearLayerSpec(weight=np.zeros((3, 3)), bias=np.zeros(3), noise_precision=1.0),)
        )
        with pytest.raises(DegenerateModelError):
            calibrate_noise_to_snr(spec, 10.0, trials=3, seed=0)


class TestJsonRoundTrip:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        spec = NetworkSpec.from_layers(
            (
                LinearLayerSpec(
                    weight=rng.standard_normal((4, 3)),
                    bias=rng.standard_normal(4),
                    noise_precision=NOISELESS,
                ),
                NonlinearLayerSpec("sigmoid", noise_precision=5.0),
                LinearLayerSpec(
                    weight=rng.standard_normal((2, 4)),
                    bias=rng.standard_normal(2),
                    noise_precision=3.5,
                ),
            )
        )
        doc = network_to_json(spec)
        text = json.dumps(doc)
        back = network_from_json(json.loads(text))
        assert back.dims == spec.dims
        for a, b in zip(back.layers, spec.layers):
            assert a.kind == b.kind
            if a.kind == "linear":
                np.testing.assert_allclose(a.weight, b.weight)
                np.testing.assert_allclose(a.bias, b.bias)
                assert a.noise_precision == b.noise_precision
            else:
                assert a.activation == b.activation
                assert a.noise_precision == b.noise_precision

    def test_schema_fields(self):
        spec = NetworkSpec.from_layers(
            (
                LinearLayerSpec(weight=np.eye(2), bias=np.zeros(2), noise_precision=NOISELESS),
                NonlinearLayerSpec("relu"),
            )
        )
        doc = network_to_json(spec)
        assert doc["dims"] == [2, 2, 2]
        assert doc["layers"][0]["noiseless"] is True
        assert doc["layers"][1]["noise"] == {"kind": "none"}
