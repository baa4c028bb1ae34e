"""Shared builders for network fixtures and exact Gaussian references."""

import numpy as np
import pytest

from mlvamp.model import (
    NOISELESS,
    LinearLayerSpec,
    NetworkSpec,
    NonlinearLayerSpec,
    geometric_singular_values,
    linear_layer_from_factors,
    sample_haar_orthogonal,
)


def make_gaussian_chain(dims, noise_precisions, conds=None, seed=0, bias_scale=0.3,
                        unit_spectrum=False):
    """All-affine chain with orthogonally mixed weights."""
    rng = np.random.default_rng(seed)
    conds = conds or [2.0] * (len(dims) - 1)
    layers = []
    for i in range(len(dims) - 1):
        n_in, n_out = dims[i], dims[i + 1]
        left = sample_haar_orthogonal(n_out, seed * 1000 + 2 * i)
        right = sample_haar_orthogonal(n_in, seed * 1000 + 2 * i + 1)
        if unit_spectrum:
            s = np.ones(min(n_out, n_in))
        else:
            s = geometric_singular_values(n_out, n_in, conds[i])
        bias = rng.normal(0.0, bias_scale, n_out)
        layers.append(linear_layer_from_factors(left, s, right, bias, noise_precisions[i]))
    return NetworkSpec.from_layers(tuple(layers))


def exact_gaussian_posterior(spec, y):
    """Closed-form joint posterior (mean and covariance) of an affine chain."""
    dims = spec.dims[:-1]
    off = np.concatenate([[0], np.cumsum(dims)])
    n_tot = off[-1]
    prec = np.zeros((n_tot, n_tot))
    lin = np.zeros(n_tot)
    prec[: dims[0], : dims[0]] += np.eye(dims[0])
    for i, layer in enumerate(spec.layers):
        if layer.kind != "linear":
            raise ValueError("exact posterior requires an all-affine chain")
        nu, w, b = layer.noise_precision, layer.weight, layer.bias
        a = off[i]
        prec[a : a + dims[i], a : a + dims[i]] += nu * w.T @ w
        if i < len(spec.layers) - 1:
            bidx = off[i + 1]
            prec[bidx : bidx + dims[i + 1], bidx : bidx + dims[i + 1]] += nu * np.eye(dims[i + 1])
            prec[a : a + dims[i], bidx : bidx + dims[i + 1]] += -nu * w.T
            prec[bidx : bidx + dims[i + 1], a : a + dims[i]] += -nu * w
            lin[a : a + dims[i]] += -nu * w.T @ b
            lin[bidx : bidx + dims[i + 1]] += nu * b
        else:
            lin[a : a + dims[i]] += nu * w.T @ (np.asarray(y) - b)
    cov = np.linalg.inv(prec)
    mean = cov @ lin
    means = [mean[off[i] : off[i + 1]] for i in range(len(dims))]
    avg_vars = [
        float(np.trace(cov[off[i] : off[i + 1], off[i] : off[i + 1]])) / dims[i]
        for i in range(len(dims))
    ]
    return means, avg_vars


def make_relu_network(dims, rho, nu_lin, nu_act, nu_meas, seed=0, cond=3.0, bias_std=0.5):
    """Alternating affine/relu chain with bias means tuned to a positive fraction."""
    from scipy.special import ndtri

    rng = np.random.default_rng(seed)
    layers = []
    v = 1.0
    n_pairs = (len(dims) - 2) // 2
    for i in range(n_pairs + 1):
        n_in = dims[2 * i]
        n_out = dims[2 * i + 1]
        last = i == n_pairs
        left = sample_haar_orthogonal(n_out, seed * 777 + 2 * i)
        right = sample_haar_orthogonal(n_in, seed * 777 + 2 * i + 1)
        s = geometric_singular_values(n_out, n_in, cond)
        v_pre = float(np.sum(s * s)) / n_out * v
        sigma_pre = np.sqrt(v_pre + bias_std**2)
        mu_b = 0.0 if last else sigma_pre * ndtri(rho)
        bias = rng.normal(mu_b, bias_std, n_out)
        layers.append(
            linear_layer_from_factors(left, s, right, bias, nu_meas if last else nu_lin)
        )
        if not last:
            layers.append(NonlinearLayerSpec("relu", noise_precision=nu_act))
            x = mu_b + sigma_pre * rng.standard_normal(20_000)
            v = float(np.mean(np.maximum(x, 0.0) ** 2))
            if np.isfinite(nu_act):
                v += 1.0 / nu_act
    return NetworkSpec.from_layers(tuple(layers))
