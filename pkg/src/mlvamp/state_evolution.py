"""Deterministic scalar recursion predicting the large-system behavior.

The recursion mirrors the engine sweep for sweep, but every vector is
replaced by a scalar random variable: true signals become Gaussians with
matched second moments (orthogonal mixing makes components Gaussian in
the wide limit) and each estimator call becomes an expectation over a
small scalar model of its inputs.

The two pseudo-observations play asymmetric roles, matching their cavity
semantics in the algorithm: the input-side message summarizes everything
upstream (its error is orthogonal to the message itself, so the belief's
Gaussian factor is the exact conditional of the truth given the message),
while the output-side message summarizes the downstream likelihood (truth
plus independent noise).  Under this binding the per-layer belief is the
true conditional of the scalar model, which is what makes the
posterior-variance identities hold at fixed points.

Bookkeeping per hidden signal:

* ``tau_zero``   second moment of the true signal components,
* ``K_plus``     2x2 second-moment matrix of (true signal, plus-side error);
                 diagonal, since only the error's size is a free parameter
                 under the binding above,
* ``tau_minus``  second moment of the minus-side error,
* ``mu``         mean of the true components where the basis is NOT freshly
                 mixed (a separable layer's input keeps the upstream affine
                 layer's bias mean; a mixed basis is mean-free).

Affine-layer expectations average per-component closed forms over the
empirical singular-value / transformed-bias samples; separable-layer
expectations integrate over a small grid (kink-aware tensor quadrature by
default, seeded Monte-Carlo optionally).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import denoisers as dn
from .errors import InvalidModelError
from .model import apply_activation, svd_factorize
from .seeding import substream

_ALPHA_MIN = 1e-6


# ---------------------------------------------------------------------------
# Perturbation laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearLaw:
    """Empirical/parametric law of one affine layer's invariants.

    ``bbar_atoms`` carries instantiated transformed-bias components paired
    with the singular values; when absent the transformed bias is modeled
    as an independent zero-mean Gaussian of variance ``bbar_var``.
    ``bias_mean`` is the mean of the *raw* bias components: it survives as
    a shift of the layer-output components in the unmixed basis.
    """

    singular_values: np.ndarray
    n_out: int
    n_in: int
    noise_precision: float
    bbar_atoms: np.ndarray | None = None
    bbar_var: float = 0.0
    bias_mean: float = 0.0

    kind = "linear"

    def padded(self, n):
        s = np.zeros(n)
        k = min(n, self.singular_values.size)
        s[:k] = self.singular_values[:k]
        return s

    def bias_terms(self, n):
        """(deterministic per-component value, shared Gaussian variance)."""
        if self.bbar_atoms is not None:
            atoms = np.zeros(n)
            k = min(n, self.bbar_atoms.size)
            atoms[:k] = self.bbar_atoms[:k]
            return atoms, 0.0
        return np.zeros(n), float(self.bbar_var)


@dataclass(frozen=True)
class SeparableLaw:
    activation: str
    noise_precision: float
    dim: int

    kind = "nonlinear"


@dataclass(frozen=True)
class NetworkLaw:
    """Per-layer perturbation laws plus the signal dimensions."""

    layers: tuple
    dims: tuple

    @property
    def num_layers(self):
        return len(self.layers)

    @classmethod
    def from_network(cls, spec):
        """Instance-level law: empirical singular values and bias samples."""
        laws = []
        for ell, layer in enumerate(spec.layers, start=1):
            if layer.kind == "linear":
                f = svd_factorize(layer)
                laws.append(
                    LinearLaw(
                        singular_values=f.singular_values.copy(),
                        n_out=layer.out_dim,
                        n_in=layer.in_dim,
                        noise_precision=layer.noise_precision,
                        bbar_atoms=f.transformed_bias.copy(),
                        bias_mean=float(np.mean(layer.bias)),
                    )
                )
            else:
                laws.append(
                    SeparableLaw(
                        activation=layer.activation,
                        noise_precision=layer.noise_precision,
                        dim=spec.dims[ell],
                    )
                )
        return cls(layers=tuple(laws), dims=tuple(spec.dims))


@dataclass(frozen=True)
class ExpectationEngine:
    """How separable-layer expectations are evaluated."""

    method: str = "quadrature"
    quad_order: int = 20
    mc_samples: int = 1_000_000
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("quadrature", "mc"):
            raise InvalidModelError("expectation method must be 'quadrature' or 'mc'")


@dataclass(frozen=True)
class SEConfig:
    iterations: int = 50
    mode: str = "mmse"
    gamma_init: float = 1e-4
    damping: float = 1.0
    alpha_clip: float = _ALPHA_MIN
    expectation: ExpectationEngine = field(default_factory=ExpectationEngine)
    stop_tol: float = 0.0

    def __post_init__(self):
        if self.mode not in ("mmse", "map"):
            raise InvalidModelError("mode must be 'mmse' or 'map'")
        if not (0.0 < self.damping <= 1.0):
            raise InvalidModelError("damping must lie in (0, 1]")


@dataclass
class SEState:
    """Scalar parameters after one full iteration."""

    K_plus: np.ndarray  # (L, 2, 2) second moments of (true, plus error)
    tau_minus: np.ndarray  # (L,)
    tau_zero: np.ndarray  # (L,) true-signal second moments for hidden signals
    alpha_bar_plus: np.ndarray
    alpha_bar_minus: np.ndarray
    gamma_bar_plus: np.ndarray
    gamma_bar_minus: np.ndarray
    eta_bar_plus: np.ndarray
    eta_bar_minus: np.ndarray


@dataclass
class SEResult:
    states: list
    nmse_db: np.ndarray  # (half_iterations, L) predicted NMSE in dB
    mse: np.ndarray  # same grid, linear scale
    tau_zero: np.ndarray  # (L + 1,)
    directions: list


def _clip_alpha(a, bound=_ALPHA_MIN):
    return float(np.clip(a, bound, 1.0 - bound))


# ---------------------------------------------------------------------------
# Initial pass: true-signal second moments and unmixed-basis means
# ---------------------------------------------------------------------------


def activation_second_moment(name, mean, var):
    """``E[phi(X)^2]`` for ``X ~ N(mean, var)``; closed forms where kinks exist."""
    sd = math.sqrt(max(var, 0.0))
    if name == "identity":
        return mean * mean + var
    if name == "sign":
        return 1.0
    if name == "relu":
        if sd == 0.0:
            return max(mean, 0.0) ** 2
        z = mean / sd
        phi = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        return (mean * mean + var) * ndtr(z) + mean * sd * phi
    rule = dn.gauss_hermite_rule(60)
    x = mean + sd * rule.nodes
    phi_vals = apply_activation(name, x)
    return float(np.sum(rule.weights * phi_vals * phi_vals))


def se_initial_pass(law, engine=None):
    """Second moments ``tau_zero[0..L]`` and means ``mu[0..L]`` of the chain.

    ``mu[ell]`` is nonzero only where the component basis is not freshly
    mixed before the next layer consumes it: the output of an affine layer
    feeding a separable layer keeps its raw bias mean.
    """
    engine = engine or ExpectationEngine()
    n = law.num_layers
    tau = np.zeros(n + 1)
    mu = np.zeros(n + 1)
    tau[0] = 1.0
    for ell, layer in enumerate(law.layers, start=1):
        if layer.kind == "linear":
            atoms, bvar = layer.bias_terms(layer.n_out)
            s = layer.padded(layer.n_out)
            noise = 0.0 if math.isinf(layer.noise_precision) else 1.0 / layer.noise_precision
            tau[ell] = float(np.mean(s * s) * tau[ell - 1] + np.mean(atoms * atoms) + bvar + noise)
            next_separable = ell < n and law.layers[ell].kind == "nonlinear"
            mu[ell] = layer.bias_mean if next_separable else 0.0
        else:
            var = max(tau[ell - 1] - mu[ell - 1] ** 2, 0.0)
            second = activation_second_moment(layer.activation, mu[ell - 1], var)
            if math.isfinite(layer.noise_precision):
                second += 1.0 / layer.noise_precision
            tau[ell] = second
            mu[ell] = 0.0
    return tau, mu


# ---------------------------------------------------------------------------
# Affine-layer scalar steps (exact second-moment algebra per component)
# ---------------------------------------------------------------------------
#
# Independent basis per component: X = (P0, Pp, Qm, Xi, Bg) with
#   (P0, Pp) ~ N(0, K),  Qm ~ N(0, tau_m),  Xi ~ N(0, 1/nu),  Bg ~ N(0, bvar)
# plus a deterministic per-component bias atom.  Every quantity of
# interest is affine in X, so all moments are exact.


def _cross_moment(ca, da, cb, db, K, tau_m, xi_var, b_var):
    return (
        ca[0] * cb[0] * K[0, 0]
        + (ca[0] * cb[1] + ca[1] * cb[0]) * K[0, 1]
        + ca[1] * cb[1] * K[1, 1]
        + ca[2] * cb[2] * tau_m
        + ca[3] * cb[3] * xi_var
        + ca[4] * cb[4] * b_var
        + da * db
    )


def _linear_forward_step(layer, K_prev, tau_m, gm, gp_prev, clip=_ALPHA_MIN):
    """Forward update at an affine layer: returns (alpha, K_new, mse_plus)."""
    nu = layer.noise_precision
    xi_var = 0.0 if math.isinf(nu) else 1.0 / nu
    s = layer.padded(layer.n_out)
    atoms, b_var = layer.bias_terms(layer.n_out)
    aq, ap, ab = dn.linear_gains_plus(s, nu, gm, gp_prev)
    alpha = _clip_alpha(np.mean(aq), clip)

    one = np.ones_like(s)
    zero = np.zeros_like(s)
    c_q0 = (s, zero, zero, one, one)
    d_q0 = atoms
    c_h = (aq * s + ap, ap, aq, aq, aq + ab)
    d_h = atoms * (aq + ab)
    c_err = tuple(ch - cq for ch, cq in zip(c_h, c_q0))
    d_err = d_h - d_q0
    mse_plus = float(np.mean(_cross_moment(c_err, d_err, c_err, d_err, K_prev, tau_m, xi_var, b_var)))

    scale = 1.0 / (1.0 - alpha)
    c_qp = (
        c_err[0] * scale,
        c_err[1] * scale,
        (c_err[2] - alpha) * scale,
        c_err[3] * scale,
        c_err[4] * scale,
    )
    d_qp = d_err * scale
    k00 = float(np.mean(_cross_moment(c_q0, d_q0, c_q0, d_q0, K_prev, tau_m, xi_var, b_var)))
    k11 = float(np.mean(_cross_moment(c_qp, d_qp, c_qp, d_qp, K_prev, tau_m, xi_var, b_var)))
    return alpha, np.array([[k00, 0.0], [0.0, k11]]), mse_plus


def _linear_backward_step(layer, K_prev, tau_m, gm, gp_prev, clip=_ALPHA_MIN):
    """Backward update at an affine layer: returns (alpha, tau_new, mse_minus)."""
    nu = layer.noise_precision
    xi_var = 0.0 if math.isinf(nu) else 1.0 / nu
    s = layer.padded(layer.n_in)
    atoms, b_var = layer.bias_terms(layer.n_in)
    bq, bp, bb = dn.linear_gains_minus(s, nu, gm, gp_prev)
    alpha = _clip_alpha(np.mean(bp), clip)

    one = np.ones_like(s)
    zero = np.zeros_like(s)
    c_h = (bq * s + bp, bp, bq, bq, bq + bb)
    d_h = atoms * (bq + bb)
    c_err = (c_h[0] - one, c_h[1], c_h[2], c_h[3], c_h[4])
    d_err = d_h
    mse_minus = float(np.mean(_cross_moment(c_err, d_err, c_err, d_err, K_prev, tau_m, xi_var, b_var)))
    scale = 1.0 / (1.0 - alpha)
    c_pm = (
        c_err[0] * scale,
        (c_err[1] - alpha) * scale,
        c_err[2] * scale,
        c_err[3] * scale,
        c_err[4] * scale,
    )
    d_pm = d_err * scale
    tau_new = float(np.mean(_cross_moment(c_pm, d_pm, c_pm, d_pm, K_prev, tau_m, xi_var, b_var)))
    return alpha, tau_new, mse_minus


def _linear_output_step(layer, K_prev, gp_prev, clip=_ALPHA_MIN):
    """Backward update at an exactly observed affine measurement layer."""
    nu = layer.noise_precision
    xi_var = 0.0 if math.isinf(nu) else 1.0 / nu
    s = layer.padded(layer.n_in)
    g_r, g_obs = dn.observed_linear_gains(s, nu, gp_prev)
    alpha = _clip_alpha(np.mean(g_r), clip)
    one = np.ones_like(s)
    zero = np.zeros_like(s)
    c_h = (g_r + g_obs * s, g_r, zero, g_obs, zero)
    c_err = (c_h[0] - one, c_h[1], zero, c_h[3], zero)
    mse_minus = float(np.mean(_cross_moment(c_err, zero, c_err, zero, K_prev, 0.0, xi_var, 0.0)))
    scale = 1.0 / (1.0 - alpha)
    c_pm = (c_err[0] * scale, (c_err[1] - alpha) * scale, zero, c_err[3] * scale, zero)
    tau_new = float(np.mean(_cross_moment(c_pm, zero, c_pm, zero, K_prev, 0.0, xi_var, 0.0)))
    return alpha, tau_new, mse_minus


# ---------------------------------------------------------------------------
# Separable-layer scalar steps (grid expectations)
# ---------------------------------------------------------------------------


_AXIS_OFFSETS = np.array([0.5, 1.0, 2.0, 4.0, 8.5])


def _kinked_axis(kink_z, order):
    """Standard-normal quadrature with a panel edge at ``kink_z``.

    Composite Gauss-Legendre over [-8.5, 8.5] with geometrically refined
    edges; exact handling of integrands with one kink (relu / sign signal
    laws), spectrally accurate elsewhere.
    """
    edges = np.concatenate([[0.0], _AXIS_OFFSETS, -_AXIS_OFFSETS])
    if np.isfinite(kink_z) and abs(kink_z) < 8.5:
        edges = np.concatenate([edges, [kink_z]])
    edges = np.unique(edges)
    per_panel = max(order // 2, 12)
    nodes, weights = np.polynomial.legendre.leggauss(per_panel)
    ts = []
    ws = []
    for a, b in zip(edges[:-1], edges[1:]):
        t = 0.5 * (a + b) + 0.5 * (b - a) * nodes
        ts.append(t)
        ws.append(0.5 * (b - a) * weights * np.exp(-0.5 * t * t) / math.sqrt(2 * math.pi))
    t = np.concatenate(ts)
    w = np.concatenate(ws)
    return t, w / w.sum()


def _grid(K, mu, tau_m, xi_var, engine, tag, kink=None):
    """Joint nodes/weights for the separable-layer integration.

    Returns ``(p0, r_plus, t_minus, xi, w)``.  The two messages play the
    asymmetric roles they have in the algorithm: the input-side message is
    an upstream posterior summary, so its error is orthogonal to the
    message itself,

        r_plus = mu + beta (p0 - mu) + sqrt(beta K11) t,   beta = 1 - K11 / Var(p0)

    with ``E[(r_plus - p0)^2] = K11`` and ``Cov(p0 - r_plus, r_plus) = 0``;
    the output-side message is a downstream likelihood summary, i.e. the
    true output plus independent noise of variance ``tau_m`` (assembled by
    the caller from ``t_minus``).  Under this binding the layer belief is
    the exact conditional of the simulated law given both messages.  When
    the layer's activation has a kink, the truth axis gets a panel edge
    exactly at it.
    """
    var_p0 = max(K[0, 0] - mu * mu, 0.0)
    sd_p0 = math.sqrt(var_p0)
    n_axes = 3 + (1 if xi_var > 0 else 0)
    if engine.method == "quadrature":
        rule = dn.gauss_hermite_rule(engine.quad_order)
        axes_nodes = [rule.nodes] * n_axes
        axes_weights = [rule.weights] * n_axes
        if kink is not None and sd_p0 > 0:
            t0, w0 = _kinked_axis((kink - mu) / sd_p0, engine.quad_order)
            axes_nodes[0] = t0
            axes_weights[0] = w0
        axes = np.meshgrid(*axes_nodes, indexing="ij")
        t = [a.ravel() for a in axes]
        w = np.ones_like(t[0])
        for a in np.meshgrid(*axes_weights, indexing="ij"):
            w = w * a.ravel()
    else:
        rng = substream(engine.seed, *tag)
        t = [rng.standard_normal(engine.mc_samples) for _ in range(n_axes)]
        w = np.full(engine.mc_samples, 1.0 / engine.mc_samples)
    p0 = mu + sd_p0 * t[0]
    k11 = max(K[1, 1], 0.0)
    beta = 0.0 if var_p0 <= 0 else min(max(1.0 - k11 / var_p0, 0.0), 1.0)
    r_plus = mu + beta * (p0 - mu) + math.sqrt(beta * k11) * t[1]
    xi = math.sqrt(xi_var) * t[3] if xi_var > 0 else 0.0
    return p0, r_plus, t[2], xi, w


def _activation_kink(activation):
    return 0.0 if activation in ("relu", "sign") else None


def _separable_forward_step(layer, K_prev, mu_prev, tau_m, gm, gp_prev, mode, engine, tag, clip=_ALPHA_MIN):
    xi_var = 0.0 if math.isinf(layer.noise_precision) else 1.0 / layer.noise_precision
    p0, r_plus, t_minus, xi, w = _grid(K_prev, mu_prev, tau_m, xi_var, engine, tag,
                                       kink=_activation_kink(layer.activation))
    q0 = apply_activation(layer.activation, p0) + xi
    r_minus = q0 + math.sqrt(max(tau_m, 0.0)) * t_minus
    zp, _, dp, _ = dn.scalar_pair(
        mode, layer.activation, layer.noise_precision, r_minus, r_plus, gm, gp_prev
    )
    alpha = _clip_alpha(np.sum(w * dp), clip)
    err = zp - q0
    mse_plus = float(np.sum(w * err * err))
    qp = (err - alpha * (r_minus - q0)) / (1.0 - alpha)
    k00 = float(np.sum(w * q0 * q0))
    k11 = float(np.sum(w * qp * qp))
    return alpha, np.array([[k00, 0.0], [0.0, k11]]), mse_plus


def _separable_backward_step(layer, K_prev, mu_prev, tau_m, gm, gp_prev, mode, engine, tag, clip=_ALPHA_MIN):
    xi_var = 0.0 if math.isinf(layer.noise_precision) else 1.0 / layer.noise_precision
    p0, r_plus, t_minus, xi, w = _grid(K_prev, mu_prev, tau_m, xi_var, engine, tag,
                                       kink=_activation_kink(layer.activation))
    q0 = apply_activation(layer.activation, p0) + xi
    r_minus = q0 + math.sqrt(max(tau_m, 0.0)) * t_minus
    _, zm, _, dm = dn.scalar_pair(
        mode, layer.activation, layer.noise_precision, r_minus, r_plus, gm, gp_prev
    )
    alpha = _clip_alpha(np.sum(w * dm), clip)
    err = zm - p0
    mse_minus = float(np.sum(w * err * err))
    pm = (err - alpha * (r_plus - p0)) / (1.0 - alpha)
    tau_new = float(np.sum(w * pm * pm))
    return alpha, tau_new, mse_minus


def _separable_output_step(layer, K_prev, mu_prev, gp_prev, mode, engine, tag, clip=_ALPHA_MIN):
    """Backward update at an exactly observed separable measurement layer."""
    xi_var = 0.0 if math.isinf(layer.noise_precision) else 1.0 / layer.noise_precision
    p0, r_plus, _, xi, w = _grid(K_prev, mu_prev, 0.0, xi_var, engine, tag,
                                 kink=_activation_kink(layer.activation))
    y = apply_activation(layer.activation, p0) + xi
    zm, dm = dn.separable_output_fields(
        r_plus, gp_prev, y, layer.activation, layer.noise_precision, mode
    )
    alpha = _clip_alpha(np.sum(w * dm), clip)
    err = zm - p0
    mse_minus = float(np.sum(w * err * err))
    pm = (err - alpha * (r_plus - p0)) / (1.0 - alpha)
    tau_new = float(np.sum(w * pm * pm))
    return alpha, tau_new, mse_minus


def _input_step(gm, tau_m, clip=_ALPHA_MIN):
    """Forward update for the standard-normal input prior (exact algebra)."""
    slope = gm / (1.0 + gm)
    alpha = _clip_alpha(slope, clip)
    mse_plus = slope * slope * tau_m + (1.0 - slope) ** 2
    scale = 1.0 / (1.0 - alpha)
    # Qp = ((slope - alpha) Qm - (1 - slope) Z) / (1 - alpha)
    ca, cz = (slope - alpha) * scale, -(1.0 - slope) * scale
    k11 = ca * ca * tau_m + cz * cz
    return alpha, np.array([[1.0, 0.0], [0.0, k11]]), mse_plus


# ---------------------------------------------------------------------------
# Full recursion
# ---------------------------------------------------------------------------


def se_forward_layer(law, ell, K_prev, mu_prev, tau_m, gm, gp_prev, mode, engine, tag=(), clip=_ALPHA_MIN):
    """One forward update at layer ``ell`` (1-based), dispatched by kind."""
    layer = law.layers[ell - 1]
    if layer.kind == "linear":
        return _linear_forward_step(layer, K_prev, tau_m, gm, gp_prev, clip)
    return _separable_forward_step(layer, K_prev, mu_prev, tau_m, gm, gp_prev, mode, engine, tag, clip)


def se_backward_layer(law, ell, K_prev, mu_prev, tau_m, gm, gp_prev, mode, engine, tag=(), clip=_ALPHA_MIN):
    """One backward update at layer ``ell`` (1-based), dispatched by kind."""
    layer = law.layers[ell - 1]
    if layer.kind == "linear":
        return _linear_backward_step(layer, K_prev, tau_m, gm, gp_prev, clip)
    return _separable_backward_step(layer, K_prev, mu_prev, tau_m, gm, gp_prev, mode, engine, tag, clip)


def run_se(law, config):
    """Iterate the scalar recursion and emit per-half-iteration error predictions."""
    engine = config.expectation
    n = law.num_layers  # hidden signals 0 .. n-1
    tau0, mu = se_initial_pass(law, engine)
    gm = np.full(n, float(config.gamma_init))
    gp = np.full(n, float(config.gamma_init))
    eta_p = np.full(n, np.nan)
    eta_m = np.full(n, np.nan)
    ap = np.full(n, np.nan)
    am = np.full(n, np.nan)
    tau_m = tau0[:n].copy()
    K = [np.array([[tau0[ell], 0.0], [0.0, tau0[ell]]]) for ell in range(n)]

    def damped(old, raw):
        if config.damping >= 1.0:
            return raw
        return float(old ** (1.0 - config.damping) * raw**config.damping)

    states = []
    nmse_rows = []
    directions = []
    prev_params = None
    for k in range(config.iterations):
        mse_fwd = np.zeros(n)
        alpha, K[0], mse_fwd[0] = _input_step(gm[0], tau_m[0], config.alpha_clip)
        ap[0] = alpha
        eta_p[0] = gm[0] / alpha
        gp[0] = damped(gp[0], dn.clip_gamma(eta_p[0] - gm[0]))
        for ell in range(1, n):
            alpha, K[ell], mse_fwd[ell] = se_forward_layer(
                law, ell, K[ell - 1], mu[ell - 1], tau_m[ell], gm[ell], gp[ell - 1],
                config.mode, engine, tag=(k, 0, ell), clip=config.alpha_clip,
            )
            ap[ell] = alpha
            eta_p[ell] = gm[ell] / alpha
            gp[ell] = damped(gp[ell], dn.clip_gamma(eta_p[ell] - gm[ell]))
        nmse_rows.append(mse_fwd / tau0[:n])
        directions.append("forward")

        mse_bwd = np.zeros(n)
        last = n - 1
        final = law.layers[-1]
        if final.kind == "linear":
            alpha, tau_new, mse_bwd[last] = _linear_output_step(final, K[last], gp[last], config.alpha_clip)
        else:
            alpha, tau_new, mse_bwd[last] = _separable_output_step(
                final, K[last], mu[last], gp[last], config.mode, engine, tag=(k, 1, n),
                clip=config.alpha_clip,
            )
        am[last] = alpha
        eta_m[last] = gp[last] / alpha
        gm[last] = damped(gm[last], dn.clip_gamma(eta_m[last] - gp[last]))
        tau_m[last] = tau_new
        for ell in range(last, 0, -1):
            alpha, tau_new, mse_bwd[ell - 1] = se_backward_layer(
                law, ell, K[ell - 1], mu[ell - 1], tau_m[ell], gm[ell], gp[ell - 1],
                config.mode, engine, tag=(k, 1, ell), clip=config.alpha_clip,
            )
            am[ell - 1] = alpha
            eta_m[ell - 1] = gp[ell - 1] / alpha
            gm[ell - 1] = damped(gm[ell - 1], dn.clip_gamma(eta_m[ell - 1] - gp[ell - 1]))
            tau_m[ell - 1] = tau_new
        nmse_rows.append(mse_bwd / tau0[:n])
        directions.append("backward")

        states.append(
            SEState(
                K_plus=np.array([k_.copy() for k_ in K]),
                tau_minus=tau_m.copy(),
                tau_zero=tau0[:n].copy(),
                alpha_bar_plus=ap.copy(),
                alpha_bar_minus=am.copy(),
                gamma_bar_plus=gp.copy(),
                gamma_bar_minus=gm.copy(),
                eta_bar_plus=eta_p.copy(),
                eta_bar_minus=eta_m.copy(),
            )
        )
        params = np.concatenate([gp, gm])
        if prev_params is not None and config.stop_tol > 0:
            change = np.max(np.abs(params - prev_params) / np.maximum(np.abs(prev_params), 1e-30))
            if change < config.stop_tol:
                break
        prev_params = params

    mse = np.array(nmse_rows) * tau0[:n]
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(np.maximum(np.array(nmse_rows), 1e-30))
    return SEResult(states=states, nmse_db=db, mse=mse, tau_zero=tau0, directions=directions)


# ---------------------------------------------------------------------------
# Matched posterior-mean fixed point (independent-channel recursion)
# ---------------------------------------------------------------------------


@dataclass
class MatchedResult:
    gamma_bar_plus: np.ndarray
    gamma_bar_minus: np.ndarray
    eta_bar: np.ndarray
    mse: np.ndarray
    residual: float
    converged: bool
    sweeps: int


def _matched_mse_plus(law, ell, tau0, mu, gm, gp_prev, engine):
    layer = law.layers[ell - 1]
    if layer.kind == "linear":
        s = layer.padded(layer.n_out)
        aq, _, _ = dn.linear_gains_plus(s, layer.noise_precision, gm, gp_prev)
        return float(np.mean(aq)) / gm
    K = np.array([[tau0[ell - 1], 0.0], [0.0, 1.0 / gp_prev]])
    _, _, mse = _separable_forward_step(
        layer, K, mu[ell - 1], 1.0 / gm, gm, gp_prev, "mmse", engine, tag=(0xE, 0, ell)
    )
    return mse


def _matched_mse_minus(law, ell, tau0, mu, gm, gp_prev, engine):
    layer = law.layers[ell - 1]
    if layer.kind == "linear":
        s = layer.padded(layer.n_in)
        _, bp, _ = dn.linear_gains_minus(s, layer.noise_precision, gm, gp_prev)
        return float(np.mean(bp)) / gp_prev
    K = np.array([[tau0[ell - 1], 0.0], [0.0, 1.0 / gp_prev]])
    _, _, mse = _separable_backward_step(
        layer, K, mu[ell - 1], 1.0 / gm, gm, gp_prev, "mmse", engine, tag=(0xE, 1, ell)
    )
    return mse


def _matched_mse_output(law, tau0, mu, gp_prev, engine):
    layer = law.layers[-1]
    n = law.num_layers
    if layer.kind == "linear":
        s = layer.padded(layer.n_in)
        if math.isinf(layer.noise_precision):
            return float(np.mean(np.where(s > 0, 0.0, 1.0 / gp_prev)))
        return float(np.mean(1.0 / (gp_prev + layer.noise_precision * s * s)))
    K = np.array([[tau0[n - 1], 0.0], [0.0, 1.0 / gp_prev]])
    _, _, mse = _separable_output_step(layer, K, mu[n - 1], gp_prev, "mmse", engine, tag=(0xE, 1, n))
    return mse


def matched_mmse_recursion(law, config, max_sweeps=500, damping=0.5, tol=1e-12):
    """Fixed point of the matched posterior-mean precision recursion.

    Iterates ``gamma_plus = 1/mse_plus - gamma_minus`` and the mirrored
    backward update with geometric damping (which preserves fixed points),
    then reports the residual of both equalities at the returned point.
    """
    if config.mode != "mmse":
        raise InvalidModelError("the matched recursion is defined for mmse mode")
    engine = config.expectation
    n = law.num_layers
    tau0, mu = se_initial_pass(law, engine)
    gm = np.full(n, float(config.gamma_init))
    gp = np.full(n, float(config.gamma_init))

    def damp(old, raw):
        raw = dn.clip_gamma(raw)
        return float(old ** (1.0 - damping) * raw**damping)

    converged = False
    sweeps = 0
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        prev = np.concatenate([gp, gm])
        gp[0] = damp(gp[0], (1.0 + gm[0]) - gm[0])
        for ell in range(1, n):
            mse = _matched_mse_plus(law, ell, tau0, mu, gm[ell], gp[ell - 1], engine)
            gp[ell] = damp(gp[ell], 1.0 / mse - gm[ell])
        mse = _matched_mse_output(law, tau0, mu, gp[n - 1], engine)
        gm[n - 1] = damp(gm[n - 1], 1.0 / mse - gp[n - 1])
        for ell in range(n - 1, 0, -1):
            mse = _matched_mse_minus(law, ell, tau0, mu, gm[ell], gp[ell - 1], engine)
            gm[ell - 1] = damp(gm[ell - 1], 1.0 / mse - gp[ell - 1])
        new = np.concatenate([gp, gm])
        change = np.max(np.abs(new - prev) / np.maximum(np.abs(prev), 1e-30))
        if change < tol:
            converged = True
            break

    residual = 0.0
    raw = (1.0 + gm[0]) - gm[0]
    residual = max(residual, abs(gp[0] - raw) / abs(gp[0]))
    for ell in range(1, n):
        raw = 1.0 / _matched_mse_plus(law, ell, tau0, mu, gm[ell], gp[ell - 1], engine) - gm[ell]
        residual = max(residual, abs(gp[ell] - raw) / abs(gp[ell]))
    raw = 1.0 / _matched_mse_output(law, tau0, mu, gp[n - 1], engine) - gp[n - 1]
    residual = max(residual, abs(gm[n - 1] - raw) / abs(gm[n - 1]))
    for ell in range(n - 1, 0, -1):
        raw = 1.0 / _matched_mse_minus(law, ell, tau0, mu, gm[ell], gp[ell - 1], engine) - gp[ell - 1]
        residual = max(residual, abs(gm[ell - 1] - raw) / abs(gm[ell - 1]))

    eta = gp + gm
    return MatchedResult(
        gamma_bar_plus=gp,
        gamma_bar_minus=gm,
        eta_bar=eta,
        mse=1.0 / eta,
        residual=float(residual),
        converged=converged,
        sweeps=sweeps,
    )
