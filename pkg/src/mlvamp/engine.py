"""Alternating forward/backward message-passing over a layered network.

The engine keeps, for every hidden signal ``z_0 .. z_{L-1}``, two running
estimates (one per sweep direction), the extrinsic pseudo-observations
``r_minus`` / ``r_plus`` with scalar precisions ``gamma_minus`` /
``gamma_plus``, and the divergence bookkeeping that ties them together:
after each estimator call ``eta = gamma / alpha`` and the opposite-side
precision is ``eta - gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import denoisers as dn
from .errors import (
    DivergedIterationError,
    InvalidModelError,
    NumericFailureError,
    UndefinedMetricError,
)
from .model import activation_slope, apply_activation, svd_factorize

#: Divergences are clamped to [ALPHA_MIN, 1 - ALPHA_MIN] before the
#: extrinsic division; clamp events are logged in the trace.
ALPHA_MIN = 1e-6

#: Floor used when a metric denominator could vanish.
_TINY = 1e-300


@dataclass(frozen=True)
class EngineConfig:
    """Run-time knobs for the message-passing iteration."""

    max_iters: int = 50
    mode: str = "mmse"
    gamma_init: float = 1e-4
    damping: float = 1.0
    alpha_clip: float = ALPHA_MIN
    convergence_tol: float = 1e-8
    record_trace: bool = True

    def __post_init__(self):
        if self.mode not in ("mmse", "map"):
            raise InvalidModelError("mode must be 'mmse' or 'map'")
        if not (0.0 < self.damping <= 1.0):
            raise InvalidModelError("damping must lie in (0, 1]")
        if self.max_iters < 0 or self.gamma_init <= 0 or self.alpha_clip <= 0:
            raise InvalidModelError("bounds must be positive")


@dataclass
class MessageState:
    """All per-layer iterates for hidden signals 0 .. L-1."""

    r_minus: list
    r_plus: list
    zhat_plus: list
    zhat_minus: list
    gamma_minus: np.ndarray
    gamma_plus: np.ndarray
    alpha_plus: np.ndarray
    alpha_minus: np.ndarray
    eta_plus: np.ndarray
    eta_minus: np.ndarray

    @property
    def num_signals(self):
        return len(self.r_minus)


@dataclass(frozen=True)
class TraceRow:
    """Snapshot taken after one directional pass."""

    half_iter: int
    direction: str
    nmse_db: tuple | None
    gamma_plus: np.ndarray
    gamma_minus: np.ndarray
    alpha_plus: np.ndarray
    alpha_minus: np.ndarray
    consistency: float
    max_delta: float
    clip_events: int


@dataclass
class IterationTrace:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)


@dataclass(frozen=True)
class FixedPointReport:
    """Residuals of the identities any fixed point must satisfy."""

    consistency_residual: float
    eta_residual: float
    combination_residual: float
    map_stationarity: float | None
    moment_match: float | None

    def as_dict(self):
        return {
            "consistency_residual": self.consistency_residual,
            "eta_residual": self.eta_residual,
            "combination_residual": self.combination_residual,
            "map_stationarity": self.map_stationarity,
            "moment_match": self.moment_match,
        }


# ---------------------------------------------------------------------------
# Estimator bank: one pair estimator per interior layer plus two endpoints
# ---------------------------------------------------------------------------


class _LinearPair:
    def __init__(self, layer):
        self.factors = svd_factorize(layer)
        self.nu = layer.noise_precision

    def estimate(self, r_minus, r_plus, gamma_minus, gamma_plus):
        params = dn.BeliefParams(r_minus, r_plus, gamma_minus, gamma_plus)
        return dn.linear_pair(params, self.factors, self.nu)


class _SeparablePair:
    def __init__(self, layer, mode):
        self.layer = layer
        self.mode = mode

    def estimate(self, r_minus, r_plus, gamma_minus, gamma_plus):
        params = dn.BeliefParams(r_minus, r_plus, gamma_minus, gamma_plus)
        if self.mode == "mmse":
            return dn.mmse_pair_nonlinear(params, self.layer)
        return dn.map_pair_nonlinear(params, self.layer)


class _LinearOutput:
    def __init__(self, layer, y):
        self.factors = svd_factorize(layer)
        self.nu = layer.noise_precision
        self.y = np.asarray(y, float)

    def estimate(self, r_plus, gamma_plus):
        return dn.output_linear(r_plus, gamma_plus, self.y, self.factors, self.nu)


class _SeparableOutput:
    def __init__(self, layer, y, mode):
        self.layer = layer
        self.y = np.asarray(y, float)
        self.mode = mode

    def estimate(self, r_plus, gamma_plus):
        return dn.output_separable(r_plus, gamma_plus, self.y, self.layer, self.mode)


@dataclass
class DenoiserBank:
    pairs: list  # pair estimator for layers 1 .. L-1 (index ell-1)
    output: object

    def input_estimate(self, r_minus, gamma_minus):
        return dn.input_denoiser(r_minus, gamma_minus)


def build_denoiser_bank(spec, y, mode):
    """Instantiate all estimators once (SVDs included) for a run."""
    y = np.asarray(y, float)
    if y.shape != (spec.dims[-1],):
        raise InvalidModelError("observation length mismatches the network output width")
    pairs = []
    for layer in spec.layers[:-1]:
        if layer.kind == "linear":
            pairs.append(_LinearPair(layer))
        else:
            pairs.append(_SeparablePair(layer, mode))
    final = spec.layers[-1]
    if final.kind == "linear":
        output = _LinearOutput(final, y)
    else:
        output = _SeparableOutput(final, y, mode)
    return DenoiserBank(pairs=pairs, output=output)


# ---------------------------------------------------------------------------
# State updates
# ---------------------------------------------------------------------------


def initialize(spec, y, config, seed=0):
    """Fresh state: all pseudo-observations zero, precisions at gamma_init."""
    y = np.asarray(y, float)
    if y.shape != (spec.dims[-1],):
        raise InvalidModelError("observation length mismatches the network output width")
    n = spec.num_layers
    dims = spec.dims[:-1]
    return MessageState(
        r_minus=[np.zeros(d) for d in dims],
        r_plus=[np.zeros(d) for d in dims],
        zhat_plus=[np.zeros(d) for d in dims],
        zhat_minus=[np.zeros(d) for d in dims],
        gamma_minus=np.full(n, float(config.gamma_init)),
        gamma_plus=np.full(n, float(config.gamma_init)),
        alpha_plus=np.full(n, 0.5),
        alpha_minus=np.full(n, 0.5),
        eta_plus=np.full(n, 2.0 * config.gamma_init),
        eta_minus=np.full(n, 2.0 * config.gamma_init),
    )


def signal_power_ladder(spec):
    """A-priori per-component second moments of the hidden signals.

    Scalar recursion through the layer chain (orthogonal mixing preserves
    the quantity); used to detect runaway estimates.
    """
    from scipy.special import roots_hermitenorm

    nodes, weights = roots_hermitenorm(40)
    weights = weights / weights.sum()
    tau = [1.0]
    mean = 0.0
    for ell, layer in enumerate(spec.layers[:-1], start=1):
        if layer.kind == "linear":
            s2 = float(np.sum(layer.factors.singular_values ** 2)) if layer.factors is not None else float(
                np.sum(np.linalg.svd(layer.weight, compute_uv=False) ** 2)
            )
            second = s2 / layer.out_dim * tau[-1] + float(np.mean(layer.bias**2))
            mean = float(np.mean(layer.bias))
            if math.isfinite(layer.noise_precision):
                second += 1.0 / layer.noise_precision
        else:
            var = max(tau[-1] - mean * mean, 0.0)
            x = mean + math.sqrt(var) * nodes
            second = float(weights @ apply_activation(layer.activation, x) ** 2)
            if math.isfinite(layer.noise_precision):
                second += 1.0 / layer.noise_precision
            mean = 0.0
        tau.append(second)
    return np.asarray(tau)


class _ClipCounter:
    def __init__(self, alpha_clip):
        self.alpha_clip = alpha_clip
        self.events = 0

    def alpha(self, value, layer, iteration):
        if not np.isfinite(value):
            raise DivergedIterationError(
                f"divergence estimate is not finite at layer {layer}",
                layer=layer,
                iteration=iteration,
            )
        lo, hi = self.alpha_clip, 1.0 - self.alpha_clip
        if value < lo or value > hi:
            self.events += 1
        return float(np.clip(value, lo, hi))

    def gamma(self, value):
        if value < dn.GAMMA_MIN or value > dn.GAMMA_MAX or not np.isfinite(value):
            self.events += 1
        return dn.clip_gamma(value)


def _damped_gamma(old, raw, damping):
    if damping >= 1.0:
        return raw
    return float(old ** (1.0 - damping) * raw**damping)


def forward_pass(state, bank, config, clip, iteration=0):
    """One left-to-right sweep; updates the plus-side quantities."""
    n = state.num_signals
    res = bank.input_estimate(state.r_minus[0], state.gamma_minus[0])
    _plus_update(state, 0, res, clip, config, iteration)
    for ell in range(1, n):
        try:
            res = bank.pairs[ell - 1].estimate(
                state.r_minus[ell],
                state.r_plus[ell - 1],
                state.gamma_minus[ell],
                state.gamma_plus[ell - 1],
            )
        except NumericFailureError as exc:
            raise DivergedIterationError(str(exc), layer=ell, iteration=iteration) from exc
        _plus_update(state, ell, res, clip, config, iteration)
    return state


def _plus_update(state, ell, res, clip, config, iteration):
    if not np.all(np.isfinite(res.zhat_plus)):
        raise DivergedIterationError(
            f"non-finite estimate at layer {ell}", layer=ell, iteration=iteration
        )
    alpha = clip.alpha(res.alpha_plus, ell, iteration)
    state.zhat_plus[ell] = res.zhat_plus
    state.alpha_plus[ell] = alpha
    state.r_plus[ell] = (res.zhat_plus - alpha * state.r_minus[ell]) / (1.0 - alpha)
    eta = state.gamma_minus[ell] / alpha
    state.eta_plus[ell] = eta
    raw = clip.gamma(eta - state.gamma_minus[ell])
    state.gamma_plus[ell] = _damped_gamma(state.gamma_plus[ell], raw, config.damping)


def backward_pass(state, bank, config, clip, iteration=0):
    """One right-to-left sweep; updates the minus-side quantities."""
    n = state.num_signals
    last = n - 1
    try:
        res = bank.output.estimate(state.r_plus[last], state.gamma_plus[last])
    except NumericFailureError as exc:
        raise DivergedIterationError(str(exc), layer=last, iteration=iteration) from exc
    _minus_update(state, last, res, clip, config, iteration)
    for ell in range(last, 0, -1):
        try:
            res = bank.pairs[ell - 1].estimate(
                state.r_minus[ell],
                state.r_plus[ell - 1],
                state.gamma_minus[ell],
                state.gamma_plus[ell - 1],
            )
        except NumericFailureError as exc:
            raise DivergedIterationError(str(exc), layer=ell, iteration=iteration) from exc
        _minus_update(state, ell - 1, res, clip, config, iteration)
    return state


def _minus_update(state, ell, res, clip, config, iteration):
    if not np.all(np.isfinite(res.zhat_minus)):
        raise DivergedIterationError(
            f"non-finite estimate at layer {ell}", layer=ell, iteration=iteration
        )
    alpha = clip.alpha(res.alpha_minus, ell, iteration)
    state.zhat_minus[ell] = res.zhat_minus
    state.alpha_minus[ell] = alpha
    state.r_minus[ell] = (res.zhat_minus - alpha * state.r_plus[ell]) / (1.0 - alpha)
    eta = state.gamma_plus[ell] / alpha
    state.eta_minus[ell] = eta
    raw = clip.gamma(eta - state.gamma_plus[ell])
    state.gamma_minus[ell] = _damped_gamma(state.gamma_minus[ell], raw, config.damping)


def nmse_db(zhat, z0):
    """Normalized squared error in decibels; floored at -300 dB."""
    z0 = np.asarray(z0, float)
    zhat = np.asarray(zhat, float)
    if zhat.shape != z0.shape:
        raise UndefinedMetricError("estimate and reference lengths differ")
    ref = float(z0 @ z0)
    if ref <= 0.0:
        raise UndefinedMetricError("zero reference signal")
    ratio = float((z0 - zhat) @ (z0 - zhat)) / ref
    return 10.0 * math.log10(max(ratio, 1e-30))


def _consistency(state):
    worst = 0.0
    for zp, zm in zip(state.zhat_plus, state.zhat_minus):
        denom = max(float(np.linalg.norm(zp)), _TINY)
        worst = max(worst, float(np.linalg.norm(zp - zm)) / denom)
    return worst


def run(spec, y, config, seed=0, truth=None):
    """Alternate sweeps until the budget or the convergence tolerance is hit.

    Pure function of ``(spec, y, config, seed)``; ``truth`` only adds
    per-pass error metrics to the trace.  Returns
    ``(state, trace, report)``.
    """
    bank = build_denoiser_bank(spec, y, config.mode)
    state = initialize(spec, y, config, seed)
    power = signal_power_ladder(spec)
    trace = IterationTrace()
    half = 0
    for k in range(config.max_iters):
        prev_plus = [z.copy() for z in state.zhat_plus]
        prev_minus = [z.copy() for z in state.zhat_minus]
        clip = _ClipCounter(config.alpha_clip)
        try:
            forward_pass(state, bank, config, clip, iteration=k)
            _check_blowup(state, power, k)
            half += 1
            _record(trace, state, config, half, "forward", truth, clip.events, math.nan)
            backward_pass(state, bank, config, clip, iteration=k)
            _check_blowup(state, power, k)
        except DivergedIterationError as exc:
            exc.trace = trace
            raise
        half += 1
        delta = _max_delta(state, prev_plus, prev_minus, first=(k == 0))
        _record(trace, state, config, half, "backward", truth, clip.events, delta)
        if config.convergence_tol > 0 and delta < config.convergence_tol:
            break
    report = fixed_point_report(state, spec, y, config.mode)
    return state, trace, report


#: Estimates whose energy exceeds this multiple of the prior signal energy
#: are runaway iterates, not estimates.
BLOWUP_FACTOR = 1e3


def _check_blowup(state, power, iteration):
    for ell, (zp, zm) in enumerate(zip(state.zhat_plus, state.zhat_minus)):
        bound = BLOWUP_FACTOR * zp.size * power[ell]
        if not (float(zp @ zp) <= bound and float(zm @ zm) <= bound):
            raise DivergedIterationError(
                f"estimate energy exceeds {BLOWUP_FACTOR:.0e} x the prior signal "
                f"energy at layer {ell}",
                layer=ell,
                iteration=iteration,
            )


def _max_delta(state, prev_plus, prev_minus, first=False):
    if first:
        return math.inf
    worst = 0.0
    for new, old in zip(state.zhat_plus + state.zhat_minus, prev_plus + prev_minus):
        denom = max(float(np.linalg.norm(old)), _TINY)
        worst = max(worst, float(np.linalg.norm(new - old)) / denom)
    return worst


def _record(trace, state, config, half, direction, truth, clip_events, delta):
    if not config.record_trace:
        return
    nmse = None
    if truth is not None:
        estimates = state.zhat_plus if direction == "forward" else state.zhat_minus
        nmse = tuple(nmse_db(zh, truth.signals[ell]) for ell, zh in enumerate(estimates))
    trace.rows.append(
        TraceRow(
            half_iter=half,
            direction=direction,
            nmse_db=nmse,
            gamma_plus=state.gamma_plus.copy(),
            gamma_minus=state.gamma_minus.copy(),
            alpha_plus=state.alpha_plus.copy(),
            alpha_minus=state.alpha_minus.copy(),
            consistency=_consistency(state) if direction == "backward" else math.nan,
            max_delta=delta,
            clip_events=clip_events,
        )
    )


# ---------------------------------------------------------------------------
# Fixed-point diagnostics
# ---------------------------------------------------------------------------


def combined_estimate(state, ell):
    """Precision-weighted combination of both pseudo-observations."""
    gp, gm = state.gamma_plus[ell], state.gamma_minus[ell]
    return (gp * state.r_plus[ell] + gm * state.r_minus[ell]) / (gp + gm)


def fixed_point_report(state, spec, y, mode):
    """Residuals of the stationarity identities at the current state."""
    n = state.num_signals
    consistency = _consistency(state)
    eta_res = 0.0
    comb_res = 0.0
    for ell in range(n):
        eta_sum = state.gamma_plus[ell] + state.gamma_minus[ell]
        eta_res = max(
            eta_res,
            abs(state.eta_plus[ell] - eta_sum) / state.eta_plus[ell],
            abs(state.eta_minus[ell] - eta_sum) / state.eta_minus[ell],
        )
        zc = combined_estimate(state, ell)
        denom = max(float(np.linalg.norm(state.zhat_plus[ell])), _TINY)
        comb_res = max(
            comb_res,
            float(np.linalg.norm(state.zhat_plus[ell] - zc)) / denom,
            float(np.linalg.norm(state.zhat_minus[ell] - zc)) / denom,
        )

    stationarity = None
    if mode == "map" and all(math.isfinite(l.noise_precision) for l in spec.layers):
        zs = [combined_estimate(state, ell) for ell in range(n)]
        stationarity = map_stationarity(spec, y, zs)

    moment = None
    if mode == "mmse":
        moment = 0.0
        for ell in range(n):
            eta_sum = state.gamma_plus[ell] + state.gamma_minus[ell]
            var_out = state.alpha_plus[ell] / state.gamma_minus[ell]
            var_in = state.alpha_minus[ell] / state.gamma_plus[ell]
            moment = max(
                moment,
                abs(var_out * eta_sum - 1.0),
                abs(var_in * eta_sum - 1.0),
            )
        moment = max(moment, consistency, comb_res)

    return FixedPointReport(
        consistency_residual=consistency,
        eta_residual=eta_res,
        combination_residual=comb_res,
        map_stationarity=stationarity,
        moment_match=moment,
    )


def map_stationarity(spec, y, zs, kink_tol=1e-12):
    """Relative gradient norm of the joint negative log-density at ``zs``.

    All layer conditionals must have finite noise precision so the
    objective is differentiable; at relu kinks the subgradient element of
    least magnitude is selected (zero whenever the interval contains it).
    """
    grads = [np.zeros_like(z) for z in zs]
    contribs = [float(np.linalg.norm(zs[0]))]
    grads[0] += zs[0]
    kinks = []  # (signal index, component mask, coefficient array)
    for ell, layer in enumerate(spec.layers, start=1):
        x = zs[ell - 1]
        z = y if ell == len(spec.layers) else zs[ell]
        nu = layer.noise_precision
        if layer.kind == "linear":
            resid = z - layer.weight @ x - layer.bias
            if ell != len(spec.layers):
                grads[ell] += nu * resid
                contribs.append(float(np.linalg.norm(nu * resid)))
            back = -nu * (layer.weight.T @ resid)
            grads[ell - 1] += back
            contribs.append(float(np.linalg.norm(back)))
        else:
            phi = apply_activation(layer.activation, x)
            resid = z - phi
            if ell != len(spec.layers):
                grads[ell] += nu * resid
                contribs.append(float(np.linalg.norm(nu * resid)))
            slope = activation_slope(layer.activation, x)
            if layer.activation == "relu":
                at_kink = np.abs(x) <= kink_tol
                slope = np.where(at_kink, 0.0, slope)
                if np.any(at_kink):
                    kinks.append((ell - 1, at_kink, -nu * resid))
            back = -nu * slope * resid
            grads[ell - 1] += back
            contribs.append(float(np.linalg.norm(back)))
    for idx, mask, coef in kinks:
        g = grads[idx]
        t = np.clip(np.divide(g, -coef, out=np.zeros_like(g), where=coef != 0.0), 0.0, 1.0)
        g[mask] = (g + coef * t)[mask]
    total = math.sqrt(sum(float(g @ g) for g in grads))
    scale = max(max(contribs), _TINY)
    return total / scale
