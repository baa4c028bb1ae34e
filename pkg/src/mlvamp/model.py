"""Layered stochastic network: construction, sampling, and random ensembles.

A network is an ordered list of layers mapping a signal chain
``z_0 -> z_1 -> ... -> z_L`` where ``y = z_L`` is the observation.
Affine layers apply ``z = W x + b (+ Gaussian noise)``; separable layers
apply a scalar activation componentwise (optionally with additive
Gaussian noise).  The input ``z_0`` is always i.i.d. standard normal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DegenerateModelError, InvalidModelError, NumericFailureError
from .seeding import substream

#: Sentinel for an exact (noise-free) conditional: precision -> infinity.
NOISELESS = math.inf

ACTIVATIONS = ("identity", "relu", "sign", "sigmoid")

ORTHOGONALITY_TOL = 1e-10
RECONSTRUCTION_TOL = 1e-8


def apply_activation(name, x):
    """Evaluate the scalar activation ``name`` componentwise."""
    x = np.asarray(x, dtype=float)
    if name == "identity":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "sign":
        return np.where(x >= 0.0, 1.0, -1.0)
    if name == "sigmoid":
        return expit(x)
    raise InvalidModelError(f"unknown activation {name!r}")


def activation_slope(name, x):
    """Derivative of the activation, right-continuous at kinks."""
    x = np.asarray(x, dtype=float)
    if name == "identity":
        return np.ones_like(x)
    if name == "relu":
        return np.where(x >= 0.0, 1.0, 0.0)
    if name == "sign":
        return np.zeros_like(x)
    if name == "sigmoid":
        s = expit(x)
        return s * (1.0 - s)
    raise InvalidModelError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class SvdFactors:
    """Orthogonal factorization ``W = left @ diag(s) @ right`` of an affine layer.

    ``right`` is applied untransposed; singular values are sorted descending
    and zero-padding to either endpoint dimension happens at use sites.
    ``transformed_bias`` is ``left.T @ bias``.
    """

    left_orthogonal: np.ndarray
    singular_values: np.ndarray
    right_orthogonal: np.ndarray
    transformed_bias: np.ndarray

    def __post_init__(self):
        n_out = self.left_orthogonal.shape[0]
        n_in = self.right_orthogonal.shape[0]
        if self.left_orthogonal.shape != (n_out, n_out):
            raise InvalidModelError("left factor must be square")
        if self.right_orthogonal.shape != (n_in, n_in):
            raise InvalidModelError("right factor must be square")
        if self.singular_values.shape != (min(n_out, n_in),):
            raise InvalidModelError("need min(n_out, n_in) singular values")
        if np.any(self.singular_values < 0):
            raise InvalidModelError("singular values must be nonnegative")
        if np.any(np.diff(self.singular_values) > 0):
            raise InvalidModelError("singular values must be sorted descending")
        for q in (self.left_orthogonal, self.right_orthogonal):
            gram = q.T @ q
            err = np.max(np.abs(gram - np.eye(q.shape[0])))
            if err > ORTHOGONALITY_TOL:
                raise InvalidModelError(f"factor not orthogonal (|QtQ - I| = {err:.3e})")
        if self.transformed_bias.shape != (n_out,):
            raise InvalidModelError("transformed bias has wrong length")

    @property
    def out_dim(self):
        return self.left_orthogonal.shape[0]

    @property
    def in_dim(self):
        return self.right_orthogonal.shape[0]

    def padded_singular_values(self, n):
        """Singular values zero-padded to length ``n``."""
        s = np.zeros(n)
        k = min(n, self.singular_values.size)
        s[:k] = self.singular_values[:k]
        return s

    def to_weight(self):
        """Reassemble the dense weight matrix."""
        smat = np.zeros((self.out_dim, self.in_dim))
        k = self.singular_values.size
        smat[:k, :k] = np.diag(self.singular_values)
        return self.left_orthogonal @ smat @ self.right_orthogonal


@dataclass(frozen=True)
class LinearLayerSpec:
    """Affine layer ``z_out = weight @ z_in + bias + noise``.

    ``noise_precision`` is the inverse variance of the additive Gaussian
    noise; ``NOISELESS`` (infinity) means the map is exact.
    """

    weight: np.ndarray
    bias: np.ndarray
    noise_precision: float
    factors: SvdFactors | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=float)
        b = np.asarray(self.bias, dtype=float)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 2:
            raise InvalidModelError("weight must be a matrix")
        if b.shape != (w.shape[0],):
            raise InvalidModelError("bias length must equal output dimension")
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(b)):
            raise InvalidModelError("weight/bias entries must be finite")
        if not (self.noise_precision > 0):
            raise InvalidModelError("noise_precision must be positive (or NOISELESS)")

    @property
    def out_dim(self):
        return self.weight.shape[0]

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def kind(self):
        return "linear"


@dataclass(frozen=True)
class NonlinearLayerSpec:
    """Separable layer ``z_out = phi(z_in) (+ Gaussian noise)``.

    ``noise_precision == NOISELESS`` models a deterministic activation,
    i.e. a conditional point mass at ``phi(z_in)``.
    """

    activation: str
    noise_precision: float = NOISELESS

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidModelError(f"unknown activation {self.activation!r}")
        if not (self.noise_precision > 0):
            raise InvalidModelError("noise_precision must be positive (or NOISELESS)")

    @property
    def kind(self):
        return "nonlinear"


@dataclass(frozen=True)
class NetworkSpec:
    """Full generative model: layer list plus the signal dimensions N_0..N_L."""

    layers: tuple
    dims: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "dims", dims)
        if len(dims) != len(layers) + 1:
            raise InvalidModelError("need one dimension per signal z_0..z_L")
        if any(d < 1 for d in dims):
            raise InvalidModelError("dimensions must be positive")
        prev_kind = None
        for ell, layer in enumerate(layers, start=1):
            if layer.kind == "linear":
                if layer.in_dim != dims[ell - 1] or layer.out_dim != dims[ell]:
                    raise InvalidModelError(f"layer {ell} weight shape mismatches dims")
            else:
                if dims[ell] != dims[ell - 1]:
                    raise InvalidModelError(f"separable layer {ell} must preserve dimension")
                if prev_kind == "nonlinear":
                    raise InvalidModelError("consecutive separable layers are not supported")
            prev_kind = layer.kind

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def dim_ratios(self):
        """Width ratios relative to the input dimension."""
        n0 = self.dims[0]
        return tuple(d / n0 for d in self.dims)

    @classmethod
    def from_layers(cls, layers, input_dim=None):
        """Infer ``dims`` from the layer list (first layer must fix the width)."""
        layers = tuple(layers)
        if input_dim is None:
            if not layers or layers[0].kind != "linear":
                raise InvalidModelError("input_dim required unless the first layer is linear")
            input_dim = layers[0].in_dim
        dims = [int(input_dim)]
        for layer in layers:
            dims.append(layer.out_dim if layer.kind == "linear" else dims[-1])
        return cls(layers=layers, dims=tuple(dims))


@dataclass(frozen=True)
class SignalSet:
    """One realization of the signal chain; ``signals[ell]`` has length dims[ell]."""

    signals: tuple

    @property
    def y(self):
        return self.signals[-1]

    def __len__(self):
        return len(self.signals)


def sample_haar_orthogonal(n, seed):
    """Draw an ``n x n`` orthogonal matrix from the uniform (Haar) law.

    Orthonormalizes an i.i.d. standard-normal matrix and absorbs the sign
    of the triangular factor's diagonal, which makes the law exactly Haar.
    ``seed`` may be an integer or an existing Generator.
    """
    n = int(n)
    if n < 1:
        raise InvalidModelError("matrix size must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, 0x0A17)
    g = rng.standard_normal((n, n))
    q, r = np.linalg.qr(g)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def geometric_singular_values(m, n, cond, scale_policy="unit-mean-square"):
    """Geometrically spaced singular values for an ``m x n`` matrix.

    Returns ``min(m, n)`` values sorted descending with constant successive
    ratio and ``s_max / s_min == cond``.  ``scale_policy`` is either
    ``"unit-mean-square"`` (default, ``sum(s^2) == min(m, n)``), ``"none"``
    (``s_max == 1``), or a positive float multiplying the unit-mean-square
    vector.
    """
    if cond < 1:
        raise InvalidModelError("condition number must be >= 1")
    k = min(int(m), int(n))
    if k < 1:
        raise InvalidModelError("dimensions must be positive")
    if k == 1 or cond == 1:
        s = np.ones(k)
    else:
        ratio = cond ** (-1.0 / (k - 1))
        s = ratio ** np.arange(k)
    if scale_policy == "none":
        return s
    s = s * math.sqrt(k / np.sum(s * s))
    if scale_policy == "unit-mean-square":
        return s
    factor = float(scale_policy)
    if factor <= 0:
        raise InvalidModelError("scale factor must be positive")
    return s * factor


def svd_factorize(layer):
    """Return the orthogonal factorization of an affine layer.

    Layers built synthetically from factors carry them already and the
    decomposition is bypassed; otherwise a full SVD is computed once and
    validated against the stored weight.
    """
    if layer.factors is not None:
        return layer.factors
    try:
        u, s, vt = np.linalg.svd(layer.weight, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NumericFailureError(f"SVD failed for a {layer.weight.shape} layer") from exc
    factors = SvdFactors(
        left_orthogonal=u,
        singular_values=s,
        right_orthogonal=vt,
        transformed_bias=u.T @ layer.bias,
    )
    scale = max(np.max(np.abs(layer.weight)), 1e-300)
    err = np.max(np.abs(factors.to_weight() - layer.weight))
    if err > RECONSTRUCTION_TOL * scale:
        raise NumericFailureError(f"SVD reconstruction error {err:.3e} exceeds tolerance")
    return factors


def linear_layer_from_factors(left, singular_values, right, bias, noise_precision):
    """Build an affine layer directly from prescribed orthogonal factors."""
    factors = SvdFactors(
        left_orthogonal=np.asarray(left, dtype=float),
        singular_values=np.asarray(singular_values, dtype=float),
        right_orthogonal=np.asarray(right, dtype=float),
        transformed_bias=np.asarray(left, dtype=float).T @ np.asarray(bias, dtype=float),
    )
    return LinearLayerSpec(
        weight=factors.to_weight(),
        bias=np.asarray(bias, dtype=float),
        noise_precision=noise_precision,
        factors=factors,
    )


def forward_generate(spec, seed):
    """Sample the signal chain ``z_0 .. z_L`` for ``(spec, seed)``.

    Pure function: identical inputs give bit-identical outputs.  The input
    uses substream (seed, 0); the noise of layer ``ell`` uses (seed, ell).
    """
    signals = [substream(seed, 0).standard_normal(spec.dims[0])]
    for ell, layer in enumerate(spec.layers, start=1):
        rng = substream(seed, ell)
        x = signals[-1]
        if layer.kind == "linear":
            z = layer.weight @ x + layer.bias
        else:
            z = apply_activation(layer.activation, x)
        if math.isfinite(layer.noise_precision):
            z = z + rng.standard_normal(z.size) / math.sqrt(layer.noise_precision)
        signals.append(z)
    return SignalSet(signals=tuple(signals))


def calibrate_noise_to_snr(spec, snr_db, trials, seed):
    """Measurement-noise precision achieving the requested SNR in dB.

    The final layer must be affine.  Signal power ``E||W z + b||^2`` is
    estimated by Monte-Carlo over ``trials`` independent forward
    generations; the returned precision makes
    ``10 log10(signal_power / noise_power)`` equal ``snr_db``.
    """
    final = spec.layers[-1]
    if final.kind != "linear":
        raise InvalidModelError("SNR calibration requires an affine measurement layer")
    if trials < 1:
        raise InvalidModelError("need at least one calibration trial")
    power = 0.0
    for t in range(int(trials)):
        sig = forward_generate(spec, substream(seed, 0xCA11B, t).integers(2**63))
        clean = final.weight @ sig.signals[-2] + final.bias
        power += float(clean @ clean)
    power /= trials
    if power <= 0:
        raise DegenerateModelError("measured signal power is zero; cannot set an SNR")
    m = final.out_dim
    return m * 10.0 ** (snr_db / 10.0) / power


# ---------------------------------------------------------------------------
# JSON persistence (schema: see README, "Network file")
# ---------------------------------------------------------------------------


def network_to_json(spec):
    """Serialize a network to the JSON document schema."""
    layers = []
    for layer in spec.layers:
        if layer.kind == "linear":
            entry = {
                "kind": "linear",
                "weight": layer.weight.tolist(),
                "bias": layer.bias.tolist(),
            }
            if math.isfinite(layer.noise_precision):
                entry["noise_precision"] = layer.noise_precision
            else:
                entry["noiseless"] = True
        else:
            noise = (
                {"kind": "none"}
                if not math.isfinite(layer.noise_precision)
                else {"kind": "gaussian", "precision": layer.noise_precision}
            )
            entry = {"kind": "nonlinear", "activation": layer.activation, "noise": noise}
        layers.append(entry)
    return {"dims": list(spec.dims), "layers": layers}


def network_from_json(doc):
    """Inverse of :func:`network_to_json`."""
    layers = []
    for entry in doc["layers"]:
        if entry["kind"] == "linear":
            if entry.get("noiseless", False):
                prec = NOISELESS
            else:
                prec = float(entry["noise_precision"])
            layers.append(
                LinearLayerSpec(
                    weight=np.asarray(entry["weight"], dtype=float),
                    bias=np.asarray(entry["bias"], dtype=float),
                    noise_precision=prec,
                )
            )
        elif entry["kind"] == "nonlinear":
            noise = entry.get("noise", {"kind": "none"})
            prec = NOISELESS if noise["kind"] == "none" else float(noise["precision"])
            layers.append(
                NonlinearLayerSpec(activation=entry["activation"], noise_precision=prec)
            )
        else:
            raise InvalidModelError(f"unknown layer kind {entry.get('kind')!r}")
    return NetworkSpec(layers=tuple(layers), dims=tuple(doc["dims"]))


def save_network(spec, path):
    with open(path, "w") as fh:
        json.dump(network_to_json(spec), fh)


def load_network(path):
    with open(path) as fh:
        return network_from_json(json.load(fh))
