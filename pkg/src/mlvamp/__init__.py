"""Multi-layer vector approximate message passing and its deterministic predictor."""

from .denoisers import (
    BeliefParams,
    DenoiserResult,
    QuadratureRule,
    divergence_finite_difference,
    input_denoiser,
    linear_pair,
    map_pair_nonlinear,
    mmse_pair_nonlinear,
    output_denoiser,
)
from .engine import EngineConfig, FixedPointReport, IterationTrace, MessageState, nmse_db, run
from .model import (
    LinearLayerSpec,
    NetworkSpec,
    NonlinearLayerSpec,
    SignalSet,
    SvdFactors,
    NOISELESS,
    calibrate_noise_to_snr,
    forward_generate,
    geometric_singular_values,
    load_network,
    sample_haar_orthogonal,
    save_network,
    svd_factorize,
)
from .state_evolution import (
    ExpectationEngine,
    NetworkLaw,
    SEConfig,
    matched_mmse_recursion,
    run_se,
    se_initial_pass,
)

__all__ = [
    "BeliefParams",
    "DenoiserResult",
    "EngineConfig",
    "ExpectationEngine",
    "FixedPointReport",
    "IterationTrace",
    "LinearLayerSpec",
    "MessageState",
    "NetworkLaw",
    "NetworkSpec",
    "NonlinearLayerSpec",
    "NOISELESS",
    "SEConfig",
    "SignalSet",
    "QuadratureRule",
    "SvdFactors",
    "calibrate_noise_to_snr",
    "divergence_finite_difference",
    "input_denoiser",
    "linear_pair",
    "map_pair_nonlinear",
    "mmse_pair_nonlinear",
    "output_denoiser",
    "forward_generate",
    "geometric_singular_values",
    "load_network",
    "matched_mmse_recursion",
    "nmse_db",
    "run",
    "run_se",
    "sample_haar_orthogonal",
    "save_network",
    "se_initial_pass",
    "svd_factorize",
]

__version__ = "0.1.0"
