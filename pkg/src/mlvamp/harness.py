"""Experiment orchestration: synthetic problems, trials, sweeps, CSV output.

Builds the synthetic benchmark family (orthogonally mixed weight layers
with relu activations, bias means tuned to a target positive fraction,
and an ill-conditioned compressed measurement layer at a calibrated SNR),
runs the message-passing engine against freshly drawn instances, runs the
scalar predictor once per configuration, and joins the two into tidy CSV.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from .engine import EngineConfig, nmse_db, run
from .errors import DivergedIterationError, InvalidModelError, NumericFailureError
from .model import (
    NOISELESS,
    NetworkSpec,
    NonlinearLayerSpec,
    apply_activation,
    calibrate_noise_to_snr,
    forward_generate,
    geometric_singular_values,
    linear_layer_from_factors,
    sample_haar_orthogonal,
)
from .seeding import substream
from .state_evolution import (
    ExpectationEngine,
    LinearLaw,
    NetworkLaw,
    SEConfig,
    SeparableLaw,
    run_se,
)

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "experiment_id",
    "trial_seed",
    "half_iter",
    "layer",
    "nmse_db_empirical",
    "nmse_db_se",
    "gamma_plus",
    "gamma_minus",
    "alpha_plus",
    "alpha_minus",
    "residual_consistency",
    "wall_ms",
)


def worker_count():
    """Worker pool size: MLVAMP_THREADS if set, else available parallelism."""
    env = os.environ.get("MLVAMP_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Synthetic network recipe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticRecipe:
    """Description of the synthetic benchmark family.

    ``hidden_dims`` are the widths N_0 .. N_{L-1} of the generative chain
    (alternating affine / separable starting with affine); the measurement
    layer maps the last hidden width to ``measurements`` rows with
    geometrically spaced singular values and SNR-calibrated noise.
    """

    hidden_dims: tuple = (20, 100, 100, 500, 500, 784, 784)
    measurements: int = 100
    positive_fraction: float = 0.4
    condition_number: float = 10.0
    snr_db: float = 30.0
    bias_std: float = 1.0
    activation: str = "relu"
    calibration_samples: int = 10_000
    snr_trials: int = 20

    def __post_init__(self):
        if len(self.hidden_dims) < 2 or len(self.hidden_dims) % 2 == 0:
            raise InvalidModelError(
                "hidden_dims must hold an odd count of widths (affine/separable pairs)"
            )
        for i in range(2, len(self.hidden_dims), 2):
            if self.hidden_dims[i] != self.hidden_dims[i - 1]:
                raise InvalidModelError("separable layers must preserve width")
        if not (0.0 < self.positive_fraction < 1.0):
            raise InvalidModelError("positive_fraction must lie in (0, 1)")

    @property
    def dims(self):
        return tuple(self.hidden_dims) + (int(self.measurements),)

    @property
    def num_generative_pairs(self):
        return (len(self.hidden_dims) - 1) // 2


@dataclass(frozen=True)
class RecipeCalibration:
    """Quantities shared by every trial of a recipe (and by its predictor).

    Generative singular values come from one reference draw of an i.i.d.
    Gaussian matrix (scale 1/sqrt(fan-in)); bias means are tuned so the
    target fraction of pre-activations is positive; the measurement noise
    precision realizes the requested SNR.
    """

    generative_singular_values: tuple
    bias_means: tuple
    measurement_noise_precision: float


def _reference_singular_values(recipe, seed):
    out = []
    dims = recipe.hidden_dims
    for pair in range(recipe.num_generative_pairs):
        n_in, n_out = dims[2 * pair], dims[2 * pair + 1]
        rng = substream(seed, 0x5D, pair)
        g = rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)
        out.append(np.linalg.svd(g, compute_uv=False))
    return tuple(out)


def calibrate_recipe(recipe, seed):
    """Fix the trial-independent parts of a recipe (pure given seed)."""
    svals = _reference_singular_values(recipe, seed)
    dims = recipe.hidden_dims
    target = ndtri(recipe.positive_fraction)
    rng = substream(seed, 0xB1A5)
    bias_means = []
    v = 1.0  # component second moment of the current signal
    for pair in range(recipe.num_generative_pairs):
        n_out = dims[2 * pair + 1]
        s = svals[pair]
        v_pre = float(np.sum(s * s)) / n_out * v
        sigma_pre = math.sqrt(v_pre + recipe.bias_std**2)
        mu_b = sigma_pre * target
        bias_means.append(mu_b)
        # second moment after the separable stage, by scalar Monte-Carlo
        x = mu_b + sigma_pre * rng.standard_normal(recipe.calibration_samples)
        v = float(np.mean(apply_activation(recipe.activation, x) ** 2))

    probe = build_synthetic_network(recipe, seed, _probe_calibration(svals, bias_means))
    nu = calibrate_noise_to_snr(probe, recipe.snr_db, recipe.snr_trials, seed)
    return RecipeCalibration(
        generative_singular_values=svals,
        bias_means=tuple(bias_means),
        measurement_noise_precision=nu,
    )


def _probe_calibration(svals, bias_means):
    return RecipeCalibration(
        generative_singular_values=tuple(svals),
        bias_means=tuple(bias_means),
        measurement_noise_precision=1.0,
    )


def build_synthetic_network(recipe, seed, calibration):
    """One instance of the recipe: fresh orthogonal factors and biases."""
    dims = recipe.dims
    layers = []
    for pair in range(recipe.num_generative_pairs):
        n_in, n_out = dims[2 * pair], dims[2 * pair + 1]
        left = sample_haar_orthogonal(n_out, substream(seed, 0x1E, pair, 0))
        right = sample_haar_orthogonal(n_in, substream(seed, 0x1E, pair, 1))
        bias = calibration.bias_means[pair] + recipe.bias_std * substream(
            seed, 0x1E, pair, 2
        ).standard_normal(n_out)
        layers.append(
            linear_layer_from_factors(
                left, calibration.generative_singular_values[pair], right, bias, NOISELESS
            )
        )
        layers.append(NonlinearLayerSpec(activation=recipe.activation))
    m, n_last = dims[-1], dims[-2]
    left = sample_haar_orthogonal(m, substream(seed, 0x2E, 0))
    right = sample_haar_orthogonal(n_last, substream(seed, 0x2E, 1))
    s = geometric_singular_values(m, n_last, recipe.condition_number)
    layers.append(
        linear_layer_from_factors(
            left, s, right, np.zeros(m), calibration.measurement_noise_precision
        )
    )
    return NetworkSpec(layers=tuple(layers), dims=dims)


def recipe_law(recipe, calibration):
    """Ensemble-level perturbation law for the scalar predictor."""
    dims = recipe.dims
    laws = []
    for pair in range(recipe.num_generative_pairs):
        n_in, n_out = dims[2 * pair], dims[2 * pair + 1]
        mu = calibration.bias_means[pair]
        laws.append(
            LinearLaw(
                singular_values=np.asarray(calibration.generative_singular_values[pair]),
                n_out=n_out,
                n_in=n_in,
                noise_precision=NOISELESS,
                bbar_atoms=None,
                bbar_var=mu * mu + recipe.bias_std**2,
                bias_mean=mu,
            )
        )
        laws.append(
            SeparableLaw(activation=recipe.activation, noise_precision=NOISELESS, dim=n_out)
        )
    m, n_last = dims[-1], dims[-2]
    laws.append(
        LinearLaw(
            singular_values=geometric_singular_values(m, n_last, recipe.condition_number),
            n_out=m,
            n_in=n_last,
            noise_precision=calibration.measurement_noise_precision,
            bbar_atoms=None,
            bbar_var=0.0,
            bias_mean=0.0,
        )
    )
    return NetworkLaw(layers=tuple(laws), dims=dims)


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    recipe: SyntheticRecipe = field(default_factory=SyntheticRecipe)
    engine: EngineConfig = field(default_factory=lambda: EngineConfig(convergence_tol=0.0))
    se: SEConfig = field(default_factory=SEConfig)
    trials: int = 50
    master_seed: int = 0
    experiment_id: str = "synthetic"

    def __post_init__(self):
        if self.trials < 1:
            raise InvalidModelError("need at least one trial")


@dataclass
class TrialResult:
    seed: int
    nmse_db: np.ndarray | None  # (half_iters, L) hidden-signal errors
    gamma_plus: np.ndarray | None  # (iters, L) end-of-iteration snapshots
    gamma_minus: np.ndarray | None
    alpha_plus: np.ndarray | None
    alpha_minus: np.ndarray | None
    consistency: np.ndarray | None  # (iters,)
    wall_ms: float
    error: str | None = None


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    trials: list
    se_result: object

    @property
    def n_half(self):
        return min(t.nmse_db.shape[0] for t in self.ok_trials)

    @property
    def ok_trials(self):
        return [t for t in self.trials if t.error is None]

    def nmse_stack(self):
        n = self.n_half
        return np.stack([t.nmse_db[:n] for t in self.ok_trials])

    def mean_nmse_db(self):
        return self.nmse_stack().mean(axis=0)

    def median_nmse_db(self):
        return np.median(self.nmse_stack(), axis=0)


def run_single_trial(recipe, calibration, engine_cfg, trial_seed):
    """Draw a fresh network + signals, run the engine, collect metrics."""
    start = time.perf_counter()
    try:
        spec = build_synthetic_network(recipe, trial_seed, calibration)
        truth = forward_generate(spec, trial_seed)
        _, trace, _ = run(spec, truth.y, engine_cfg, seed=trial_seed, truth=truth)
    except (DivergedIterationError, NumericFailureError) as exc:
        return TrialResult(
            seed=trial_seed,
            nmse_db=None,
            gamma_plus=None,
            gamma_minus=None,
            alpha_plus=None,
            alpha_minus=None,
            consistency=None,
            wall_ms=1e3 * (time.perf_counter() - start),
            error=str(exc),
        )
    nmse = np.array([row.nmse_db for row in trace.rows])
    back = [row for row in trace.rows if row.direction == "backward"]
    return TrialResult(
        seed=trial_seed,
        nmse_db=nmse,
        gamma_plus=np.array([r.gamma_plus for r in back]),
        gamma_minus=np.array([r.gamma_minus for r in back]),
        alpha_plus=np.array([r.alpha_plus for r in back]),
        alpha_minus=np.array([r.alpha_minus for r in back]),
        consistency=np.array([r.consistency for r in back]),
        wall_ms=1e3 * (time.perf_counter() - start),
        error=None,
    )


def _trial_star(args):
    return run_single_trial(*args)


def run_trials(config, calibration=None, law=None, workers=None):
    """Run the predictor once and ``config.trials`` independent instances.

    Trial seeds derive from the master seed; aggregation is keyed by trial
    index so the result is independent of completion order.
    """
    recipe = config.recipe
    if calibration is None:
        calibration = calibrate_recipe(recipe, config.master_seed)
    if law is None:
        law = recipe_law(recipe, calibration)
    se_cfg = replace(
        config.se,
        iterations=config.engine.max_iters,
        mode=config.engine.mode,
        damping=config.engine.damping,
        alpha_clip=config.engine.alpha_clip,
    )
    se_result = run_se(law, se_cfg)

    seeds = [
        int(substream(config.master_seed, 0x7A1A, t).integers(2**62))
        for t in range(config.trials)
    ]
    jobs = [(recipe, calibration, config.engine, s) for s in seeds]
    n_workers = workers if workers is not None else worker_count()
    if n_workers > 1 and config.trials > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_trial_star, jobs))
    else:
        results = [run_single_trial(*job) for job in jobs]
    failed = [t for t in results if t.error is not None]
    if len(failed) == len(results):
        raise NumericFailureError(f"all trials failed; first error: {failed[0].error}")
    return ExperimentResult(config=config, trials=results, se_result=se_result)


def measurement_sweep(config, measurement_list, workers=None):
    """Re-run the experiment for each measurement count in the list."""
    out = {}
    for m in measurement_list:
        recipe = replace(config.recipe, measurements=int(m))
        cfg = replace(config, recipe=recipe, experiment_id=f"{config.experiment_id}-m{m}")
        out[int(m)] = run_trials(cfg, workers=workers)
    return out


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def result_rows(result):
    """Tidy rows, one per (trial, half iteration, hidden signal)."""
    n_half = result.n_half
    se_db = result.se_result.nmse_db
    rows = []
    for t in result.ok_trials:
        n_layers = t.nmse_db.shape[1]
        for h in range(n_half):
            it = h // 2
            for ell in range(n_layers):
                rows.append(
                    {
                        "experiment_id": result.config.experiment_id,
                        "trial_seed": t.seed,
                        "half_iter": h + 1,
                        "layer": ell,
                        "nmse_db_empirical": t.nmse_db[h, ell],
                        "nmse_db_se": se_db[h, ell] if h < se_db.shape[0] else math.nan,
                        "gamma_plus": t.gamma_plus[it, ell],
                        "gamma_minus": t.gamma_minus[it, ell],
                        "alpha_plus": t.alpha_plus[it, ell],
                        "alpha_minus": t.alpha_minus[it, ell],
                        "residual_consistency": t.consistency[it],
                        "wall_ms": math.nan,
                    }
                )
    return rows


def write_result_csv(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={CSV_SCHEMA_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in CSV_COLUMNS})


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def read_result_csv(path):
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
        raise InvalidModelError(f"unexpected CSV columns in {path}")
    for rec in reader:
        row = dict(rec)
        for key in CSV_COLUMNS:
            if key in ("experiment_id",):
                continue
            if key in ("trial_seed", "half_iter", "layer"):
                row[key] = int(rec[key])
            else:
                row[key] = float(rec[key])
        rows.append(row)
    return rows


def se_rows(experiment_id, se_result):
    """Predictor-only rows (trial_seed = -1, empirical columns NaN)."""
    rows = []
    db = se_result.nmse_db
    states = se_result.states
    for h in range(db.shape[0]):
        st = states[h // 2]
        for ell in range(db.shape[1]):
            rows.append(
                {
                    "experiment_id": experiment_id,
                    "trial_seed": -1,
                    "half_iter": h + 1,
                    "layer": ell,
                    "nmse_db_empirical": math.nan,
                    "nmse_db_se": db[h, ell],
                    "gamma_plus": st.gamma_bar_plus[ell],
                    "gamma_minus": st.gamma_bar_minus[ell],
                    "alpha_plus": st.alpha_bar_plus[ell],
                    "alpha_minus": st.alpha_bar_minus[ell],
                    "residual_consistency": math.nan,
                    "wall_ms": math.nan,
                }
            )
    return rows


def compare_rows(empirical_rows, se_rows_):
    """Join mean empirical NMSE with predictions on the (half_iter, layer) grid.

    Mismatched grids are a hard error; nothing is silently dropped.
    """
    emp = {}
    for row in empirical_rows:
        if row["trial_seed"] < 0:
            continue
        key = (row["half_iter"], row["layer"])
        emp.setdefault(key, []).append(row["nmse_db_empirical"])
    pred = {}
    for row in se_rows_:
        pred[(row["half_iter"], row["layer"])] = row["nmse_db_se"]
    if set(emp) != set(pred):
        missing = set(emp) ^ set(pred)
        raise InvalidModelError(f"empirical/prediction grids differ on {sorted(missing)[:5]} ...")
    joined = []
    for key in sorted(emp):
        mean_emp = float(np.mean(emp[key]))
        joined.append(
            {
                "half_iter": key[0],
                "layer": key[1],
                "nmse_db_empirical_mean": mean_emp,
                "nmse_db_se": pred[key],
                "gap_db": mean_emp - pred[key],
            }
        )
    return joined


def max_abs_gap(joined, layer=None, min_half=1):
    sel = [
        abs(r["gap_db"])
        for r in joined
        if (layer is None or r["layer"] == layer) and r["half_iter"] >= min_half
    ]
    return max(sel) if sel else math.nan


# ---------------------------------------------------------------------------
# Config (de)serialization
# ---------------------------------------------------------------------------


def config_to_json(config):
    doc = {
        "recipe": asdict(config.recipe),
        "engine": asdict(config.engine),
        "se": {
            "iterations": config.se.iterations,
            "mode": config.se.mode,
            "gamma_init": config.se.gamma_init,
            "stop_tol": config.se.stop_tol,
            "expectation": asdict(config.se.expectation),
        },
        "trials": config.trials,
        "master_seed": config.master_seed,
        "experiment_id": config.experiment_id,
    }
    return doc


def config_from_json(doc):
    recipe_doc = dict(doc.get("recipe", {}))
    if "hidden_dims" in recipe_doc:
        recipe_doc["hidden_dims"] = tuple(recipe_doc["hidden_dims"])
    se_doc = dict(doc.get("se", {}))
    expectation = ExpectationEngine(**se_doc.pop("expectation", {}))
    return ExperimentConfig(
        recipe=SyntheticRecipe(**recipe_doc),
        engine=EngineConfig(**doc.get("engine", {})),
        se=SEConfig(expectation=expectation, **se_doc),
        trials=int(doc.get("trials", 50)),
        master_seed=int(doc.get("master_seed", 0)),
        experiment_id=doc.get("experiment_id", "synthetic"),
    )


def load_config(path):
    with open(path) as fh:
        return config_from_json(json.load(fh))


def save_config(config, path):
    with open(path, "w") as fh:
        json.dump(config_to_json(config), fh, indent=2)
