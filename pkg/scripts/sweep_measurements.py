#!/usr/bin/env python3
"""Sweep the measurement count and compare final errors with the predictor."""

import argparse
import json
import sys

from mlvamp import harness
from mlvamp.engine import EngineConfig


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--measurements", default="10,50,100,200,300")
    parser.add_argument("--trials", type=int, default=50)
    parser.add_argument("--iters", type=int, default=50)
    parser.add_argument("--seed", type=int, default=3)
    parser.add_argument("--out", default="sweep.csv")
    args = parser.parse_args(argv)

    config = harness.ExperimentConfig(
        recipe=harness.SyntheticRecipe(),
        engine=EngineConfig(max_iters=args.iters, convergence_tol=0.0),
        trials=args.trials,
        master_seed=args.seed,
        experiment_id="sweep",
    )
    m_list = [int(v) for v in args.measurements.split(",")]
    results = harness.measurement_sweep(config, m_list)

    rows = []
    summary = {}
    for m, result in sorted(results.items()):
        rows.extend(harness.result_rows(result))
        n = result.n_half
        summary[m] = {
            "mean_final_nmse_db": float(result.mean_nmse_db()[-1, 0]),
            "median_final_nmse_db": float(result.median_nmse_db()[-1, 0]),
            "predicted_final_nmse_db": float(result.se_result.nmse_db[n - 1, 0]),
            "converged_trials": len(result.ok_trials),
        }
    harness.write_result_csv(args.out, rows)
    print(json.dumps(summary, indent=2))
    print(f"rows written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
