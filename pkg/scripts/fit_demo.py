"""Simulate one trial, fit the spatial model and print what a breeder would look at.

    python scripts/fit_demo.py [--seed 3] [--out demo_output]
"""
import argparse
import time

import numpy as np

from spats.assembly import ModelSpec, fit_trial
from spats.genetics import genotype_predictions, heritability
from spats.io import format_summary, write_outputs
from spats.reml import FitOptions
from spats.simulation import FILLER, SimulationConfig, run_rng, simulate_trial


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--out", default=None, help="also write the output bundle here")
    a = p.parse_args(argv)

    cfg = SimulationConfig(seed=a.seed)
    trial = simulate_trial(cfg, run_rng(cfg.seed, 0))
    checks = (FILLER,) if FILLER in trial.data.genotypes else ()
    spec = ModelSpec("random", checks=checks, spatial=cfg.spatial_config())
    t0 = time.perf_counter()
    model = fit_trial(trial.data, spec, FitOptions(tolerance=1e-6))
    print(format_summary(model))
    print(f"fit time {time.perf_counter() - t0:.2f} s")

    for mode in ("oakey", "cullis", "standard"):
        try:
            print(f"H2 {mode:9s} {heritability(model, mode).value:.3f}")
        except ValueError as exc:
            print(f"H2 {mode:9s} n/a ({exc})")

    preds = {e.label: e.value for e in genotype_predictions(model) if e.kind == "BLUP"}
    est = np.array([preds[g] for g in trial.labels])
    truth = trial.genetic - trial.genetic.mean()
    print(f"corr(BLUP, true effect) {np.corrcoef(est, truth)[0, 1]:.3f}")
    if a.out:
        write_outputs(model, a.out)
        print(f"outputs in {a.out}")


if __name__ == "__main__":
    main()
