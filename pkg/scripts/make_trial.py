"""Write a synthetic field trial (AR x AR field, resolvable design) to a CSV file.

    python scripts/make_trial.py trial.csv --rows 10 --cols 20 --genotypes 100 --seed 1
"""
import argparse

from spats.io import write_trial
from spats.simulation import SimulationConfig, run_rng, simulate_trial


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("path")
    p.add_argument("--rows", type=int, default=10)
    p.add_argument("--cols", type=int, default=20)
    p.add_argument("--genotypes", type=int, default=100)
    p.add_argument("--replicates", type=int, default=2)
    p.add_argument("--block-size", type=int, default=10)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=1)
    a = p.parse_args(argv)
    cfg = SimulationConfig(n_rows=a.rows, n_cols=a.cols, m_g=a.genotypes, replicates=a.replicates,
                           block_size=a.block_size, rho_r=a.rho, rho_c=a.rho, seed=a.seed)
    trial = simulate_trial(cfg, run_rng(cfg.seed, 0))
    write_trial(trial.data, a.path)
    print(f"wrote {len(trial.data)} plots to {a.path}")


if __name__ == "__main__":
    main()
