"""Command-line front end: ``spats fit|predict|simulate|variogram``.

Settings come from built-in defaults, then an optional JSON file given
with ``--config``, then inline flags (highest precedence).  Exit status is
0 on success, 2 when the fit did not converge (outputs are still written)
and 1 on any error, reported as a single ``error:`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io as sio
from .assembly import ModelSpec, build_system, default_spatial_config, prediction_grid
from .diagnostics import decompose_surface, sample_variogram
from .psanova import SpatialConfig
from .reml import ConvergenceWarning, FitOptions, fit
from .simulation import SimulationConfig, run_study

MODEL_DEFAULTS = {
    "input": None,
    "output": None,
    "response": "response",
    "genotype": "genotype",
    "row": "row",
    "col": "col",
    "genotype_as_random": False,
    "checks": [],
    "fixed": [],
    "random": [],
    "spatial": True,
    "nseg": None,
    "degree": 3,
    "nest_div": None,
    "tolerance": 1e-6,
    "max_iter": 1000,
    "monitoring": 0,
    "resolution": None,
    "extent": None,
    "svg": True,
    "missing_token": "NA",
    "delimiter": None,
}

SIM_DEFAULTS = {
    "output": None,
    "threads": 1,
    "verbose": 0,
    **{f.name: f.default for f in fields(SimulationConfig)},
}


class UsageError(ValueError):
    pass


def _names(values) -> list[str]:
    """Accept ``a,b`` strings, lists of them, or repeated flags."""
    if values is None:
        return []
    if isinstance(values, str):
        values = [values]
    out = []
    for v in values:
        out.extend(s.strip() for s in str(v).split(",") if s.strip())
    return out


def _pair(value, what: str):
    if value is None:
        return None
    vals = [int(v) for v in (value if isinstance(value, (list, tuple)) else [value])]
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise UsageError(f"{what} takes one or two integers")
    return vals


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", nargs="?", help="delimited trial file")
    p.add_argument("--config", help="JSON settings file; inline flags take precedence")
    p.add_argument("-o", "--output", help="output directory (default: $SPATS_OUTPUT_DIR or ./spats_output)")
    p.add_argument("--response", help="response column")
    p.add_argument("--genotype", help="genotype column")
    p.add_argument("--row", help="row position column")
    p.add_argument("--col", help="column position column")
    p.add_argument("--genotype-as-random", dest="genotype_as_random", action="store_true")
    p.add_argument("--no-genotype", dest="genotype", action="store_const", const="")
    p.add_argument("--checks", action="append", help="check genotypes kept fixed (random genotype)")
    p.add_argument("--fixed", action="append", help="fixed factors or covariates, comma separated")
    p.add_argument("--random", action="append", help="random factors, comma separated")
    p.add_argument("--no-spatial", dest="spatial", action="store_false")
    p.add_argument("--nseg", nargs="+", type=int, metavar="N",
                   help="segments for the column then row position")
    p.add_argument("--degree", type=int)
    p.add_argument("--nest-div", dest="nest_div", nargs="+", type=int, metavar="D",
                   help="nesting divisor(s), column then row")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--monitoring", type=int, choices=(0, 1, 2), help="iteration trace on stderr")
    p.add_argument("--missing-token", dest="missing_token")
    p.add_argument("--delimiter")
    p.add_argument("--no-svg", dest="svg", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spats", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sup = argparse.SUPPRESS

    p = sub.add_parser("fit", help="fit the spatial model and write the output bundle",
                       argument_default=sup)
    _add_model_flags(p)
    p.add_argument("--resolution", nargs="+", type=int, metavar="N",
                   help="trend grid points (rows cols)")

    p = sub.add_parser("predict", help="spatial trend on a regular grid", argument_default=sup)
    _add_model_flags(p)
    p.add_argument("--resolution", nargs="+", type=int, metavar="N", required=True)
    p.add_argument("--extent", nargs=4, type=float, metavar=("R0", "R1", "C0", "C1"),
                   help="grid bounds in raw positions (default: the layout)")

    p = sub.add_parser("variogram", help="sample variogram of the residuals", argument_default=sup)
    _add_model_flags(p)

    p = sub.add_parser("simulate", help="AR x AR simulation study", argument_default=sup)
    p.add_argument("--config", help="JSON settings file; inline flags take precedence")
    p.add_argument("-o", "--output")
    p.add_argument("--runs", dest="n_runs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--rows", dest="n_rows", type=int)
    p.add_argument("--cols", dest="n_cols", type=int)
    p.add_argument("--genotypes", dest="m_g", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--block-size", dest="block_size", type=int)
    p.add_argument("--sigma2-g", dest="sigma2_g", type=float)
    p.add_argument("--sigma2-s", dest="sigma2_s", type=float)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--rho", type=float, help="sets both autocorrelations")
    p.add_argument("--rho-r", dest="rho_r", type=float)
    p.add_argument("--rho-c", dest="rho_c", type=float)
    p.add_argument("--nseg", nargs=2, type=int, metavar=("ROW", "COL"))
    p.add_argument("--nest-div", dest="nest_div", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--variants", action="append")
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="count")
    return parser


def _settings(args: argparse.Namespace, defaults: dict) -> dict:
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    merged = dict(defaults)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            cfg = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        allowed = set(defaults) | {"rho"}
        unknown = sorted(set(cfg) - allowed)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(cfg)
    merged.update(given)
    return merged


def spec_from_settings(s: dict, data) -> ModelSpec:
    if not s["spatial"]:
        spatial = None
    else:
        nseg = _pair(s["nseg"], "nseg")
        nest = _pair(s["nest_div"], "nest_div")
        if nseg is None:
            auto = default_spatial_config(data, s["degree"])
            nseg = [auto.nseg_v, auto.nseg_u]
        if nest is None:
            nest = [2 if n % 2 == 0 else 1 for n in nseg]
        # flags follow the (col, row) order of the spatial term
        spatial = SpatialConfig(nseg[1], nseg[0], int(s["degree"]), nest[1], nest[0])
    role = "none" if not s["genotype"] else ("random" if s["genotype_as_random"] else "fixed")
    return ModelSpec(role, tuple(_names(s["fixed"])), tuple(_names(s["random"])),
                     tuple(_names(s["checks"])), spatial, s["genotype"] or "genotype")


def _load_and_fit(s: dict):
    if not s["input"]:
        raise UsageError("no input file given")
    columns = {"response": s["response"], "row": s["row"], "col": s["col"]}
    if s["genotype"]:
        columns["genotype"] = s["genotype"]
    data = sio.read_trial(s["input"], s["missing_token"], s["delimiter"], columns,
                          require_genotype=bool(s["genotype"]))
    spec = spec_from_settings(s, data)
    opts = FitOptions(tolerance=float(s["tolerance"]), max_iter=int(s["max_iter"]),
                      trace_level=int(s["monitoring"]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model = fit(build_system(data, spec), opts, stream=sys.stderr)
    return data, model


def _out_dir(s: dict) -> Path:
    return Path(s["output"]) if s.get("output") else sio.default_output_dir()


def cmd_fit(args) -> int:
    s = _settings(args, MODEL_DEFAULTS)
    _, model = _load_and_fit(s)
    files = sio.build_outputs(model, s["resolution"] and _pair(s["resolution"], "resolution"),
                              svg=bool(s["svg"]))
    sio.write_files(files, _out_dir(s))
    print(sio.format_summary(model))
    if not model.converged:
        print(f"warning: no convergence after {model.iterations} iterations", file=sys.stderr)
        return 2
    return 0


def cmd_predict(args) -> int:
    s = _settings(args, MODEL_DEFAULTS)
    res = _pair(s["resolution"], "resolution")
    data, model = _load_and_fit(s)
    if model.assembled.spatial is None:
        raise UsageError("prediction needs a spatial model")
    grid = prediction_grid(data, res, s["extent"])
    dec = decompose_surface(model, grid, include_intercept=False)
    rows, cols = grid.points()
    inside = grid.inside.ravel()
    names = list(dec.components)
    body = [[rows[i], cols[i], bool(inside[i]), dec.total[i]] + [dec.components[n][i] for n in names]
            for i in range(rows.size)]
    files = {"trend_grid.csv": sio._csv(["row", "col", "inside", "trend"] + names, body)}
    if s["svg"]:
        files["trend.svg"] = sio.svg_heatmap(dec.total.reshape(grid.shape),
                                             "Spatial trend (intercept excluded)", grid.inside)
    sio.write_files(files, _out_dir(s))
    print(f"wrote {grid.shape[0]}x{grid.shape[1]} trend grid to {_out_dir(s)}")
    return 0 if model.converged else 2


def cmd_variogram(args) -> int:
    s = _settings(args, MODEL_DEFAULTS)
    _, model = _load_and_fit(s)
    v = sample_variogram(model)
    files = {"variogram.csv": sio.variogram_csv(model)}
    if s["svg"]:
        grid = np.full((v.row_displacement.max() + 1, v.col_displacement.max() + 1), np.nan)
        grid[v.row_displacement, v.col_displacement] = v.value
        files["variogram.svg"] = sio.svg_heatmap(grid, "Sample variogram (row x col displacement)")
    sio.write_files(files, _out_dir(s))
    print(f"wrote variogram with {len(v)} displacements to {_out_dir(s)}")
    return 0 if model.converged else 2


def cmd_simulate(args) -> int:
    s = _settings(args, SIM_DEFAULTS)
    if s.get("rho") is not None:
        s["rho_r"] = s["rho_c"] = s.pop("rho")
    s.pop("rho", None)
    if "nseg" in s and s["nseg"] is not None:
        s["nseg_row"], s["nseg_col"] = s.pop("nseg")
    s.pop("nseg", None)
    if s.get("variants") is not None:
        s["variants"] = tuple(_names(s["variants"]))
    threads = int(s.pop("threads"))
    verbose = int(s.pop("verbose") or 0)
    out = _out_dir(s)
    s.pop("output")
    if int(s["n_runs"]) < 1:
        raise UsageError("runs must be at least 1")
    config = SimulationConfig(**s)

    def progress(r):
        if verbose >= 1:
            msg = f"run {r.run:4d} {r.variant:7s} converged={r.converged} log10_rmse={r.log10_rmse:.4f}"
            if r.error:
                msg += f" error={r.error}"
            print(msg, file=sys.stderr)

    report = run_study(config, threads=threads, progress=progress)
    sio.write_files(sio.simulation_files(report), out)
    print(f"{'variant':8s}{'conv%':>7s}{'log10 RMSE':>20s}{'bias s2_g':>20s}{'bias s2':>20s}"
          f"{'ED_s':>18s}")
    for v in report.variants:
        print(f"{v.variant:8s}{v.convergence_rate:7.1f}"
              f"{v.log10_rmse.mean:11.3f} ({v.log10_rmse.sd:.3f})"
              f"{v.bias_sigma2_g.mean:11.3f} ({v.bias_sigma2_g.sd:.3f})"
              f"{v.bias_sigma2.mean:11.3f} ({v.bias_sigma2.sd:.3f})"
              f"{v.ed_s.mean:10.2f} ({v.ed_s.sd:.2f})")
    return 0


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "variogram": cmd_variogram,
            "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit 1
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
