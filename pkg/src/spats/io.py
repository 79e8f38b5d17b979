"""Trial files, output bundles and SVG heatmaps."""
from __future__ import annotations

import csv
import io as _io
import json
import math
import os
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .assembly import PlotRecord, TrialData, prediction_grid
from .diagnostics import EdTable, decompose_surface, ed_table, sample_variogram
from .genetics import HeritabilityError, genotype_predictions, heritability
from .reml import FittedModel

SCHEMA_VERSION = 1
DELIMITERS = (",", "\t", ";")
ROLES = ("response", "genotype", "row", "col")


class TrialFormatError(ValueError):
    """Malformed trial file; messages carry ``path:line``."""


class OutputError(OSError):
    pass


def fmt(x) -> str:
    """Shortest round-trip decimal; ``NA`` for missing values."""
    if x is None:
        return "NA"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "NA" if math.isnan(x) else repr(x)


def _json_num(x):
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) or math.isinf(x) else x


def detect_delimiter(header: str) -> str:
    counts = {d: header.count(d) for d in DELIMITERS}
    best = max(DELIMITERS, key=lambda d: counts[d])
    if counts[best] == 0:
        raise TrialFormatError("cannot detect the delimiter (expected comma, tab or semicolon)")
    return best


def _parse_float(text: str) -> Optional[float]:
    try:
        return float(text)
    except ValueError:
        return None


def read_trial(path, missing_token: str = "NA", delimiter: Optional[str] = None,
               columns: Optional[Mapping[str, str]] = None,
               require_genotype: bool = True) -> TrialData:
    """Read a delimited trial file with a header row.

    ``columns`` maps the roles ``response``, ``genotype``, ``row`` and
    ``col`` to header names (defaults: the role names).  Remaining columns
    become covariates when every non-missing value is numeric and factors
    otherwise.  An empty cell or ``missing_token`` marks a missing value.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    roles = {r: r for r in ROLES}
    roles.update(columns or {})
    text = path.read_text(encoding="utf-8-sig")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise TrialFormatError(f"{path}:1: empty file or missing header")
    delim = delimiter or detect_delimiter(lines[0])
    reader = csv.reader(_io.StringIO(text), delimiter=delim)
    header = [h.strip() for h in next(reader)]
    if len(set(header)) != len(header):
        dup = sorted({h for h in header if header.count(h) > 1})
        raise TrialFormatError(f"{path}:1: duplicate column names: {', '.join(dup)}")
    needed = [r for r in ROLES if r != "genotype" or require_genotype]
    absent = [roles[r] for r in needed if roles[r] not in header]
    if absent:
        raise TrialFormatError(f"{path}:1: missing required columns: {', '.join(absent)}")
    pos = {h: j for j, h in enumerate(header)}
    role_cols = {roles[r] for r in ROLES if roles[r] in pos}
    extra = [h for h in header if h not in role_cols]

    raw = []
    for lineno, fields in enumerate(reader, start=2):
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) != len(header):
            raise TrialFormatError(f"{path}:{lineno}: expected {len(header)} fields, "
                                   f"found {len(fields)}")
        raw.append((lineno, [f.strip() for f in fields]))
    if not raw:
        raise TrialFormatError(f"{path}: no data rows")

    def is_missing(v: str) -> bool:
        return v == "" or v == missing_token

    numeric = {h: all(is_missing(f[pos[h]]) or _parse_float(f[pos[h]]) is not None for _, f in raw)
               and any(not is_missing(f[pos[h]]) for _, f in raw) for h in extra}

    records = []
    seen = {}
    for lineno, f in raw:
        def intval(role):
            v = f[pos[roles[role]]]
            try:
                return int(v)
            except ValueError:
                raise TrialFormatError(f"{path}:{lineno}: column {roles[role]!r} must be an "
                                       f"integer, got {v!r}") from None
        row, col = intval("row"), intval("col")
        if (row, col) in seen:
            raise TrialFormatError(f"{path}:{lineno}: duplicate plot position row={row}, col={col} "
                                   f"(first seen on line {seen[(row, col)]})")
        seen[(row, col)] = lineno
        yv = f[pos[roles["response"]]]
        if is_missing(yv):
            y = float("nan")
        else:
            y = _parse_float(yv)
            if y is None:
                raise TrialFormatError(f"{path}:{lineno}: response {yv!r} is not a number")
        geno = f[pos[roles["genotype"]]] if roles["genotype"] in pos else ""
        factors, covs = {}, {}
        for h in extra:
            v = f[pos[h]]
            if numeric[h]:
                covs[h] = float("nan") if is_missing(v) else float(v)
            else:
                factors[h] = v
        records.append(PlotRecord(y, geno, row, col, factors, covs))
    return TrialData(tuple(records))


def write_trial(data: TrialData, path, missing_token: str = "NA", delimiter: str = ",") -> None:
    """Write ``data`` in the layout accepted by :func:`read_trial`."""
    first = data.records[0]
    fnames = sorted(first.factors)
    cnames = sorted(first.covariates)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(list(ROLES) + fnames + cnames)
        for r in data.records:
            y = missing_token if r.missing else fmt(r.response)
            covs = [missing_token if math.isnan(r.covariates[c]) else fmt(r.covariates[c])
                    for c in cnames]
            w.writerow([y, r.genotype, r.row, r.col] + [r.factors[n] for n in fnames] + covs)


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in r])
    return buf.getvalue()


def read_table(path) -> list[dict]:
    """Read one of the emitted CSV tables back as dictionaries of strings."""
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---- summaries -------------------------------------------------------------

def variance_rows(model: FittedModel) -> list[tuple]:
    """``(name, variance, sd, log10 lambda)`` with random factors before the smooth blocks."""
    blocks = list(zip(model.design.blocks, model.variances))
    ordered = [bv for bv in blocks if bv[0].kind != "spatial"] + \
              [bv for bv in blocks if bv[0].kind == "spatial"]
    return [(b.name, float(v), math.sqrt(v), math.log10(model.sigma2 / v)) for b, v in ordered]


def format_summary(model: FittedModel, table: Optional[EdTable] = None) -> str:
    """Human-readable variance components and dimensions table."""
    table = table or ed_table(model)
    out = ["Variance components:",
           f"{'':18s}{'Variance':>10s}{'SD':>14s}{'log10(lambda)':>18s}"]
    for name, var, sd, lam in variance_rows(model):
        out.append(f"{name:18s}{var:10.3e}{sd:14.3e}{lam:18.5f}")
    out.append("")
    out.append(f"{'Residual':18s}{model.sigma2:10.3e}{math.sqrt(model.sigma2):14.3e}")
    out.append("")
    out.append("Dimensions:")
    out.append(f"{'':18s}{'Effective':>9s}{'Model':>10s}{'Nominal':>12s}{'Ratio':>10s}{'Type':>9s}")
    for r in table.rows:
        out.append(f"{r.name:18s}{r.effective:9.1f}{r.model_dim:10d}{r.nominal_dim:12d}"
                   f"{r.ratio:10.2f}{r.type_code:>9s}")
    out.append("")
    t = table.total
    out.append(f"{'Total':18s}{t.effective:9.1f}{t.model_dim:10d}{t.nominal_dim:12d}{t.ratio:10.2f}")
    out.append(f"{'Residual':18s}{table.residual:9.1f}")
    out.append(f"{'Nobs':18s}{table.n:9d}")
    out.append("")
    out.append("Type codes: F 'Fixed'    R 'Random'    S 'Smooth/Semiparametric'")
    if not model.converged:
        out.append(f"WARNING: no convergence after {model.iterations} iterations")
    return "\n".join(out)


def summary_dict(model: FittedModel, table: Optional[EdTable] = None) -> dict:
    table = table or ed_table(model)
    variances = {name: (var, lam) for name, var, _, lam in variance_rows(model)}
    comps = []
    for r in table.rows:
        var, lam = variances.get(r.name, (None, None))
        comps.append({
            "name": r.name, "type": r.type_code, "variance": _json_num(var),
            "log10_lambda": _json_num(lam), "ED": _json_num(r.effective),
            "model_dim": r.model_dim, "nominal_dim": r.nominal_dim, "ratio": _json_num(r.ratio),
        })
    out = {
        "schema_version": SCHEMA_VERSION,
        "converged": bool(model.converged),
        "iterations": int(model.iterations),
        "deviance": _json_num(model.deviance),
        "n": int(model.design.n),
        "rank_x": int(model.rank_x),
        "residual": {"variance": _json_num(model.sigma2), "ED": _json_num(table.residual)},
        "components": comps,
        "total": {"ED": _json_num(table.total.effective), "model_dim": table.total.model_dim,
                  "nominal_dim": table.total.nominal_dim, "ratio": _json_num(table.total.ratio)},
    }
    try:
        out["heritability"] = {m: _json_num(heritability(model, m).value)
                               for m in ("oakey", "cullis")}
    except HeritabilityError:
        pass
    return out


# ---- SVG -------------------------------------------------------------------

# blue - white - red
_RAMP = ((33, 102, 172), (247, 247, 247), (178, 24, 43))


def _color(t: float) -> str:
    t = min(max(t, 0.0), 1.0) * 2
    i = 0 if t <= 1 else 1
    f = t - i
    a, b = _RAMP[i], _RAMP[i + 1]
    return "#%02x%02x%02x" % tuple(round(a[k] + (b[k] - a[k]) * f) for k in range(3))


def svg_heatmap(values: np.ndarray, title: str, mask: Optional[np.ndarray] = None,
                cell: int = 12) -> str:
    """Static SVG heatmap, one ``rect`` per cell (rows top to bottom).

    The colour scale is symmetric around zero; cells with ``mask`` False or
    missing values are drawn grey.
    """
    values = np.asarray(values, dtype=float)
    nr, nc = values.shape
    mask = np.ones_like(values, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    ok = mask & np.isfinite(values)
    lo = float(values[ok].min()) if ok.any() else 0.0
    hi = float(values[ok].max()) if ok.any() else 0.0
    span = max(abs(lo), abs(hi)) or 1.0
    top = 30
    width, height = nc * cell + 20, nr * cell + top + 30
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
             f'height="{height}">',
             f'<text x="10" y="18" font-family="sans-serif" font-size="12">{title}</text>']
    for i in range(nr):
        for j in range(nc):
            fill = _color(0.5 + 0.5 * values[i, j] / span) if ok[i, j] else "#bdbdbd"
            parts.append(f'<rect class="cell" x="{10 + j * cell}" y="{top + i * cell}" '
                         f'width="{cell}" height="{cell}" fill="{fill}"/>')
    parts.append(f'<text x="10" y="{height - 10}" font-family="sans-serif" font-size="11">'
                 f'min {lo:.4g}  max {hi:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---- bundles ---------------------------------------------------------------

def _plot_grid(data: TrialData, values: Mapping[tuple, float]) -> tuple[np.ndarray, np.ndarray]:
    r0, r1, c0, c1 = data.layout
    grid = np.full((r1 - r0 + 1, c1 - c0 + 1), np.nan)
    for (r, c), v in values.items():
        grid[r - r0, c - c0] = v
    return grid, np.isfinite(grid)


def trend_grid_rows(model: FittedModel, resolution) -> tuple[list[str], list[list], object, np.ndarray]:
    """Spatial trend (intercept excluded) and its components on a regular grid."""
    grid = prediction_grid(model.assembled.data, resolution)
    dec = decompose_surface(model, grid, include_intercept=False)
    rows, cols = grid.points()
    inside = grid.inside.ravel()
    names = list(dec.components)
    header = ["row", "col", "inside", "trend"] + names
    body = [[rows[i], cols[i], bool(inside[i]), dec.total[i]] + [dec.components[n][i] for n in names]
            for i in range(rows.size)]
    return header, body, grid, dec.total.reshape(grid.shape)


def build_outputs(model: FittedModel, resolution=None, svg: bool = True) -> dict[str, str]:
    """Contents of the output bundle keyed by file name, built in memory."""
    asm = model.assembled
    if asm is None:
        raise ValueError("output bundles need a model built by build_system")
    data = asm.data
    table = ed_table(model)
    files: dict[str, str] = {}

    ed_rows = [[r.name, r.effective, r.model_dim, r.nominal_dim, r.ratio, r.type_code]
               for r in table.rows]
    t = table.total
    ed_rows.append(["Total", t.effective, t.model_dim, t.nominal_dim, t.ratio, ""])
    ed_rows.append(["Residual", table.residual, "", "", "", ""])
    ed_rows.append(["Nobs", table.n, "", "", "", ""])
    files["ed_table.csv"] = _csv(["component", "effective", "model", "nominal", "ratio", "type"],
                                 ed_rows)

    var_rows = [list(r) for r in variance_rows(model)]
    var_rows.append(["Residual", model.sigma2, math.sqrt(model.sigma2), ""])
    files["variances.csv"] = _csv(["component", "variance", "sd", "log10_lambda"], var_rows)

    if asm.spec.genotype_role != "none":
        files["blups.csv"] = _csv(["genotype", "value", "kind"],
                                  [[g.label, g.value, g.kind] for g in genotype_predictions(model)])

    obs = asm.labels.observed
    fitted = dict(zip(obs.tolist(), model.result.fitted))
    has_spatial = asm.spatial is not None
    trend = None
    if has_spatial:
        trend = decompose_surface(model, (data.rows, data.cols), include_intercept=False).total
    frows = []
    for i, r in enumerate(data.records):
        fv = fitted.get(i)
        frows.append([r.row, r.col, r.genotype, None if r.missing else r.response,
                      fv, None if fv is None else r.response - fv,
                      trend[i] if has_spatial else None])
    files["fitted.csv"] = _csv(["row", "col", "genotype", "observed", "fitted", "residual",
                                "spatial_trend"], frows)

    if has_spatial:
        r0, r1, c0, c1 = data.layout
        res = resolution or (r1 - r0 + 1, c1 - c0 + 1)
        header, body, grid, surface = trend_grid_rows(model, res)
        files["trend_grid.csv"] = _csv(header, body)
        if svg:
            files["trend.svg"] = svg_heatmap(surface, "Spatial trend (intercept excluded)",
                                             grid.inside)
    if svg:
        resid = {(data.records[i].row, data.records[i].col): e
                 for i, e in zip(obs.tolist(), model.result.residuals)}
        grid_r, mask = _plot_grid(data, resid)
        files["residuals.svg"] = svg_heatmap(grid_r, "Residuals", mask)

    files["summary.json"] = json.dumps(summary_dict(model, table), indent=2) + "\n"
    return files


def write_files(files: Mapping[str, str], out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name in sorted(files):
            p = out / name
            p.write_text(files[name], encoding="utf-8")
            paths.append(p)
    except OSError as exc:
        raise OutputError(f"cannot write outputs to {out}: {exc.strerror or exc}") from None
    return paths


def write_outputs(model: FittedModel, out_dir, resolution=None, svg: bool = True) -> list[Path]:
    """Write the full output bundle; nothing is written if assembly fails."""
    return write_files(build_outputs(model, resolution, svg), out_dir)


def variogram_csv(model: FittedModel) -> str:
    v = sample_variogram(model)
    return _csv(["row_displacement", "col_displacement", "value", "pairs"],
                zip(v.row_displacement, v.col_displacement, v.value, v.count))


def simulation_files(report) -> dict[str, str]:
    """CSV/JSON serialization of a :class:`~spats.simulation.SimulationReport`."""
    head = ["variant", "n_runs", "n_used", "convergence_pct", "log10_rmse_mean", "log10_rmse_sd",
            "bias_sigma2_g_mean", "bias_sigma2_g_sd", "bias_sigma2_mean", "bias_sigma2_sd",
            "ed_s_mean", "ed_s_sd"]
    rows = [[v.variant, v.n_runs, v.n_used, v.convergence_rate, v.log10_rmse.mean,
             v.log10_rmse.sd, v.bias_sigma2_g.mean, v.bias_sigma2_g.sd, v.bias_sigma2.mean,
             v.bias_sigma2.sd, v.ed_s.mean, v.ed_s.sd] for v in report.variants]
    run_head = ["run", "variant", "converged", "log10_rmse", "sigma2_g_hat", "sigma2_hat",
                "ed_s", "iterations", "error"]
    runs = [[r.run, r.variant, r.converged, r.log10_rmse, r.sigma2_g_hat, r.sigma2_hat, r.ed_s,
             r.iterations, r.error] for r in report.runs]

    def clean(obj):
        if isinstance(obj, float):
            return _json_num(obj)
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        return obj

    payload = {"schema_version": SCHEMA_VERSION, **clean(report.to_dict())}
    return {
        "simulation_summary.csv": _csv(head, rows),
        "simulation_runs.csv": _csv(run_head, runs),
        "simulation.json": json.dumps(payload, indent=2) + "\n",
    }


def default_output_dir() -> Path:
    return Path(os.environ.get("SPATS_OUTPUT_DIR", "spats_output"))
