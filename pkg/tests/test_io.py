import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spats.assembly import ModelSpec, TrialData, fit_trial
from spats.io import (
    OutputError,
    TrialFormatError,
    build_outputs,
    detect_delimiter,
    fmt,
    read_table,
    read_trial,
    simulation_files,
    svg_heatmap,
    variogram_csv,
    write_outputs,
    write_trial,
)
from spats.psanova import SpatialConfig
from spats.reml import FitOptions
from spats.simulation import SimulationConfig, run_study

from conftest import make_trial, wheat_like


@pytest.fixture(scope="module")
def model():
    return fit_trial(make_trial(seed=1, missing=2), ModelSpec("fixed", random=("rep",), spatial=SpatialConfig(7, 9, 3, 1, 1)),
                     FitOptions(tolerance=1e-8))


def write(tmp_path, text, name="trial.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_four_records_one_missing(tmp_path):
    p = write(tmp_path, "response,genotype,row,col\n1.5,A,1,1\nNA,B,1,2\n2.5,A,2,1\n3.0,B,2,2\n")
    data = read_trial(p)
    assert len(data) == 4
    assert [r.missing for r in data.records] == [False, True, False, False]
    assert data.genotypes == ["A", "B", "A", "B"]


def test_empty_cell_is_missing(tmp_path):
    p = write(tmp_path, "response,genotype,row,col\n,A,1,1\n2,B,1,2\n")
    assert read_trial(p).records[0].missing


def test_duplicate_position_reports_line(tmp_path):
    p = write(tmp_path, "response,genotype,row,col\n1,A,1,1\n2,B,1,2\n3,C,1,1\n")
    with pytest.raises(TrialFormatError, match=r"trial\.csv:4: duplicate plot position row=1, col=1"):
        read_trial(p)


def test_missing_required_columns(tmp_path):
    p = write(tmp_path, "yield,genotype,row\n1,A,1\n")
    with pytest.raises(TrialFormatError, match="response, col"):
        read_trial(p)


def test_column_mapping_and_optional_genotype(tmp_path):
    p = write(tmp_path, "yield\tR\tC\n1\t1\t1\n2\t1\t2\n")
    data = read_trial(p, columns={"response": "yield", "row": "R", "col": "C"}, require_genotype=False)
    assert data.response.tolist() == [1.0, 2.0]


@pytest.mark.parametrize("bad, msg", [
    ("response,genotype,row,col\n1,A,x,1\n", r":2: column 'row' must be an integer"),
    ("response,genotype,row,col\nabc,A,1,1\n", r":2: response 'abc' is not a number"),
    ("response,genotype,row,col\n1,A,1\n", r":2: expected 4 fields, found 3"),
    ("response,genotype,row,col\n", "no data rows"),
])
def test_parse_errors_carry_line_numbers(tmp_path, bad, msg):
    with pytest.raises(TrialFormatError, match=msg):
        read_trial(write(tmp_path, bad))


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        read_trial("/nonexistent/trial.csv")


@pytest.mark.parametrize("header, delim", [("a,b,c", ","), ("a\tb\tc", "\t"), ("a;b;c", ";")])
def test_delimiter_detection(header, delim):
    assert detect_delimiter(header) == delim


def test_undetectable_delimiter():
    with pytest.raises(TrialFormatError):
        detect_delimiter("single")


def test_extra_columns_become_factors_or_covariates(tmp_path):
    p = write(tmp_path, "response;genotype;row;col;rep;moisture\n1;A;1;1;R1;0.5\n2;B;1;2;R2;NA\n")
    data = read_trial(p)
    assert data.records[0].factors == {"rep": "R1"}
    assert data.records[0].covariates == {"moisture": 0.5}
    assert math.isnan(data.records[1].covariates["moisture"])


def test_wheat_like_file_round_trip(tmp_path):
    data = wheat_like()
    write_trial(data, tmp_path / "wheat.csv")
    back = read_trial(tmp_path / "wheat.csv")
    assert len(back) == 330
    assert len(set(back.genotypes)) == 107
    reps = back.labels("rep")
    assert {r: reps.count(r) for r in set(reps)} == {"R1": 110, "R2": 110, "R3": 110}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(allow_nan=False, allow_infinity=False, width=64) | st.none(),
                          st.text("ABCxyz_-.", min_size=1, max_size=6)),
                min_size=1, max_size=20))
def test_write_read_round_trip(tmp_path_factory, recs):
    if all(y is None for y, _ in recs):
        recs[0] = (0.0, recs[0][1])
    n = len(recs)
    y = [np.nan if v is None else v for v, _ in recs]
    gen = [g for _, g in recs]
    data = TrialData.from_arrays(y, gen, np.arange(1, n + 1), np.ones(n, int),
                                 factors={"block": [f"B{i % 3}" for i in range(n)]},
                                 covariates={"x": np.linspace(0, 1, n)})
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    write_trial(data, path)
    back = read_trial(path)
    for a, b in zip(back.records, data.records):
        assert (a.genotype, a.row, a.col, a.factors) == (b.genotype, b.row, b.col, b.factors)
        assert a.covariates == b.covariates
    np.testing.assert_array_equal(back.response, data.response)


def test_fmt_round_trips_floats():
    for x in [0.1, 1 / 3, -2.5e-300, 123456789.123456789]:
        assert float(fmt(x)) == x
    assert fmt(float("nan")) == "NA" and fmt(None) == "NA"
    assert fmt(3) == "3" and fmt(True) == "true"


def test_output_bundle_contents(model):
    files = build_outputs(model)
    assert set(files) == {"ed_table.csv", "variances.csv", "blups.csv", "fitted.csv", "trend_grid.csv",
                          "trend.svg", "residuals.svg", "summary.json"}
    summary = json.loads(files["summary.json"])
    assert summary["schema_version"] == 1
    assert summary["n"] == 78
    names = [c["name"] for c in summary["components"]]
    assert names[:3] == ["genotype", "Intercept", "rep"]
    for key in ("variance", "log10_lambda", "ED", "model_dim", "nominal_dim", "ratio", "type"):
        assert key in summary["components"][0]
    assert files["trend.svg"].count('<rect class="cell"') == 8 * 10
    assert "min " in files["trend.svg"] and "max " in files["trend.svg"]


def test_written_trend_grid_re_reads_exactly(model, tmp_path):
    paths = write_outputs(model, tmp_path / "out", resolution=(16, 20))
    assert all(p.exists() for p in paths)
    from spats.diagnostics import decompose_surface
    from spats.assembly import prediction_grid
    grid = prediction_grid(model.assembled.data, (16, 20))
    trend = decompose_surface(model, grid, include_intercept=False).total
    rows = read_table(tmp_path / "out" / "trend_grid.csv")
    assert len(rows) == 320
    np.testing.assert_array_equal([float(r["trend"]) for r in rows], trend)
    fitted = read_table(tmp_path / "out" / "fitted.csv")
    assert len(fitted) == 80
    assert sum(r["observed"] == "NA" for r in fitted) == 2


def test_svg_masks_cells_and_keeps_count():
    vals = np.array([[1.0, -1.0], [np.nan, 0.5]])
    svg = svg_heatmap(vals, "t", mask=np.array([[True, True], [True, False]]))
    assert svg.count('<rect class="cell"') == 4
    assert svg.count("#bdbdbd") == 2
    assert "min -1  max 1" in svg


def test_output_path_that_is_a_file(model, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OutputError, match="cannot write outputs"):
        write_outputs(model, blocker / "sub")


def test_variogram_csv_header(model):
    lines = variogram_csv(model).splitlines()
    assert lines[0] == "row_displacement,col_displacement,value,pairs"
    assert lines[1].startswith("0,0,0.0,")


def test_simulation_files_are_json_clean():
    cfg = SimulationConfig(n_rows=6, n_cols=10, m_g=20, replicates=2, block_size=5, nseg_row=5,
                           nseg_col=9, n_runs=2, seed=3, variants=("spats", "oracle"))
    files = simulation_files(run_study(cfg))
    payload = json.loads(files["simulation.json"])
    assert payload["schema_version"] == 1
    # NaN ED for the oracle variant is serialized as null
    assert payload["runs"][1]["ed_s"] is None
    assert files["simulation_summary.csv"].splitlines()[0].startswith("variant,n_runs")
