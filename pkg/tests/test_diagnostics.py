import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spats.assembly import ModelSpec, build_system, fit_trial, prediction_grid
from spats.diagnostics import (
    decompose_surface,
    ed_table,
    sample_variogram,
    spatial_ed,
    spatial_fitted,
    variogram,
)
from spats.psanova import BLOCK_NAMES, SpatialConfig
from spats.reml import FitOptions, fixed_variance_fit

from conftest import WHEAT_SPATIAL, grid_positions, make_trial, wheat_like


@pytest.fixture(scope="module")
def spatial_model():
    data = make_trial(seed=4, missing=3)
    return fit_trial(data, ModelSpec("fixed", random=("row_f",), spatial=SpatialConfig(7, 9, 3, 1, 1)),
                     FitOptions(tolerance=1e-8))


def brute_variogram(rows, cols, values):
    acc = {}
    for i, j in itertools.combinations(range(len(values)), 2):
        key = (abs(rows[i] - rows[j]), abs(cols[i] - cols[j]))
        s, n = acc.get(key, (0.0, 0))
        acc[key] = (s + 0.5 * (values[i] - values[j]) ** 2, n + 1)
    return {k: s / n for k, (s, n) in acc.items()}, {k: n for k, (s, n) in acc.items()}


def test_ed_identity_and_ratio_bounds(spatial_model):
    t = ed_table(spatial_model)
    assert abs(t.identity_gap()) < 1e-6
    for r in t.rows:
        assert 0.0 <= r.ratio <= 1.0 + 1e-9
    assert t.total.effective == pytest.approx(sum(r.effective for r in t.rows), abs=1e-9)


def test_row_order_and_type_codes(spatial_model):
    t = ed_table(spatial_model)
    names = [r.name for r in t.rows]
    assert names == ["genotype", "Intercept", "row_f", "col", "row", "row:col", *BLOCK_NAMES]
    codes = [r.type_code for r in t.rows]
    assert codes == ["F", "F", "R", "S", "S", "S", "S", "S", "S", "S", "S"]
    row_f = t.row("row_f")
    assert row_f.nominal_dim == row_f.model_dim - 1


def test_wheat_table_dimensions():
    spec = ModelSpec("fixed", random=("row_f", "col_f"), spatial=SpatialConfig(**WHEAT_SPATIAL))
    model = fixed_variance_fit(build_system(wheat_like(), spec), 2000.0, [1000.0] * 7)
    t = ed_table(model)
    assert (t.total.model_dim, t.total.nominal_dim, t.n) == (322, 320, 330)
    g = t.row("genotype")
    assert (g.effective, g.model_dim, g.nominal_dim) == (106.0, 106, 106)


def test_fixed_only_table():
    model = fit_trial(make_trial(), ModelSpec("fixed", fixed=("rep",), spatial=None))
    t = ed_table(model)
    assert all(r.type_code == "F" for r in t.rows)
    p = model.design.p
    assert t.residual == pytest.approx(t.n - p, abs=1e-9)
    with pytest.raises(ValueError):
        spatial_ed(model)


def test_spatial_ed_counts_linear_terms(spatial_model):
    eds = [spatial_model.ed_of(nm) for nm in BLOCK_NAMES]
    assert spatial_ed(spatial_model) == pytest.approx(sum(eds) + 3)


def test_components_add_up_at_plot_centres(spatial_model):
    asm = spatial_model.assembled
    obs = asm.labels.observed
    dec = decompose_surface(spatial_model, (asm.data.rows[obs], asm.data.cols[obs]))
    summed = sum(dec.components.values())
    np.testing.assert_allclose(dec.total, summed, atol=1e-10)
    np.testing.assert_allclose(dec.total, spatial_fitted(spatial_model), atol=1e-10)
    assert list(dec.components) == ["bilinear", *BLOCK_NAMES]


def test_grid_at_layout_resolution_matches_in_sample_trend(spatial_model):
    asm = spatial_model.assembled
    grid = prediction_grid(asm.data, (8, 10))
    dec = decompose_surface(spatial_model, grid, include_intercept=False)
    trend = dec.total.reshape(grid.shape)
    obs = asm.labels.observed
    inner = spatial_fitted(spatial_model, include_intercept=False)
    r = asm.data.rows[obs] - 1
    c = asm.data.cols[obs] - 1
    np.testing.assert_allclose(trend[r, c], inner, atol=1e-8)


def test_intercept_exclusion_shifts_by_intercept(spatial_model):
    pts = (np.array([1.0, 4.5, 8.0]), np.array([1.0, 5.5, 10.0]))
    a = decompose_surface(spatial_model, pts).total
    b = decompose_surface(spatial_model, pts, include_intercept=False).total
    b0 = spatial_model.result.beta[spatial_model.design.x_names.index("Intercept")]
    np.testing.assert_allclose(a - b, b0, atol=1e-12)


def test_zero_random_coefficients_leave_bilinear_sheet(spatial_model):
    import dataclasses
    zeroed = dataclasses.replace(spatial_model.result, c=tuple(np.zeros_like(c) for c in spatial_model.result.c))
    model = dataclasses.replace(spatial_model, result=zeroed)
    pts = (np.linspace(1, 8, 5), np.linspace(1, 10, 5))
    dec = decompose_surface(model, pts)
    for name in BLOCK_NAMES:
        np.testing.assert_array_equal(dec.components[name], 0.0)
    np.testing.assert_allclose(dec.total, dec.components["bilinear"])


def test_points_outside_domain(spatial_model):
    with pytest.raises(ValueError, match="outside the training domain"):
        decompose_surface(spatial_model, (np.array([0.0]), np.array([1.0])))


def test_variogram_two_by_two_by_hand():
    rows, cols = grid_positions(2, 2)
    e = np.array([1.0, 2.0, 4.0, 8.0])  # (1,1) (1,2) (2,1) (2,2)
    v = variogram(rows, cols, e)
    assert v.at(0, 0) == 0.0
    assert v.at(0, 1) == pytest.approx(((1 - 2) ** 2 + (4 - 8) ** 2) / 4)
    assert v.at(1, 0) == pytest.approx(((1 - 4) ** 2 + (2 - 8) ** 2) / 4)
    assert v.at(1, 1) == pytest.approx(((1 - 8) ** 2 + (2 - 4) ** 2) / 4)
    assert v.at(-1, 1) == v.at(1, 1)
    assert len(v) == 4


@settings(max_examples=25, deadline=None)
@given(nr=st.integers(1, 5), nc=st.integers(2, 6), seed=st.integers(0, 10_000), holes=st.integers(0, 4))
def test_variogram_matches_pair_enumeration(nr, nc, seed, holes):
    rng = np.random.default_rng(seed)
    rows, cols = grid_positions(nr, nc)
    keep = np.ones(rows.size, bool)
    keep[rng.choice(rows.size, min(holes, rows.size - 2), replace=False)] = False
    rows, cols = rows[keep], cols[keep]
    e = rng.normal(size=rows.size)
    v = variogram(rows, cols, e)
    ref, counts = brute_variogram(rows, cols, e)
    got = {(int(a), int(b)): (float(x), int(n)) for a, b, x, n in
           zip(v.row_displacement, v.col_displacement, v.value, v.count) if (a, b) != (0, 0)}
    assert set(got) == set(ref)
    for k in ref:
        assert got[k][0] == pytest.approx(ref[k], rel=1e-12, abs=1e-14)
        assert got[k][1] == counts[k]


def test_constant_field_variogram_is_zero():
    rows, cols = grid_positions(5, 6)
    v = variogram(rows, cols, np.full(30, 3.7))
    np.testing.assert_array_equal(v.value, 0.0)
    assert np.all(v.count > 0)


def test_iid_field_variogram_is_flat_at_variance():
    rng = np.random.default_rng(11)
    rows, cols = grid_positions(20, 20)
    sigma2 = 2.5
    reps = np.array([[variogram(rows, cols, rng.normal(scale=np.sqrt(sigma2), size=400)).at(*d)
                      for d in [(1, 0), (0, 1), (2, 3), (5, 5)]] for _ in range(60)])
    means = reps.mean(axis=0)
    se = reps.std(axis=0, ddof=1) / np.sqrt(reps.shape[0])
    assert np.all(np.abs(means - sigma2) < 3 * se)


def test_variogram_needs_two_plots():
    with pytest.raises(ValueError):
        variogram([1], [1], [0.0])


def test_sample_variogram_uses_residuals(spatial_model):
    v = sample_variogram(spatial_model)
    asm = spatial_model.assembled
    obs = asm.labels.observed
    ref = variogram(asm.data.rows[obs], asm.data.cols[obs], spatial_model.result.residuals)
    np.testing.assert_array_equal(v.value, ref.value)
