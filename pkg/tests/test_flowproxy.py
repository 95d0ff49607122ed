import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from co2hm import flowproxy as fp
from co2hm import geomodel as gm

FLUID = fp.FluidSpec()


def homogeneous(grid, k=10.0, phi=0.2, a_r=0.1):
    n = grid.n_cells
    return gm.Geomodel(np.full(n, k), np.full(n, phi), np.full(n, a_r))


@pytest.fixture(scope="module")
def odd_grid():
    return gm.GridSpec(21, 21, 5, 150.0, 150.0, 20.0)


@pytest.fixture(scope="module")
def single_well_run(odd_grid):
    w = [fp.WellSpec("I1", "injector", 10, 10, 0.25)]
    return fp.simulate(homogeneous(odd_grid), odd_grid, w, FLUID, [1.5, 3.0, 4.5])


@pytest.fixture(scope="module")
def prior_run(desk_grid, desk_basis, desk_setup):
    rng = np.random.default_rng(7)
    theta = gm.sample_prior(gm.PriorSpec.uniform(), rng)
    model = gm.assemble_geomodel(gm.pca_to_field(desk_basis, rng.standard_normal(desk_basis.n_latent)), theta)
    return model, fp.simulate(model, desk_grid, desk_setup["injectors"], FLUID, fp.OUTPUT_TIMES,
                              desk_setup["controls"])


# -- simulate --------------------------------------------------------------------

def test_null_forcing(odd_grid):
    w = [fp.WellSpec("I1", "injector", 10, 10, 0.25)]
    fs = fp.simulate(homogeneous(odd_grid), odd_grid, w, FLUID, [1.5, 3.0],
                     fp.SimulationControls(rate_scale=0.0))
    assert np.all(fs.saturation == 0.0)
    assert np.allclose(fs.pressure, fp.initial_pressure(odd_grid, FLUID), rtol=0, atol=1e-12)


def test_rotation_symmetry(single_well_run, odd_grid):
    for field in (single_well_run.saturation, single_well_run.pressure):
        F = field[-1].reshape(odd_grid.shape)
        for r in (1, 2, 3):
            assert np.abs(F - np.rot90(F, r, axes=(1, 2))).max() < 1e-10
    assert single_well_run.saturation[-1].max() > 0.1


def test_mass_balance_every_output_time(prior_run):
    _, fs = prior_run
    d = fs.diagnostics
    # gas reaching the edge cells leaves through the boundary pore volume
    assert d["exported_kg"][-1] > 0
    rel = np.abs(d["injected_kg"] - d["stored_kg"] - d["exported_kg"]) / d["injected_kg"]
    assert rel.max() < 1e-6
    assert d["clipped_kg"] == 0.0
    # saturations are physical
    assert fs.saturation.min() >= 0.0 and fs.saturation.max() <= 1.0
    assert fs.pressure.min() >= 0.0


def test_closed_box_mass_balance(prior_run, desk_grid, desk_setup):
    model, _ = prior_run
    fs = fp.simulate(model, desk_grid, desk_setup["injectors"], FLUID, fp.OUTPUT_TIMES)
    d = fs.diagnostics
    assert np.all(d["exported_kg"] == 0.0)
    assert (np.abs(d["injected_kg"] - d["stored_kg"]) / d["injected_kg"]).max() < 1e-6


def test_closed_box_pseudo_steady_rate(desk_grid):
    inj, _ = fp.default_wells(desk_grid, 0.25)
    fs = fp.simulate(homogeneous(desk_grid, 100.0), desk_grid, inj, FLUID, [10.0, 11.0, 12.0])
    dpdt = (fs.pressure[-1] - fs.pressure[-2]) / 1.0
    q = fp.total_injection_rate(inj, FLUID) * fp.SECONDS_PER_YEAR
    oracle = q / (FLUID.c_t * 0.2 * desk_grid.cell_volume * desk_grid.n_cells) * 1e-6
    assert np.abs(dpdt / oracle - 1).max() < 0.02


def test_mean_pressure_non_decreasing(prior_run):
    _, fs = prior_run
    assert np.all(np.diff(fs.pressure.mean(axis=1)) >= -1e-12)


def test_lower_anisotropy_does_not_grow_top_plume(desk_grid):
    inj, _ = fp.default_wells(desk_grid, 0.25)
    area = {}
    for a_r in (1.0, 0.01):
        fs = fp.simulate(homogeneous(desk_grid, 50.0, 0.2, a_r), desk_grid, inj, FLUID, [4.5])
        top = fs.saturation[-1].reshape(desk_grid.shape)[0]
        area[a_r] = int((top > 0.01).sum())
    assert area[0.01] <= area[1.0]


def test_halving_steps_changes_observations_little(prior_run, desk_grid, desk_setup):
    model, _ = prior_run
    schema = desk_setup["schema"]
    c = desk_setup["controls"]
    runs = [fp.extract_observations(fp.simulate(model, desk_grid, desk_setup["injectors"], FLUID,
                                                schema.times, ctl), schema).values
            for ctl in (c, c.refined(2.0))]
    p = schema.mask("pressure")
    assert np.max(np.abs(runs[0][p] - runs[1][p]) / np.abs(runs[1][p])) < 0.01
    # saturation: absolute change relative to the saturation scale
    assert np.max(np.abs(runs[0][~p] - runs[1][~p])) < 0.1


def test_simulation_is_deterministic(desk_grid, desk_setup, prior_run):
    model, fs = prior_run
    again = fp.simulate(model, desk_grid, desk_setup["injectors"], FLUID, fp.OUTPUT_TIMES,
                        desk_setup["controls"])
    assert np.array_equal(fs.pressure, again.pressure)
    assert np.array_equal(fs.saturation, again.saturation)


def test_capillary_option_runs_and_conserves(desk_grid):
    inj, _ = fp.default_wells(desk_grid, 0.25)
    fluid = fp.FluidSpec(capillary=True)
    fs = fp.simulate(homogeneous(desk_grid, 30.0), desk_grid, inj, fluid, [1.5])
    d = fs.diagnostics
    assert abs(d["injected_kg"][-1] - d["stored_kg"][-1]) / d["injected_kg"][-1] < 1e-6
    assert 0 < fs.saturation.max() <= 1


def test_sources_split_by_permeability(desk_grid):
    k = np.ones(desk_grid.n_cells)
    w = fp.WellSpec("I", "injector", 3, 4, 1.0)
    k.reshape(desk_grid.shape)[:, 4, 3] = [1, 2, 3, 4, 0]
    q = fp.well_sources(k, desk_grid, [w], FLUID)[:, 4, 3]
    assert np.allclose(q / q.sum(), [0.1, 0.2, 0.3, 0.4, 0.0])
    assert q.sum() == pytest.approx(1e9 / fp.SECONDS_PER_YEAR / FLUID.rho_g)


def test_simulate_rejects_bad_input(desk_grid):
    m = homogeneous(desk_grid)
    inj, obs = fp.default_wells(desk_grid)
    with pytest.raises(ValueError):
        fp.simulate(m, desk_grid, obs, FLUID, [1.0])
    with pytest.raises(ValueError):
        fp.simulate(m, desk_grid, inj, FLUID, [2.0, 1.0])
    with pytest.raises(ValueError):
        fp.simulate(homogeneous(gm.GridSpec(5, 5, 1)), desk_grid, inj, FLUID, [1.0])


def test_well_validation(desk_grid):
    with pytest.raises(ValueError):
        fp.WellSpec("I", "injector", 1, 1, 0.0)
    with pytest.raises(ValueError):
        fp.WellSpec("X", "producer", 1, 1)
    with pytest.raises(ValueError):
        fp.WellSpec("O", "observer", 25, 1).check(desk_grid)


def test_default_layout_is_rotation_symmetric(desk_grid):
    inj, obs = fp.default_wells(desk_grid)
    n = desk_grid.nx - 1
    pts = {(w.i, w.j) for w in inj}
    assert {(n - j, i) for i, j in pts} == pts
    # each observer sits two cells from its injector, toward the centre
    for w, o in zip(inj, obs):
        assert o.j == w.j and abs(o.i - w.i) == 2 and abs(o.i - n / 2) < abs(w.i - n / 2)


def test_corey_curves():
    krg, krw = FLUID.relperm(np.array([0.0, 0.8, 1.0]))
    assert krg[0] == 0 and krg[1] == pytest.approx(0.95) and krg[2] == pytest.approx(0.95)
    assert krw[0] == pytest.approx(1.0) and krw[1] == 0


# -- observations ---------------------------------------------------------------

def test_single_entry_schema(single_well_run, odd_grid):
    e = fp.ObsEntry("X", 10, 10, 2, 3.0, "saturation")
    v = fp.extract_observations(single_well_run, fp.ObservationSchema((e,)), odd_grid)
    assert v.values.tolist() == [single_well_run.saturation[1, odd_grid.index(10, 10, 2)]]


def test_missing_time_is_an_error(single_well_run, odd_grid):
    e = fp.ObsEntry("X", 10, 10, 0, 2.0, "pressure")
    with pytest.raises(KeyError):
        fp.extract_observations(single_well_run, fp.ObservationSchema((e,)), odd_grid)


def test_full_scale_schema_length():
    grid = gm.GridSpec.paper()
    _, obs = fp.default_wells(grid, 1.0)
    schema = fp.ObservationSchema.monitoring(obs, grid)
    assert len(schema) == 252
    assert schema.mask("saturation").sum() == 240 and schema.mask("pressure").sum() == 12


def test_desk_schema_length(desk_setup):
    assert len(desk_setup["schema"]) == 72


@settings(max_examples=25, deadline=None)
@given(st.permutations(range(12)))
def test_extraction_is_order_equivariant(perm):
    grid = gm.GridSpec(4, 3, 2, 1.0, 1.0, 1.0)
    rng = np.random.default_rng(0)
    fs = fp.FieldSeries([1.0, 2.0], rng.random((2, 24)), rng.random((2, 24)), grid)
    entries = [fp.ObsEntry("W", i % 4, (i // 4) % 3, i % 2, 1.0 + (i % 2), "pressure" if i % 3 else "saturation")
               for i in range(12)]
    schema = fp.ObservationSchema(tuple(entries))
    base = fp.extract_observations(fs, schema).values
    assert np.array_equal(fp.extract_observations(fs, schema.permuted(perm)).values, base[list(perm)])


def test_schema_record_round_trip(desk_setup):
    s = desk_setup["schema"]
    assert fp.ObservationSchema.from_records(s.to_records()) == s


# -- pressure normalization -----------------------------------------------------------

def test_normalize_identity_and_substitution():
    p0 = np.array([19.0, 19.5])
    pmin, pmax = np.array([18.0]), np.array([22.0])
    assert np.all(fp.normalize_pressure(p0[None], pmin, pmax, p0) == 0)
    n = fp.normalize_pressure(np.array([[22.0, 18.0]]), pmin, pmax, 0.0)
    assert n[0, 0] == pytest.approx(22.0 / 4.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.floats(0.1, 10))
def test_normalize_inverse(values, width):
    p = np.array([values])
    pmin = np.array([-1.0])
    back = fp.denormalize_pressure(fp.normalize_pressure(p, pmin, pmin + width, 0.3), pmin, pmin + width, 0.3)
    assert np.allclose(back, p, atol=1e-12, rtol=0)


def test_normalize_degenerate_range():
    with pytest.raises(ValueError):
        fp.normalize_pressure(np.zeros((1, 2)), np.array([1.0]), np.array([1.0]), 0.0)


def test_pressure_stats(single_well_run):
    lo, hi = fp.pressure_stats([single_well_run, single_well_run])
    assert np.array_equal(lo, single_well_run.pressure.min(axis=1))
    assert np.array_equal(hi, single_well_run.pressure.max(axis=1))


# -- persistence ----------------------------------------------------------------------

def test_field_series_round_trip(tmp_path, single_well_run, odd_grid):
    path = tmp_path / "fs.bin"
    fp.save_field_series(single_well_run, path, {"seed": 1})
    back = fp.load_field_series(path, odd_grid)
    assert np.array_equal(back.pressure, single_well_run.pressure)
    assert np.array_equal(back.saturation, single_well_run.saturation)
    assert (tmp_path / "fs.bin.json").exists()
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        fp.load_field_series(path)


def test_summary_csv(tmp_path, single_well_run, odd_grid):
    fp.write_summary_csv(single_well_run, tmp_path / "s.csv", odd_grid, header=["h"])
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "# h" and rows[1].startswith("time_years") and len(rows) == 2 + 3


def test_field_series_validation():
    with pytest.raises(ValueError):
        fp.FieldSeries([2.0, 1.0], np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        fp.FieldSeries([1.0], np.zeros((1, 3)), np.zeros((1, 4)))


def test_boundary_multiplier_formula(desk_grid):
    extra = fp.scaled_surroundings_pore_volume(1.0)
    assert extra == pytest.approx((120 ** 2 - 12 ** 2) * 1e6 * 100 * 0.1 / 4)
    m = fp.boundary_multiplier(extra, desk_grid)
    n_edge = (2 * 40 - 4) * 5
    assert (m - 1) * 0.1 * desk_grid.cell_volume * n_edge == pytest.approx(extra)
