import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from co2hm import geomodel as gm


# -- Gaussian fields -------------------------------------------------------------

def test_infinite_range_gives_constant_field():
    grid = gm.GridSpec(4, 4, 1, 1.0, 1.0, 1.0)
    y = gm.sample_gaussian_field(grid, gm.VariogramSpec(1e9, 1e9), seed=3)
    # the exponential kernel is rough: exact increments over the 3*sqrt(2) m
    # diagonal have sd sqrt(2 (1 - exp(-3 h / l))) ~ 1e-4, so that is the scale
    h = 3 * math.sqrt(2)
    sd = math.sqrt(2 * (1 - math.exp(-3 * h / 1e9)))
    assert np.ptp(y) < 5 * sd
    assert abs(y.mean()) > 10 * sd or abs(y.mean()) < 5


def test_tiny_range_is_nearly_white_noise():
    grid = gm.GridSpec(32, 32, 1, 1.0, 1.0, 1.0)
    with pytest.warns(UserWarning, match="white noise"):
        Y = gm.sample_gaussian_field(grid, gm.VariogramSpec(0.01, 1.0), seed=4, size=500)
    F = Y.reshape(500, 32, 32)
    a, b = F[:, :, :-1].ravel(), F[:, :, 1:].ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.15


def test_unit_marginal_at_a_cell():
    grid = gm.GridSpec(6, 6, 2, 100.0, 100.0, 10.0)
    Y = gm.sample_gaussian_field(grid, gm.VariogramSpec(500.0, 20.0), seed=5, size=10_000)
    cell = Y[:, 17]
    assert abs(cell.mean()) < 0.05
    assert abs(cell.var() - 1.0) < 0.05


def test_field_sampler_is_seed_deterministic(desk_grid):
    v = gm.VariogramSpec(1500.0, 40.0)
    a = gm.sample_gaussian_field(desk_grid, v, 11, size=3)
    b = gm.sample_gaussian_field(desk_grid, v, 11, size=3)
    assert np.array_equal(a, b)


def test_circulant_path_matches_target_covariance():
    # 72x72x1 exceeds the dense limit and exercises the spectral sampler
    grid = gm.GridSpec(72, 72, 1, 50.0, 50.0, 1.0)
    vario = gm.VariogramSpec(600.0, 10.0)
    Y = gm.sample_gaussian_field(grid, vario, seed=6, size=400)
    assert abs(Y.var() - 1.0) < 0.08
    lag = 4  # cells along x
    F = Y.reshape(400, 72, 72)
    emp = np.mean(F[:, :, :-lag] * F[:, :, lag:])
    assert emp == pytest.approx(math.exp(-3 * lag * 50.0 / 600.0), abs=0.05)


# -- PCA ---------------------------------------------------------------------

def test_two_point_svd_by_hand():
    b = gm.build_pca_basis(np.array([[1.0, 1.0], [-1.0, -1.0]]), 1.0)
    assert np.allclose(b.ybar, 0.0)
    assert b.n_latent == 1
    # u = [1, 1]/sqrt(2), s = 2, scale s/sqrt(n_r - 1) = 2 -> column sqrt(2) [1, 1]
    assert np.allclose(b.Phi[:, 0], [math.sqrt(2), math.sqrt(2)])
    assert np.allclose(gm.pca_to_field(b, [1.0]), b.ybar + b.Phi[:, 0])


def test_identical_realizations_warn_and_give_empty_basis():
    Y = np.tile(np.arange(5.0), (4, 1))
    with pytest.warns(UserWarning):
        b = gm.build_pca_basis(Y, 0.95)
    assert b.n_latent == 0
    assert np.array_equal(b.ybar, np.arange(5.0))
    assert np.array_equal(gm.pca_to_field(b, np.zeros(0)), b.ybar)


def test_requesting_more_components_than_realizations_fails(rng):
    with pytest.raises(ValueError):
        gm.build_pca_basis(rng.standard_normal((3, 10)), n_latent=5)


def test_basis_rejects_bad_inputs(rng):
    with pytest.raises(ValueError):
        gm.build_pca_basis(rng.standard_normal((1, 10)))
    with pytest.raises(ValueError):
        gm.build_pca_basis(rng.standard_normal((4, 10)), energy_target=0.0)


def test_two_realizations_give_rank_one(rng):
    b = gm.build_pca_basis(rng.standard_normal((2, 30)), 1.0)
    assert b.n_latent <= 1


def test_energy_target_is_smallest_sufficient(desk_basis):
    cum = np.cumsum(desk_basis.sv ** 2)
    assert desk_basis.energy_fraction >= 0.95
    # the basis keeps singular values for the retained part only; the previous
    # component count must fall short of the target
    total = cum[-1] / desk_basis.energy_fraction
    assert cum[-2] / total < 0.95


def test_basis_columns_orthogonal_after_unscaling(desk_basis):
    U = desk_basis.Phi / (desk_basis.sv / math.sqrt(199))
    assert np.allclose(U.T @ U, np.eye(desk_basis.n_latent), atol=1e-8)


def test_reconstruction_error_bounded_by_energy(rng):
    grid = gm.GridSpec(8, 8, 2, 100.0, 100.0, 10.0)
    Y = gm.sample_gaussian_field(grid, gm.VariogramSpec(400.0, 20.0), 9, size=60)
    b = gm.build_pca_basis(Y, 0.9)
    R = gm.pca_to_field(b, b.project(Y))
    A = Y - Y.mean(axis=0)
    err = np.linalg.norm(R - Y) / np.linalg.norm(A)
    assert err <= math.sqrt(1 - b.energy_fraction) + 1e-6


def test_latent_dimension_mismatch(desk_basis):
    with pytest.raises(ValueError):
        gm.pca_to_field(desk_basis, np.zeros(desk_basis.n_latent + 1))


def test_pca_covariance_matches_basis(desk_basis, rng):
    xi = rng.standard_normal((10_000, desk_basis.n_latent))
    F = gm.pca_to_field(desk_basis, xi)
    C = desk_basis.Phi @ desk_basis.Phi.T
    for a, b in rng.integers(0, desk_basis.n_cells, size=(5, 2)):
        if a == b:
            b = (a + 1) % desk_basis.n_cells
        emp = np.cov(F[:, a], F[:, b])[0, 1]
        # pairs with little covariance are judged against the cell variances
        scale = max(abs(C[a, b]), 0.2 * math.sqrt(C[a, a] * C[b, b]))
        assert abs(emp - C[a, b]) <= 0.05 * scale + 3 * math.sqrt(C[a, a] * C[b, b] / 10_000)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_pca_is_affine(x1, x2):
    rng = np.random.default_rng(0)
    b = gm.build_pca_basis(rng.standard_normal((6, 12)), n_latent=4)
    lhs = gm.pca_to_field(b, np.add(x1, x2))
    rhs = gm.pca_to_field(b, x1) + gm.pca_to_field(b, x2) - b.ybar
    assert np.allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_zero_latent_returns_mean(desk_basis):
    assert np.array_equal(gm.pca_to_field(desk_basis, np.zeros(desk_basis.n_latent)), desk_basis.ybar)


# -- geomodel assembly ----------------------------------------------------------

def test_zero_sigma_gives_uniform_permeability():
    m = gm.assemble_geomodel(np.linspace(-2, 2, 7), gm.Metaparameters(2.0, 0.0, 0.5, 0.03, 0.07))
    assert np.allclose(m.k, math.exp(2.0))
    assert np.allclose(m.a_r, 0.5)


def test_slope_free_porosity():
    m = gm.assemble_geomodel(np.linspace(-2, 2, 7), gm.Metaparameters(2.0, 1.0, 0.5, 0.0, 0.07))
    assert np.allclose(m.phi, 0.07)


def test_clamp_then_porosity_from_clamped_k():
    m = gm.assemble_geomodel(np.array([10.0]), gm.Metaparameters(4.0, 2.5, 1.0, 0.03, 0.07))
    assert m.k[0] == 1e4
    assert m.phi[0] == pytest.approx(min(0.4, 0.03 * math.log(1e4) + 0.07))


def test_assembly_rejects_non_finite_field():
    with pytest.raises(ValueError):
        gm.assemble_geomodel(np.array([0.0, np.nan]), gm.Metaparameters(2.0, 1.0, 0.5, 0.03, 0.07))


meta_strategy = st.tuples(st.floats(-5, 12), st.floats(0, 6), st.floats(1e-3, 1.0),
                          st.floats(-0.1, 0.1), st.floats(-0.5, 0.5))


@settings(max_examples=60, deadline=None)
@given(meta_strategy, st.floats(0.0, 3.0))
def test_assembly_respects_cutoffs_and_is_monotone(theta, bump):
    y = np.random.default_rng(1).standard_normal(50) * 4
    t = gm.Metaparameters(*theta)
    m = gm.assemble_geomodel(y, t)
    assert np.all((m.k >= 1e-4) & (m.k <= 1e4))
    assert np.all((m.phi >= 0.05) & (m.phi <= 0.4))
    assert np.all(m.a_r == t.a_r)
    m2 = gm.assemble_geomodel(y, gm.Metaparameters(t.mu_logk + bump, *theta[1:]))
    assert np.all(m2.k >= m.k)


def test_metaparameter_validation():
    with pytest.raises(ValueError):
        gm.Metaparameters(2.0, -0.1, 0.5, 0.03, 0.07)
    with pytest.raises(ValueError):
        gm.Metaparameters(2.0, 1.0, 0.0, 0.03, 0.07)
    t = gm.Metaparameters.from_array([1, 2, 0.3, 0.02, 0.06])
    assert np.array_equal(t.to_array(), [1, 2, 0.3, 0.02, 0.06])


# -- priors ------------------------------------------------------------------

def test_uniform_prior_mean():
    rng = np.random.default_rng(2)
    draws = gm.Uniform(1.5, 4.0).sample(rng, 100_000)
    assert abs(draws.mean() - 2.75) < 0.02


def test_degenerate_loguniform_is_constant(rng):
    d = gm.LogUniform(0.3, 0.3)
    assert np.all(d.sample(rng, 10) == 0.3)
    assert d.sample(rng) == 0.3


def test_loguniform_draws_exponent_uniformly(rng):
    x = gm.LogUniform(0.01, 1.0).sample(rng, 50_000)
    e = np.log10(x)
    assert e.min() >= -2 and e.max() <= 0
    assert abs(e.mean() + 1.0) < 0.02


def test_table2_prior_supports(rng):
    p = gm.PriorSpec.uniform()
    for _ in range(200):
        t = gm.sample_prior(p, rng)
        assert 1.5 <= t.mu_logk <= 4 and 1 <= t.sigma_logk <= 2.5
        assert 0.01 <= t.a_r <= 1 and 0.02 <= t.d <= 0.04 and 0.05 <= t.e <= 0.1


def test_gaussian_prior_mu_logk(rng):
    p = gm.PriorSpec.gaussian()
    assert p.mu_logk.mean == 2.75 and p.mu_logk.std == 0.5
    x = np.array([gm.sample_prior(p, rng).mu_logk for _ in range(4000)])
    assert abs(x.std() - 0.5) < 0.03


def test_prior_family_validation():
    with pytest.raises(ValueError):
        gm.Uniform(2.0, 1.0)
    with pytest.raises(ValueError):
        gm.LogUniform(0.0, 1.0)
    with pytest.raises(ValueError):
        gm.Gaussian(0.0, 0.0)


def test_prior_coordinates_round_trip():
    p = gm.PriorSpec.uniform()
    x = np.array([2.0, 1.5, 0.1, 0.03, 0.07])
    c = p.to_coords(x)
    assert c[2] == pytest.approx(-1.0)
    assert np.allclose(p.from_coords(c), x)
    assert np.isfinite(p.logpdf_coords(c))
    assert p.logpdf_coords(c + [3, 0, 0, 0, 0]) == -np.inf


def test_prior_from_mapping():
    p = gm.prior_from_mapping({"mu_logk": {"family": "gaussian", "mean": 2.0, "std": 0.5},
                               "a_r": {"family": "loguniform", "lo": 0.1, "hi": 1.0}})
    assert isinstance(p.mu_logk, gm.Gaussian) and p.a_r.lo == 0.1
    assert p.sigma_logk == gm.Uniform(1.0, 2.5)


# -- persistence -----------------------------------------------------------------

def test_basis_binary_layout_and_round_trip(tmp_path, rng):
    b = gm.build_pca_basis(rng.standard_normal((5, 7)), n_latent=3)
    path = tmp_path / "b.bin"
    gm.save_basis(b, path)
    raw = path.read_bytes()
    assert raw[:8] == gm.MAGIC and len(raw) == 16 + 16 + 8 * (7 + 3 + 21)
    assert np.frombuffer(raw[16:32], "<u8").tolist() == [7, 3]
    c = gm.load_basis(path)
    assert np.array_equal(c.Phi, b.Phi) and np.array_equal(c.ybar, b.ybar) and np.array_equal(c.sv, b.sv)


def test_basis_file_is_byte_deterministic(tmp_path):
    grid = gm.GridSpec(6, 6, 2, 100.0, 100.0, 10.0)
    paths = []
    for n in range(2):
        Y = gm.sample_gaussian_field(grid, gm.VariogramSpec(400.0, 20.0), 3, size=20)
        paths.append(tmp_path / f"{n}.bin")
        gm.save_basis(gm.build_pca_basis(Y, 0.95), paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"not a basis at all")
    with pytest.raises(ValueError):
        gm.load_basis(p)


def test_field_csv_round_trip(tmp_path):
    v = np.array([0.1, 2.5, -3.0])
    gm.write_field_csv(tmp_path / "f.csv", v, header=["test header"])
    assert np.array_equal(gm.read_field_csv(tmp_path / "f.csv"), v)


def test_grid_validation():
    with pytest.raises(ValueError):
        gm.GridSpec(0, 1, 1)
    with pytest.raises(ValueError):
        gm.GridSpec(1, 1, 1, dx=0.0)
    g = gm.GridSpec.paper()
    assert g.n_cells == 80 * 80 * 20
    with pytest.raises(IndexError):
        g.index(80, 0, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        gm.VariogramSpec(1500.0, 10.0)
