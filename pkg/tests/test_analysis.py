import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from co2hm import analysis as an
from co2hm import flowproxy as fp


def test_constant_ensemble_envelopes():
    env = an.percentile_envelopes(np.full((20, 4), 3.5))
    for lvl in (10, 50, 90):
        assert np.all(env[lvl] == 3.5)


def test_median_of_one_to_hundred():
    env = an.percentile_envelopes(np.arange(1, 101, dtype=float)[:, None])
    assert env[50][0] == 50.5
    assert env[10][0] == pytest.approx(10.9)
    assert env[90][0] == pytest.approx(90.1)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (12, 3), elements=st.floats(-1e6, 1e6)))
def test_envelopes_ordered(x):
    env = an.percentile_envelopes(x)
    assert np.all(env[10] <= env[50]) and np.all(env[50] <= env[90])


def test_envelope_edge_cases():
    with pytest.raises(ValueError):
        an.percentile_envelopes([])
    with pytest.warns(RuntimeWarning):
        an.percentile_envelopes(np.ones((3, 2)))


def test_envelopes_from_observation_vectors():
    sch = fp.ObservationSchema([fp.ObsEntry("O1", 3, 5, 0, 1.0, "pressure"),
                                fp.ObsEntry("O1", 3, 5, 0, 2.0, "pressure")])
    ens = [fp.ObservationVector(sch, np.array([i, 2 * i], float)) for i in range(11)]
    env = an.percentile_envelopes(ens)
    assert env[50].tolist() == [5.0, 10.0]


def test_containment():
    prior = {10: np.zeros(4), 90: np.ones(4)}
    post = {10: np.array([0.1, -0.1, 0.2, 0.0]), 90: np.array([0.9, 0.5, 1.2, 1.0])}
    assert an.containment_fraction(prior, post) == 0.5


def test_covariance_symmetry_and_variance(rng):
    x = rng.standard_normal((50, 3))
    assert an.cross_covariance(x, 0, 1) == pytest.approx(an.cross_covariance(x, 1, 0))
    assert an.cross_covariance(x, 2, 2) == pytest.approx(np.var(x[:, 2], ddof=1))
    assert an.cross_covariance(np.c_[x[:, 0], -x[:, 0]], 0, 1) == pytest.approx(-np.var(x[:, 0], ddof=1))
    with pytest.raises(ValueError):
        an.cross_covariance(x[:1], 0, 1)


def test_covariance_sampling_error():
    rng = np.random.default_rng(3)
    rho = 0.6
    z = rng.standard_normal((10_000, 2))
    x = np.c_[z[:, 0], rho * z[:, 0] + np.sqrt(1 - rho ** 2) * z[:, 1]]
    # sd of the sample covariance is sqrt((1 + rho^2) / n) ~ 0.0117
    assert abs(an.cross_covariance(x, 0, 1) - rho) < 4 * np.sqrt((1 + rho ** 2) / 1e4)


def test_covariance_by_key():
    sch = fp.ObservationSchema([fp.ObsEntry("O1", 3, 5, 0, 1.0, "pressure"),
                                fp.ObsEntry("O2", 3, 5, 1, 1.0, "saturation")])
    ens = [fp.ObservationVector(sch, np.array([i, 3.0 * i])) for i in range(5)]
    assert an.cross_covariance(ens, ("O1", 0, 1.0, "pressure"), ("O2", 1, 1.0, "saturation")) == pytest.approx(7.5)
    with pytest.raises(KeyError):
        an.cross_covariance(ens, ("O3", 0, 1.0, "pressure"), 0)
    assert an.covariance_profile(ens, 0, [0, 1]) == pytest.approx([2.5, 7.5])


def test_medoids_of_copies(rng):
    base = rng.standard_normal((5, 8))
    X = np.repeat(base, 4, axis=0)
    idx = an.representative_fields(X, k=5, seed=1)
    got = {tuple(np.round(X[i], 12)) for i in idx}
    assert got == {tuple(np.round(b, 12)) for b in base}


def test_single_cluster_medoid(rng):
    X = rng.standard_normal((30, 4))
    idx = an.representative_fields(X, k=1)
    d = np.linalg.norm(X[:, None] - X[None], axis=-1).sum(axis=1)
    assert idx.tolist() == [int(np.argmin(d))]


def test_two_blobs():
    hits = 0
    for t in range(20):
        rng = np.random.default_rng(100 + t)
        X = np.r_[rng.normal(0, 0.1, (15, 6)), rng.normal(5, 0.1, (15, 6))]
        idx = an.representative_fields(X, k=2, seed=t)
        hits += sorted(i >= 15 for i in idx) == [False, True]
    assert hits == 20


def test_medoids_are_members_and_deterministic(rng):
    X = rng.standard_normal((40, 10))
    a = an.representative_fields(X, k=5, seed=3, subsample=25)
    b = an.representative_fields(X, k=5, seed=3, subsample=25)
    assert np.array_equal(a, b) and len(set(a.tolist())) == 5
    assert np.all((a >= 0) & (a < 40))
    with pytest.raises(ValueError):
        an.representative_fields(X[:3], k=5)


def test_spread_rank(rng):
    X = np.r_[rng.normal(0, 0.01, (30, 2)), [[10, 0], [0, 10], [-10, 0], [0, -10], [7, 7]]]
    assert an.medoid_spread_rank(X, [30, 31, 32, 33, 34], seed=0)
    assert not an.medoid_spread_rank(X, [0, 1, 2, 3, 4], seed=0)


def test_writers(tmp_path):
    sch = fp.ObservationSchema([fp.ObsEntry("O1", 3, 5, 0, 1.5, "pressure")])
    an.write_envelopes_csv(tmp_path / "e.csv", {10: [1.0], 50: [2.0], 90: [3.0]}, sch, ["seed: 1"])
    assert (tmp_path / "e.csv").read_text().splitlines() == [
        "# seed: 1", "well_id,layer,time_years,quantity,p10,p50,p90", "O1,0,1.5,pressure,1.0,2.0,3.0"]
    an.write_covariance_csv(tmp_path / "c.csv", "a", ["b"], [0.25])
    assert (tmp_path / "c.csv").read_text().splitlines()[1] == "a,b,0.25"
