"""Ensemble statistics: percentile envelopes, covariances, representative members."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist
from sklearn.cluster import KMeans

from .flowproxy import FieldSeries, ObservationSchema, ObservationVector

logger = logging.getLogger(__name__)

LEVELS = (10, 50, 90)


def _stack(ensemble, attr: str | None = None) -> np.ndarray:
    """Ensemble members as rows of one array."""
    if isinstance(ensemble, np.ndarray):
        return np.asarray(ensemble, dtype=float)
    members = list(ensemble)
    if not members:
        raise ValueError("empty ensemble")
    first = members[0]
    if isinstance(first, ObservationVector):
        return np.stack([m.values for m in members])
    if isinstance(first, FieldSeries):
        attr = attr or "saturation"
        return np.stack([getattr(m, attr) for m in members])
    return np.stack([np.asarray(m, dtype=float) for m in members])


def percentile_envelopes(ensemble, levels: Sequence[float] = LEVELS, quantity: str | None = None,
                         min_members: int = 10) -> dict:
    """Empirical percentiles across members (linear interpolation between order statistics).

    ``ensemble`` is an array with members on axis 0, or a list of
    ObservationVectors or FieldSeries (``quantity`` picks the FieldSeries
    field).  Returns ``{level: array}`` shaped like one member.
    """
    data = _stack(ensemble, quantity)
    if data.shape[0] == 0:
        raise ValueError("empty ensemble")
    if data.shape[0] < min_members:
        warnings.warn(f"percentiles from only {data.shape[0]} member(s)", RuntimeWarning, stacklevel=2)
    pct = np.percentile(data, list(levels), axis=0, method="linear")
    return {lvl: pct[n] for n, lvl in enumerate(levels)}


def containment_fraction(prior_env: dict, post_env: dict, lo: float = 10, hi: float = 90,
                         atol: float = 1e-12) -> float:
    """Share of points where the posterior [lo, hi] band sits inside the prior band."""
    inside = (post_env[lo] >= prior_env[lo] - atol) & (post_env[hi] <= prior_env[hi] + atol)
    return float(np.mean(inside))


def _column(data: np.ndarray, key, schema: ObservationSchema | None):
    if isinstance(key, (int, np.integer)):
        return data[:, int(key)]
    if schema is None:
        raise ValueError("a schema is needed to look up observables by key")
    well, layer, time, qty = key
    for n, e in enumerate(schema.entries):
        if e.well == well and e.layer == layer and abs(e.time - time) < 1e-9 and e.quantity == qty:
            return data[:, n]
    raise KeyError(f"observable {key} not in schema")


def cross_covariance(ensemble, quantity_a, quantity_b, schema: ObservationSchema | None = None) -> float:
    """Sample covariance (divisor n-1) of two scalar observables across the ensemble.

    Observables are column indices or ``(well, layer, time, quantity)`` keys.
    """
    if schema is None and not isinstance(ensemble, np.ndarray):
        members = list(ensemble)
        if members and isinstance(members[0], ObservationVector):
            schema = members[0].schema
        ensemble = members
    data = _stack(ensemble)
    if data.shape[0] < 2:
        raise ValueError("need at least two members")
    a = _column(data, quantity_a, schema)
    b = _column(data, quantity_b, schema)
    return float(np.cov(a, b, ddof=1)[0, 1])


def covariance_profile(ensemble, anchor, others, schema: ObservationSchema | None = None) -> np.ndarray:
    return np.array([cross_covariance(ensemble, anchor, o, schema) for o in others])


def representative_fields(fields, k: int = 5, seed=0, subsample: int | None = None,
                          n_init: int = 10) -> np.ndarray:
    """Indices of ``k`` medoid members after k-means clustering.

    Parameters
    ----------
    fields : array (n_members, n_values) or list of FieldSeries
        Flattened final-time fields; FieldSeries contribute final saturation.
    subsample : int, optional
        Randomly keep this many members before clustering.

    Returns
    -------
    ndarray of int
        Member indices into ``fields``, ordered by cluster label.
    """
    if isinstance(fields, np.ndarray):
        X = np.asarray(fields, dtype=float).reshape(fields.shape[0], -1)
    else:
        X = np.stack([f.saturation[-1] if isinstance(f, FieldSeries) else np.ravel(f) for f in fields])
    n = X.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds ensemble size {n}")
    rng = np.random.default_rng(seed)
    pool = np.arange(n)
    if subsample is not None and subsample < n:
        pool = np.sort(rng.choice(n, size=subsample, replace=False))
        if k > pool.size:
            raise ValueError("subsample smaller than k")
    Xp = X[pool]
    seed_int = int(rng.integers(2 ** 31 - 1))
    with warnings.catch_warnings():
        # duplicate members can leave fewer distinct points than clusters
        warnings.simplefilter("ignore")
        km = KMeans(n_clusters=k, init="k-means++", max_iter=300, n_init=n_init, random_state=seed_int)
        labels = km.fit_predict(Xp)
    out = []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        d = cdist(Xp[members], Xp[members]).sum(axis=1)
        out.append(pool[members[int(np.argmin(d))]])
    return np.array(out, dtype=int)


def min_pairwise_distance(X) -> float:
    X = np.asarray(X, dtype=float)
    return float(pdist(X.reshape(X.shape[0], -1)).min()) if X.shape[0] > 1 else np.inf


def medoid_spread_rank(fields, medoids, n_random: int = 20, seed=0) -> bool:
    """True if the medoids' smallest pairwise distance beats every random subset of equal size."""
    X = np.asarray(fields, dtype=float).reshape(len(fields), -1)
    rng = np.random.default_rng(seed)
    ref = min_pairwise_distance(X[medoids])
    k = len(medoids)
    return all(ref >= min_pairwise_distance(X[rng.choice(X.shape[0], k, replace=False)])
               for _ in range(n_random))


# -- CSV ---------------------------------------------------------------------------

def write_envelopes_csv(path, envelopes: dict, schema: ObservationSchema, header: Sequence[str] = ()) -> None:
    levels = sorted(envelopes)
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["well_id", "layer", "time_years", "quantity"] + [f"p{lv:g}" for lv in levels])
        for n, e in enumerate(schema.entries):
            w.writerow([e.well, e.layer, repr(float(e.time)), e.quantity]
                       + [repr(float(envelopes[lv][n])) for lv in levels])


def write_covariance_csv(path, anchor_label: str, labels: Sequence[str], values, header: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["observable_a", "observable_b", "covariance"])
        for lab, v in zip(labels, values):
            w.writerow([anchor_label, lab, repr(float(v))])


def write_manifest(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
