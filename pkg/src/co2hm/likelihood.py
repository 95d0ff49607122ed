"""Error budget, noisy synthetic data, error metrics and the Gaussian likelihood."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .flowproxy import FieldSeries, ObservationSchema, ObservationVector, ObsEntry

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ErrorBudget:
    """Diagonal error model: measurement/resolution plus forward-model error."""

    sd_meas_res_sat: float = 0.1
    sd_meas_res_p: float = 0.1      # MPa
    sd_surr_sat: float = 0.055
    sd_surr_p: float = 0.289        # MPa

    def __post_init__(self):
        for name in ("sd_meas_res_sat", "sd_meas_res_p", "sd_surr_sat", "sd_surr_p"):
            v = getattr(self, name)
            if not (v >= 0):
                raise ValueError(f"{name} must be >= 0, got {v}")

    @property
    def c_tot_sat(self) -> float:
        return self.sd_meas_res_sat ** 2 + self.sd_surr_sat ** 2

    @property
    def c_tot_p(self) -> float:
        return self.sd_meas_res_p ** 2 + self.sd_surr_p ** 2

    def c_tot(self, schema: ObservationSchema) -> np.ndarray:
        """Per-entry total variance in schema order."""
        sat = schema.mask("saturation")
        return np.where(sat, self.c_tot_sat, self.c_tot_p)

    def sd_noise(self, schema: ObservationSchema) -> np.ndarray:
        sat = schema.mask("saturation")
        return np.where(sat, self.sd_meas_res_sat, self.sd_meas_res_p)

    @classmethod
    def zero(cls) -> "ErrorBudget":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class ObservedData:
    d_obs: ObservationVector
    c_tot: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.c_tot = np.asarray(self.c_tot, dtype=float)
        if not np.all(np.isfinite(self.d_obs.values)):
            raise ValueError("observed data must be finite")
        if self.c_tot.shape != self.d_obs.values.shape:
            raise ValueError("c_tot does not match the observation vector")

    @property
    def schema(self) -> ObservationSchema:
        return self.d_obs.schema

    @property
    def values(self) -> np.ndarray:
        return self.d_obs.values


def make_observed_data(d_true: ObservationVector, budget: ErrorBudget, seed) -> ObservedData:
    """Add independent measurement/resolution noise; saturations are clamped to [0, 1]."""
    rng = np.random.default_rng(seed)
    schema = d_true.schema
    sd = budget.sd_noise(schema)
    vals = d_true.values + sd * rng.standard_normal(len(schema))
    sat = schema.mask("saturation")
    vals[sat] = np.clip(vals[sat], 0.0, 1.0)
    return ObservedData(ObservationVector(schema, vals), budget.c_tot(schema),
                        seed if isinstance(seed, (int, np.integer)) else None)


def _misfit(d_obs: ObservedData, d_pred) -> np.ndarray:
    if isinstance(d_pred, ObservationVector):
        if d_pred.schema != d_obs.schema:
            raise ValueError("schema mismatch between observed and predicted data")
        d_pred = d_pred.values
    d_pred = np.asarray(d_pred, dtype=float)
    if d_pred.shape[-1] != len(d_obs.schema):
        raise ValueError(f"predicted data has {d_pred.shape[-1]} entries, schema has {len(d_obs.schema)}")
    return d_obs.values - d_pred


def log_likelihood(d_obs: ObservedData, d_pred, budget: ErrorBudget | None = None) -> float:
    """``-0.5 * sum(misfit^2 / C_tot)`` with the normalization constant dropped.

    ``d_pred`` may be an ObservationVector or a raw array; a 2-D array gives
    one value per row.  Infinite ``C_tot`` entries carry zero weight.
    """
    r = _misfit(d_obs, d_pred)
    c = d_obs.c_tot if budget is None else budget.c_tot(d_obs.schema)
    w = np.where(np.isinf(c), 0.0, 1.0 / np.where(np.isinf(c), 1.0, c))
    out = -0.5 * np.sum(r * r * w, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _check_pair(sim: FieldSeries, surr: FieldSeries, attr: str):
    a = np.asarray(getattr(sim, attr), dtype=float)
    b = np.asarray(getattr(surr, attr), dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def saturation_error(sim: FieldSeries, surr: FieldSeries, eps: float = 0.025) -> float:
    """Mean of ``|S_hat - S| / (S + eps)`` over cells and times."""
    s, s_hat = _check_pair(sim, surr, "saturation")
    return float(np.mean(np.abs(s_hat - s) / (s + eps)))


def pressure_error(sim: FieldSeries, surr: FieldSeries) -> float:
    """Mean of ``|p_hat - p|`` over cells and times, scaled by the per-time range of ``sim``."""
    p, p_hat = _check_pair(sim, surr, "pressure")
    rng = p.max(axis=-1) - p.min(axis=-1)
    if np.any(rng <= 0):
        raise ValueError("degenerate pressure range in the reference series")
    return float(np.mean(np.abs(p_hat - p) / rng[..., None]))


def estimate_surrogate_error(pairs: Sequence[tuple[ObservationVector, ObservationVector]]):
    """Signed error statistics ``reference - fast`` per quantity.

    Returns
    -------
    dict
        ``{"saturation": (mean, std), "pressure": (mean, std)}``; std uses n-1.
        Quantities absent from the schema are omitted.
    """
    if len(pairs) < 2:
        raise ValueError("need at least two (reference, fast) pairs")
    errs = {"saturation": [], "pressure": []}
    for ref, fast in pairs:
        if ref.schema != fast.schema:
            raise ValueError("schema mismatch inside a pair")
        diff = ref.values - fast.values
        for q in errs:
            errs[q].append(diff[ref.schema.mask(q)])
    out = {}
    for q, chunks in errs.items():
        e = np.concatenate(chunks)
        if e.size:
            out[q] = (float(e.mean()), float(e.std(ddof=1)) if e.size > 1 else 0.0)
    return out


# -- CSV ---------------------------------------------------------------------

OBS_COLUMNS = ("well_id", "i", "j", "layer", "time_years", "quantity", "value", "sd_total")


def write_observed_csv(path, data: ObservedData | ObservationVector, c_tot=None,
                       header: Sequence[str] = ()) -> None:
    """Rows of ``well_id, i, j, layer, time_years, quantity, value, sd_total``."""
    if isinstance(data, ObservedData):
        vec, c = data.d_obs, data.c_tot
    else:
        vec, c = data, (np.full(len(data), np.nan) if c_tot is None else np.asarray(c_tot))
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_COLUMNS)
        for e, v, ct in zip(vec.schema.entries, vec.values, c):
            w.writerow([e.well, e.i, e.j, e.layer, repr(float(e.time)), e.quantity,
                        repr(float(v)), repr(float(np.sqrt(ct)))])


def read_observed_csv(path) -> ObservedData:
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    if not rows:
        raise ValueError(f"{path}: no observation rows")
    entries = tuple(ObsEntry(r["well_id"], int(r["i"]), int(r["j"]), int(r["layer"]),
                             float(r["time_years"]), r["quantity"]) for r in rows)
    vals = np.array([float(r["value"]) for r in rows])
    sd = np.array([float(r["sd_total"]) for r in rows])
    return ObservedData(ObservationVector(ObservationSchema(entries), vals), sd ** 2)
