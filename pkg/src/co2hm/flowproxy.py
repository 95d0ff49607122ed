"""Desk-scale two-phase (CO2/brine) flow proxy.

IMPES scheme on a Cartesian grid: a backward-Euler pressure solve per macro
step, followed by transport substeps.  Horizontal transport is explicit
upwind; vertical transport, where buoyancy makes an explicit step
prohibitively stiff, is backward Euler column by column.  Both are written
in conservative flux form, so CO2 mass is conserved to round-off.

Pressures are MPa at the interface and Pa internally; rates are Mt/yr at
the interface and m^3/s internally.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import spsolve

from . import _kernels
from .geomodel import (
    FORMAT_VERSION,
    KIND_FIELD_SERIES,
    Geomodel,
    GridSpec,
    _header,
    _read_header,
)

logger = logging.getLogger(__name__)

MD_TO_M2 = 9.869233e-16
SECONDS_PER_YEAR = 3.1536e7
GRAVITY = 9.80665

OBS_TIMES = (1.5, 3.0, 4.5)
OUTPUT_TIMES = (1.5, 3.0, 4.5, 7.5, 10.5, 13.5, 18.0, 22.5, 27.0, 30.0)

# above this many (n * bandwidth^2) operations, use sparse LU instead of the band solver
_BAND_WORK_LIMIT = 2e9


class FlowSolverError(RuntimeError):
    """Linear solve or time-step control failed inside ``simulate``."""


@dataclass(frozen=True)
class WellSpec:
    name: str
    kind: str
    i: int
    j: int
    rate: float = 0.0     # Mt/yr, injectors only

    def __post_init__(self):
        if self.kind not in ("injector", "observer"):
            raise ValueError(f"unknown well kind {self.kind!r}")
        if self.kind == "injector" and not self.rate > 0:
            raise ValueError(f"injector {self.name} needs a positive rate")

    def check(self, grid: GridSpec):
        if not (0 <= self.i < grid.nx and 0 <= self.j < grid.ny):
            raise ValueError(f"well {self.name} at ({self.i}, {self.j}) lies outside the grid")


@dataclass(frozen=True)
class FluidSpec:
    n_w: float = 6.0
    n_g: float = 5.0
    krg_swi: float = 0.95
    s_wi: float = 0.2
    s_gr: float = 0.0
    mu_g: float = 0.047       # cp
    mu_w: float = 0.38        # cp
    rho_g: float = 610.0      # kg/m^3
    rho_w: float = 975.0
    c_t: float = 1.0e-9       # 1/Pa
    p0_mid: float = 19.0      # MPa, middle of the aquifer
    capillary: bool = False
    pc_lambda: float = 0.67
    pc_entry: float = 5.0e3   # Pa at the reference k and phi
    pc_k_ref: float = 100.0   # md
    pc_phi_ref: float = 0.2
    pc_max_ratio: float = 20.0

    def __post_init__(self):
        if self.n_w <= 0 or self.n_g <= 0:
            raise ValueError("Corey exponents must be > 0")
        if not 0 <= self.s_wi < 1 or not 0 <= self.s_gr < 1 or self.s_wi + self.s_gr >= 1:
            raise ValueError("residual saturations out of range")
        if min(self.mu_g, self.mu_w, self.rho_g, self.rho_w) <= 0:
            raise ValueError("viscosities and densities must be > 0")
        if self.c_t <= 0:
            raise ValueError("total compressibility must be > 0")
        if self.rho_w <= self.rho_g:
            logger.warning("brine is not denser than CO2; buoyancy reverses")

    def relperm_vector(self) -> np.ndarray:
        # viscosities in Pa s
        return np.array([self.s_wi, self.s_gr, self.n_w, self.n_g, self.krg_swi,
                         self.mu_w * 1e-3, self.mu_g * 1e-3])

    def relperm(self, s):
        """Corey relative permeabilities ``(k_rg, k_rw)`` at gas saturation ``s``."""
        s = np.asarray(s, dtype=float)
        span = 1.0 - self.s_wi - self.s_gr
        sg = np.clip((s - self.s_gr) / span, 0.0, 1.0)
        sw = np.clip((1.0 - s - self.s_wi) / span, 0.0, 1.0)
        return self.krg_swi * sg ** self.n_g, sw ** self.n_w


@dataclass(frozen=True)
class SimulationControls:
    """Time-stepping and boundary treatment; defaults suit the desk model."""

    dt_init: float = 0.1            # years
    dt_max: float = 0.75
    dt_growth: float = 2.0
    cfl: float = 0.9
    max_source_ds: float = 1.0      # cap on saturation added by a well per substep
    max_substep: float = np.inf     # years
    pressure_bdf2: bool = True
    rate_scale: float = 1.0         # multiplies every injector rate; 0 gives a null-forcing run
    ds_target: float = 0.2          # macro steps shrink when saturation moves more than this
    boundary_pv_multiplier: float = 1.0
    boundary_ref_porosity: float = 0.1
    newton_tol: float = 1e-10
    newton_max_iter: int = 40
    max_subcycle_depth: int = 8
    min_substep: float = 1e-7       # years

    def refined(self, factor: float = 2.0) -> "SimulationControls":
        d = asdict(self)
        d.update(dt_init=self.dt_init / factor, dt_max=self.dt_max / factor, cfl=self.cfl / factor,
                 max_source_ds=self.max_source_ds / factor)
        return SimulationControls(**d)


@dataclass
class FieldSeries:
    times: np.ndarray          # (n_t,) years
    pressure: np.ndarray       # (n_t, n_s) MPa
    saturation: np.ndarray     # (n_t, n_s)
    grid: GridSpec | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.pressure = np.atleast_2d(np.asarray(self.pressure, dtype=float))
        self.saturation = np.atleast_2d(np.asarray(self.saturation, dtype=float))
        if self.pressure.shape != self.saturation.shape or self.pressure.shape[0] != self.times.size:
            raise ValueError("times, pressure and saturation shapes disagree")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def n_t(self) -> int:
        return self.times.size

    @property
    def n_s(self) -> int:
        return self.pressure.shape[1]

    def time_index(self, t: float) -> int:
        hit = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-9))
        if hit.size == 0:
            raise KeyError(f"time {t} yr not in series {self.times.tolist()}")
        return int(hit[0])


# -- model setup -------------------------------------------------------------

def transmissibilities(k_md, a_r, grid: GridSpec):
    """Harmonic-mean face transmissibilities (m^3) in ``[k, j, i]`` layout.

    ``a_r`` is a scalar or per-cell vertical-to-horizontal permeability ratio.
    """
    k = np.asarray(k_md, dtype=float).reshape(grid.shape) * MD_TO_M2
    a_r = np.asarray(a_r, dtype=float)
    kv = k * (a_r.reshape(grid.shape) if a_r.size > 1 else a_r)

    def harm(a, b):
        return 2.0 * a * b / (a + b)

    Tx = harm(k[:, :, :-1], k[:, :, 1:]) * grid.dy * grid.dz / grid.dx
    Ty = harm(k[:, :-1, :], k[:, 1:, :]) * grid.dx * grid.dz / grid.dy
    Tz = harm(kv[:-1], kv[1:]) * grid.dx * grid.dy / grid.dz
    return Tx, Ty, Tz


def cell_depths(grid: GridSpec) -> np.ndarray:
    """Depth of layer centres below the aquifer top (m)."""
    return (np.arange(grid.nz) + 0.5) * grid.dz


def initial_pressure(grid: GridSpec, fluid: FluidSpec) -> np.ndarray:
    """Hydrostatic brine pressure (MPa), ``p0_mid`` at mid-aquifer depth."""
    z = cell_depths(grid) - 0.5 * grid.nz * grid.dz
    p = fluid.p0_mid + fluid.rho_w * GRAVITY * z * 1e-6
    return np.broadcast_to(p[:, None, None], grid.shape).ravel().copy()


def pore_volumes(phi, grid: GridSpec, controls: SimulationControls | None = None):
    """Transport pore volumes and the (possibly enlarged) compressible volumes."""
    controls = controls or SimulationControls()
    pv = np.asarray(phi, dtype=float).reshape(grid.shape) * grid.cell_volume
    pv_c = pv.copy()
    m = controls.boundary_pv_multiplier
    if m != 1.0:
        edge = np.zeros(grid.shape[1:], dtype=bool)
        edge[0, :] = edge[-1, :] = edge[:, 0] = edge[:, -1] = True
        pv_c[:, edge] += (m - 1.0) * controls.boundary_ref_porosity * grid.cell_volume
    return pv, pv_c


def boundary_multiplier(extra_pore_volume: float, grid: GridSpec, ref_porosity: float = 0.1) -> float:
    """Multiplier that adds ``extra_pore_volume`` (m^3) spread over lateral edge cells."""
    n_edge = (2 * (grid.nx + grid.ny) - 4) * grid.nz if min(grid.nx, grid.ny) > 1 else grid.n_cells
    return 1.0 + extra_pore_volume / (ref_porosity * grid.cell_volume * n_edge)


def scaled_surroundings_pore_volume(total_rate: float, outer_km: float = 120.0, inner_km: float = 12.0,
                                    thickness: float = 100.0, porosity: float = 0.1,
                                    reference_rate: float = 4.0) -> float:
    """Pore volume of the surrounding region, scaled by ``total_rate / reference_rate``.

    Keeping the ratio of injection rate to connected pore volume fixed keeps
    the late-time pseudo-steady pressure rise of the full-size system.
    """
    pv = (outer_km ** 2 - inner_km ** 2) * 1e6 * thickness * porosity
    return pv * total_rate / reference_rate


def well_sources(k_md, grid: GridSpec, wells: Sequence[WellSpec], fluid: FluidSpec) -> np.ndarray:
    """Volumetric CO2 source per cell (m^3/s), split over layers by permeability."""
    k = np.asarray(k_md, dtype=float).reshape(grid.shape)
    q = np.zeros(grid.shape)
    for w in wells:
        w.check(grid)
        if w.kind != "injector":
            continue
        col = k[:, w.j, w.i]
        mass = w.rate * 1e9 / SECONDS_PER_YEAR          # kg/s
        q[:, w.j, w.i] += mass / fluid.rho_g * col / col.sum()
    return q


def total_injection_rate(wells: Sequence[WellSpec], fluid: FluidSpec) -> float:
    """Total volumetric injection rate (m^3/s)."""
    return sum(w.rate for w in wells if w.kind == "injector") * 1e9 / SECONDS_PER_YEAR / fluid.rho_g


# -- simulation --------------------------------------------------------------

def _schedule_times(schedule) -> np.ndarray:
    t = np.asarray(list(schedule), dtype=float)
    if t.size == 0 or t[0] <= 0 or np.any(np.diff(t) <= 0):
        raise ValueError("schedule must be positive, strictly increasing output times")
    return t


def _solve_band(ab, rhs, n_work):
    if n_work <= _BAND_WORK_LIMIT:
        try:
            return linalg.solveh_banded(ab, rhs, lower=False, check_finite=False)
        except linalg.LinAlgError as exc:
            raise FlowSolverError(f"pressure matrix not positive definite: {exc}") from exc
    bw = ab.shape[0] - 1
    n = rhs.size
    offsets, diags = [], []
    for d in range(bw + 1):
        row = ab[bw - d]
        if d and not np.any(row):
            continue
        offsets.append(d)
        diags.append(row)
        if d:
            offsets.append(-d)
            diags.append(np.roll(row, -d))
    A = sparse.dia_matrix((np.array(diags), offsets), shape=(n, n)).tocsc()
    x = spsolve(A, rhs)
    res = np.linalg.norm(A @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if not np.isfinite(res) or res > 1e-8:
        raise FlowSolverError(f"pressure solve did not converge, relative residual {res:.3e}")
    return x


def simulate(model: Geomodel, grid: GridSpec, wells: Sequence[WellSpec], fluid: FluidSpec,
             schedule: Iterable[float], controls: SimulationControls | None = None) -> FieldSeries:
    """Run the proxy and return pressure/saturation at the scheduled times.

    Parameters
    ----------
    model : Geomodel
        Permeability (md), porosity and anisotropy ratio on ``grid``.
    wells : sequence of WellSpec
        At least one injector.  Observers are ignored here.
    schedule : iterable of float
        Output times in years.
    controls : SimulationControls, optional

    Returns
    -------
    FieldSeries
        ``diagnostics`` holds injected, stored and exported CO2 mass (kg) per
        output time; exported mass has left through the boundary pore volume.
    """
    controls = controls or SimulationControls()
    k_md = np.asarray(model.k, dtype=float)
    if k_md.size != grid.n_cells or np.asarray(model.phi).size != grid.n_cells:
        raise ValueError(f"model has {k_md.size} cells, grid has {grid.n_cells}")
    if not any(w.kind == "injector" for w in wells):
        raise ValueError("simulate needs at least one injector")
    times = _schedule_times(schedule)

    nz, ny, nx = grid.shape
    rp = fluid.relperm_vector()
    Tx, Ty, Tz = transmissibilities(k_md, model.a_r, grid)
    pv, pv_c = pore_volumes(model.phi, grid, controls)
    if controls.rate_scale < 0:
        raise ValueError("rate_scale must be >= 0")
    q = well_sources(k_md, grid, wells, fluid) * controls.rate_scale
    depth = cell_depths(grid)
    gz = Tz * (fluid.rho_w - fluid.rho_g) * GRAVITY * grid.dz
    slopes = _kernels.slope_table(rp)

    if fluid.capillary:
        phi3 = np.asarray(model.phi, dtype=float).reshape(grid.shape)
        k3 = k_md.reshape(grid.shape)
        pc_scale = fluid.pc_entry * np.sqrt((fluid.pc_k_ref / fluid.pc_phi_ref) / (k3 / phi3))
    else:
        pc_scale = np.zeros(grid.shape)

    p = initial_pressure(grid, fluid).reshape(grid.shape) * 1e6
    S = np.zeros(grid.shape)
    Snew = np.empty_like(S)
    n = grid.n_cells
    bw = nx * nz if nz > 1 or ny > 1 else 1
    ab = np.zeros((bw + 1, n))
    rhs = np.zeros(n)
    coef = [np.zeros_like(Tx), np.zeros_like(Tx), np.zeros_like(Ty), np.zeros_like(Ty),
            np.zeros_like(Tz), np.zeros_like(Tz)]
    vx, vy, vz = np.zeros_like(Tx), np.zeros_like(Ty), np.zeros_like(Tz)
    q_tot = q.sum()
    min_sub = controls.min_substep * SECONDS_PER_YEAR
    src = q > 0
    h_cap = controls.max_substep * SECONDS_PER_YEAR
    h_src = controls.max_source_ds * float((pv[src] / q[src]).min()) if src.any() else np.inf

    out_p = np.empty((times.size, n))
    out_s = np.empty((times.size, n))
    injected = np.empty(times.size)
    stored = np.empty(times.size)
    clipped = 0.0
    exported = 0.0
    exported_out = np.empty(times.size)
    outer = fluid.c_t * (pv_c - pv) if np.any(pv_c != pv) else None
    sink = np.zeros(grid.shape)
    stats = {"macro_steps": 0, "substeps": 0, "column_failures": 0}

    t = 0.0
    dt_next = controls.dt_init
    dt_prev = 0.0
    dp_prev = np.zeros(grid.shape)
    for it, t_out in enumerate(times):
        while t < t_out - 1e-12:
            dt = min(dt_next, controls.dt_max)
            rem = t_out - t
            if rem <= dt * (1 + 1e-9):
                dt = rem
            elif rem < 2 * dt:
                dt = 0.5 * rem
            dt_s = dt * SECONDS_PER_YEAR
            pc = (_kernels.capillary_pressure(S, pc_scale, rp, fluid.pc_lambda, fluid.pc_max_ratio)
                  if fluid.capillary else pc_scale)
            # variable-step BDF2 after the first step, backward Euler before
            if dt_prev > 0.0 and controls.pressure_bdf2:
                w = dt / dt_prev
                a0, a2 = (1 + 2 * w) / (1 + w), w * w / (1 + w)
            else:
                a0, a2 = 1.0, 0.0
            _kernels.assemble_pressure(S, p, pc, pv_c, q, Tx, Ty, Tz, depth, fluid.rho_w, fluid.rho_g,
                                       GRAVITY, a0 * fluid.c_t / dt_s, rp, ab, rhs, *coef)
            if a2:
                rhs += (a2 * fluid.c_t / dt_s) * (pv_c * dp_prev).transpose(1, 2, 0).ravel()
            x = _solve_band(ab, rhs, n * bw * bw)
            if not np.all(np.isfinite(x)):
                raise FlowSolverError("pressure solve returned non-finite values")
            dp_new = x.reshape(ny, nx, nz).transpose(2, 0, 1)
            if outer is not None:
                # brine (or, once it arrives, CO2) pushed into the surroundings
                np.multiply(outer, (a0 * dp_new - a2 * dp_prev) / dt_s, out=sink)
            dp_prev = dp_new
            p += dp_prev
            _kernels.face_fluxes(p, *coef, vx, vy, vz)

            S_start = S.copy()
            remaining = dt_s
            while remaining > 1e-9 * dt_s:
                h = min(controls.cfl * _kernels.explicit_cfl(pv, S, vx, vy, slopes), h_src, h_cap, remaining)
                if fluid.capillary:
                    h = min(h, controls.cfl * _kernels.capillary_cfl(
                        pv, S, pc_scale, Tx, Ty, Tz, rp, fluid.pc_lambda, fluid.pc_max_ratio))
                    pc = _kernels.capillary_pressure(S, pc_scale, rp, fluid.pc_lambda,
                                                     fluid.pc_max_ratio)
                while True:
                    if h < min_sub:
                        raise FlowSolverError(f"transport substep underflow at t={t:.4g} yr "
                                              f"(h={h / SECONDS_PER_YEAR:.3e} yr)")
                    out_vol = _kernels.explicit_step(S, Snew, pv, q, vx, vy, h, rp, pc, Tx, Ty, Tz,
                                                     fluid.capillary, sink)
                    if Snew.min() >= -1e-10 and Snew.max() <= 1.0 + 1e-10:
                        exported += out_vol
                        break
                    h *= 0.5
                fails = _kernels.vertical_step(Snew, pv, vz, gz, h, rp, controls.newton_tol,
                                               controls.newton_max_iter, controls.max_subcycle_depth)
                stats["column_failures"] += int(fails)
                lo, hi = Snew.min(), Snew.max()
                if lo < 0.0 or hi > 1.0:
                    before = float((pv * Snew).sum())
                    np.clip(Snew, 0.0, 1.0, out=Snew)
                    clipped += before - float((pv * Snew).sum())
                S, Snew = Snew, S
                remaining -= h
                stats["substeps"] += 1
            t += dt
            stats["macro_steps"] += 1
            dt_prev = dt
            ds = float(np.abs(S - S_start).max())
            grow = controls.dt_growth if ds <= 0 else min(controls.dt_growth, max(0.5, controls.ds_target / ds))
            dt_next = min(dt * grow, controls.dt_max)
        out_p[it] = p.ravel() * 1e-6
        out_s[it] = S.ravel()
        injected[it] = q_tot * t * SECONDS_PER_YEAR * fluid.rho_g
        stored[it] = float((pv * S).sum()) * fluid.rho_g
        exported_out[it] = exported * fluid.rho_g

    if stats["column_failures"]:
        logger.warning("vertical transport: %d column solves hit the sub-cycling limit",
                       stats["column_failures"])
    diag = dict(stats, injected_kg=injected, stored_kg=stored, exported_kg=exported_out,
                clipped_kg=clipped * fluid.rho_g)
    return FieldSeries(times, out_p, out_s, grid, diag)


# -- observations ------------------------------------------------------------

@dataclass(frozen=True)
class ObsEntry:
    well: str
    i: int
    j: int
    layer: int          # 0 = top layer
    time: float         # years
    quantity: str       # "saturation" or "pressure"

    def __post_init__(self):
        if self.quantity not in ("saturation", "pressure"):
            raise ValueError(f"unknown quantity {self.quantity!r}")


@dataclass(frozen=True)
class ObservationSchema:
    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self):
        return len(self.entries)

    @property
    def quantities(self) -> np.ndarray:
        return np.array([e.quantity for e in self.entries])

    @property
    def times(self) -> tuple:
        return tuple(sorted({e.time for e in self.entries}))

    def mask(self, quantity: str) -> np.ndarray:
        return self.quantities == quantity

    def permuted(self, order) -> "ObservationSchema":
        return ObservationSchema(tuple(self.entries[i] for i in order))

    def to_records(self) -> list:
        return [asdict(e) for e in self.entries]

    @classmethod
    def from_records(cls, records) -> "ObservationSchema":
        return cls(tuple(ObsEntry(str(r["well"]), int(r["i"]), int(r["j"]), int(r["layer"]),
                                  float(r["time"]), str(r["quantity"])) for r in records))

    @classmethod
    def monitoring(cls, observers: Sequence[WellSpec], grid: GridSpec, times=OBS_TIMES,
                   saturation_layers=None, pressure_layers=(0,)) -> "ObservationSchema":
        """Saturation in every layer and pressure in the top layer of each observer.

        Saturation entries come first, ordered by time, well, layer; then pressure.
        """
        sat_layers = range(grid.nz) if saturation_layers is None else saturation_layers
        entries = []
        for qty, layers in (("saturation", sat_layers), ("pressure", pressure_layers)):
            for t in times:
                for w in observers:
                    w.check(grid)
                    for kk in layers:
                        if not 0 <= kk < grid.nz:
                            raise ValueError(f"layer {kk} outside grid")
                        entries.append(ObsEntry(w.name, w.i, w.j, int(kk), float(t), qty))
        return cls(tuple(entries))


@dataclass
class ObservationVector:
    schema: ObservationSchema
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.schema),):
            raise ValueError("values do not match schema length")

    def __len__(self):
        return self.values.size


def extract_observations(fs: FieldSeries, schema: ObservationSchema, grid: GridSpec | None = None
                         ) -> ObservationVector:
    grid = grid or fs.grid
    if grid is None:
        raise ValueError("grid unknown: pass it or use a FieldSeries that carries one")
    vals = np.empty(len(schema))
    for n, e in enumerate(schema.entries):
        it = fs.time_index(e.time)
        src = fs.pressure if e.quantity == "pressure" else fs.saturation
        vals[n] = src[it, grid.index(e.i, e.j, e.layer)]
    return ObservationVector(schema, vals)


# -- pressure normalization --------------------------------------------------

def pressure_stats(ensemble: Sequence[FieldSeries]):
    """Per-time min and max pressure over all cells of a reference ensemble."""
    stack = np.stack([fs.pressure for fs in ensemble])
    return stack.min(axis=(0, 2)), stack.max(axis=(0, 2))


def _check_range(p_min, p_max):
    p_min = np.asarray(p_min, dtype=float)
    p_max = np.asarray(p_max, dtype=float)
    if np.any(p_max <= p_min):
        raise ValueError("degenerate pressure range: p_max must exceed p_min at every time")
    return p_min, p_max


def normalize_pressure(pressure, p_min, p_max, p0):
    """``(p - p0) / (p_max - p_min)`` with per-time ranges; ``pressure`` is (n_t, n_s)."""
    p_min, p_max = _check_range(p_min, p_max)
    pressure = np.asarray(pressure, dtype=float)
    return (pressure - np.asarray(p0, dtype=float)) / (p_max - p_min)[:, None]


def denormalize_pressure(norm, p_min, p_max, p0):
    p_min, p_max = _check_range(p_min, p_max)
    return np.asarray(norm, dtype=float) * (p_max - p_min)[:, None] + np.asarray(p0, dtype=float)


# -- persistence -------------------------------------------------------------

def save_field_series(fs: FieldSeries, path, provenance: dict | None = None) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_header(KIND_FIELD_SERIES))
        fh.write(struct.pack("<QQ", fs.n_t, fs.n_s))
        fh.write(fs.times.astype("<f8").tobytes())
        fh.write(fs.pressure.astype("<f8").tobytes())
        fh.write(fs.saturation.astype("<f8").tobytes())
    if provenance is not None:
        meta = {"format_version": FORMAT_VERSION, **provenance}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_field_series(path, grid: GridSpec | None = None) -> FieldSeries:
    buf = Path(path).read_bytes()
    off = _read_header(buf, KIND_FIELD_SERIES)
    n_t, n_s = struct.unpack_from("<QQ", buf, off)
    off += 16
    need = off + 8 * (n_t + 2 * n_t * n_s)
    if len(buf) != need:
        raise ValueError(f"field series file truncated or padded: {len(buf)} bytes, expected {need}")
    data = np.frombuffer(buf, dtype="<f8", offset=off)
    times = data[:n_t].copy()
    pressure = data[n_t:n_t + n_t * n_s].reshape(n_t, n_s).copy()
    saturation = data[n_t + n_t * n_s:].reshape(n_t, n_s).copy()
    return FieldSeries(times, pressure, saturation, grid)


def write_summary_csv(fs: FieldSeries, path, grid: GridSpec | None = None, threshold: float = 0.01,
                      header: Sequence[str] = ()) -> None:
    """Per-time pressure statistics and plume bulk volume (cells with S > threshold)."""
    grid = grid or fs.grid
    vol = grid.cell_volume if grid is not None else 1.0
    with open(path, "w") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write("time_years,p_min_mpa,p_max_mpa,p_mean_mpa,plume_volume_m3\n")
        for t, p, s in zip(fs.times, fs.pressure, fs.saturation):
            fh.write(f"{t:.6g},{p.min():.9g},{p.max():.9g},{p.mean():.9g},"
                     f"{(s > threshold).sum() * vol:.9g}\n")


# -- standard layouts ----------------------------------------------------------

def default_wells(grid: GridSpec, rate: float = 0.25) -> tuple[list[WellSpec], list[WellSpec]]:
    """Four injectors on a square, each with an observer two cells toward the centre.

    Positions scale with the grid; the layout is symmetric under 90 degree
    rotation when ``nx == ny``.
    """
    def pos(f, n):
        return int(round(f * (n - 1)))

    fx = (0.25, 0.75, 0.75, 0.25)
    fy = (0.25, 0.25, 0.75, 0.75)
    off = max(1, int(round(2 * grid.nx / 20)))
    inj, obs = [], []
    for n, (a, b) in enumerate(zip(fx, fy), start=1):
        i, j = pos(a, grid.nx), pos(b, grid.ny)
        inj.append(WellSpec(f"I{n}", "injector", i, j, rate))
        di = off if a < 0.5 else -off
        obs.append(WellSpec(f"O{n}", "observer", i + di, j))
    return inj, obs
