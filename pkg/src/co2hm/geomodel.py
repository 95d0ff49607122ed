"""Standard multi-Gaussian fields, PCA parameterization and geomodel assembly.

Cell ordering everywhere in this package is layer-major: a field on a
``GridSpec`` is a flat array of length ``nz * ny * nx`` that reshapes to
``(nz, ny, nx)``.  Layer 0 is the top of the aquifer.
"""
from __future__ import annotations

import logging
import math
import struct
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

K_MIN, K_MAX = 1e-4, 1e4          # md
PHI_MIN, PHI_MAX = 0.05, 0.4

META_NAMES = ("mu_logk", "sigma_logk", "a_r", "d", "e")

MAGIC = b"CO2HMBIN"
FORMAT_VERSION = 1
KIND_BASIS = 1
KIND_FIELD_SERIES = 2


@dataclass(frozen=True)
class GridSpec:
    nx: int = 20
    ny: int = 20
    nz: int = 5
    dx: float = 150.0
    dy: float = 150.0
    dz: float = 20.0

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("cell counts must be >= 1")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError("cell dimensions must be > 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    def index(self, i: int, j: int, k: int) -> int:
        """Flat index of column ``(i, j)`` in layer ``k``."""
        if not (0 <= i < self.nx and 0 <= j < self.ny and 0 <= k < self.nz):
            raise IndexError(f"cell ({i}, {j}, {k}) outside grid")
        return (k * self.ny + j) * self.nx + i

    @classmethod
    def paper(cls) -> "GridSpec":
        return cls(80, 80, 20, 150.0, 150.0, 5.0)


@dataclass(frozen=True)
class VariogramSpec:
    """Exponential variogram with practical-range convention ``exp(-3 h / l)``."""

    l_h: float = 1500.0
    l_v: float = 10.0
    model: str = "exponential"

    def __post_init__(self):
        if self.l_h <= 0 or self.l_v <= 0:
            raise ValueError("correlation lengths must be > 0")
        if self.model != "exponential":
            raise ValueError(f"unsupported variogram model {self.model!r}")

    def covariance(self, h_h, h_v):
        return np.exp(-3.0 * (np.asarray(h_h) / self.l_h + np.abs(h_v) / self.l_v))


@dataclass
class Metaparameters:
    mu_logk: float
    sigma_logk: float
    a_r: float
    d: float
    e: float
    l_h: float | None = None

    def __post_init__(self):
        if self.sigma_logk < 0:
            raise ValueError("sigma_logk must be >= 0")
        if not 0 < self.a_r <= 1:
            raise ValueError("a_r must lie in (0, 1]")

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in META_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values, l_h: float | None = None) -> "Metaparameters":
        return cls(*(float(v) for v in values), l_h=l_h)


# --------------------------------------------------------------------------
# priors
#
# Each distribution works in a "sampling coordinate": the natural value for
# Uniform/Gaussian, log10 of the value for LogUniform (and for a Gaussian
# declared with log10=True).  MCMC proposals and histograms live in that
# coordinate, so the log-density below is the density of the coordinate.


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("Uniform requires lo < hi")

    def to_coord(self, x):
        return np.asarray(x, dtype=float)

    def from_coord(self, u):
        return np.asarray(u, dtype=float)

    def coord_range(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def logpdf(self, u):
        u = np.asarray(u, dtype=float)
        inside = (u >= self.lo) & (u <= self.hi)
        return np.where(inside, -math.log(self.hi - self.lo), -np.inf)

    def sample(self, rng, size=None):
        return rng.uniform(self.lo, self.hi, size)

    def ppf(self, q):
        return self.lo + np.asarray(q) * (self.hi - self.lo)


@dataclass(frozen=True)
class LogUniform:
    """Uniform in log10 of the value; ``lo == hi`` gives a point mass."""

    lo: float
    hi: float

    def __post_init__(self):
        if self.lo <= 0 or self.hi < self.lo:
            raise ValueError("LogUniform requires 0 < lo <= hi")

    def to_coord(self, x):
        return np.log10(np.asarray(x, dtype=float))

    def from_coord(self, u):
        return 10.0 ** np.asarray(u, dtype=float)

    def coord_range(self) -> tuple[float, float]:
        return (math.log10(self.lo), math.log10(self.hi))

    def logpdf(self, u):
        a, b = self.coord_range()
        u = np.asarray(u, dtype=float)
        if a == b:
            return np.where(u == a, 0.0, -np.inf)
        inside = (u >= a) & (u <= b)
        return np.where(inside, -math.log(b - a), -np.inf)

    def sample(self, rng, size=None):
        a, b = self.coord_range()
        if a == b:
            return self.lo if size is None else np.full(size, self.lo)
        return 10.0 ** rng.uniform(a, b, size)

    def ppf(self, q):
        a, b = self.coord_range()
        return 10.0 ** (a + np.asarray(q) * (b - a))


@dataclass(frozen=True)
class Gaussian:
    """Normal prior in the sampling coordinate.

    ``ref`` is the reference interval (in natural units) used for proposal
    scaling and histogram bins; ``support`` optionally truncates the density to
    physically admissible values.
    """

    mean: float
    std: float
    log10: bool = False
    ref: tuple[float, float] | None = None
    support: tuple[float, float] | None = None

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError("Gaussian requires std > 0")

    def to_coord(self, x):
        x = np.asarray(x, dtype=float)
        return np.log10(x) if self.log10 else x

    def from_coord(self, u):
        u = np.asarray(u, dtype=float)
        return 10.0 ** u if self.log10 else u

    def coord_range(self) -> tuple[float, float]:
        if self.ref is None:
            return (self.mean - 4 * self.std, self.mean + 4 * self.std)
        lo, hi = self.ref
        return (float(self.to_coord(lo)), float(self.to_coord(hi)))

    def logpdf(self, u):
        u = np.asarray(u, dtype=float)
        z = (u - self.mean) / self.std
        lp = -0.5 * z * z - math.log(self.std * math.sqrt(2 * math.pi))
        if self.support is not None:
            lo, hi = self.support
            lp = np.where((u >= lo) & (u <= hi), lp, -np.inf)
        return lp

    def sample(self, rng, size=None):
        u = rng.normal(self.mean, self.std, size)
        if self.support is not None:
            lo, hi = self.support
            # rejection keeps the truncated law exact; support is never tight
            u = np.atleast_1d(u)
            bad = (u < lo) | (u > hi)
            while bad.any():
                u[bad] = rng.normal(self.mean, self.std, int(bad.sum()))
                bad = (u < lo) | (u > hi)
            if size is None:
                u = u[0]
        return self.from_coord(u)

    def ppf(self, q):
        from scipy.stats import norm

        return self.from_coord(self.mean + self.std * norm.ppf(q))


Distribution = Uniform | LogUniform | Gaussian


@dataclass(frozen=True)
class PriorSpec:
    mu_logk: Distribution = Uniform(1.5, 4.0)
    sigma_logk: Distribution = Uniform(1.0, 2.5)
    a_r: Distribution = LogUniform(0.01, 1.0)
    d: Distribution = Uniform(0.02, 0.04)
    e: Distribution = Uniform(0.05, 0.1)

    @property
    def names(self) -> tuple[str, ...]:
        return META_NAMES

    def dists(self) -> list[Distribution]:
        return [getattr(self, n) for n in META_NAMES]

    def to_coords(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return np.stack([d.to_coord(values[..., i]) for i, d in enumerate(self.dists())], axis=-1)

    def from_coords(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=float)
        return np.stack([d.from_coord(coords[..., i]) for i, d in enumerate(self.dists())], axis=-1)

    def logpdf_coords(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=float)
        return sum(d.logpdf(coords[..., i]) for i, d in enumerate(self.dists()))

    def coord_ranges(self) -> np.ndarray:
        return np.array([d.coord_range() for d in self.dists()])

    @classmethod
    def uniform(cls) -> "PriorSpec":
        return cls()

    @classmethod
    def gaussian(cls) -> "PriorSpec":
        """Normal priors centred on the mid-range of the uniform defaults."""
        return cls(
            mu_logk=Gaussian(2.75, 0.5, ref=(1.5, 4.0)),
            sigma_logk=Gaussian(1.75, 0.5, ref=(1.0, 2.5), support=(0.0, np.inf)),
            a_r=Gaussian(-1.0, 0.25, log10=True, ref=(0.01, 1.0), support=(-np.inf, 0.0)),
            d=Gaussian(0.03, 0.005, ref=(0.02, 0.04)),
            e=Gaussian(0.075, 0.017, ref=(0.05, 0.1)),
        )


def sample_prior(prior: PriorSpec, rng) -> Metaparameters:
    """Independent draw of every metaparameter from its prior."""
    return Metaparameters(*(float(d.sample(rng)) for d in prior.dists()))


# --------------------------------------------------------------------------
# Gaussian fields

DENSE_LIMIT = 4096


def _lag_grids(grid: GridSpec, shape):
    """Signed-distance lags on a periodic embedding of size ``shape``."""
    lags = []
    for m, h in zip(shape, (grid.dz, grid.dy, grid.dx)):
        idx = np.arange(m)
        idx = np.minimum(idx, m - idx)
        lags.append(idx * h)
    return np.meshgrid(*lags, indexing="ij")


def _warn_short_range(grid: GridSpec, vario: VariogramSpec):
    if vario.l_h < min(grid.dx, grid.dy) or vario.l_v < grid.dz:
        warnings.warn(
            "correlation length is shorter than the cell size; field is close to white noise",
            stacklevel=3,
        )


def _dense_factor(grid: GridSpec, vario: VariogramSpec) -> np.ndarray:
    k, j, i = np.unravel_index(np.arange(grid.n_cells), grid.shape)
    x, y, z = i * grid.dx, j * grid.dy, k * grid.dz
    h_h = np.hypot(x[:, None] - x[None, :], y[:, None] - y[None, :])
    h_v = z[:, None] - z[None, :]
    cov = vario.covariance(h_h, h_v)
    w, v = np.linalg.eigh(cov)
    w = np.clip(w, 0.0, None)
    return v * np.sqrt(w)


def _circulant_eigs(grid: GridSpec, vario: VariogramSpec):
    shape = [2 * n for n in grid.shape]
    for _ in range(4):
        hz, hy, hx = _lag_grids(grid, shape)
        c = vario.covariance(np.hypot(hx, hy), hz)
        lam = np.fft.fftn(c).real
        if lam.min() >= -1e-10 * lam.max():
            break
        shape = [2 * m for m in shape]
    else:
        warnings.warn("circulant embedding not nonnegative; clipping eigenvalues", stacklevel=3)
    return np.clip(lam, 0.0, None), tuple(shape)


def sample_gaussian_field(grid: GridSpec, vario: VariogramSpec, seed, size: int | None = None):
    """Zero-mean, unit-variance stationary Gaussian field(s).

    Dense covariance factorization for grids up to 4096 cells, circulant
    embedding above that.  Returns shape ``(n_cells,)`` or ``(size, n_cells)``.
    """
    _warn_short_range(grid, vario)
    rng = np.random.default_rng(seed)
    n = 1 if size is None else int(size)
    if grid.n_cells <= DENSE_LIMIT:
        L = _dense_factor(grid, vario)
        z = rng.standard_normal((n, grid.n_cells))
        out = z @ L.T
    else:
        lam, shape = _circulant_eigs(grid, vario)
        scale = np.sqrt(lam / lam.size)
        out = np.empty((n, grid.n_cells))
        nz, ny, nx = grid.shape
        for r in range(n):
            w = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            f = np.fft.fftn(scale * w)
            out[r] = f.real[:nz, :ny, :nx].ravel()
    return out[0] if size is None else out


# --------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaBasis:
    Phi: np.ndarray
    ybar: np.ndarray
    sv: np.ndarray
    energy_fraction: float = 1.0

    @property
    def n_cells(self) -> int:
        return self.Phi.shape[0]

    @property
    def n_latent(self) -> int:
        return self.Phi.shape[1]

    def project(self, y) -> np.ndarray:
        """Least-squares latent coordinates of field(s) ``y``."""
        y = np.asarray(y, dtype=float) - self.ybar
        if self.n_latent == 0:
            return np.zeros(y.shape[:-1] + (0,))
        # Phi = U * s / sqrt(n_r - 1), so Phi^+ = diag(sqrt(n_r-1)/s) U^T
        xi, *_ = np.linalg.lstsq(self.Phi, y.T, rcond=None)
        return xi.T


def build_pca_basis(realizations, energy_target: float = 0.95, n_latent: int | None = None) -> PcaBasis:
    """Truncated PCA of an ensemble of fields.

    Columns of ``Phi`` are left singular vectors scaled by ``s / sqrt(n_r - 1)``
    so that ``xi ~ N(0, I)`` reproduces the ensemble covariance in the
    retained subspace.  ``n_latent`` overrides the energy criterion.
    """
    Y = np.asarray(realizations, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 2:
        raise ValueError("need at least 2 realizations as rows of a 2-D array")
    if not 0 < energy_target <= 1:
        raise ValueError("energy_target must lie in (0, 1]")
    n_r = Y.shape[0]
    ybar = Y.mean(axis=0)
    A = (Y - ybar).T
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    tol = max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int((s > tol).sum())
    total = float(np.sum(s[:rank] ** 2))
    if rank == 0:
        warnings.warn("ensemble has no variance; basis is empty", stacklevel=2)
        return PcaBasis(np.zeros((Y.shape[1], 0)), ybar, np.zeros(0), 1.0)

    cum = np.cumsum(s[:rank] ** 2) / total
    if n_latent is None:
        n_d = int(np.searchsorted(cum, energy_target - 1e-12) + 1)
    else:
        if n_latent > n_r:
            raise ValueError(f"requested {n_latent} components from {n_r} realizations")
        n_d = int(n_latent)
        if n_d > rank:
            logger.warning("requested %d components but numerical rank is %d", n_d, rank)
            n_d = rank
    n_d = min(n_d, rank)
    U = U[:, :n_d].copy()
    # deterministic sign: largest-magnitude entry of each vector positive
    flip = np.sign(U[np.abs(U).argmax(axis=0), np.arange(n_d)])
    U *= flip
    sv = s[:n_d].copy()
    Phi = U * (sv / math.sqrt(n_r - 1))
    return PcaBasis(Phi, ybar, sv, float(cum[n_d - 1]) if n_d else 0.0)


def pca_to_field(basis: PcaBasis, xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != basis.n_latent:
        raise ValueError(f"latent vector has length {xi.shape[-1]}, basis has {basis.n_latent}")
    return xi @ basis.Phi.T + basis.ybar


# --------------------------------------------------------------------------
# geomodel


@dataclass
class Geomodel:
    k: np.ndarray       # horizontal permeability, md
    phi: np.ndarray
    a_r: np.ndarray     # k_v / k, constant over cells

    @property
    def n_cells(self) -> int:
        return self.k.size


def assemble_geomodel(y, theta: Metaparameters) -> Geomodel:
    """Permeability, porosity and anisotropy from a standard Gaussian field.

    Permeability is clamped before it feeds the porosity relation; porosity is
    then clamped on its own.
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("field contains non-finite values")
    with np.errstate(over="ignore"):
        k = np.exp(theta.sigma_logk * y + theta.mu_logk)
    k = np.clip(k, K_MIN, K_MAX)
    phi = np.clip(theta.d * np.log(k) + theta.e, PHI_MIN, PHI_MAX)
    return Geomodel(k, phi, np.full(y.shape, float(theta.a_r)))


# --------------------------------------------------------------------------
# persistence


def _header(kind: int) -> bytes:
    return MAGIC + struct.pack("<HHI", FORMAT_VERSION, kind, 0)


def _read_header(buf: bytes, kind: int) -> int:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise ValueError("not a co2hm binary file")
    version, got, _ = struct.unpack("<HHI", buf[8:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    if got != kind:
        raise ValueError(f"file holds kind {got}, expected {kind}")
    return 16


def save_basis(basis: PcaBasis, path) -> None:
    n_s, n_d = basis.Phi.shape
    with open(path, "wb") as fh:
        fh.write(_header(KIND_BASIS))
        fh.write(struct.pack("<QQ", n_s, n_d))
        fh.write(np.ascontiguousarray(basis.ybar, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.sv, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.Phi, dtype="<f8").tobytes())


def load_basis(path, energy_fraction: float = 1.0) -> PcaBasis:
    """Read a basis file; the energy fraction lives in the metadata sidecar."""
    buf = Path(path).read_bytes()
    off = _read_header(buf, KIND_BASIS)
    n_s, n_d = struct.unpack("<QQ", buf[off:off + 16])
    off += 16
    data = np.frombuffer(buf, dtype="<f8", offset=off)
    if data.size != n_s + n_d + n_s * n_d:
        raise ValueError("truncated basis file")
    ybar = data[:n_s].copy()
    sv = data[n_s:n_s + n_d].copy()
    Phi = data[n_s + n_d:].reshape(n_s, n_d).copy()
    return PcaBasis(Phi, ybar, sv, energy_fraction)


def write_field_csv(path, values, header: Sequence[str] = ()) -> None:
    """One ``cell,value`` row per cell, after optional ``#`` comment lines."""
    values = np.asarray(values, dtype=float).ravel()
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write("cell,value\n")
        for c, v in enumerate(values.tolist()):
            fh.write(f"{c},{v!r}\n")


def _header_rows(path) -> int:
    n = 0
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("cell"):
                n += 1
            else:
                break
    return n


def read_field_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", comments="#", skiprows=_header_rows(path), ndmin=2)
    return data[:, 1].copy()


def prior_from_mapping(spec: Mapping) -> PriorSpec:
    """Build a ``PriorSpec`` from ``{"name": {"family": ..., ...}}``."""
    kinds = {"uniform": Uniform, "loguniform": LogUniform, "gaussian": Gaussian}
    kwargs = {}
    for f in fields(PriorSpec):
        if f.name not in spec:
            continue
        entry = dict(spec[f.name])
        family = entry.pop("family").lower()
        for key in ("ref", "support"):
            if key in entry and entry[key] is not None:
                entry[key] = tuple(float(v) for v in entry[key])
        kwargs[f.name] = kinds[family](**entry)
    return PriorSpec(**kwargs)
