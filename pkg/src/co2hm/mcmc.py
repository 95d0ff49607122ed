"""Hierarchical pCN-within-Gibbs sampler over latent fields and metaparameters.

Each iteration first updates the latent vector with a preconditioned
Crank-Nicolson proposal at fixed metaparameters, then updates the
metaparameters with a Gaussian random walk at the new latent vector.

Several chains can be advanced in lockstep.  All chains share one generator
and consume it in a fixed order (latent noise, latent uniforms, metaparameter
noise, metaparameter uniforms), so a run is reproducible bit for bit.
Metaparameters are handled in sampling coordinates: natural units except
``a_r``, which is sampled as ``log10(a_r)``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geomodel import (
    META_NAMES,
    GridSpec,
    Metaparameters,
    PcaBasis,
    PriorSpec,
    assemble_geomodel,
    pca_to_field,
)
from .flowproxy import (
    FieldSeries,
    FlowSolverError,
    FluidSpec,
    ObservationSchema,
    SimulationControls,
    WellSpec,
    extract_observations,
    simulate,
)
from .likelihood import ObservedData, log_likelihood

logger = logging.getLogger(__name__)

PCN_MODES = ("sqrt", "printed")


class McmcAbort(RuntimeError):
    """Too many forward-model failures."""


@dataclass(frozen=True)
class McmcConfig:
    beta: float = 0.15
    proposal_stds: tuple | None = None     # sampling coordinates; None -> range / 16
    burn_in: int = 5000
    bins: int = 10
    conv_threshold: float = 0.01
    conv_check_interval: int = 250
    conv_delta: float = 1e-9
    max_iters: int = 20000
    seed: int = 0
    pcn_coefficient: str = "sqrt"
    thin: int = 1
    store_xi: str = "accepted"             # "accepted", "all" or "none"
    stop_on_convergence: bool = True
    max_forward_failures: int = 100
    verify_cache: bool = True
    cache_tol: float = 1e-10

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.pcn_coefficient not in PCN_MODES:
            raise ValueError(f"pcn_coefficient must be one of {PCN_MODES}")
        if self.store_xi not in ("accepted", "all", "none"):
            raise ValueError("store_xi must be 'accepted', 'all' or 'none'")
        if self.proposal_stds is not None and any(s < 0 for s in self.proposal_stds):
            raise ValueError("proposal stds must be >= 0")
        if min(self.thin, self.conv_check_interval, self.max_iters) < 1 or self.burn_in < 0:
            raise ValueError("thin, conv_check_interval and max_iters must be >= 1, burn_in >= 0")

    def stds(self, prior: PriorSpec) -> np.ndarray:
        if self.proposal_stds is not None:
            s = np.asarray(self.proposal_stds, dtype=float)
            if s.shape != (len(META_NAMES),):
                raise ValueError("proposal_stds needs one entry per metaparameter")
            return s
        return default_proposal_stds(prior)


def default_proposal_stds(prior: PriorSpec) -> np.ndarray:
    """One sixteenth of each prior range, in sampling coordinates."""
    r = prior.coord_ranges()
    return (r[:, 1] - r[:, 0]) / 16.0


# -- elementary moves ----------------------------------------------------------

def pcn_coefficient(beta: float, mode: str = "sqrt") -> float:
    if mode == "sqrt":
        return math.sqrt(1.0 - beta * beta)
    if mode == "printed":
        return 1.0 - beta * beta
    raise ValueError(f"unknown pCN mode {mode!r}")


def propose_latent(xi, beta: float, rng, mode: str = "sqrt", eps=None):
    """pCN move ``c * xi + beta * eps``, ``c = sqrt(1 - beta^2)`` by default."""
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    xi = np.asarray(xi, dtype=float)
    if eps is None:
        eps = rng.standard_normal(xi.shape)
    return pcn_coefficient(beta, mode) * xi + beta * eps


def _accept(log_ratio, u):
    # log(u) < log_ratio, with u in [0, 1); ties and u == 0 handled by <=
    with np.errstate(divide="ignore"):
        return np.log(u) <= log_ratio


def accept_latent(loglik_current, loglik_proposed, rng, u=None):
    """Metropolis test ``u <= exp(ll' - ll)`` with one uniform draw."""
    if u is None:
        u = rng.random(np.shape(loglik_current))
    res = _accept(np.asarray(loglik_proposed) - np.asarray(loglik_current), u)
    return bool(res) if np.ndim(res) == 0 else res


def propose_meta(theta, stds, rng, prior: PriorSpec | None = None, z=None):
    """Independent Gaussian perturbation in sampling coordinates.

    ``theta`` is a Metaparameters (then ``prior`` supplies the coordinate map
    and a Metaparameters is returned, or None if the move leaves admissible
    values) or an array already in coordinates.
    """
    stds = np.asarray(stds, dtype=float)
    if np.any(stds < 0):
        raise ValueError("proposal stds must be >= 0")
    if isinstance(theta, Metaparameters):
        prior = prior or PriorSpec()
        u = prior.to_coords(theta.to_array())
        if z is None:
            z = rng.standard_normal(u.shape)
        nat = prior.from_coords(u + stds * z)
        try:
            return Metaparameters.from_array(nat, l_h=theta.l_h)
        except ValueError:
            return None
    u = np.asarray(theta, dtype=float)
    if z is None:
        z = rng.standard_normal(u.shape)
    return u + stds * z


def accept_meta(theta_cur, theta_prop, prior: PriorSpec, loglik_cur, loglik_prop, rng, u=None):
    """Metropolis test including the prior ratio; out-of-support proposals never pass.

    ``theta_cur``/``theta_prop`` are coordinate arrays (last axis = parameters)
    or Metaparameters; a ``None`` proposal is rejected.
    """
    if theta_prop is None:
        return False
    if isinstance(theta_cur, Metaparameters):
        theta_cur = prior.to_coords(theta_cur.to_array())
    if isinstance(theta_prop, Metaparameters):
        theta_prop = prior.to_coords(theta_prop.to_array())
    lp_prop = prior.logpdf_coords(theta_prop)
    lp_cur = prior.logpdf_coords(theta_cur)
    if u is None:
        u = rng.random(np.shape(lp_prop))
    with np.errstate(invalid="ignore"):
        log_ratio = np.where(np.isfinite(lp_prop), lp_prop - lp_cur + np.asarray(loglik_prop)
                             - np.asarray(loglik_cur), -np.inf)
    res = _accept(log_ratio, u) & np.isfinite(lp_prop)
    return bool(res) if np.ndim(res) == 0 else res


# -- convergence ---------------------------------------------------------------

def histogram_density(samples, ranges, bins: int = 10) -> np.ndarray:
    """Per-parameter density on equal bins over ``ranges``; out-of-range samples count in N only."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    ranges = np.asarray(ranges, dtype=float)
    n = samples.shape[0]
    if n == 0:
        raise ValueError("empty sample window")
    out = np.zeros((ranges.shape[0], bins))
    for p, (lo, hi) in enumerate(ranges):
        if hi <= lo:
            continue
        counts, _ = np.histogram(samples[:, p], bins=bins, range=(lo, hi))
        out[p] = counts / (n * (hi - lo) / bins)
    return out


def bin_change(dens_prev, dens_cur, delta: float = 1e-9):
    """Mean relative bin-wise density change; returns (overall, per-parameter)."""
    dens_prev = np.asarray(dens_prev, dtype=float)
    dens_cur = np.asarray(dens_cur, dtype=float)
    rel = np.abs(dens_cur - dens_prev) / (dens_prev + delta)
    return float(rel.mean()), rel.mean(axis=-1)


def _bin_counts(coords, ranges, bins):
    """Histogram counts per parameter for a (C, P) batch of coordinates."""
    P = ranges.shape[0]
    out = np.zeros((P, bins))
    for p in range(P):
        lo, hi = ranges[p]
        if hi <= lo:
            continue
        c, _ = np.histogram(coords[:, p], bins=bins, range=(lo, hi))
        out[p] += c
    return out


# -- records -------------------------------------------------------------------

@dataclass
class ChainState:
    theta: np.ndarray          # (C, 5) sampling coordinates
    xi: np.ndarray             # (C, n_xi)
    loglik: np.ndarray         # (C,)
    iter: int = 0
    accepts_xi: np.ndarray = None
    accepts_theta: np.ndarray = None
    failures: int = 0

    def __post_init__(self):
        C = self.theta.shape[0]
        if self.accepts_xi is None:
            self.accepts_xi = np.zeros(C, dtype=np.int64)
        if self.accepts_theta is None:
            self.accepts_theta = np.zeros(C, dtype=np.int64)

    @property
    def n_chains(self) -> int:
        return self.theta.shape[0]

    def copy(self) -> "ChainState":
        return ChainState(self.theta.copy(), self.xi.copy(), self.loglik.copy(), self.iter,
                          self.accepts_xi.copy(), self.accepts_theta.copy(), self.failures)


@dataclass
class ChainRecord:
    """Thinned trace of a (possibly multi-chain) run.

    Arrays are indexed ``[record, chain, ...]``.  ``theta`` is in natural units.
    Accepted latent vectors are kept as (iteration, chain, xi) triples so the
    state at any iteration can be rebuilt.
    """

    iters: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    accepted_xi: list = field(default_factory=list)
    accepted_theta: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    xi_iters: list = field(default_factory=list)
    xi_chain: list = field(default_factory=list)
    xi_values: list = field(default_factory=list)
    xi_initial: np.ndarray | None = None
    conv_iters: list = field(default_factory=list)
    conv_metric: list = field(default_factory=list)
    conv_per_param: list = field(default_factory=list)
    converged_at: int | None = None
    n_iter: int = 0
    accepts_xi: np.ndarray | None = None
    accepts_theta: np.ndarray | None = None
    forward_failures: int = 0
    burn_in: int = 0

    def arrays(self) -> dict:
        return {
            "iters": np.asarray(self.iters, dtype=np.int64),
            "theta": np.asarray(self.theta, dtype=float),
            "accepted_xi": np.asarray(self.accepted_xi, dtype=bool),
            "accepted_theta": np.asarray(self.accepted_theta, dtype=bool),
            "loglik": np.asarray(self.loglik, dtype=float),
        }

    @property
    def acceptance_xi(self) -> np.ndarray:
        return self.accepts_xi / max(self.n_iter, 1)

    @property
    def acceptance_theta(self) -> np.ndarray:
        return self.accepts_theta / max(self.n_iter, 1)

    @property
    def acceptance_overall(self) -> np.ndarray:
        """Accepted proposals over all proposals (two per iteration)."""
        return (self.accepts_xi + self.accepts_theta) / max(2 * self.n_iter, 1)

    def posterior_theta(self, chain: int | None = None) -> np.ndarray:
        """Post-burn-in recorded metaparameters, natural units, chains pooled unless given."""
        a = self.arrays()
        keep = a["iters"] > self.burn_in
        th = a["theta"][keep]
        if chain is not None:
            return th[:, chain]
        return th.reshape(-1, th.shape[-1])

    def xi_at(self, iteration: int, chain: int = 0) -> np.ndarray:
        """Latent vector of ``chain`` after ``iteration`` (needs stored xi)."""
        if self.xi_initial is None:
            raise ValueError("latent vectors were not stored")
        cur = self.xi_initial[chain]
        for it, c, v in zip(self.xi_iters, self.xi_chain, self.xi_values):
            if it > iteration:
                break
            if c == chain:
                cur = v
        return np.array(cur)

    def posterior_states(self, n: int, rng, chain: int = 0):
        """``n`` post-burn-in (theta, xi) states drawn uniformly from recorded iterations."""
        a = self.arrays()
        idx = np.flatnonzero(a["iters"] > self.burn_in)
        if idx.size == 0:
            raise ValueError("no post-burn-in records")
        pick = np.sort(rng.choice(idx, size=min(n, idx.size), replace=False))
        return [(a["theta"][r, chain], self.xi_at(int(a["iters"][r]), chain)) for r in pick]


# -- forward handles -------------------------------------------------------------

class FlowForward:
    """Metaparameters + latent vector -> observation vector through the flow proxy."""

    batched = False

    def __init__(self, basis: PcaBasis, grid: GridSpec, wells: Sequence[WellSpec], fluid: FluidSpec,
                 schema: ObservationSchema, controls: SimulationControls | None = None,
                 schedule: Sequence[float] | None = None):
        self.basis = basis
        self.grid = grid
        self.wells = list(wells)
        self.fluid = fluid
        self.schema = schema
        self.controls = controls or SimulationControls()
        self.schedule = tuple(schedule) if schedule is not None else schema.times

    def geomodel(self, theta, xi):
        th = theta if isinstance(theta, Metaparameters) else Metaparameters.from_array(theta)
        return assemble_geomodel(pca_to_field(self.basis, xi), th)

    def field_series(self, theta, xi) -> FieldSeries:
        return simulate(self.geomodel(theta, xi), self.grid, self.wells, self.fluid,
                        self.schedule, self.controls)

    def __call__(self, theta, xi) -> np.ndarray:
        return extract_observations(self.field_series(theta, xi), self.schema, self.grid).values


_FORWARD_ERRORS = (FlowSolverError, ArithmeticError, ValueError, np.linalg.LinAlgError)


def _evaluate(forward, theta_nat, xi, mask):
    """Forward on the masked chains.

    Returns predictions (a list with None where not evaluated or failed, or a
    ``_Batch`` for batched forwards) and a failure mask.
    """
    idx = np.flatnonzero(mask)
    failed = np.zeros(theta_nat.shape[0], dtype=bool)
    if getattr(forward, "batched", False):
        if idx.size == 0:
            return _Batch(np.zeros((0, 0)), idx, np.zeros(0, bool)), failed
        out = np.asarray(forward(theta_nat[idx], xi[idx]), dtype=float)
        ok = np.all(np.isfinite(out), axis=1)
        failed[idx[~ok]] = True
        return _Batch(out, idx, ok), failed
    preds = [None] * theta_nat.shape[0]
    for c in idx:
        try:
            d = np.asarray(forward(theta_nat[c], xi[c]), dtype=float)
        except _FORWARD_ERRORS as exc:
            logger.debug("forward failure: %s", exc)
            failed[c] = True
            continue
        if np.all(np.isfinite(d)):
            preds[c] = d
        else:
            failed[c] = True
    return preds, failed


class _Batch:
    """Predictions from one batched forward call; row n belongs to chain ``idx[n]``."""

    def __init__(self, out, idx, ok):
        self.out, self.idx, self.ok = out, idx, ok


def _loglik_rows(loglik_fn, preds, mask):
    out = np.full(len(mask), -np.inf)
    if isinstance(preds, _Batch):
        rows = preds.idx[preds.ok]
        if rows.size:
            out[rows] = np.asarray(loglik_fn(preds.out[preds.ok]), dtype=float).reshape(-1)
        return out
    for c, d in enumerate(preds):
        if mask[c] and d is not None:
            out[c] = float(np.asarray(loglik_fn(d)).reshape(()))
    return out


def make_loglik(d_obs: ObservedData) -> Callable:
    """Log-likelihood of one prediction vector or of each row of a 2-D stack."""
    return lambda pred: log_likelihood(d_obs, pred)


# -- trace output ----------------------------------------------------------------

def trace_header(n_chains: int) -> list[str]:
    cols = ["iter"] + (["chain"] if n_chains > 1 else []) + list(META_NAMES)
    return cols + ["accepted_xi", "accepted_theta", "loglik"]


def trace_rows(it: int, theta_nat, acc_xi, acc_th, loglik):
    C = theta_nat.shape[0]
    for c in range(C):
        row = [it] + ([c] if C > 1 else [])
        row += [repr(float(v)) for v in theta_nat[c]]
        row += [int(acc_xi[c]), int(acc_th[c]), repr(float(loglik[c]))]
        yield row


class TraceWriter:
    """Append-only CSV stream of recorded iterations."""

    def __init__(self, path, n_chains: int, header_lines: Sequence[str] = (), append: bool = False):
        self.path = Path(path)
        self.n_chains = n_chains
        self.fh = open(self.path, "a" if append else "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        if not append:
            for line in header_lines:
                self.fh.write(f"# {line}\n")
            self.writer.writerow(trace_header(n_chains))

    def write(self, it, theta_nat, acc_xi, acc_th, loglik):
        self.writer.writerows(trace_rows(it, theta_nat, acc_xi, acc_th, loglik))

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def truncate_trace(path, last_iter: int) -> None:
    """Drop trace rows after ``last_iter`` so a resumed run can append."""
    path = Path(path)
    lines = path.read_text().splitlines(keepends=True)
    keep = []
    header_seen = False
    for line in lines:
        if line.startswith("#"):
            keep.append(line)
        elif not header_seen:
            keep.append(line)
            header_seen = True
        elif int(line.split(",", 1)[0]) <= last_iter:
            keep.append(line)
    path.write_text("".join(keep))


# -- checkpointing ---------------------------------------------------------------

def save_checkpoint(path, state: ChainState, record: ChainRecord, rng, extra: dict | None = None) -> None:
    """Full sampler state, record and generator state in one ``.npz`` snapshot."""
    arrays = record.arrays()
    meta = {
        "rng": rng.bit_generator.state,
        "iter": state.iter,
        "failures": state.failures,
        "conv_iters": record.conv_iters,
        "conv_metric": record.conv_metric,
        "converged_at": record.converged_at,
        "forward_failures": record.forward_failures,
        "burn_in": record.burn_in,
        "extra": extra or {},
    }
    xi_vals = np.asarray(record.xi_values, dtype=float) if record.xi_values else np.zeros((0, state.xi.shape[1]))
    with open(path, "wb") as fh:
        np.savez(
            fh,
            theta=state.theta, xi=state.xi, loglik=state.loglik,
            accepts_xi=state.accepts_xi, accepts_theta=state.accepts_theta,
            rec_iters=arrays["iters"], rec_theta=arrays["theta"].reshape(-1, *state.theta.shape),
            rec_acc_xi=arrays["accepted_xi"].reshape(-1, state.n_chains),
            rec_acc_th=arrays["accepted_theta"].reshape(-1, state.n_chains),
            rec_loglik=arrays["loglik"].reshape(-1, state.n_chains),
            xi_iters=np.asarray(record.xi_iters, dtype=np.int64),
            xi_chain=np.asarray(record.xi_chain, dtype=np.int64),
            xi_values=xi_vals,
            xi_initial=record.xi_initial if record.xi_initial is not None else np.zeros((0, 0)),
            conv_per_param=np.asarray(record.conv_per_param, dtype=float).reshape(-1, len(META_NAMES)),
            meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        )


def load_checkpoint(path):
    """Return ``(state, record, rng)`` from a snapshot written by ``save_checkpoint``."""
    z = np.load(path)
    meta = json.loads(bytes(z["meta"]).decode())
    state = ChainState(z["theta"], z["xi"], z["loglik"], meta["iter"], z["accepts_xi"],
                       z["accepts_theta"], meta["failures"])
    rec = ChainRecord(
        iters=z["rec_iters"].tolist(),
        theta=list(z["rec_theta"]),
        accepted_xi=list(z["rec_acc_xi"]),
        accepted_theta=list(z["rec_acc_th"]),
        loglik=list(z["rec_loglik"]),
        xi_iters=z["xi_iters"].tolist(),
        xi_chain=z["xi_chain"].tolist(),
        xi_values=list(z["xi_values"]),
        xi_initial=z["xi_initial"] if z["xi_initial"].size else None,
        conv_iters=meta["conv_iters"],
        conv_metric=meta["conv_metric"],
        conv_per_param=list(z["conv_per_param"]),
        converged_at=meta["converged_at"],
        forward_failures=meta["forward_failures"],
        burn_in=meta["burn_in"],
    )
    rec.n_iter = state.iter
    rec.accepts_xi = state.accepts_xi.copy()
    rec.accepts_theta = state.accepts_theta.copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return state, rec, rng


# -- driver ------------------------------------------------------------------------

def initial_state(prior: PriorSpec, n_latent: int, rng, n_chains: int = 1, theta0=None, xi0=None
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Prior draws (or given values) for the starting coordinates and latent vectors."""
    if theta0 is None:
        nat = np.stack([np.atleast_1d(d.sample(rng, n_chains)) for d in prior.dists()], axis=-1)
    else:
        nat = np.broadcast_to(np.asarray(theta0, dtype=float), (n_chains, len(META_NAMES)))
    coords = prior.to_coords(nat)
    if xi0 is None:
        xi = rng.standard_normal((n_chains, n_latent))
    else:
        xi = np.broadcast_to(np.asarray(xi0, dtype=float), (n_chains, n_latent)).copy()
    return coords, xi


def run_chain(cfg: McmcConfig, prior: PriorSpec, basis, forward, d_obs, *, n_chains: int = 1,
              theta0=None, xi0=None, loglik_fn: Callable | None = None, trace: TraceWriter | None = None,
              checkpoint_path=None, checkpoint_interval: int | None = None, resume=None,
              progress_every: int = 0, callback: Callable | None = None) -> ChainRecord:
    """Run Algorithm-1 style hierarchical sampling.

    Parameters
    ----------
    basis : PcaBasis or int
        Only its latent dimension is used here; an int gives it directly.
    forward : callable
        ``forward(theta_natural, xi) -> predictions``.  With ``forward.batched``
        set, it receives stacked ``(m, 5)`` and ``(m, n_xi)`` arrays.
    d_obs : ObservedData or None
        Used through ``loglik_fn`` (defaults to the Gaussian log-likelihood).
    resume : path or tuple, optional
        Checkpoint file or ``(state, record, rng)`` to continue from.
    callback : callable, optional
        ``callback(iteration, state)`` after every iteration, e.g. to
        accumulate running moments without storing latent vectors.

    Returns
    -------
    ChainRecord
    """
    n_latent = basis if isinstance(basis, (int, np.integer)) else basis.n_latent
    if loglik_fn is None:
        if d_obs is None:
            raise ValueError("need observed data or a log-likelihood function")
        loglik_fn = make_loglik(d_obs)
    stds = cfg.stds(prior)
    ranges = prior.coord_ranges()
    zero_range = ranges[:, 1] <= ranges[:, 0]
    if np.any((stds <= 0) & ~zero_range):
        raise ValueError("proposal stds must be > 0 for parameters with a non-degenerate range")
    coef = pcn_coefficient(cfg.beta, cfg.pcn_coefficient)

    if resume is not None:
        state, record, rng = load_checkpoint(resume) if not isinstance(resume, tuple) else resume
        if state.theta.shape[0] != n_chains:
            n_chains = state.theta.shape[0]
        counts, prev_density, n_post = _replay_counts(record, prior, ranges, cfg)
    else:
        rng = np.random.default_rng(cfg.seed)
        coords, xi = initial_state(prior, n_latent, rng, n_chains, theta0, xi0)
        if not np.all(np.isfinite(prior.logpdf_coords(coords))):
            raise ValueError("initial metaparameters lie outside the prior support")
        preds, failed = _evaluate(forward, prior.from_coords(coords), xi, np.ones(n_chains, bool))
        if failed.any():
            raise McmcAbort("forward model failed at the initial state")
        ll = _loglik_rows(loglik_fn, preds, np.ones(n_chains, bool))
        state = ChainState(coords, xi, ll)
        record = ChainRecord(burn_in=cfg.burn_in)
        if cfg.store_xi != "none":
            record.xi_initial = xi.copy()
        counts = np.zeros((len(META_NAMES), cfg.bins))
        n_post = 0
        prev_density = None

    C = n_chains
    theta_nat = prior.from_coords(state.theta)
    all_on = np.ones(C, dtype=bool)

    while state.iter < cfg.max_iters:
        it = state.iter + 1
        # draws in a fixed order, whatever happens to the proposals
        eps = rng.standard_normal(state.xi.shape)
        u1 = rng.random(C)
        z = rng.standard_normal(state.theta.shape)
        u2 = rng.random(C)

        # latent sweep at the current metaparameters
        xi_prop = coef * state.xi + cfg.beta * eps
        preds, failed = _evaluate(forward, theta_nat, xi_prop, all_on)
        ll_prop = _loglik_rows(loglik_fn, preds, all_on)
        acc_xi = _accept(ll_prop - state.loglik, u1) & ~failed
        state.xi[acc_xi] = xi_prop[acc_xi]
        state.loglik[acc_xi] = ll_prop[acc_xi]
        state.accepts_xi += acc_xi
        nfail = int(failed.sum())

        # metaparameter sweep at the updated latent vector
        th_prop = state.theta + stds * z
        lp_prop = prior.logpdf_coords(th_prop)
        inside = np.isfinite(lp_prop)
        nat_prop = prior.from_coords(th_prop)
        preds, failed = _evaluate(forward, nat_prop, state.xi, inside)
        ll_prop = _loglik_rows(loglik_fn, preds, inside)
        lp_cur = prior.logpdf_coords(state.theta)
        with np.errstate(invalid="ignore"):
            log_ratio = np.where(inside & ~failed, lp_prop - lp_cur + ll_prop - state.loglik, -np.inf)
        acc_th = _accept(log_ratio, u2) & inside & ~failed
        state.theta[acc_th] = th_prop[acc_th]
        theta_nat[acc_th] = nat_prop[acc_th]
        state.loglik[acc_th] = ll_prop[acc_th]
        state.accepts_theta += acc_th
        nfail += int(failed.sum())

        if nfail:
            state.failures += nfail
            record.forward_failures = state.failures
            logger.warning("iteration %d: %d forward failure(s), %d in total", it, nfail, state.failures)
            if state.failures > cfg.max_forward_failures:
                raise McmcAbort(f"{state.failures} forward failures exceed the limit "
                                f"{cfg.max_forward_failures}")
        state.iter = it

        if cfg.store_xi == "all" or (cfg.store_xi == "accepted" and acc_xi.any()):
            for c in (range(C) if cfg.store_xi == "all" else np.flatnonzero(acc_xi)):
                record.xi_iters.append(it)
                record.xi_chain.append(int(c))
                record.xi_values.append(state.xi[c].copy())

        if it % cfg.thin == 0 or it == cfg.max_iters:
            record.iters.append(it)
            record.theta.append(theta_nat.copy())
            record.accepted_xi.append(acc_xi.copy())
            record.accepted_theta.append(acc_th.copy())
            record.loglik.append(state.loglik.copy())
            if trace is not None:
                trace.write(it, theta_nat, acc_xi, acc_th, state.loglik)

        if it > cfg.burn_in:
            counts += _bin_counts(state.theta, ranges, cfg.bins)
            n_post += C
            if (it - cfg.burn_in) % cfg.conv_check_interval == 0:
                density = counts / (n_post * np.where(zero_range, 1.0, (ranges[:, 1] - ranges[:, 0]) / cfg.bins))[:, None]
                if cfg.verify_cache:
                    _verify_cache(forward, loglik_fn, theta_nat, state, cfg.cache_tol)
                if prev_density is not None:
                    metric, per = bin_change(prev_density, density, cfg.conv_delta)
                    record.conv_iters.append(it)
                    record.conv_metric.append(metric)
                    record.conv_per_param.append(per)
                    logger.info("iteration %d: convergence metric %.4g", it, metric)
                    if metric < cfg.conv_threshold and record.converged_at is None:
                        record.converged_at = it
                prev_density = density

        record.n_iter = state.iter
        record.accepts_xi = state.accepts_xi.copy()
        record.accepts_theta = state.accepts_theta.copy()
        if callback is not None:
            callback(it, state)

        if checkpoint_path is not None and checkpoint_interval and it % checkpoint_interval == 0:
            save_checkpoint(checkpoint_path, state, record, rng)
        if progress_every and it % progress_every == 0:
            logger.info("iteration %d: acceptance xi %.3f theta %.3f", it,
                        record.acceptance_xi.mean(), record.acceptance_theta.mean())
        if record.converged_at is not None and cfg.stop_on_convergence:
            break

    record.n_iter = state.iter
    record.accepts_xi = state.accepts_xi.copy()
    record.accepts_theta = state.accepts_theta.copy()
    record.final_state = state
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state, record, rng)
    return record


def _verify_cache(forward, loglik_fn, theta_nat, state: ChainState, tol: float):
    preds, failed = _evaluate(forward, theta_nat, state.xi, np.ones(state.n_chains, bool))
    ll = _loglik_rows(loglik_fn, preds, ~failed)
    bad = np.abs(ll - state.loglik) > tol * np.maximum(1.0, np.abs(state.loglik))
    if np.any(bad | failed):
        raise RuntimeError(f"cached log-likelihood out of sync at iteration {state.iter}: "
                           f"{state.loglik[bad]} vs {ll[bad]}")


def _replay_counts(record: ChainRecord, prior: PriorSpec, ranges, cfg: McmcConfig):
    """Rebuild post-burn-in histogram counts from a full-resolution record."""
    if cfg.thin != 1:
        raise ValueError("resuming requires thin=1 so convergence histograms can be rebuilt")
    a = record.arrays()
    counts = np.zeros((len(META_NAMES), cfg.bins))
    prev = None
    n_post = 0
    width = np.where(ranges[:, 1] > ranges[:, 0], (ranges[:, 1] - ranges[:, 0]) / cfg.bins, 1.0)
    for r, it in enumerate(a["iters"]):
        if it <= cfg.burn_in:
            continue
        counts += _bin_counts(prior.to_coords(a["theta"][r]), ranges, cfg.bins)
        n_post += a["theta"].shape[1]
        if (it - cfg.burn_in) % cfg.conv_check_interval == 0:
            prev = counts / (n_post * width[:, None])
    return counts, prev, n_post


def convergence_metric(record: ChainRecord, prior: PriorSpec, bins: int = 10, window: int = 250,
                       burn_in: int | None = None, delta: float = 1e-9):
    """Bin-wise relative density change between the last two checkpoints.

    Checkpoints are every ``window`` recorded post-burn-in iterations, each
    using all post-burn-in samples up to that point.

    Returns
    -------
    (float, ndarray)
        Overall metric and per-parameter values.
    """
    traj = convergence_trajectory(record, prior, bins, window, burn_in, delta)
    if not traj:
        raise ValueError("need at least two post-burn-in windows")
    return traj[-1][1], traj[-1][2]


def convergence_trajectory(record: ChainRecord, prior: PriorSpec, bins: int = 10, window: int = 250,
                           burn_in: int | None = None, delta: float = 1e-9):
    """List of (iteration, metric, per-parameter) at each checkpoint after the first."""
    a = record.arrays()
    burn = record.burn_in if burn_in is None else burn_in
    keep = a["iters"] > burn
    its = a["iters"][keep]
    th = a["theta"][keep]
    if th.ndim == 3:
        th = th.reshape(th.shape[0], -1, th.shape[-1])
    ranges = prior.coord_ranges()
    out = []
    prev = None
    for end in range(window, its.size + 1, window):
        samples = prior.to_coords(th[:end].reshape(-1, th.shape[-1]))
        dens = histogram_density(samples, ranges, bins)
        if prev is not None:
            m, per = bin_change(prev, dens, delta)
            out.append((int(its[end - 1]), m, per))
        prev = dens
    return out


def write_summary(path, record: ChainRecord, cfg: McmcConfig, extra: dict | None = None) -> None:
    summary = {
        "iterations": record.n_iter,
        "burn_in": cfg.burn_in,
        "acceptance_xi": record.acceptance_xi.tolist(),
        "acceptance_theta": record.acceptance_theta.tolist(),
        "acceptance_overall": record.acceptance_overall.tolist(),
        "accepted_xi_total": int(np.sum(record.accepts_xi)),
        "forward_failures": record.forward_failures,
        "converged_at": record.converged_at,
        "convergence": [{"iter": i, "metric": m} for i, m in zip(record.conv_iters, record.conv_metric)],
        "config": asdict(cfg),
    }
    if extra:
        summary.update(extra)
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
