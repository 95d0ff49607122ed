"""Total-effect Sobol indices with a grouped latent factor.

Sample matrices A and B come from one scrambled Sobol sequence (first and
second half of the columns).  For each factor group i, A_B^i is A with the
group's columns taken from B.  Total effects use Jansen's estimator

    S_T,i = mean((f(A) - f(A_B^i))^2) / (2 Var(f)),

with Var(f) pooled over f(A) and f(B).  First-order indices use Saltelli's
``mean(f(B) (f(A_B^i) - f(A))) / Var(f)``.  Standard errors are bootstrap
estimates over the base rows.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm, qmc

from .geomodel import META_NAMES, PriorSpec
from .flowproxy import ObservationSchema

logger = logging.getLogger(__name__)

FACTOR_NAMES = META_NAMES + ("xi",)


@dataclass(frozen=True)
class FactorGroup:
    """A block of unit-hypercube columns and its transform to factor values."""

    name: str
    size: int
    ppf: Callable          # (n, size) uniforms -> (n, size) factor values


@dataclass
class SobolResult:
    factors: tuple
    targets: tuple
    total_raw: np.ndarray       # (n_targets, n_factors)
    stderr: np.ndarray
    variance: np.ndarray        # (n_targets,)
    n_base: int
    n_evals: int
    degenerate: np.ndarray = field(default=None)
    first_raw: np.ndarray = field(default=None)   # first-order estimates, same layout

    @property
    def total(self) -> np.ndarray:
        """Indices clamped to [0, inf); NaN where the output variance vanishes."""
        return np.clip(self.total_raw, 0.0, None)


def _uniforms(n_base: int, dim: int, seed) -> np.ndarray:
    if n_base & (n_base - 1):
        logger.warning("n_base=%d is not a power of two; Sobol balance is lost", n_base)
    sampler = qmc.Sobol(d=2 * dim, scramble=True, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        u = sampler.random(n_base)
    # keep strictly inside (0, 1) for inverse-CDF transforms
    return np.clip(u, 1e-12, 1 - 1e-12)


def sobol_total_effects(func: Callable, groups: Sequence[FactorGroup], n_base: int, seed=0,
                        n_bootstrap: int = 200, targets: Sequence[str] | None = None) -> SobolResult:
    """Generic grouped total-effect estimator.

    Parameters
    ----------
    func : callable
        Maps a list of per-group value arrays (each ``(n, size)``) to outputs
        ``(n,)`` or ``(n, n_targets)``.
    groups : sequence of FactorGroup
    n_base : int
        Rows of A and B; total evaluations ``n_base * (len(groups) + 2)``.
    """
    if n_base < 2:
        raise ValueError("n_base must be >= 2")
    sizes = [g.size for g in groups]
    dim = sum(sizes)
    u = _uniforms(n_base, dim, seed)
    uA, uB = u[:, :dim], u[:, dim:]
    bounds = np.cumsum([0] + sizes)

    def values(uu):
        return [g.ppf(uu[:, bounds[i]:bounds[i + 1]]) for i, g in enumerate(groups)]

    def run(uu):
        out = np.asarray(func(values(uu)), dtype=float)
        return out[:, None] if out.ndim == 1 else out

    fA = run(uA)
    fB = run(uB)
    fAB = []
    for i in range(len(groups)):
        uAB = uA.copy()
        uAB[:, bounds[i]:bounds[i + 1]] = uB[:, bounds[i]:bounds[i + 1]]
        fAB.append(run(uAB))
    fAB = np.stack(fAB)                       # (k, n, T)

    var = np.var(np.concatenate([fA, fB]), axis=0, ddof=1)
    degenerate = ~(var > 0)
    if degenerate.any():
        logger.warning("zero output variance for %d target(s); indices undefined", int(degenerate.sum()))
    sq = (fA[None] - fAB) ** 2                 # (k, n, T)
    with np.errstate(invalid="ignore", divide="ignore"):
        st = (0.5 * sq.mean(axis=1) / var).T    # (T, k)
        rng = np.random.default_rng(np.random.SeedSequence([0 if seed is None else int(seed), 1]))
        boot = np.empty((n_bootstrap,) + st.shape)
        for b in range(n_bootstrap):
            r = rng.integers(0, n_base, n_base)
            vb = np.var(np.concatenate([fA[r], fB[r]]), axis=0, ddof=1)
            boot[b] = (0.5 * sq[:, r].mean(axis=1) / vb).T
        se = boot.std(axis=0, ddof=1) if n_bootstrap > 1 else np.full(st.shape, np.nan)
        s1 = ((fB[None] * (fAB - fA[None])).mean(axis=1) / var).T
    st[degenerate] = np.nan
    se[degenerate] = np.nan
    s1[degenerate] = np.nan
    names = tuple(g.name for g in groups)
    tnames = tuple(targets) if targets is not None else tuple(f"y{t}" for t in range(st.shape[0]))
    return SobolResult(names, tnames, st, se, var, n_base, n_base * (len(groups) + 2), degenerate, s1)


# -- the history-matching factors ------------------------------------------------

def prior_groups(prior: PriorSpec, n_latent: int, group_latent: bool = True) -> list[FactorGroup]:
    """Five metaparameter factors plus the latent vector (one group or one per component)."""
    groups = [FactorGroup(name, 1, (lambda u, d=d: np.asarray(d.ppf(u), dtype=float)))
              for name, d in zip(META_NAMES, prior.dists())]
    if group_latent:
        groups.append(FactorGroup("xi", n_latent, norm.ppf))
    else:
        groups += [FactorGroup(f"xi{j}", 1, norm.ppf) for j in range(n_latent)]
    return groups


@dataclass(frozen=True)
class SobolSpec:
    n_base: int = 256
    targets: ObservationSchema | None = None
    cutoff: float = 0.05
    seed: int = 0
    n_bootstrap: int = 200
    group_latent: bool = True

    def __post_init__(self):
        if self.n_base < 64:
            raise ValueError("n_base must be >= 64")


def target_labels(schema: ObservationSchema) -> list[str]:
    return [f"{e.well}:L{e.layer + 1}:t{e.time:g}:{e.quantity}" for e in schema.entries]


def total_effect_indices(spec: SobolSpec, prior: PriorSpec, basis, forward) -> SobolResult:
    """Total effects of the metaparameters and grouped latent vector on each target.

    ``forward(theta_natural, xi)`` must return the target values in
    ``spec.targets`` order.
    """
    n_latent = basis if isinstance(basis, (int, np.integer)) else basis.n_latent
    groups = prior_groups(prior, n_latent, spec.group_latent)

    def func(vals):
        theta = np.hstack(vals[:5])
        xi = np.hstack(vals[5:])
        if getattr(forward, "batched", False):
            return forward(theta, xi)
        return np.array([forward(theta[r], xi[r]) for r in range(theta.shape[0])])

    labels = target_labels(spec.targets) if spec.targets is not None else None
    return sobol_total_effects(func, groups, spec.n_base, spec.seed, spec.n_bootstrap, labels)


@dataclass
class FactorRanking:
    important: list
    negligible: list


def rank_factors(indices, cutoff: float = 0.05, names: Sequence[str] | None = None) -> FactorRanking:
    """Split factors at ``cutoff`` (an index equal to the cutoff counts as important).

    Each group is sorted by decreasing index.
    """
    indices = np.asarray(indices, dtype=float)
    names = list(names) if names is not None else [f"u{i + 1}" for i in range(indices.size)]
    order = sorted(range(indices.size), key=lambda i: (-np.nan_to_num(indices[i], nan=-np.inf), i))
    imp = [(names[i], float(indices[i])) for i in order if indices[i] >= cutoff]
    neg = [(names[i], float(indices[i])) for i in order if not indices[i] >= cutoff]
    if not imp:
        warnings.warn("no factor reaches the importance cutoff", RuntimeWarning, stacklevel=2)
    return FactorRanking(imp, neg)


def write_sobol_csv(path, result: SobolResult, cutoff: float = 0.05, header: Sequence[str] = ()) -> None:
    """Rows of ``target, factor, S_T, S_T_raw, stderr, important``."""
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "factor", "S_T", "S_T_raw", "stderr", "important"])
        tot = result.total
        for t, tname in enumerate(result.targets):
            for f, fname in enumerate(result.factors):
                w.writerow([tname, fname, repr(float(tot[t, f])), repr(float(result.total_raw[t, f])),
                            repr(float(result.stderr[t, f])), int(bool(tot[t, f] >= cutoff))])


def ishigami(x, a: float = 7.0, b: float = 0.1) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.sin(x[:, 0]) + a * np.sin(x[:, 1]) ** 2 + b * x[:, 2] ** 4 * np.sin(x[:, 0])


def ishigami_groups() -> list[FactorGroup]:
    return [FactorGroup(f"x{i + 1}", 1, lambda u: np.pi * (2 * u - 1)) for i in range(3)]


def ishigami_total_indices(a: float = 7.0, b: float = 0.1) -> np.ndarray:
    """Closed-form total effects of the Ishigami function with U(-pi, pi) inputs."""
    pi = np.pi
    v1 = 0.5 * (1 + b * pi ** 4 / 5) ** 2
    v2 = a ** 2 / 8
    v13 = b ** 2 * pi ** 8 * (1 / 18 - 1 / 50)
    var = v1 + v2 + v13
    return np.array([(v1 + v13) / var, v2 / var, v13 / var])
