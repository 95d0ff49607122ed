"""Command-line driver: ``co2hm {basis,truth,mcmc,sobol,analyze}``.

Every command reads one JSON config (the bundled defaults, an optional
``--scale`` overlay, then ``--config``), writes into ``--out`` and stamps each
text output with the tool version, a hash of the resolved config and the seed.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import flowproxy as fp
from . import geomodel as gm
from . import likelihood as lk
from . import mcmc
from . import sensitivity as sa

logger = logging.getLogger("co2hm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

# offsets added to the global seed, one stream per stage
SEED_OFFSETS = {"basis": 0, "truth": 1, "noise": 2, "mcmc": 3, "sobol": 4, "analysis": 5}


class ConfigError(ValueError):
    """Invalid or incomplete configuration, or missing inputs."""


# -- configuration -------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "prior":
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def default_config() -> dict:
    text = resources.files("co2hm").joinpath("data/default_config.json").read_text()
    return json.loads(text)


def load_config(path=None, scale: str = "desk", seed: int | None = None,
                pcn_coefficient: str | None = None) -> dict:
    """Defaults, then the scale overlay, then the user file, then flag overrides."""
    cfg = default_config()
    scales = cfg.pop("scales", {})
    if scale != "desk":
        if scale not in scales:
            raise ConfigError(f"unknown scale {scale!r}")
        cfg = _merge(cfg, scales[scale])
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        user.pop("scales", None)
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if pcn_coefficient is not None:
        cfg["mcmc"]["pcn_coefficient"] = pcn_coefficient
    cfg["scale"] = scale
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def stage_seed(cfg: dict, stage: str) -> int:
    stage = "analysis" if stage == "analyze" else stage
    section = cfg.get(stage, {}) if isinstance(cfg.get(stage), dict) else {}
    if section.get("seed") is not None:
        return int(section["seed"])
    return int(cfg.get("seed", 0)) + SEED_OFFSETS[stage]


def provenance(cfg: dict, stage: str) -> dict:
    return {"tool": "co2hm", "version": __version__, "config_sha256": config_hash(cfg),
            "seed": stage_seed(cfg, stage), "command": stage}


def header_lines(cfg: dict, stage: str) -> list[str]:
    p = provenance(cfg, stage)
    return [f"co2hm {p['version']}", f"command {stage}", f"config_sha256 {p['config_sha256']}",
            f"seed {p['seed']}"]


def _kwargs(cls, section: dict, skip=()) -> dict:
    names = {f.name for f in fields(cls)}
    extra = set(section) - names - set(skip)
    if extra:
        raise ConfigError(f"unknown {cls.__name__} key(s): {sorted(extra)}")
    return {k: v for k, v in section.items() if k not in skip}


class Setup:
    """Model objects resolved from a config."""

    def __init__(self, cfg: dict):
        try:
            self.grid = gm.GridSpec(**_kwargs(gm.GridSpec, cfg["grid"]))
            self.vario = gm.VariogramSpec(**_kwargs(gm.VariogramSpec, cfg["variogram"]))
            self.prior = gm.prior_from_mapping(cfg["prior"])
            self.fluid = fp.FluidSpec(**_kwargs(fp.FluidSpec, cfg.get("fluid", {})))
            self.injectors, self.observers = self._wells(cfg["wells"])
            sim = dict(cfg.get("simulation", {}))
            mult = sim.pop("boundary_pv_multiplier", 1.0)
            if mult == "analytic":
                rate = sum(w.rate for w in self.injectors)
                mult = fp.boundary_multiplier(fp.scaled_surroundings_pore_volume(rate), self.grid,
                                              sim.get("boundary_ref_porosity", 0.1))
            self.controls = fp.SimulationControls(boundary_pv_multiplier=float(mult),
                                                  **_kwargs(fp.SimulationControls, sim))
            obs = cfg["observations"]
            self.schema = fp.ObservationSchema.monitoring(
                self.observers, self.grid, tuple(obs["times"]), obs.get("saturation_layers"),
                tuple(obs.get("pressure_layers", (0,))))
            self.budget = lk.ErrorBudget(**_kwargs(lk.ErrorBudget, cfg["error_budget"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def _wells(self, spec: dict):
        inj, obs = fp.default_wells(self.grid, float(spec.get("rate_per_well", 0.25)))
        if spec.get("injectors"):
            inj = [fp.WellSpec(w["name"], "injector", int(w["i"]), int(w["j"]), float(w["rate"]))
                   for w in spec["injectors"]]
        if spec.get("observers"):
            obs = [fp.WellSpec(w["name"], "observer", int(w["i"]), int(w["j"])) for w in spec["observers"]]
        for w in inj + obs:
            w.check(self.grid)
        return inj, obs

    def forward(self, basis: gm.PcaBasis, schema=None, schedule=None) -> mcmc.FlowForward:
        return mcmc.FlowForward(basis, self.grid, self.injectors, self.fluid, schema or self.schema,
                                self.controls, schedule)


def _mcmc_config(cfg: dict) -> tuple[mcmc.McmcConfig, int]:
    sec = dict(cfg["mcmc"])
    interval = int(sec.pop("checkpoint_interval", 1000))
    sec.pop("seed", None)
    if sec.get("proposal_stds") is not None:
        sec["proposal_stds"] = tuple(float(s) for s in sec["proposal_stds"])
    try:
        mc = mcmc.McmcConfig(seed=stage_seed(cfg, "mcmc"), **_kwargs(mcmc.McmcConfig, sec))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid mcmc section: {exc}") from exc
    return mc, interval


# -- paths -----------------------------------------------------------------------

def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {what}: {path} (run the earlier stage first)")
    return path


def _load_basis(out: Path) -> gm.PcaBasis:
    meta = json.loads(_require(out / "basis.json", "basis metadata").read_text())
    return gm.load_basis(_require(out / "basis.bin", "basis"), meta.get("energy_fraction", 1.0))


# -- commands ------------------------------------------------------------------------

def cmd_basis(cfg: dict, out: Path) -> gm.PcaBasis:
    setup = Setup(cfg)
    sec = cfg["basis"]
    n_r = int(sec["n_realizations"])
    if n_r < 2:
        raise ConfigError("basis.n_realizations must be >= 2")
    seed = stage_seed(cfg, "basis")
    logger.info("sampling %d realizations on %s", n_r, setup.grid.shape)
    Y = gm.sample_gaussian_field(setup.grid, setup.vario, seed, size=n_r)
    basis = gm.build_pca_basis(Y, float(sec.get("energy_target", 0.95)), sec.get("n_latent"))
    gm.save_basis(basis, out / "basis.bin")
    meta = {**provenance(cfg, "basis"), "n_realizations": n_r, "energy_target": sec.get("energy_target", 0.95),
            "energy_fraction": basis.energy_fraction, "n_d": basis.n_latent, "n_cells": basis.n_cells}
    (out / "basis.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    logger.info("basis: n_d = %d, energy %.4f", basis.n_latent, basis.energy_fraction)
    return basis


def cmd_truth(cfg: dict, out: Path) -> lk.ObservedData:
    setup = Setup(cfg)
    basis = _load_basis(out)
    sec = cfg.get("truth", {})
    rng = np.random.default_rng(stage_seed(cfg, "truth"))
    if sec.get("theta") is not None:
        th = sec["theta"]
        theta = np.array([th[n] for n in gm.META_NAMES] if isinstance(th, dict) else th, dtype=float)
    else:
        theta = gm.sample_prior(setup.prior, rng).to_array()
    xi = np.asarray(sec["xi"], dtype=float) if sec.get("xi") is not None else rng.standard_normal(basis.n_latent)
    if theta.shape != (5,) or xi.shape != (basis.n_latent,):
        raise ConfigError("truth.theta needs 5 values and truth.xi one per latent dimension")
    fwd = setup.forward(basis)
    fs = fwd.field_series(theta, xi)
    d_true = fp.extract_observations(fs, setup.schema, setup.grid)
    data = lk.make_observed_data(d_true, setup.budget, stage_seed(cfg, "noise"))
    head = header_lines(cfg, "truth")
    lk.write_observed_csv(out / "d_true.csv", d_true, setup.budget.c_tot(setup.schema), head)
    lk.write_observed_csv(out / "d_obs.csv", data, header=head)
    fp.save_field_series(fs, out / "truth_fields.bin", provenance(cfg, "truth"))
    meta = {**provenance(cfg, "truth"), "theta": dict(zip(gm.META_NAMES, theta.tolist())),
            "xi": xi.tolist(), "n_observations": len(setup.schema),
            "schema": setup.schema.to_records()}
    (out / "truth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    logger.info("truth: %d observations written", len(setup.schema))
    return data


def cmd_mcmc(cfg: dict, out: Path, resume: bool = False) -> mcmc.ChainRecord:
    setup = Setup(cfg)
    basis = _load_basis(out)
    data = lk.read_observed_csv(_require(out / "d_obs.csv", "observed data"))
    if data.schema != setup.schema:
        raise ConfigError("observed data do not match the configured observation schema")
    mc, interval = _mcmc_config(cfg)
    ckpt = out / "checkpoint.npz"
    trace_path = out / "trace.csv"
    start = None
    if resume:
        start = mcmc.load_checkpoint(_require(ckpt, "checkpoint"))
        mcmc.truncate_trace(_require(trace_path, "trace"), start[0].iter)
        logger.info("resuming from iteration %d", start[0].iter)
    with mcmc.TraceWriter(trace_path, 1, header_lines(cfg, "mcmc"), append=resume) as tw:
        rec = mcmc.run_chain(mc, setup.prior, basis, setup.forward(basis), data, trace=tw,
                             checkpoint_path=ckpt, checkpoint_interval=interval, resume=start,
                             progress_every=max(1, mc.max_iters // 20))
    mcmc.write_summary(out / "summary.json", rec, mc, {
        **provenance(cfg, "mcmc"),
        "converged": rec.converged_at is not None,
        "posterior_mean": dict(zip(gm.META_NAMES, rec.posterior_theta().mean(axis=0).tolist()))
        if rec.posterior_theta().size else None,
    })
    logger.info("mcmc: %d iterations, overall acceptance %.3f", rec.n_iter, float(rec.acceptance_overall[0]))
    return rec


def cmd_sobol(cfg: dict, out: Path, ishigami: bool = False) -> sa.SobolResult:
    sec = cfg["sobol"]
    seed = stage_seed(cfg, "sobol")
    cutoff = float(sec.get("cutoff", 0.05))
    head = header_lines(cfg, "sobol")
    if ishigami:
        n_base = int(sec.get("ishigami_n_base", 2 ** 14))
        res = sa.sobol_total_effects(lambda v: sa.ishigami(np.hstack(v)), sa.ishigami_groups(), n_base,
                                     seed, int(sec.get("n_bootstrap", 200)), ["ishigami"])
        sa.write_sobol_csv(out / "sobol_ishigami.csv", res, cutoff, head)
        exact = sa.ishigami_total_indices()
        logger.info("ishigami S_T %s, analytic %s", np.round(res.total[0], 4), np.round(exact, 4))
        return res
    setup = Setup(cfg)
    basis = _load_basis(out)
    well = sec.get("well")
    entries = [e for e in setup.schema.entries if well is None or e.well == well]
    if not entries:
        raise ConfigError(f"no observation entries for well {well!r}")
    schema = fp.ObservationSchema(tuple(entries))
    spec = sa.SobolSpec(int(sec.get("n_base", 256)), schema, cutoff, seed, int(sec.get("n_bootstrap", 200)),
                        bool(sec.get("group_latent", True)))
    res = sa.total_effect_indices(spec, setup.prior, basis, setup.forward(basis, schema))
    sa.write_sobol_csv(out / "sobol.csv", res, cutoff, head)
    for q in ("pressure", "saturation"):
        m = schema.mask(q)
        if m.any():
            avg = np.nanmean(res.total[m], axis=0)
            rank = sa.rank_factors(avg, cutoff, res.factors)
            logger.info("%s: important %s", q, [n for n, _ in rank.important])
    return res


def _ensemble(fwd: mcmc.FlowForward, states):
    series = []
    for theta, xi in states:
        series.append(fwd.field_series(theta, xi))
    return series


def cmd_analyze(cfg: dict, out: Path) -> dict:
    setup = Setup(cfg)
    basis = _load_basis(out)
    sec = cfg["analysis"]
    rng = np.random.default_rng(stage_seed(cfg, "analysis"))
    schedule = sorted(set(float(t) for t in sec.get("schedule") or ()) | set(setup.schema.times))
    fwd = setup.forward(basis, schedule=schedule)
    head = header_lines(cfg, "analyze")

    prior_states = [(gm.sample_prior(setup.prior, rng).to_array(), rng.standard_normal(basis.n_latent))
                    for _ in range(int(sec.get("n_prior", 100)))]
    ensembles = {"prior": prior_states}
    ckpt = out / "checkpoint.npz"
    if ckpt.exists():
        _, rec, _ = mcmc.load_checkpoint(ckpt)
        ensembles["posterior"] = rec.posterior_states(int(sec.get("n_posterior", 100)), rng)
    else:
        logger.info("no checkpoint in %s; prior ensemble only", out)

    report = {**provenance(cfg, "analyze")}
    env = {}
    k = int(sec.get("k", 5))
    anchor = [e for e in setup.schema.entries if e.quantity == "saturation"
              and e.well == sec.get("anchor_well", "O1") and e.layer == int(sec.get("anchor_layer", 0))
              and e.time == max(setup.schema.times)]
    for name, states in ensembles.items():
        series = _ensemble(fwd, states)
        obs = [fp.extract_observations(fs, setup.schema, setup.grid) for fs in series]
        env[name] = an.percentile_envelopes(obs)
        an.write_envelopes_csv(out / f"envelopes_{name}.csv", env[name], setup.schema, head)
        entry = {"members": len(series)}
        if anchor and len(obs) > 1:
            a = anchor[0]
            others = [n for n, e in enumerate(setup.schema.entries) if e.quantity == "saturation"
                      and e.well == a.well and e.time == a.time]
            ia = setup.schema.entries.index(a)
            cov = an.covariance_profile(np.stack([o.values for o in obs]), ia, others)
            labels = [f"{a.well}:L{setup.schema.entries[n].layer + 1}:t{a.time:g}:saturation" for n in others]
            an.write_covariance_csv(out / f"covariance_{name}.csv", labels[others.index(ia)], labels, cov, head)
        if len(series) >= k:
            entry["medoids"] = {}
            for qty in ("saturation", "pressure"):
                final = np.stack([getattr(fs, qty)[-1] for fs in series])
                idx = an.representative_fields(final, k, stage_seed(cfg, "analysis"), sec.get("subsample"))
                entry["medoids"][qty] = []
                for rank, m in enumerate(idx):
                    stem = f"medoid_{name}_{qty}_{rank}"
                    gm.write_field_csv(out / f"{stem}.csv", final[m], head)
                    fp.save_field_series(series[m], out / f"{stem}.bin", provenance(cfg, "analyze"))
                    entry["medoids"][qty].append({"member": int(m), "file": f"{stem}.bin",
                                                  "theta": dict(zip(gm.META_NAMES, np.asarray(states[m][0]).tolist()))})
        report[name] = entry
    if "posterior" in env:
        report["containment_fraction"] = an.containment_fraction(env["prior"], env["posterior"])
        logger.info("posterior P10-P90 inside prior envelope at %.1f%% of points",
                    100 * report["containment_fraction"])
    an.write_manifest(out / "analysis.json", report)
    return report


# -- entry point -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config merged over the bundled defaults")
    common.add_argument("--seed", type=int, help="global seed (stage seeds are offsets from it)")
    common.add_argument("--out", type=Path, default=Path("run"), help="output directory")
    common.add_argument("--scale", choices=("desk", "paper"), default="desk")
    common.add_argument("--pcn-coefficient", choices=mcmc.PCN_MODES, dest="pcn_coefficient")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="co2hm", description="Bayesian history matching for CO2 storage")
    p.add_argument("--version", action="version", version=f"co2hm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("basis", parents=[common], help="sample fields and build the PCA basis")
    sub.add_parser("truth", parents=[common], help="simulate a synthetic truth and noisy data")
    m = sub.add_parser("mcmc", parents=[common], help="run the hierarchical sampler")
    m.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    s = sub.add_parser("sobol", parents=[common], help="total-effect sensitivity indices")
    s.add_argument("--ishigami", action="store_true", help="run the estimator on the Ishigami function")
    sub.add_parser("analyze", parents=[common], help="ensemble envelopes, covariances and medoids")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(logging.INFO)
    try:
        cfg = load_config(args.config, args.scale, args.seed, args.pcn_coefficient)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "basis":
            cmd_basis(cfg, args.out)
        elif args.command == "truth":
            cmd_truth(cfg, args.out)
        elif args.command == "mcmc":
            cmd_mcmc(cfg, args.out, args.resume)
        elif args.command == "sobol":
            cmd_sobol(cfg, args.out, args.ishigami)
        else:
            cmd_analyze(cfg, args.out)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (fp.FlowSolverError, mcmc.McmcAbort, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
