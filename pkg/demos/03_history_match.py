"""A short synthetic-truth history match.

The full desk run uses 13,000 iterations; this one stops at 1,500 to keep
the demo to a few minutes, so expect only partial narrowing.
"""
import logging

import numpy as np

from co2hm import flowproxy as fp
from co2hm import geomodel as gm
from co2hm import likelihood as lk
from co2hm import mcmc

logging.basicConfig(level=logging.INFO, format="%(message)s")

grid = gm.GridSpec()
Y = gm.sample_gaussian_field(grid, gm.VariogramSpec(1500.0, 40.0), seed=0, size=200)
basis = gm.build_pca_basis(Y, 0.95)
injectors, observers = fp.default_wells(grid, 0.25)
controls = fp.SimulationControls(
    boundary_pv_multiplier=fp.boundary_multiplier(fp.scaled_surroundings_pore_volume(1.0), grid))
schema = fp.ObservationSchema.monitoring(observers, grid)
forward = mcmc.FlowForward(basis, grid, injectors + observers, fp.FluidSpec(), schema, controls)

# truth and noisy data
prior = gm.PriorSpec.uniform()
rng = np.random.default_rng(11)
theta_true = gm.sample_prior(prior, rng).to_array()
xi_true = rng.standard_normal(basis.n_latent)
d_true = fp.ObservationVector(schema, forward(theta_true, xi_true))
data = lk.make_observed_data(d_true, lk.ErrorBudget(), seed=12)

cfg = mcmc.McmcConfig(burn_in=500, max_iters=1500, conv_check_interval=250, seed=13,
                      stop_on_convergence=False)
rec = mcmc.run_chain(cfg, prior, basis, forward, data, progress_every=250)

post = rec.posterior_theta()
print("\nparameter      truth   posterior mean   posterior sd   prior sd")
psd = np.diff(prior.coord_ranges(), axis=1)[:, 0] / np.sqrt(12)
pc = prior.to_coords(post)
for n, name in enumerate(gm.META_NAMES):
    print(f"{name:12s} {prior.to_coords(theta_true)[n]:7.3f}   {pc[:, n].mean():14.3f}   "
          f"{pc[:, n].std():12.3f}   {psd[n]:8.3f}")
print("(a_r in log10 units)")
print(f"acceptance: overall {rec.acceptance_overall[0]:.3f}, "
      f"latent {rec.acceptance_xi[0]:.3f}, metaparameters {rec.acceptance_theta[0]:.3f}")
print("convergence metric:", np.round(rec.conv_metric, 4))
