"""Gaussian fields, the PCA basis, and what the metaparameters do to one realization."""
import numpy as np

from co2hm import geomodel as gm

grid = gm.GridSpec()                       # 20 x 20 x 5 desk grid
vario = gm.VariogramSpec(l_h=1500.0, l_v=40.0)

# A modest training set of unconditional realizations.
Y = gm.sample_gaussian_field(grid, vario, seed=0, size=200)
print(f"realizations: {Y.shape}, pointwise sd ~ {Y.std(axis=0).mean():.3f}")

basis = gm.build_pca_basis(Y, energy_target=0.95)
print(f"basis keeps {basis.n_latent} of {Y.shape[0]} components "
      f"({100 * basis.energy_fraction:.1f}% energy)")

# The same latent vector under two geological scenarios.
rng = np.random.default_rng(7)
xi = rng.standard_normal(basis.n_latent)
y = gm.pca_to_field(basis, xi)

for theta in (gm.Metaparameters(2.0, 1.0, 0.05, 0.03, 0.08),
              gm.Metaparameters(3.5, 2.2, 0.5, 0.03, 0.08)):
    m = gm.assemble_geomodel(y, theta)
    k = m.k.reshape(grid.shape)
    print(f"mu={theta.mu_logk}, sigma={theta.sigma_logk}: "
          f"k median {np.median(m.k):7.2f} md, P10-P90 {np.percentile(m.k, 10):7.2f}-{np.percentile(m.k, 90):8.2f} md, "
          f"phi {m.phi.min():.3f}-{m.phi.max():.3f}, kv/kh {m.a_r[0]:.2f}")
    # layers share the lateral pattern but not the values
    print("   layer means of ln k:", np.round(np.log(k).mean(axis=(1, 2)), 2))

# Five scenario draws from the uniform priors.
prior = gm.PriorSpec.uniform()
for _ in range(5):
    print("prior draw:", np.round(gm.sample_prior(prior, rng).to_array(), 3))
