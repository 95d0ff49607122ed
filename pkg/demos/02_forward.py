"""One forward simulation of four-well injection and the monitoring data it produces."""
import numpy as np

from co2hm import flowproxy as fp
from co2hm import geomodel as gm

grid = gm.GridSpec()
Y = gm.sample_gaussian_field(grid, gm.VariogramSpec(1500.0, 40.0), seed=0, size=200)
basis = gm.build_pca_basis(Y, 0.95)

theta = gm.Metaparameters(3.0, 1.5, 0.1, 0.03, 0.07)
xi = np.random.default_rng(3).standard_normal(basis.n_latent)
model = gm.assemble_geomodel(gm.pca_to_field(basis, xi), theta)

injectors, observers = fp.default_wells(grid, 0.25)
multiplier = fp.boundary_multiplier(fp.scaled_surroundings_pore_volume(1.0), grid)
controls = fp.SimulationControls(boundary_pv_multiplier=multiplier)
print(f"boundary pore-volume multiplier: {multiplier:.0f}")

times = [1.5, 3.0, 4.5, 10.0, 30.0]
p0 = fp.initial_pressure(grid, fp.FluidSpec())
fs = fp.simulate(model, grid, injectors + observers, fp.FluidSpec(), times, controls)

print("\n  t [yr]   max S_g   plume cells (S>0.01)   max dp [MPa]")
for n, t in enumerate(fs.times):
    s = fs.saturation[n]
    dp = fs.pressure[n] - p0
    print(f"  {t:6.1f}   {s.max():7.3f}   {int((s > 0.01).sum()):20d}   {dp.max():12.3f}")
dg = fs.diagnostics
err = np.abs(dg["injected_kg"] - dg["stored_kg"] - dg["exported_kg"]) / dg["injected_kg"]
print(f"\nmass balance error (relative, worst time): {err.max():.2e}")
print(f"CO2 exported to the surroundings by t=30: {dg['exported_kg'][-1]:.3e} kg "
      f"of {dg['injected_kg'][-1]:.3e} kg injected")

schema = fp.ObservationSchema.monitoring(observers, grid)
d = fp.extract_observations(fs, schema)
print(f"\n{len(schema)} monitoring observations, e.g.")
for e, v in list(zip(schema.entries, d.values))[:6]:
    print(f"  {e.well} layer {e.layer + 1} t={e.time:g} {e.quantity:10s} {v:.4f}")
