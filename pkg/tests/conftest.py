import numpy as np
import pytest

from co2hm import flowproxy as fp
from co2hm import geomodel as gm


@pytest.fixture(scope="session")
def desk_grid():
    return gm.GridSpec()


@pytest.fixture(scope="session")
def desk_basis(desk_grid):
    Y = gm.sample_gaussian_field(desk_grid, gm.VariogramSpec(1500.0, 40.0), 0, size=200)
    return gm.build_pca_basis(Y, 0.95)


@pytest.fixture(scope="session")
def desk_setup(desk_grid):
    """Wells, fluid, controls and observation schema of the 20x20x5 problem."""
    inj, obs = fp.default_wells(desk_grid, 0.25)
    mult = fp.boundary_multiplier(fp.scaled_surroundings_pore_volume(1.0), desk_grid)
    controls = fp.SimulationControls(boundary_pv_multiplier=mult)
    schema = fp.ObservationSchema.monitoring(obs, desk_grid)
    return dict(injectors=inj, observers=obs, fluid=fp.FluidSpec(), controls=controls, schema=schema)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def criterion_report(request):
    """Record a one-line verdict per acceptance criterion; echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_REPORT_KEY, [])

    def report(number, ok, detail):
        line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return report


_REPORT_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)
