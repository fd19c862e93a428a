import numpy as np
import pytest

from dpfilter import (
    ParticleSpec,
    PhysicalConstants,
    build_grid,
    build_kernel,
    build_space,
    collapse_set,
    mass_density_family,
    spectral_decompose,
    superposition,
)


@pytest.fixture(scope="session")
def small_system():
    """8-site unit-spacing 1D system with one unit-mass particle (D = 8)."""
    return make_system(n_sites=8, G=4.0, sigma=1.0)


def make_system(n_sites=8, G=4.0, sigma=1.0, masses=(1.0,), family="newtonian_mollified",
                **kernel_params):
    consts = PhysicalConstants(G=G)
    grid = build_grid(1, n_sites, n_sites / 2.0)  # unit spacing and unit cell weight
    params = dict(kernel_params) or {"sigma": sigma}
    if family == "newtonian_mollified" and "sigma" not in params:
        params["sigma"] = sigma
    kern = build_kernel(grid, family, consts, **params)
    decomp = spectral_decompose(kern)
    space = build_space([ParticleSpec(m, grid) for m in masses])
    fam = mass_density_family(space, grid, sigma)
    cset = collapse_set(fam, decomp, consts)
    return {
        "constants": consts, "grid": grid, "kernel": kern, "decomp": decomp,
        "space": space, "family": fam, "collapse": cset,
    }


def two_site_state(dim, a, b, wa=0.5):
    return superposition(dim, [(a, np.sqrt(wa)), (b, np.sqrt(1.0 - wa))])


def wishart_bound(cov, n, n_sigma=5.0):
    """Entrywise n-sigma band for a zero-mean Gaussian sample covariance."""
    d = np.diag(cov)
    return n_sigma * np.sqrt((np.outer(d, d) + cov**2) / n)
