import numpy as np
import pytest

from dfbsde.model import SystemSpec


def random_spec(rng, n=None, h=0.2, T=None, scale=1.0) -> SystemSpec:
    """Random well-posed instance with every coefficient active."""
    if n is None:
        n = int(rng.integers(1, 3))
    if T is None:
        T = h * int(rng.integers(2, 6))
    mat = lambda: rng.uniform(-scale, scale, (n, n))
    sym = lambda base: base * np.eye(n) + 0.1 * (lambda m: m + m.T)(mat())
    return SystemSpec(A=mat(), Abar=mat(), B=mat(), Bbar=mat(),
                      C=mat(), Cbar=mat(), D=mat(), Dbar=mat(),
                      Q=sym(0.5), PT=sym(0.4), h=h, T=T,
                      x0=rng.uniform(0.5, 1.5, n))


@pytest.fixture
def scalar_spec() -> SystemSpec:
    # all coefficients nonzero, h = 0.2, T = 1: the convergence workhorse
    return SystemSpec(A=[[0.3]], Abar=[[0.25]], B=[[0.3]], Bbar=[[0.15]],
                      C=[[0.2]], Cbar=[[0.15]], D=[[-0.4]], Dbar=[[0.2]],
                      Q=[[0.6]], PT=[[0.5]], h=0.2, T=1.0, x0=[1.0])


@pytest.fixture
def small_tree_spec() -> SystemSpec:
    # N = 3, d = 1 instance solvable exactly on a 16-leaf lattice
    return SystemSpec(A=[[0.5]], Abar=[[0.1]], B=[[1.0]], Bbar=[[0.1]],
                      C=[[0.1]], Cbar=[[0.1]], D=[[0.5]], Dbar=[[0.1]],
                      Q=[[1.0]], PT=[[1.0]], h=0.1, T=0.4, x0=[1.0])
