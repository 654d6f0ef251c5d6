"""Backward decoupling tables: worked values and structural properties."""
import numpy as np
import pytest

from dfbsde.discrete_riccati import (
    assemble_gamma,
    backward_sweep,
    reconstruct_p,
)
from dfbsde.errors import MissingPredictor, SingularGamma
from dfbsde.model import SystemSpec, build_grid, discretize
from conftest import random_spec


def _scalar(A=0.0, Abar=0.0, B=0.0, Bbar=0.0, C=0.0, Cbar=0.0, D=0.0,
            Dbar=0.0, Q=0.0, PT=1.0, h=0.1, T=0.4, x0=1.0):
    wrap = lambda v: [[v]]
    return SystemSpec(A=wrap(A), Abar=wrap(Abar), B=wrap(B), Bbar=wrap(Bbar),
                      C=wrap(C), Cbar=wrap(Cbar), D=wrap(D), Dbar=wrap(Dbar),
                      Q=wrap(Q), PT=wrap(PT), h=h, T=T, x0=[x0])


def test_gamma_assembly_worked_example():
    # delta=0.1, B=1, Bbar=0.5, C=0, Cbar=0.2 with S=1, G=2
    spec = _scalar(B=1.0, Bbar=0.5, C=0.0, Cbar=0.2)
    ds = discretize(spec, build_grid(0.1, 0.4, 1))
    gamma = assemble_gamma(np.array([[2.0]]), np.array([[1.0]]), ds, 0)
    assert gamma == pytest.approx(np.array([[0.9, 0.0], [-0.05, 0.6]]))


def test_terminal_conditions():
    rng = np.random.default_rng(4)
    spec = random_spec(rng, n=2)
    grid = build_grid(spec.h, spec.T, 2)
    tables = backward_sweep(discretize(spec, grid))
    assert np.array_equal(tables.P[grid.N + 1], np.asarray(spec.PT))
    assert np.all(tables.band[grid.N + 1] == 0.0)
    assert np.array_equal(tables.S[grid.N + 1], tables.P[grid.N + 1])


def test_zero_coupling_reduces_to_linear_recursion():
    # B = C = Bbar = Cbar = 0 kills the feedback: P_k follows the plain
    # two-sided product recursion and every band weight stays zero
    spec = _scalar(A=0.4, Abar=0.3, D=-0.2, Dbar=0.15, Q=0.5, PT=0.8)
    grid = build_grid(0.1, 0.4, 2)
    ds = discretize(spec, grid)
    tables = backward_sweep(ds)
    assert np.all(tables.band == 0.0)
    assert np.all(tables.Mbar == 0.0)
    assert np.all(tables.Mtil == 0.0)
    ref = np.asarray(spec.PT, dtype=float).copy()
    for k in range(grid.N, -1, -1):
        ref = ds.Dhat[k] @ ref @ ds.Ahat[k] \
            + grid.delta * (ds.Dbar[k] @ ref @ ds.Abar[k]) + ds.Qhat[k]
        assert tables.P[k] == pytest.approx(ref)


def test_band_shift_and_sum_structure(scalar_spec):
    grid = build_grid(0.2, 1.0, 4)
    ds = discretize(scalar_spec, grid)
    tables = backward_sweep(ds)
    for k in range(grid.N + 1):
        for i in range(1, grid.d + 1):
            expect = ds.Dhat[k] @ tables.band[k + 1][i - 1] @ ds.Ahat[k]
            assert tables.band[k][i] == pytest.approx(expect, abs=1e-14)
        assert tables.S[k] == pytest.approx(
            tables.P[k] - tables.band[k].sum(axis=0), abs=1e-14)
        assert tables.G[k] == pytest.approx(
            tables.P[k] - tables.band[k][grid.d], abs=1e-14)
        assert 0.0 < tables.gamma_rcond[k + 1] <= 1.0


def test_singular_gamma_is_certified():
    # Cbar * PT = 1 makes the terminal closure block lose rank
    spec = _scalar(Cbar=2.0, PT=0.5, Q=0.1)
    ds = discretize(spec, build_grid(0.1, 0.4, 1))
    with pytest.raises(SingularGamma):
        backward_sweep(ds)


def test_reconstruct_p_checks_ladder_length(scalar_spec):
    grid = build_grid(0.2, 1.0, 4)
    tables = backward_sweep(discretize(scalar_spec, grid))
    with pytest.raises(MissingPredictor):
        reconstruct_p(tables, 3, np.ones(1), [np.ones(1)] * 3)


def test_tables_shapes_and_finiteness():
    rng = np.random.default_rng(9)
    for _ in range(10):
        spec = random_spec(rng, h=0.2, scale=0.6)
        d = int(rng.integers(1, 4))
        grid = build_grid(spec.h, spec.T, d)
        tables = backward_sweep(discretize(spec, grid))
        n = spec.n
        assert tables.P.shape == (grid.N + 2, n, n)
        assert tables.band.shape == (grid.N + 2, d + 1, n, n)
        assert tables.Mbar.shape == (grid.N + 1, n, n)
        for arr in (tables.P, tables.band, tables.S, tables.G, tables.Mbar,
                    tables.Mtil, tables.W):
            assert np.all(np.isfinite(arr))
