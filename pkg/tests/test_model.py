"""Grid construction, discretization, and noise sampling."""
import numpy as np
import pytest

from dfbsde.errors import (
    ConfigError,
    DimensionMismatch,
    InvalidDelay,
    NonDivisibleHorizon,
)
from dfbsde.model import (
    SystemSpec,
    TimeTable,
    build_grid,
    discretize,
    realize_coefficients,
    sample_noise,
)
from conftest import random_spec


def test_grid_divides_delay_window_exactly():
    grid = build_grid(0.2, 1.0, 4)
    assert grid.delta == pytest.approx(0.05)
    assert grid.d == 4
    assert grid.N + 1 == 20
    assert grid.times.size == grid.N + 2
    assert grid.times[-1] == pytest.approx(1.0)
    # h is an exact multiple of delta by construction
    assert grid.d * grid.delta == grid.h


def test_grid_rejects_non_divisible_horizon():
    with pytest.raises(NonDivisibleHorizon):
        build_grid(0.2, 1.03, 4)


def test_grid_rejects_bad_delay_counts():
    with pytest.raises(InvalidDelay):
        build_grid(0.2, 1.0, 0)
    with pytest.raises(InvalidDelay):
        build_grid(0.2, 1.0, -3)


def test_zero_delay_grid_needs_explicit_steps():
    with pytest.raises(ConfigError):
        build_grid(0.0, 1.0, 0)
    grid = build_grid(0.0, 1.0, 0, steps=10)
    assert grid.d == 0
    assert grid.delta == pytest.approx(0.1)
    assert grid.N + 1 == 10


def test_spec_validates_shapes():
    with pytest.raises(DimensionMismatch):
        SystemSpec(A=np.eye(2), Abar=np.eye(2), B=np.eye(1), Bbar=np.eye(2),
                   C=np.eye(2), Cbar=np.eye(2), D=np.eye(2), Dbar=np.eye(2),
                   Q=np.eye(2), PT=np.eye(2), h=0.1, T=0.5, x0=np.ones(2))
    with pytest.raises(ConfigError):
        SystemSpec(A=[[0.]], Abar=[[0.]], B=[[0.]], Bbar=[[0.]], C=[[0.]],
                   Cbar=[[0.]], D=[[0.]], Dbar=[[0.]], Q=[[1.]], PT=[[1.]],
                   h=0.6, T=0.5, x0=[1.0])


def test_discretize_first_order_updates(scalar_spec):
    grid = build_grid(0.2, 1.0, 2)
    ds = discretize(scalar_spec, grid)
    assert ds.Ahat[0, 0, 0] == pytest.approx(1 + grid.delta * 0.3)
    assert ds.Bhat[0, 0, 0] == pytest.approx(grid.delta * 0.3)
    assert ds.Dhat[0, 0, 0] == pytest.approx(1 - grid.delta * 0.4)
    assert ds.Qhat[0, 0, 0] == pytest.approx(grid.delta * 0.6)
    A_k, _, C_k, _ = realize_coefficients(ds, 3, 0.7)
    assert A_k[0, 0] == pytest.approx(ds.Ahat[3, 0, 0] + 0.7 * 0.25)
    assert C_k[0, 0] == pytest.approx(ds.Chat[3, 0, 0] + 0.7 * 0.15)


def test_time_table_freezes_left_endpoint():
    tab = TimeTable(times=[0.0, 0.5], values=[[[1.0]], [[3.0]]])
    assert tab.at(0.0)[0, 0] == 1.0
    assert tab.at(0.49)[0, 0] == 1.0
    assert tab.at(0.5)[0, 0] == 3.0
    assert tab.at(0.9)[0, 0] == 3.0
    spec = SystemSpec(A=tab, Abar=[[0.]], B=[[0.]], Bbar=[[0.]], C=[[0.]],
                      Cbar=[[0.]], D=[[0.]], Dbar=[[0.]], Q=[[1.]],
                      PT=[[1.]], h=0.2, T=1.0, x0=[1.0])
    assert spec.time_varying
    grid = build_grid(0.2, 1.0, 2)
    ds = discretize(spec, grid)
    # step starting at 0.4 still sees the first regime, step at 0.5 the next
    assert ds.Ahat[4, 0, 0] == pytest.approx(1 + grid.delta * 1.0)
    assert ds.Ahat[5, 0, 0] == pytest.approx(1 + grid.delta * 3.0)


def test_constant_table_matches_constant_matrix(scalar_spec):
    tab = TimeTable(times=[0.0], values=[[[0.3]]])
    spec = SystemSpec(A=tab, Abar=scalar_spec.Abar, B=scalar_spec.B,
                      Bbar=scalar_spec.Bbar, C=scalar_spec.C,
                      Cbar=scalar_spec.Cbar, D=scalar_spec.D,
                      Dbar=scalar_spec.Dbar, Q=scalar_spec.Q,
                      PT=scalar_spec.PT, h=0.2, T=1.0, x0=[1.0])
    grid = build_grid(0.2, 1.0, 4)
    a = discretize(spec, grid)
    b = discretize(scalar_spec, grid)
    assert np.array_equal(a.Ahat, b.Ahat)


def test_noise_is_seed_deterministic_and_path_stable():
    grid = build_grid(0.2, 1.0, 4)
    a = sample_noise(grid, paths=32, seed=11)
    b = sample_noise(grid, paths=32, seed=11)
    assert np.array_equal(a.increments, b.increments)
    c = sample_noise(grid, paths=8, seed=11)
    # per-path streams: trimming the ensemble must not reshuffle paths
    assert np.array_equal(a.increments[:8], c.increments)
    d = sample_noise(grid, paths=32, seed=12)
    assert not np.array_equal(a.increments, d.increments)


def test_rademacher_noise_matches_moments():
    grid = build_grid(0.2, 1.0, 4)
    ens = sample_noise(grid, paths=64, seed=3, kind="rademacher")
    root = np.sqrt(grid.delta)
    assert np.all(np.isin(ens.increments, (root, -root)))
    assert ens.increments.shape == (64, grid.N + 1)


def test_random_specs_round_trip_coefficients():
    rng = np.random.default_rng(0)
    for _ in range(20):
        spec = random_spec(rng)
        grid = build_grid(spec.h, spec.T, int(rng.integers(1, 4)))
        ds = discretize(spec, grid)
        k = int(rng.integers(0, grid.N + 1))
        t = float(grid.times[k])
        assert np.allclose(ds.Ahat[k], np.eye(spec.n)
                           + grid.delta * spec.coeff("A", t))
        assert np.allclose(ds.Qhat[k], grid.delta * spec.coeff("Q", t))
