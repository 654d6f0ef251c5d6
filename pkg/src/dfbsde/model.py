"""Problem data, time grid, per-step discretization and driving noise.

State dimension n is small (dense n x n matrices, n <= 32). The forward
equation is driven by one scalar Brownian motion, so realized step
coefficients are affine in the scalar increment dw.

Index conventions, used consistently across the package:

* grid times t_k = k*delta for k = 0..N+1 with T = (N+1)*delta,
* the transmission delay spans d whole steps, h = d*delta,
* information at step k means sigma(dw_0..dw_k); indices below zero denote
  the trivial sigma-algebra, so conditioning on them is plain expectation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    InvalidDelay,
    NonDivisibleHorizon,
    StepMisaligned,
)

__all__ = [
    "COEFFICIENT_NAMES",
    "TimeTable",
    "SystemSpec",
    "TimeGrid",
    "build_grid",
    "DiscreteSystem",
    "discretize",
    "realize_coefficients",
    "NoiseEnsemble",
    "sample_noise",
]

# Coefficient slots of the coupled pair: forward drift/diffusion react to the
# lagged conditional mean of the backward pair, the backward drift is linear
# in (p, q, x).
COEFFICIENT_NAMES = ("A", "Abar", "B", "Bbar", "C", "Cbar", "D", "Dbar", "Q")

_REL_TOL = 1e-12


@dataclass(frozen=True)
class TimeTable:
    """Piecewise-constant coefficient track: value i applies on
    [times[i], times[i+1]). Sampling never interpolates."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if times.ndim != 1 or times.size == 0:
            raise DimensionMismatch("time table needs a 1-d breakpoint array")
        if np.any(np.diff(times) <= 0):
            raise DimensionMismatch("time table breakpoints must increase")
        if times[0] != 0.0:
            raise DimensionMismatch("time table must start at t = 0")
        if values.shape[0] != times.size:
            raise DimensionMismatch(
                f"time table has {times.size} breakpoints but "
                f"{values.shape[0]} values"
            )

    def at(self, t: float) -> np.ndarray:
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.values[max(idx, 0)]


def _as_matrix(name: str, value, n: int):
    if isinstance(value, TimeTable):
        if value.values.shape[1:] != (n, n):
            raise DimensionMismatch(
                f"{name}: table values must be ({n},{n}), "
                f"got {value.values.shape[1:]}"
            )
        return value
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.shape != (n, n):
        raise DimensionMismatch(f"{name}: expected ({n},{n}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DimensionMismatch(f"{name}: non-finite entries")
    return arr


@dataclass(frozen=True)
class SystemSpec:
    """Coefficients of the coupled forward/backward pair on [0, T].

    Every coefficient is either a constant (n, n) array or a TimeTable;
    the terminal weight PT and the initial state x0 are always constant.
    """

    A: object
    Abar: object
    B: object
    Bbar: object
    C: object
    Cbar: object
    D: object
    Dbar: object
    Q: object
    PT: np.ndarray
    h: float
    T: float
    x0: np.ndarray

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        object.__setattr__(self, "x0", x0)
        n = x0.size
        if not 1 <= n <= 32:
            raise DimensionMismatch(f"state dimension {n} outside 1..32")
        for name in COEFFICIENT_NAMES:
            object.__setattr__(self, name, _as_matrix(name, getattr(self, name), n))
        object.__setattr__(self, "PT", _as_matrix("PT", self.PT, n))
        if isinstance(self.PT, TimeTable):
            raise DimensionMismatch("PT must be constant")
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidDelay(f"horizon T={self.T} must be positive")
        if not (np.isfinite(self.h) and 0.0 <= self.h <= self.T):
            raise InvalidDelay(f"delay h={self.h} outside [0, T={self.T}]")

    @property
    def n(self) -> int:
        return self.x0.size

    @property
    def time_varying(self) -> bool:
        return any(
            isinstance(getattr(self, name), TimeTable)
            for name in COEFFICIENT_NAMES
        )

    def coeff(self, name: str, t: float) -> np.ndarray:
        value = getattr(self, name)
        return value.at(t) if isinstance(value, TimeTable) else value


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*delta, k = 0..N+1, with h = d*delta."""

    delta: float
    N: int
    d: int
    h: float
    T: float
    times: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(
            self, "times", np.arange(self.N + 2, dtype=float) * self.delta
        )

    @property
    def n_steps(self) -> int:
        return self.N + 1


def build_grid(h: float, T: float, d: int, steps: int | None = None) -> TimeGrid:
    """Choose delta from the delay; h = 0 takes an explicit step count.

    The step must divide the horizon exactly: (N+1)*delta = T within 1e-12
    relative, otherwise the delay window would drift off the grid.
    """
    if not (np.isfinite(T) and T > 0):
        raise InvalidDelay(f"horizon T={T} must be positive")
    if not (np.isfinite(h) and 0.0 <= h <= T):
        raise InvalidDelay(f"delay h={h} outside [0, T={T}]")
    if h > 0:
        if d < 1:
            raise InvalidDelay(f"positive delay needs d >= 1, got d={d}")
        delta = h / d
        ratio = T / delta
        n_steps = int(round(ratio))
        if n_steps < 1 or abs(ratio - n_steps) > _REL_TOL * max(1.0, ratio):
            raise NonDivisibleHorizon(
                f"T={T} is not an integer multiple of delta={delta} "
                f"(T/delta={ratio!r})"
            )
        if steps is not None and steps != n_steps:
            raise StepMisaligned(
                f"requested {steps} steps but h/d forces {n_steps}"
            )
        return TimeGrid(delta=delta, N=n_steps - 1, d=d, h=h, T=T)
    if d != 0:
        raise InvalidDelay(f"h=0 requires d=0, got d={d}")
    if steps is None or steps < 1:
        raise InvalidDelay("h=0 needs an explicit positive step count")
    return TimeGrid(delta=T / steps, N=steps - 1, d=0, h=0.0, T=T)


@dataclass(frozen=True)
class DiscreteSystem:
    """Per-step Euler tables: hatted drift factors I + delta*(.) alongside
    the raw diffusion factors, one slice per step k = 0..N."""

    grid: TimeGrid
    Ahat: np.ndarray
    Bhat: np.ndarray
    Chat: np.ndarray
    Dhat: np.ndarray
    Qhat: np.ndarray
    Abar: np.ndarray
    Bbar: np.ndarray
    Cbar: np.ndarray
    Dbar: np.ndarray
    PT: np.ndarray
    x0: np.ndarray

    @property
    def n(self) -> int:
        return self.x0.size


def discretize(spec: SystemSpec, grid: TimeGrid) -> DiscreteSystem:
    """Freeze coefficients at the left endpoint of each step and form the
    hatted one-step factors."""
    n = spec.n
    delta = grid.delta
    eye = np.eye(n)
    steps = grid.n_steps
    out = {
        name: np.empty((steps, n, n))
        for name in ("Ahat", "Bhat", "Chat", "Dhat", "Qhat",
                     "Abar", "Bbar", "Cbar", "Dbar")
    }
    for k in range(steps):
        t = grid.times[k]
        out["Ahat"][k] = eye + delta * spec.coeff("A", t)
        out["Bhat"][k] = delta * spec.coeff("B", t)
        out["Chat"][k] = delta * spec.coeff("C", t)
        out["Dhat"][k] = eye + delta * spec.coeff("D", t)
        out["Qhat"][k] = delta * spec.coeff("Q", t)
        out["Abar"][k] = spec.coeff("Abar", t)
        out["Bbar"][k] = spec.coeff("Bbar", t)
        out["Cbar"][k] = spec.coeff("Cbar", t)
        out["Dbar"][k] = spec.coeff("Dbar", t)
    return DiscreteSystem(grid=grid, PT=np.array(spec.PT, dtype=float),
                          x0=np.array(spec.x0, dtype=float), **out)


def realize_coefficients(ds: DiscreteSystem, k: int, dw: float):
    """Realized step-k factors for a given increment: hatted + dw * bar."""
    return (
        ds.Ahat[k] + dw * ds.Abar[k],
        ds.Bhat[k] + dw * ds.Bbar[k],
        ds.Chat[k] + dw * ds.Cbar[k],
        ds.Dhat[k] + dw * ds.Dbar[k],
    )


@dataclass(frozen=True)
class NoiseEnsemble:
    """Increment matrix dw[path, k] for k = 0..N, plus its provenance."""

    delta: float
    increments: np.ndarray
    seed: int
    kind: str

    @property
    def paths(self) -> int:
        return self.increments.shape[0]


def sample_noise(grid: TimeGrid, paths: int, seed: int,
                 kind: str = "gaussian") -> NoiseEnsemble:
    """Draw per-path increments with exact second moment delta.

    gaussian: N(0, delta). rademacher: +-sqrt(delta) equiprobable, the
    lattice-exact model. Each path owns an independent child stream of the
    seed, so the ensemble does not depend on how work is scheduled.
    """
    if kind not in ("gaussian", "rademacher"):
        raise ConfigError(f"unknown noise kind {kind!r}")
    if paths < 1:
        raise ConfigError(f"need at least one path, got {paths}")
    root = np.random.SeedSequence(seed)
    children = root.spawn(paths)
    sqdt = np.sqrt(grid.delta)
    out = np.empty((paths, grid.n_steps))
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        if kind == "gaussian":
            out[i] = rng.standard_normal(grid.n_steps) * sqdt
        else:
            out[i] = (rng.integers(0, 2, grid.n_steps) * 2 - 1) * sqdt
    return NoiseEnsemble(delta=grid.delta, increments=out, seed=seed, kind=kind)
