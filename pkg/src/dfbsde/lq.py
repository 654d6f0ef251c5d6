"""Delayed-information linear-quadratic control.

The controlled system dx = (Ax + Bu)dt + (Abar x + Bbar u)dw with cost
E[int x'Qx + u'Ru dt + x(T)'Hx(T)] and a controller that only sees the state
with lag h maps onto the general coupled-Riccati machinery through the
substitution

    D = A',  Dbar = Abar',
    B -> -B R^{-1} B',   Bbar -> -Bbar R^{-1} B',
    C -> -B R^{-1} Bbar',  Cbar -> -Bbar R^{-1} Bbar',  P(T) = H,

with the diagonal kernel sample specialized to the positive form

    R(t) = R + Bbar' P(t) Bbar,
    M(t) = B' S(t) + Bbar' P(t) Abar,
    P(t,t) = M(t)' R(t)^{-1} M(t),

and the optimal feedback is u(t) = -K(t) xhat(t|t-h) with K = R(t)^{-1} M(t)
acting on the lagged predictor

    xhat(t|t-h) = e^{Ah} x(t-h) + int_{t-h}^t e^{A(t-s)} B u(s) ds.

Every control inside that window is measurable for the lagged filtration
(u(s) only uses information up to s - h <= t - h), so the formula holds with
the realized controls, at every intermediate lag as well; that is what makes
the costate reconstruction below exact in continuous time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .continuous_riccati import ContinuousKernel, integrate_backward, kernel_eval
from .errors import (
    ConfigError,
    DimensionMismatch,
    IndefiniteRt,
    InsufficientHistory,
)
from .model import NoiseEnsemble, SystemSpec, TimeGrid

__all__ = [
    "LqSpec",
    "LqGains",
    "synthesize",
    "predictor",
    "evaluate_cost",
    "costate_reconstruct",
    "CostReport",
    "LqEnsemble",
    "CostateReport",
]

_EIG_TOL = 1e-10


def _sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def _check_psd(name: str, mat: np.ndarray, strict: bool):
    mat = np.asarray(mat, float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got {mat.shape}")
    if np.max(np.abs(mat - mat.T)) > _EIG_TOL * max(1.0, np.max(np.abs(mat))):
        raise ConfigError(f"{name} must be symmetric")
    low = float(np.min(np.linalg.eigvalsh(_sym(mat))))
    if strict and low < _EIG_TOL:
        raise ConfigError(f"{name} must be positive definite "
                          f"(min eigenvalue {low:.3e})")
    if not strict and low < -_EIG_TOL * max(1.0, np.max(np.abs(mat))):
        raise ConfigError(f"{name} must be positive semidefinite "
                          f"(min eigenvalue {low:.3e})")


@dataclass(frozen=True)
class LqSpec:
    """Controlled-system data: state dim n, control dim m."""

    A: np.ndarray
    Abar: np.ndarray
    B: np.ndarray      # n x m
    Bbar: np.ndarray   # n x m
    Q: np.ndarray
    R: np.ndarray      # m x m
    H: np.ndarray
    h: float
    T: float
    x0: np.ndarray

    def __post_init__(self):
        for name in ("A", "Abar", "B", "Bbar", "Q", "R", "H"):
            arr = np.asarray(getattr(self, name), float)
            if arr.ndim == 0:
                arr = arr.reshape(1, 1)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "x0",
                           np.atleast_1d(np.asarray(self.x0, float)))
        n = self.A.shape[0]
        m = self.B.shape[1] if self.B.ndim == 2 else 1
        if self.B.ndim != 2 or self.B.shape != (n, m):
            raise DimensionMismatch(f"B must be ({n}, m), got {self.B.shape}")
        for name in ("A", "Abar"):
            if getattr(self, name).shape != (n, n):
                raise DimensionMismatch(f"{name} must be ({n}, {n})")
        if self.Bbar.shape != (n, m):
            raise DimensionMismatch(f"Bbar must be ({n}, {m})")
        if self.x0.shape != (n,):
            raise DimensionMismatch(f"x0 must have shape ({n},)")
        _check_psd("Q", self.Q, strict=False)
        _check_psd("H", self.H, strict=False)
        _check_psd("R", self.R, strict=True)
        if self.R.shape != (m, m):
            raise DimensionMismatch(f"R must be ({m}, {m})")
        if not (0.0 <= self.h <= self.T):
            raise ConfigError(f"need 0 <= h <= T, got h={self.h}, T={self.T}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def to_general(self) -> SystemSpec:
        """The Riccati-equivalent uncontrolled system."""
        Rinv = np.linalg.inv(self.R)
        return SystemSpec(
            A=self.A, Abar=self.Abar,
            B=-self.B @ Rinv @ self.B.T,
            Bbar=-self.Bbar @ Rinv @ self.B.T,
            C=-self.B @ Rinv @ self.Bbar.T,
            Cbar=-self.Bbar @ Rinv @ self.Bbar.T,
            D=self.A.T, Dbar=self.Abar.T,
            Q=self.Q, PT=self.H, h=self.h, T=self.T, x0=self.x0,
        )


def _rt_mt(spec: LqSpec, P: np.ndarray, S: np.ndarray, t: float):
    Rt = _sym(spec.R + spec.Bbar.T @ P @ spec.Bbar)
    low = float(np.min(np.linalg.eigvalsh(Rt)))
    if low < _EIG_TOL * max(1.0, float(np.max(np.abs(Rt)))):
        raise IndefiniteRt(t, low)
    Mt = spec.B.T @ S + spec.Bbar.T @ P @ spec.Abar
    return Rt, Mt


@dataclass(frozen=True)
class LqGains:
    """Synthesized feedback tables on the eta-grid, plus the kernel they
    came from (P, S, diagonal samples)."""

    spec: LqSpec
    kernel: ContinuousKernel
    times: np.ndarray
    Rt: np.ndarray     # (M+1, m, m)
    Mt: np.ndarray     # (M+1, m, n)
    K: np.ndarray      # (M+1, m, n)

    @property
    def P(self) -> np.ndarray:
        return self.kernel.P

    @property
    def S(self) -> np.ndarray:
        return self.kernel.S

    def K_at(self, t: float) -> np.ndarray:
        return self.kernel._interp(self.K, t)

    def P_at(self, t: float) -> np.ndarray:
        return self.kernel.P_at(t)


def synthesize(spec: LqSpec, eta: float) -> LqGains:
    """Backward synthesis of the delayed LQ gains.

    Runs the general backward kernel march with the diagonal closure
    specialized to M(t)' R(t)^{-1} M(t); R(t) losing positive definiteness
    aborts with IndefiniteRt.
    """
    gen = spec.to_general()

    def closure(t, P, S, co):
        Rt, Mt = _rt_mt(spec, P, S, t)
        return Mt.T @ np.linalg.solve(Rt, Mt)

    kernel = integrate_backward(gen, eta, closure=closure)
    Mn = kernel.times.size
    m, n = spec.m, spec.n
    Rt = np.empty((Mn, m, m))
    Mt = np.empty((Mn, m, n))
    K = np.empty((Mn, m, n))
    for j, t in enumerate(kernel.times):
        Rt[j], Mt[j] = _rt_mt(spec, kernel.P[j], kernel.S[j], float(t))
        K[j] = np.linalg.solve(Rt[j], Mt[j])
    return LqGains(spec=spec, kernel=kernel, times=kernel.times,
                   Rt=Rt, Mt=Mt, K=K)


def _offset_propagators(spec: LqSpec, grid: TimeGrid):
    # e^{A i delta} and e^{A i delta} B for the predictor window offsets
    d = grid.d
    expA = np.empty((d + 1, spec.n, spec.n))
    expA[0] = np.eye(spec.n)
    step = expm(spec.A * grid.delta)
    for i in range(1, d + 1):
        expA[i] = expA[i - 1] @ step
    return expA, expA @ spec.B


def predictor(spec: LqSpec, grid: TimeGrid, x_hist: np.ndarray,
              u_hist: np.ndarray, k: int) -> np.ndarray:
    """Lagged conditional mean xhat(t_k | t_k - h) from recorded histories.

    Histories are arrays indexed by step along their second-to-last axis
    (single path: (steps, dim); batched: (paths, steps, dim)) and must cover
    the window [t_k - h, t_k]; the window integral uses the trapezoid rule
    on the simulation grid.
    """
    if k < 0 or k > grid.N + 1:
        raise InsufficientHistory(f"step {k} outside the grid")
    ell = min(grid.d, k)
    if x_hist.shape[-2] <= k - ell or u_hist.shape[-2] <= k:
        raise InsufficientHistory(
            f"histories must cover steps {k - ell}..{k}")
    expA, expAB = _offset_propagators(spec, grid)
    base = x_hist[..., k - ell, :] @ expA[ell].T
    if ell == 0:
        return base
    w = np.full(ell + 1, grid.delta)
    w[0] *= 0.5
    w[-1] *= 0.5
    # u at step k-ell+i propagates through e^{A (ell-i) delta} B
    window = u_hist[..., k - ell:k + 1, :]
    acc = np.einsum("i,inm,...im->...n", w, expAB[ell::-1], window)
    return base + acc


@dataclass(frozen=True)
class LqEnsemble:
    """Closed-loop trajectories under u = -(scale K) xhat."""

    spec: LqSpec
    grid: TimeGrid
    seed: int | None
    gain_scale: float
    dw: np.ndarray      # (paths, N+1)
    x: np.ndarray       # (paths, N+2, n)
    u: np.ndarray       # (paths, N+2, m)
    xhat: np.ndarray    # (paths, N+2, n)

    @property
    def paths(self) -> int:
        return self.dw.shape[0]


@dataclass(frozen=True)
class CostReport:
    mean: float
    stderr: float
    paths: int
    seed: int | None
    gain_scale: float
    path_costs: np.ndarray = field(repr=False)
    ensemble: LqEnsemble = field(repr=False)

    def as_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr,
                "paths": self.paths, "seed": self.seed,
                "gain_scale": self.gain_scale}


def evaluate_cost(spec: LqSpec, gains: LqGains, grid: TimeGrid,
                  noise: NoiseEnsemble, gain_scale: float = 1.0) -> CostReport:
    """Monte Carlo cost of the (possibly rescaled) synthesized controller.

    Steps the controlled SDE with Euler-Maruyama, forms the predictor by the
    window formula at every node (the newest trapezoid node couples to the
    control being computed, a small linear solve shared by all paths), and
    integrates the running cost by the trapezoid rule. Paths are driven by
    the provided increments, so rerunning with a different gain_scale prices
    the perturbed controller on common random numbers.
    """
    if abs(noise.delta - grid.delta) > 1e-12 * max(1.0, grid.delta):
        raise DimensionMismatch(
            f"noise step {noise.delta} differs from grid step {grid.delta}")
    dw = noise.increments
    paths = dw.shape[0]
    n, m, d, N = spec.n, spec.m, grid.d, grid.N
    delta = grid.delta
    if dw.shape[1] != N + 1:
        raise DimensionMismatch(
            f"noise has {dw.shape[1]} increments, grid wants {N + 1}")

    expA, expAB = _offset_propagators(spec, grid)
    K = np.empty((N + 2, m, n))
    solve_mat = np.empty((N + 2, n, n))
    eye = np.eye(n)
    for k in range(N + 2):
        K[k] = gain_scale * gains.K_at(float(grid.times[k]))
        # implicit trapezoid node: xhat = base - (delta/2) B K xhat
        ell = min(d, k)
        if ell == 0:
            solve_mat[k] = eye
        else:
            solve_mat[k] = np.linalg.inv(eye + 0.5 * delta * spec.B @ K[k])

    x = np.empty((paths, N + 2, n))
    u = np.empty((paths, N + 2, m))
    xhat = np.empty((paths, N + 2, n))
    x[:, 0] = spec.x0

    for k in range(N + 2):
        ell = min(d, k)
        base = x[:, k - ell] @ expA[ell].T
        if ell > 0:
            w = np.full(ell, delta)
            w[0] *= 0.5
            # known window controls: steps k-ell .. k-1, newest handled
            # implicitly; propagators e^{A (ell-i) delta} B, i = 0..ell-1
            base = base + np.einsum("i,inm,pim->pn", w, expAB[ell:0:-1],
                                    u[:, k - ell:k])
            base = base @ solve_mat[k].T
        xhat[:, k] = base
        u[:, k] = -(base @ K[k].T)
        if k <= N:
            drift = x[:, k] @ spec.A.T + u[:, k] @ spec.B.T
            diff = x[:, k] @ spec.Abar.T + u[:, k] @ spec.Bbar.T
            x[:, k + 1] = x[:, k] + delta * drift + dw[:, k][:, None] * diff

    run = np.einsum("pkn,nm,pkm->pk", x, spec.Q, x) \
        + np.einsum("pkn,nm,pkm->pk", u, spec.R, u)
    wts = np.full(N + 2, delta)
    wts[0] *= 0.5
    wts[-1] *= 0.5
    costs = run @ wts + np.einsum("pn,nm,pm->p", x[:, -1], spec.H, x[:, -1])
    mean = float(np.mean(costs))
    stderr = float(np.std(costs, ddof=1) / np.sqrt(paths)) if paths > 1 \
        else float("inf")
    ens = LqEnsemble(spec=spec, grid=grid, seed=noise.seed,
                     gain_scale=gain_scale, dw=dw, x=x, u=u, xhat=xhat)
    return CostReport(mean=mean, stderr=stderr, paths=paths, seed=noise.seed,
                      gain_scale=gain_scale, path_costs=costs, ensemble=ens)


@dataclass(frozen=True)
class CostateReport:
    """Reconstructed adjoint pair plus the first-order-condition check.

    The stationarity residual v_k = R u_k + B' p_k + Bbar' q_k has zero
    conditional mean at the optimum, so its time-aggregated ensemble mean is
    the reported statistic (single test instead of one per step).
    """

    p: np.ndarray            # (paths, N+2, n)
    q: np.ndarray
    stat_per_step: np.ndarray  # (N+2,) max-abs ensemble mean of v_k
    stat_agg: float
    stat_agg_se: float

    def as_dict(self) -> dict:
        return {
            "stationarity_agg": self.stat_agg,
            "stationarity_agg_se": self.stat_agg_se,
            "stationarity_per_step": [float(v) for v in self.stat_per_step],
        }


def costate_reconstruct(gains: LqGains, ens: LqEnsemble) -> CostateReport:
    """(p, q) along simulated paths from the kernel decomposition.

    p(t) = P(t)x(t) - int_0^h P(t,t+theta) xhat(t|t+theta-h) dtheta with the
    intermediate-lag predictors evaluated by the same window formula as the
    controller (exact for every lag since window controls are measurable at
    the lagged information time); q(t) = P(t)[Abar x(t) + Bbar u(t)].
    """
    spec = gains.spec
    grid = ens.grid
    n, d, N = spec.n, grid.d, grid.N
    delta = grid.delta
    paths = ens.paths
    kernel = gains.kernel
    expA, expAB = _offset_propagators(spec, grid)

    # xh[ell] at step k: xhat(t_k|t_{k-ell}); the window integral grows one
    # trapezoid panel per extra lag, so all lags come out of one sweep
    p = np.empty((paths, N + 2, n))
    q = np.empty((paths, N + 2, n))
    for k in range(N + 2):
        t = float(grid.times[k])
        imax = min(d, N + 1 - k)
        pk = ens.x[:, k] @ kernel.P_at(t).T
        if d > 0 and imax > 0:
            lmax = min(d, k)
            # F[i] = e^{A i delta} B u_{k-i}
            F = np.einsum("inm,pim->pin", expAB[:lmax + 1],
                          ens.u[:, k - lmax:k + 1][:, ::-1])
            xh = np.empty((lmax + 1, paths, n))
            xh[0] = ens.x[:, k]
            acc = np.zeros((paths, n))
            for ell in range(1, lmax + 1):
                acc = acc + 0.5 * delta * (F[:, ell - 1] + F[:, ell])
                xh[ell] = ens.x[:, k - ell] @ expA[ell].T + acc
            for i in range(imax + 1):
                kv = kernel_eval(kernel, t, t + i * delta)
                wq = delta * (0.5 if i in (0, imax) else 1.0)
                pk = pk - wq * (xh[min(d - i, lmax)] @ kv.T)
        p[:, k] = pk
        q[:, k] = (ens.x[:, k] @ spec.Abar.T
                   + ens.u[:, k] @ spec.Bbar.T) @ kernel.P_at(t).T

    v = ens.u @ spec.R.T + p @ spec.B + q @ spec.Bbar
    per_step = np.max(np.abs(np.mean(v, axis=0)), axis=1)
    wts = np.full(N + 2, delta)
    wts[0] *= 0.5
    wts[-1] *= 0.5
    agg_paths = np.einsum("k,pkm->pm", wts, v)
    agg = float(np.max(np.abs(np.mean(agg_paths, axis=0))))
    se = float(np.max(np.std(agg_paths, axis=0, ddof=1)
                      / np.sqrt(paths))) if paths > 1 else float("inf")
    return CostateReport(p=p, q=q, stat_per_step=per_step,
                         stat_agg=agg, stat_agg_se=se)
