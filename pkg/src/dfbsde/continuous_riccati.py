"""Continuous-limit decoupling: backward matrix ODE with advanced argument.

The costate admits p(t) = P(t)x(t) - int_0^h P(t,t+theta) E[x(t)|info(t+theta-h)] dtheta
with a two-time kernel that factors through its diagonal,

    P(t,s) = exp(D (s-t)) P(s,s) exp(A (s-t)),         s in [t, t+h],
    P(t,s) = 0                                    for  s > T  (strictly),

so one backward march over the diagonal determines everything. The march
integrates

    -dP/dt = D P + P A + Dbar P Abar + Q - P(t, t+h)

with an explicit midpoint rule, restarted at every grid node so the
t = T - h discontinuity of the advanced term never sits inside a step, and
closes the diagonal sample P(t,t) from (P, S) at each node, where

    S(t) = P(t) - int_0^h P(t, t+theta) dtheta      (trapezoid, clipped at T).

The diagonal sample stored at t = T is the closure limit from the left; the
terminal condition zeroes the kernel only strictly beyond T. Three closure
placements are available; they coincide for scalar states and differ for
n >= 2 with Cbar != 0 (the backward drift of the limit ODE does not commute
with the diffusion closure factor):

    eq30    : -[(SB + DbPBb)S + F^{-1}(SC + DbPCb)P(Ab + BbS)]
    remark6 : -F^{-1}[(SB + DbPBb)S F + (SC + DbPCb)P(Ab + BbS)]
    limit   : -[(SB + DbPBb)S + (SC + DbPCb)P F^{-1}(Ab + BbS)]

with F = I - Cbar P. "limit" is the the delta -> 0 limit of the exact
discrete band recursion; "eq30" stays the default.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import NumericalError, OutOfRange, SingularClosure, StepMisaligned
from .model import SystemSpec

__all__ = [
    "ContinuousKernel",
    "integrate_backward",
    "kernel_eval",
    "closed_loop_gains",
    "PT_CLOSURES",
]

_REL_TOL = 1e-12
RCOND_LIMIT = 1e-12


def _rcond(mat: np.ndarray) -> float:
    norm = np.linalg.norm(mat, 1)
    if not np.isfinite(norm) or norm == 0.0:
        return 0.0
    try:
        inv_norm = np.linalg.norm(np.linalg.inv(mat), 1)
    except np.linalg.LinAlgError:
        return 0.0
    return 1.0 / (norm * inv_norm)


def _closure_factor(t: float, P: np.ndarray, Cbar: np.ndarray,
                    rcond_limit: float) -> np.ndarray:
    F = np.eye(P.shape[0]) - Cbar @ P
    rc = _rcond(F)
    if rc < rcond_limit:
        raise SingularClosure(t, rc)
    return F


def _diag_eq30(t, P, S, co, rcond_limit):
    F = _closure_factor(t, P, co["Cbar"], rcond_limit)
    left = (S @ co["B"] + co["Dbar"] @ P @ co["Bbar"]) @ S
    mid = (S @ co["C"] + co["Dbar"] @ P @ co["Cbar"]) @ P
    tail = co["Abar"] + co["Bbar"] @ S
    return -(left + np.linalg.solve(F, mid @ tail))


def _diag_remark6(t, P, S, co, rcond_limit):
    F = _closure_factor(t, P, co["Cbar"], rcond_limit)
    left = (S @ co["B"] + co["Dbar"] @ P @ co["Bbar"]) @ S @ F
    mid = (S @ co["C"] + co["Dbar"] @ P @ co["Cbar"]) @ P
    tail = co["Abar"] + co["Bbar"] @ S
    return -np.linalg.solve(F, left + mid @ tail)


def _diag_limit(t, P, S, co, rcond_limit):
    F = _closure_factor(t, P, co["Cbar"], rcond_limit)
    left = (S @ co["B"] + co["Dbar"] @ P @ co["Bbar"]) @ S
    mid = (S @ co["C"] + co["Dbar"] @ P @ co["Cbar"]) @ P
    tail = np.linalg.solve(F, co["Abar"] + co["Bbar"] @ S)
    return -(left + mid @ tail)


PT_CLOSURES = {
    "eq30": _diag_eq30,
    "remark6": _diag_remark6,
    "limit": _diag_limit,
}


@dataclass(frozen=True)
class ContinuousKernel:
    """Backward tables on the eta-grid: P (costate weight), Kdiag (diagonal
    kernel samples P(t,t)), S (delay-window aggregate)."""

    spec: SystemSpec
    eta: float
    times: np.ndarray
    P: np.ndarray
    Kdiag: np.ndarray
    S: np.ndarray
    pt_closure: str
    rcond_limit: float = RCOND_LIMIT
    _exp_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def T(self) -> float:
        return float(self.spec.T)

    def _interp(self, table: np.ndarray, t: float) -> np.ndarray:
        pos = t / self.eta
        j0 = int(np.floor(pos))
        j0 = min(max(j0, 0), table.shape[0] - 1)
        j1 = min(j0 + 1, table.shape[0] - 1)
        frac = pos - j0
        if j1 == j0 or frac <= 0.0:
            return table[j0]
        return (1.0 - frac) * table[j0] + frac * table[j1]

    def _check_t(self, t: float):
        tol = _REL_TOL * max(1.0, self.T)
        if t < -tol or t > self.T + tol:
            raise OutOfRange(f"t={t} outside [0, {self.T}]")

    def P_at(self, t: float) -> np.ndarray:
        self._check_t(t)
        return self._interp(self.P, t)

    def S_at(self, t: float) -> np.ndarray:
        self._check_t(t)
        return self._interp(self.S, t)

    def Kdiag_at(self, t: float) -> np.ndarray:
        self._check_t(t)
        return self._interp(self.Kdiag, t)

    def propagators(self, t: float, tau: float):
        """Cached exp(D tau), exp(A tau); time-varying specs freeze the
        coefficient at t."""
        key = (round(tau, 15),) if not self.spec.time_varying \
            else (round(t, 15), round(tau, 15))
        hit = self._exp_cache.get(key)
        if hit is None:
            D = self.spec.coeff("D", t)
            A = self.spec.coeff("A", t)
            hit = (expm(D * tau), expm(A * tau))
            self._exp_cache[key] = hit
        return hit


def kernel_eval(kernel: ContinuousKernel, t: float, s: float) -> np.ndarray:
    """Two-time kernel P(t, s) for t in [0, T], s in [t, t+h]."""
    T = kernel.T
    tol = _REL_TOL * max(1.0, T)
    kernel._check_t(t)
    if s < t - tol or s > t + kernel.spec.h + tol:
        raise OutOfRange(f"s={s} outside [t, t+h] for t={t}")
    if s > T + tol:
        return np.zeros((kernel.n, kernel.n))
    s = min(max(s, t), T)
    tau = s - t
    if tau <= 0.0:
        return np.array(kernel.Kdiag_at(t))
    ed, ea = kernel.propagators(t, tau)
    return ed @ kernel._interp(kernel.Kdiag, s) @ ea


def closed_loop_gains(kernel: ContinuousKernel, t: float):
    """Feedback gains of the decoupled forward equation,

    drift  = B S + C P F^{-1} (Abar + Bbar S),
    diff   = Bbar S + Cbar P F^{-1} (Abar + Bbar S),  F = I - Cbar P,

    both applied to the lagged conditional mean of the state.
    """
    spec = kernel.spec
    P = kernel.P_at(t)
    S = kernel.S_at(t)
    Cbar = spec.coeff("Cbar", t)
    F = _closure_factor(t, P, Cbar, kernel.rcond_limit)
    xi = np.linalg.solve(F, spec.coeff("Abar", t) + spec.coeff("Bbar", t) @ S)
    drift = spec.coeff("B", t) @ S + spec.coeff("C", t) @ P @ xi
    diff = spec.coeff("Bbar", t) @ S + Cbar @ P @ xi
    return drift, diff


def _steps_of(span: float, eta: float, what: str) -> int:
    ratio = span / eta
    count = int(round(ratio))
    if count < 0 or abs(ratio - count) > _REL_TOL * max(1.0, abs(ratio)):
        raise StepMisaligned(f"{what}={span} is not a multiple of eta={eta}")
    return count


def integrate_backward(spec: SystemSpec, eta: float, pt_closure: str = "eq30",
                       closure=None,
                       rcond_limit: float = RCOND_LIMIT) -> ContinuousKernel:
    """March the backward ODE from T to 0 on the eta-grid.

    closure overrides the diagonal sample map: callable
    (t, P, S, coeffs_at_t) -> P(t,t). The delayed-quadratic-cost module
    passes its specialized positive form here; the default is the general
    pt_closure formula.

    The theta = 0 node of the S-quadrature involves the diagonal sample
    being defined, so each node solves a small fixed point (contraction of
    strength O(eta)); it is iterated to rounding precision.
    """
    if eta <= 0:
        raise StepMisaligned(f"eta={eta} must be positive")
    if pt_closure not in PT_CLOSURES:
        raise StepMisaligned(f"unknown pt closure {pt_closure!r}")
    n = spec.n
    T, h = float(spec.T), float(spec.h)
    M = _steps_of(T, eta, "T")
    if M < 1:
        raise StepMisaligned(f"eta={eta} leaves no steps on [0, {T}]")
    dh = _steps_of(h, eta, "h") if h > 0 else 0

    base = PT_CLOSURES[pt_closure]
    if closure is None:
        def closure(t, P, S, co):
            return base(t, P, S, co, rcond_limit)

    def coeffs(t):
        return {name: spec.coeff(name, t)
                for name in ("A", "Abar", "B", "Bbar", "C", "Cbar",
                             "D", "Dbar", "Q")}

    times = np.arange(M + 1, dtype=float) * eta
    P = np.full((M + 1, n, n), np.nan)
    Kdiag = np.full((M + 1, n, n), np.nan)
    S = np.full((M + 1, n, n), np.nan)

    P[M] = spec.PT
    S[M] = spec.PT
    Kdiag[M] = closure(T, P[M], S[M], coeffs(T))

    tv = spec.time_varying
    if not tv and dh > 0:
        t0 = 0.0
        expD = np.stack([expm(spec.coeff("D", t0) * (i * eta))
                         for i in range(dh + 1)])
        expA = np.stack([expm(spec.coeff("A", t0) * (i * eta))
                         for i in range(dh + 1)])
    else:
        expD = expA = None

    def advanced_node(j):
        # P(t_j, t_j + h) by index arithmetic; zero strictly beyond T.
        if dh == 0:
            return Kdiag[j]
        sj = j + dh
        if sj > M:
            return np.zeros((n, n))
        assert np.isfinite(Kdiag[sj]).all()
        if tv:
            t = times[j]
            return expm(spec.coeff("D", t) * h) @ Kdiag[sj] \
                @ expm(spec.coeff("A", t) * h)
        return expD[dh] @ Kdiag[sj] @ expA[dh]

    def advanced_mid(j):
        # P(t, t + h) at t = t_j - eta/2.
        if dh == 0:
            return None  # h = 0 closes through the unknown P, handled inline
        sj = j + dh  # advanced argument between samples sj-1 and sj
        if sj > M:
            return np.zeros((n, n))
        assert np.isfinite(Kdiag[sj]).all() and np.isfinite(Kdiag[sj - 1]).all()
        kd = 0.5 * (Kdiag[sj - 1] + Kdiag[sj])
        if tv:
            t = times[j] - 0.5 * eta
            return expm(spec.coeff("D", t) * h) @ kd \
                @ expm(spec.coeff("A", t) * h)
        return expD[dh] @ kd @ expA[dh]

    def rhs(t, Pv, adv):
        co = coeffs(t)
        if adv is None:  # h = 0: advanced term is the diagonal closure itself
            adv = closure(t, Pv, Pv, co)
        return co["D"] @ Pv + Pv @ co["A"] + co["Dbar"] @ Pv @ co["Abar"] \
            + co["Q"] - adv

    def window_sum(j):
        # trapezoid of the kernel over theta in (0, min(h, T - t_j)],
        # excluding the theta = 0 node (owned by the fixed point below)
        imax = min(dh, M - j)
        if imax == 0:
            return None, 0.0
        w = np.ones(imax)
        w[-1] = 0.5
        idx = np.arange(1, imax + 1)
        kd = Kdiag[j + idx]
        assert np.isfinite(kd).all()
        if tv:
            t = times[j]
            stack = np.stack([
                expm(spec.coeff("D", t) * (i * eta)) @ Kdiag[j + i]
                @ expm(spec.coeff("A", t) * (i * eta))
                for i in idx
            ])
        else:
            stack = expD[idx] @ kd @ expA[idx]
        return eta * np.tensordot(w, stack, axes=(0, 0)), 0.5 * eta

    def close_node(j):
        co = coeffs(times[j])
        if not np.isfinite(P[j]).all():
            raise NumericalError(
                f"P(t) lost finiteness at t={times[j]:.6g}; the Riccati "
                "system appears to blow up before t=0"
            )
        if dh == 0:
            S[j] = P[j]
            Kdiag[j] = closure(times[j], P[j], P[j], co)
            return
        quad, w0 = window_sum(j)
        guess = Kdiag[j + 1]
        ok = False
        for _ in range(24):
            Sj = P[j] - quad - w0 * guess
            new = closure(times[j], P[j], Sj, co)
            if not np.isfinite(new).all():
                break
            done = np.max(np.abs(new - guess)) \
                <= 1e-14 * max(1.0, np.max(np.abs(new)))
            guess = new
            if done:
                ok = True
                break
        if not ok:
            raise NumericalError(
                f"diagonal closure fixed point diverged at t={times[j]:.6g}; "
                "the delayed Riccati system appears to blow up (no "
                "finite-time solution on [0, T])"
            )
        Kdiag[j] = guess
        S[j] = P[j] - quad - w0 * guess

    for j in range(M, 0, -1):
        tj = times[j]
        Pmid = P[j] + 0.5 * eta * rhs(tj, P[j], advanced_node(j))
        P[j - 1] = P[j] + eta * rhs(tj - 0.5 * eta, Pmid, advanced_mid(j))
        close_node(j - 1)

    return ContinuousKernel(
        spec=spec, eta=eta, times=times, P=P, Kdiag=Kdiag, S=S,
        pt_closure=pt_closure, rcond_limit=rcond_limit,
    )
