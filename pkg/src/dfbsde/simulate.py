"""Closed-loop Monte Carlo, predictor banks, residuals, and the exact lattice oracle.

Predictor bank convention (one bank per path, shape (d+1, n)):

    bank[j] = E[x_k | info(k-1-j)],   j = 0..d,

so bank[0] is x_k itself (x_k is info(k-1)-measurable) and bank[d] is the
delayed mean the feedback actually uses. Banks are seeded with x0 repeated:
conditioning indices below zero mean the trivial sigma-algebra and x_0 is
deterministic.

The simulators are vectorized across paths; every per-path value depends only
on that path's increments, so splitting the path axis into contiguous blocks
(the DFBSDE_THREADS worker partition) cannot change any result bit. Ensemble
reductions happen afterwards in fixed path order.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .continuous_riccati import ContinuousKernel, closed_loop_gains, kernel_eval
from .discrete_riccati import DiscreteRiccatiTables, backward_sweep, reconstruct_p
from .errors import (
    ConfigError,
    DimensionMismatch,
    SingularSystem,
    TreeTooLarge,
)
from .model import DiscreteSystem, NoiseEnsemble, SystemSpec, TimeGrid

__all__ = [
    "PathEnsemble",
    "LatticeOracleSolution",
    "seed_bank",
    "advance_predictors",
    "simulate_paths",
    "residual_check",
    "ResidualReport",
    "oracle_solve",
    "lattice_compare",
]


def seed_bank(x0: np.ndarray, d: int) -> np.ndarray:
    return np.tile(np.asarray(x0, float), (d + 1, 1))


def advance_predictors(bank: np.ndarray, tables: DiscreteRiccatiTables,
                       k: int, x_next: np.ndarray) -> np.ndarray:
    """Bank update k -> k+1 under the closed loop x_{k+1} = A_k x_k + M_k bank[d].

    For a conditioning index s <= k-1 the increment dw_k is independent of
    info(s) and bank[d] is info(s)-measurable, so

        E[x_{k+1}|info(s)] = Ahat E[x_k|info(s)] + Mbar_k bank[d],

    while the newest slot is the realized state itself.
    """
    ds = tables.ds
    out = np.empty_like(bank)
    out[0] = x_next
    if bank.shape[0] > 1:
        out[1:] = bank[:-1] @ ds.Ahat[k].T + bank[-1] @ tables.Mbar[k].T
    return out


# ---------------------------------------------------------------------------
# vectorized walkers (path axis first)


def _run_discrete(tables: DiscreteRiccatiTables, dw: np.ndarray):
    ds = tables.ds
    grid = ds.grid
    n, d, N = ds.PT.shape[0], grid.d, grid.N
    paths = dw.shape[0]
    if dw.shape[1] != N + 1:
        raise DimensionMismatch(
            f"noise has {dw.shape[1]} increments, grid wants {N + 1}")
    delta = grid.delta

    x = np.full((paths, N + 2, n), np.nan)
    p = np.full((paths, N + 2, n), np.nan)
    q = np.full((paths, N + 2, n), np.nan)
    snaps = np.full((paths, N + 2, d + 1, n), np.nan)

    x[:, 0] = ds.x0
    bank = np.broadcast_to(ds.x0, (paths, d + 1, n)).copy()
    snaps[:, 0] = bank
    for k in range(N + 1):
        dwk = dw[:, k][:, None]
        xk = x[:, k]
        old = bank[:, d]
        # q_k from the closed form: the band-adjusted weight G_{k+1} applied
        # to the realized diffusion of x, with E[p_k|info(k-d-1)] = S U old
        # and E[q_k|info(k-d-1)] = G W old.
        U = ds.Ahat[k] + tables.Mbar[k]
        Ep = old @ (tables.S[k + 1] @ U).T
        Eq = old @ (tables.G[k + 1] @ tables.W[k]).T
        q[:, k] = (xk @ ds.Abar[k].T + Ep @ ds.Bbar[k].T
                   + Eq @ ds.Cbar[k].T) @ tables.G[k + 1].T
        x_next = (xk @ ds.Ahat[k].T + dwk * (xk @ ds.Abar[k].T)
                  + old @ tables.Mbar[k].T + dwk * (old @ tables.Mtil[k].T))
        new = np.empty_like(bank)
        new[:, 0] = x_next
        if d > 0:
            new[:, 1:] = (bank[:, :-1] @ ds.Ahat[k].T)
            new[:, 1:] += (old @ tables.Mbar[k].T)[:, None, :]
        bank = new
        x[:, k + 1] = x_next
        snaps[:, k + 1] = bank
        # p_k = P_{k+1} x_{k+1} - sum_i band[k+1][i] E[x_{k+1}|info(k-d+i)]
        p[:, k] = x_next @ tables.P[k + 1].T \
            - np.einsum("iab,pib->pa", tables.band[k + 1], bank[:, ::-1])
    return x, p, q, snaps


@dataclass(frozen=True)
class _ContinuousStepData:
    """Per-step deterministic matrices shared by every path."""

    P: np.ndarray        # (N+2, n, n) costate weight at t_k
    S: np.ndarray        # (N+2, n, n)
    Gdrift: np.ndarray   # (N+2, n, n)
    Gdiff: np.ndarray    # (N+2, n, n)
    Req: np.ndarray      # (N+2, n, n)  E[q|lag] = Req @ bank[d]
    Abar: np.ndarray     # (N+2, n, n) diffusion coefficient at t_k
    Bbar: np.ndarray
    Cbar: np.ndarray
    Astep: np.ndarray    # (N+1, n, n)  I + delta A(t_k)
    kw: list             # kw[k]: (imax+1, n, n) trapezoid-weighted kernel row


def _continuous_step_data(spec: SystemSpec, grid: TimeGrid,
                          kernel: ContinuousKernel) -> _ContinuousStepData:
    n, d, N = spec.n, grid.d, grid.N
    delta = grid.delta
    eye = np.eye(n)
    P = np.empty((N + 2, n, n))
    S = np.empty((N + 2, n, n))
    Gdr = np.empty((N + 2, n, n))
    Gdi = np.empty((N + 2, n, n))
    Req = np.empty((N + 2, n, n))
    Ab = np.empty((N + 2, n, n))
    Bb = np.empty((N + 2, n, n))
    Cb = np.empty((N + 2, n, n))
    Astep = np.empty((N + 1, n, n))
    kw = []
    for k in range(N + 2):
        t = grid.times[k]
        P[k] = kernel.P_at(t)
        S[k] = kernel.S_at(t)
        Gdr[k], Gdi[k] = closed_loop_gains(kernel, t)
        Ab[k] = spec.coeff("Abar", t)
        Bb[k] = spec.coeff("Bbar", t)
        Cb[k] = spec.coeff("Cbar", t)
        F = eye - Cb[k] @ P[k]
        Req[k] = np.linalg.solve(F, P[k] @ (Ab[k] + Bb[k] @ S[k]))
        if k <= N:
            Astep[k] = eye + delta * spec.coeff("A", t)
        imax = min(d, N + 1 - k)
        if imax <= 0 or d == 0:
            row = np.zeros((0, n, n))
        else:
            row = np.empty((imax + 1, n, n))
            for i in range(imax + 1):
                w = 0.5 if i in (0, imax) else 1.0
                row[i] = delta * w * kernel_eval(kernel, t, t + i * delta)
        kw.append(row)
    return _ContinuousStepData(P=P, S=S, Gdrift=Gdr, Gdiff=Gdi, Req=Req,
                               Abar=Ab, Bbar=Bb, Cbar=Cb, Astep=Astep, kw=kw)


def _run_continuous(spec: SystemSpec, grid: TimeGrid, sd: _ContinuousStepData,
                    dw: np.ndarray):
    n, d, N = spec.n, grid.d, grid.N
    paths = dw.shape[0]
    if dw.shape[1] != N + 1:
        raise DimensionMismatch(
            f"noise has {dw.shape[1]} increments, grid wants {N + 1}")
    delta = grid.delta

    x = np.full((paths, N + 2, n), np.nan)
    p = np.full((paths, N + 2, n), np.nan)
    q = np.full((paths, N + 2, n), np.nan)
    snaps = np.full((paths, N + 2, d + 1, n), np.nan)

    x[:, 0] = spec.x0
    bank = np.broadcast_to(spec.x0, (paths, d + 1, n)).copy()

    def costate(k):
        pk = x[:, k] @ sd.P[k].T
        row = sd.kw[k]
        if row.shape[0]:
            pk = pk - np.einsum("iab,pib->pa", row,
                                bank[:, ::-1][:, : row.shape[0]])
        p[:, k] = pk
        old = bank[:, d]
        Eq = old @ sd.Req[k].T
        Ep = old @ sd.S[k].T
        q[:, k] = (x[:, k] @ sd.Abar[k].T + Ep @ sd.Bbar[k].T
                   + Eq @ sd.Cbar[k].T) @ sd.P[k].T

    snaps[:, 0] = bank
    costate(0)
    for k in range(N + 1):
        dwk = dw[:, k][:, None]
        xk = x[:, k]
        old = bank[:, d]
        x_next = (xk @ sd.Astep[k].T + delta * (old @ sd.Gdrift[k].T)
                  + dwk * (xk @ sd.Abar[k].T + old @ sd.Gdiff[k].T))
        new = np.empty_like(bank)
        new[:, 0] = x_next
        if d > 0:
            new[:, 1:] = bank[:, :-1] @ sd.Astep[k].T
            new[:, 1:] += delta * (old @ sd.Gdrift[k].T)[:, None, :]
        bank = new
        x[:, k + 1] = x_next
        snaps[:, k + 1] = bank
        costate(k + 1)
    return x, p, q, snaps


@dataclass(frozen=True)
class PathEnsemble:
    """Trajectories of (x, p, q), the driving increments, and per-step
    predictor-bank snapshots for every path.

    Discrete mode defines p_k, q_k for k = 0..N (slots N+1 stay NaN: the
    recursion ends at p_N = P(T) x_{N+1}); continuous mode fills 0..N+1.
    """

    mode: str
    seed: int | None
    grid: TimeGrid
    dw: np.ndarray      # (paths, N+1)
    x: np.ndarray       # (paths, N+2, n)
    p: np.ndarray
    q: np.ndarray
    snaps: np.ndarray   # (paths, N+2, d+1, n)

    @property
    def paths(self) -> int:
        return self.dw.shape[0]

    @property
    def n(self) -> int:
        return self.x.shape[2]


def _thread_count() -> int:
    raw = os.environ.get("DFBSDE_THREADS", "1")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"DFBSDE_THREADS={raw!r} is not an integer")
    if count < 1:
        raise ConfigError(f"DFBSDE_THREADS={count} must be >= 1")
    return count


def simulate_paths(spec: SystemSpec, grid: TimeGrid, noise: NoiseEnsemble,
                   tables: DiscreteRiccatiTables | None = None,
                   kernel: ContinuousKernel | None = None) -> PathEnsemble:
    """Forward-simulate the closed loop for every noise path.

    Exactly one of tables (discrete recursion) / kernel (continuous-limit
    gains on the same grid) selects the mode.
    """
    if (tables is None) == (kernel is None):
        raise ConfigError("pass exactly one of tables= or kernel=")
    dw = noise.increments
    if abs(noise.delta - grid.delta) > 1e-12 * max(1.0, grid.delta):
        raise DimensionMismatch(
            f"noise step {noise.delta} differs from grid step {grid.delta}")
    paths, n = dw.shape[0], spec.n
    N, d = grid.N, grid.d

    if tables is not None:
        mode = "discrete"

        def run(block):
            return _run_discrete(tables, dw[block])
    else:
        mode = "continuous"
        sd = _continuous_step_data(spec, grid, kernel)

        def run(block):
            return _run_continuous(spec, grid, sd, dw[block])

    x = np.empty((paths, N + 2, n))
    p = np.empty((paths, N + 2, n))
    q = np.empty((paths, N + 2, n))
    snaps = np.empty((paths, N + 2, d + 1, n))

    threads = _thread_count()
    blocks = [b for b in np.array_split(np.arange(paths), threads) if b.size]

    def fill(block):
        xb, pb, qb, sb = run(block)
        x[block] = xb
        p[block] = pb
        q[block] = qb
        snaps[block] = sb

    if len(blocks) <= 1:
        for block in blocks:
            fill(block)
    else:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            list(pool.map(fill, blocks))

    return PathEnsemble(mode=mode, seed=noise.seed, grid=grid, dw=dw,
                        x=x, p=p, q=q, snaps=snaps)


# ---------------------------------------------------------------------------
# residual verification


@dataclass(frozen=True)
class ResidualReport:
    """Three residual families, reported as maxima over steps/paths.

    terminal_max     worst |p_N - P(T) x_{N+1}| from the reconstruction
    bsde_max         worst per-path one-step backward-equation defect
    bsde_mean        per-step ensemble mean defect, max over steps; decays
                     at second order in the step (one-step weak error)
    bsde_agg         ensemble mean of the per-path sum of step defects; the
                     telescoped global bias, first order in the step, and
                     the quantity the halving criterion tracks
    bsde_agg_se      Monte Carlo standard error of bsde_agg
    martingale_max   worst per-step |mean(dw_k p_k' - delta q_k)|
    martingale_z     same, in units of its Monte Carlo standard error
    """

    mode: str
    paths: int
    terminal_max: float
    bsde_max: float
    bsde_mean: float
    bsde_agg: float
    bsde_agg_se: float
    bsde_mean_per_step: np.ndarray = field(repr=False)
    martingale_max: float = 0.0
    martingale_z: float = 0.0

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "paths": self.paths,
            "terminal_max": self.terminal_max,
            "bsde_max": self.bsde_max,
            "bsde_mean": self.bsde_mean,
            "bsde_agg": self.bsde_agg,
            "bsde_agg_se": self.bsde_agg_se,
            "bsde_mean_per_step": [float(v) for v in self.bsde_mean_per_step],
            "martingale_max": self.martingale_max,
            "martingale_z": self.martingale_z,
        }


def _aggregate_stats(rs: np.ndarray):
    # per-path sum over steps, then fixed-order ensemble mean; the step-local
    # weak errors telescope into the global first-order bias here
    acc = rs.sum(axis=1)
    agg = float(np.max(np.abs(np.mean(acc, axis=0))))
    if acc.shape[0] > 1:
        se = float(np.max(np.std(acc, axis=0, ddof=1)
                          / np.sqrt(acc.shape[0])))
    else:
        se = float("inf")
    return agg, se


def _martingale_stats(ens: PathEnsemble, pshift: int):
    # mean over paths of dw_k p_{k+pshift} - delta q_k, per step; zero-mean
    # by the defining property of q as the increment-weighted conditional
    # mean. pshift picks the first p-slot that feels increment k: 0 in
    # discrete indexing (p_k is built from x_{k+1}), 1 in continuous.
    delta = ens.grid.delta
    N = ens.grid.N
    vals = ens.dw[:, :, None] * ens.p[:, pshift: N + 1 + pshift] \
        - delta * ens.q[:, : N + 1]
    mean = np.mean(vals, axis=0)
    if ens.paths > 1:
        se = np.std(vals, axis=0, ddof=1) / np.sqrt(ens.paths)
    else:
        se = np.full_like(mean, np.inf)
    zmax = float(np.max(np.abs(mean) / np.maximum(se, 1e-300)))
    return float(np.max(np.abs(mean))), zmax


def residual_check(ens: PathEnsemble,
                   tables: DiscreteRiccatiTables | None = None,
                   kernel: ContinuousKernel | None = None,
                   spec: SystemSpec | None = None) -> ResidualReport:
    """Ito-formula verification on a finished ensemble.

    Discrete mode replays the exact backward equation
    p_{k-1} = Dhat E[p_k|info(k-1)] + delta Dbar q_k + Qhat x_k with the
    conditional mean in closed form (zero up to rounding). Continuous mode
    forms the Ito one-step defect of the backward SDE, whose ensemble mean
    per step decays at first order in the grid step.
    """
    grid = ens.grid
    N, d = grid.N, grid.d
    delta = grid.delta
    if ens.mode == "discrete":
        if tables is None:
            raise ConfigError("discrete residuals need the tables")
        ds = tables.ds
        term = float(np.max(np.abs(ens.p[:, N] - ens.x[:, N + 1] @ ds.PT.T)))
        rs = []
        for k in range(1, N + 1):
            xh1 = ens.x[:, k] @ ds.Ahat[k].T \
                + ens.snaps[:, k, d] @ tables.Mbar[k].T
            Ep1 = xh1 @ tables.G[k + 1].T
            if d > 0:
                Ep1 = Ep1 - np.einsum("iab,pib->pa", tables.band[k + 1, :d],
                                      ens.snaps[:, k + 1, 1:][:, ::-1])
            r = ens.p[:, k - 1] - Ep1 @ ds.Dhat[k].T \
                - delta * (ens.q[:, k] @ ds.Dbar[k].T) \
                - ens.x[:, k] @ ds.Qhat[k].T
            rs.append(r)
        rs = np.stack(rs, axis=1)  # (paths, N, n)
        per_step = np.max(np.abs(np.mean(rs, axis=0)), axis=1)
        agg, agg_se = _aggregate_stats(rs)
        mart_max, mart_z = _martingale_stats(ens, 0)
        return ResidualReport(
            mode="discrete", paths=ens.paths, terminal_max=term,
            bsde_max=float(np.max(np.abs(rs))),
            bsde_mean=float(np.max(per_step)),
            bsde_agg=agg, bsde_agg_se=agg_se,
            bsde_mean_per_step=per_step,
            martingale_max=mart_max, martingale_z=mart_z,
        )

    if spec is None and kernel is not None:
        spec = kernel.spec
    if spec is None:
        raise ConfigError("continuous residuals need the kernel or spec")
    PT = np.asarray(spec.PT, float)
    term = float(np.max(np.abs(ens.p[:, N + 1] - ens.x[:, N + 1] @ PT.T)))
    rs = []
    for k in range(1, N + 2):
        t = grid.times[k - 1]
        D = spec.coeff("D", t)
        Db = spec.coeff("Dbar", t)
        Q = spec.coeff("Q", t)
        r = ens.p[:, k] - ens.p[:, k - 1] \
            + delta * (ens.p[:, k - 1] @ D.T + ens.q[:, k - 1] @ Db.T
                       + ens.x[:, k - 1] @ Q.T) \
            - ens.dw[:, k - 1][:, None] * ens.q[:, k - 1]
        rs.append(r)
    rs = np.stack(rs, axis=1)
    per_step = np.max(np.abs(np.mean(rs, axis=0)), axis=1)
    agg, agg_se = _aggregate_stats(rs)
    mart_max, mart_z = _martingale_stats(ens, 1)
    return ResidualReport(
        mode="continuous", paths=ens.paths, terminal_max=term,
        bsde_max=float(np.max(np.abs(rs))),
        bsde_mean=float(np.max(per_step)),
        bsde_agg=agg, bsde_agg_se=agg_se,
        bsde_mean_per_step=per_step,
        martingale_max=mart_max, martingale_z=mart_z,
    )


# ---------------------------------------------------------------------------
# exact lattice oracle


MAX_TREE_DEPTH = 14


@dataclass(frozen=True)
class LatticeOracleSolution:
    """Exact solution of the discrete system on the +-sqrt(delta) binary tree.

    Level-l node ids are l-bit integers; bit (l-1-j) holds the sign of
    increment j, so ancestors are right-shifts and sibling/descendant index
    ranges are contiguous. x_k lives at level k, p_k at level k+1, q_k at
    level k (each measurable w.r.t. that many increments).
    """

    ds: DiscreteSystem
    x: list          # x[k]: (2**k, n)
    p: list          # p[k]: (2**(k+1), n)
    q: list          # q[k]: (2**k, n)
    residual: float  # worst defining-equation defect of the solved system

    def path_nodes(self, leaf: int):
        """(x, p, q) trajectories along the sign path encoded by a leaf id."""
        N = self.ds.grid.N
        xs = np.stack([self.x[k][leaf >> (N + 1 - k)] for k in range(N + 2)])
        ps = np.stack([self.p[k][leaf >> (N - k)] for k in range(N + 1)])
        qs = np.stack([self.q[k][leaf >> (N + 1 - k)] for k in range(N + 1)])
        return xs, ps, qs


def oracle_solve(ds: DiscreteSystem) -> LatticeOracleSolution:
    """Assemble and solve the full tree-coupled linear system exactly.

    Unknowns: x_k at every level-k node (k >= 1), p_k at level k+1, q_k at
    level k. Equations: the forward step at every level-(k+1) node with
    conditional expectations as subtree averages at the lagged ancestor, the
    backward step at every level-k node, the increment-weighted definition of
    q, and the terminal tie at every leaf.
    """
    grid = ds.grid
    N, d = grid.N, grid.d
    n = ds.PT.shape[0]
    if N > MAX_TREE_DEPTH:
        raise TreeTooLarge(
            f"N={N} exceeds the exact-tree limit {MAX_TREE_DEPTH}")
    delta = grid.delta
    sq = np.sqrt(delta)

    def level_count(lv):
        return 1 << lv

    # unknown offsets
    off_x = {}
    off_p = {}
    off_q = {}
    size = 0
    for k in range(1, N + 2):
        off_x[k] = size
        size += level_count(k) * n
    for k in range(N + 1):
        off_p[k] = size
        size += level_count(k + 1) * n
    for k in range(N + 1):
        off_q[k] = size
        size += level_count(k) * n
    if size > 600_000:
        raise TreeTooLarge(f"{size} unknowns exceed the oracle budget")

    rows, cols, vals = [], [], []
    rhs = np.zeros(size)
    x0 = np.asarray(ds.x0, float)
    row_at = [0]

    def add_block(r0, c0, mat):
        for a in range(n):
            for b in range(n):
                v = mat[a, b]
                if v != 0.0:
                    rows.append(r0 + a)
                    cols.append(c0 + b)
                    vals.append(v)

    def new_rows():
        r = row_at[0]
        row_at[0] += n
        return r

    eye = np.eye(n)

    for k in range(N + 1):
        Ah, Bh, Ch, Dh = ds.Ahat[k], ds.Bhat[k], ds.Chat[k], ds.Dhat[k]
        Ab, Bb, Cb, Db = ds.Abar[k], ds.Bbar[k], ds.Cbar[k], ds.Dbar[k]
        lagged = max(k - d, 0)
        span_p = 1 << (k + 1 - lagged)   # level-(k+1) nodes under the ancestor
        span_q = 1 << (k - lagged)
        for node in range(level_count(k + 1)):
            sign = 1.0 if node & 1 else -1.0
            dwv = sign * sq
            r = new_rows()
            add_block(r, off_x[k + 1] + node * n, eye)
            parent = node >> 1
            Ak = Ah + dwv * Ab
            if k == 0:
                rhs[r:r + n] += Ak @ x0
            else:
                add_block(r, off_x[k] + parent * n, -Ak)
            anc = node >> (k + 1 - lagged)
            Bk = (Bh + dwv * Bb) / span_p
            base_p = anc * span_p
            for j in range(span_p):
                add_block(r, off_p[k] + (base_p + j) * n, -Bk)
            # (1/delta) C_k E(dw_k p_k|lag) = C_k E(q_k|lag) by the q-definition
            Ck = (Ch + dwv * Cb) * (1.0 / span_q)
            base_q = anc * span_q
            for j in range(span_q):
                add_block(r, off_q[k] + (base_q + j) * n, -Ck)
        # q_k definition at level-k nodes
        for node in range(level_count(k)):
            r = new_rows()
            add_block(r, off_q[k] + node * n, eye)
            up = (node << 1) | 1
            dn = node << 1
            add_block(r, off_p[k] + up * n, -(0.5 / sq) * eye)
            add_block(r, off_p[k] + dn * n, (0.5 / sq) * eye)
        # backward step defines p_{k-1} at level-k nodes
        if k >= 1:
            for node in range(level_count(k)):
                r = new_rows()
                add_block(r, off_p[k - 1] + node * n, eye)
                up = (node << 1) | 1
                dn = node << 1
                add_block(r, off_p[k] + up * n, -0.5 * (Dh + sq * Db))
                add_block(r, off_p[k] + dn * n, -0.5 * (Dh - sq * Db))
                add_block(r, off_x[k] + node * n, -ds.Qhat[k])
    # terminal tie at leaves
    for node in range(level_count(N + 1)):
        r = new_rows()
        add_block(r, off_p[N] + node * n, eye)
        add_block(r, off_x[N + 1] + node * n, -ds.PT)
    assert row_at[0] == size

    A = sp.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsc()
    try:
        lu = splu(A)
        sol = lu.solve(rhs)
    except RuntimeError as exc:
        raise SingularSystem(
            f"exact tree system is singular: {exc}") from exc
    if not np.isfinite(sol).all():
        raise SingularSystem("exact tree system produced non-finite values")
    resid = float(np.max(np.abs(A @ sol - rhs)))

    xs = [x0.reshape(1, n)]
    for k in range(1, N + 2):
        xs.append(sol[off_x[k]:off_x[k] + level_count(k) * n]
                  .reshape(level_count(k), n))
    ps = [sol[off_p[k]:off_p[k] + level_count(k + 1) * n]
          .reshape(level_count(k + 1), n) for k in range(N + 1)]
    qs = [sol[off_q[k]:off_q[k] + level_count(k) * n]
          .reshape(level_count(k), n) for k in range(N + 1)]
    return LatticeOracleSolution(ds=ds, x=xs, p=ps, q=qs, residual=resid)


def lattice_compare(ds: DiscreteSystem,
                    tables: DiscreteRiccatiTables | None = None) -> dict:
    """Riccati closed loop vs the exact tree at every node.

    Walks all 2^(N+1) sign paths through the vectorized discrete simulator
    and reports worst relative errors (|a - b| / max(1, |b|)) per component.
    """
    grid = ds.grid
    N = grid.N
    if tables is None:
        tables = backward_sweep(ds)
    oracle = oracle_solve(ds)
    leaves = np.arange(1 << (N + 1))
    bits = (leaves[:, None] >> (N - np.arange(N + 1))) & 1
    dw = (2.0 * bits - 1.0) * np.sqrt(grid.delta)
    x, p, q, _ = _run_discrete(tables, dw)

    def rel(a, b):
        return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))

    ex = max(rel(x[:, k], oracle.x[k][leaves >> (N + 1 - k)])
             for k in range(N + 2))
    ep = max(rel(p[:, k], oracle.p[k][leaves >> (N - k)])
             for k in range(N + 1))
    eq = max(rel(q[:, k], oracle.q[k][leaves >> (N + 1 - k)])
             for k in range(N + 1))
    return {
        "max_rel_x": float(ex),
        "max_rel_p": float(ep),
        "max_rel_q": float(eq),
        "tree_residual": oracle.residual,
        "nodes": int(leaves.size),
    }


def replay_single_path(tables: DiscreteRiccatiTables, dw: np.ndarray):
    """Reference per-path walk through the public single-path operations;
    used to cross-check the vectorized simulator."""
    ds = tables.ds
    grid = ds.grid
    N, d = grid.N, grid.d
    from .model import realize_coefficients
    x = [np.asarray(ds.x0, float)]
    bank = seed_bank(ds.x0, d)
    ps, qs = [], []
    for k in range(N + 1):
        A_k, _, _, _ = realize_coefficients(ds, k, dw[k])
        M_k = tables.Mbar[k] + dw[k] * tables.Mtil[k]
        old = bank[d]
        U = ds.Ahat[k] + tables.Mbar[k]
        Ep = tables.S[k + 1] @ (U @ old)
        Eq = tables.G[k + 1] @ (tables.W[k] @ old)
        qs.append(tables.G[k + 1] @ (ds.Abar[k] @ x[-1] + ds.Bbar[k] @ Ep
                                     + ds.Cbar[k] @ Eq))
        x_next = A_k @ x[-1] + M_k @ old
        bank = advance_predictors(bank, tables, k, x_next)
        ps.append(reconstruct_p(tables, k + 1, x_next, bank[::-1]))
        x.append(x_next)
    return np.stack(x), np.stack(ps), np.stack(qs)
