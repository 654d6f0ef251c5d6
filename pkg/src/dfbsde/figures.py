"""Report figures rendered next to the delimited outputs.

Every subcommand that emits tables also drops a small PNG summarizing them
(disable with --no-plot). Figures are a convenience view; the CSV/JSON files
remain the interface of record.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": "dfbsde"}


def _save(fig, path: str) -> str:
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def fig_discrete_tables(tables, grid, path: str) -> str:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    t = grid.times
    n = tables.P.shape[1]
    for r in range(n):
        for c in range(n):
            axes[0].plot(t, tables.P[:, r, c], lw=1.2,
                         label=f"P[{r},{c}]" if n <= 2 else None)
            axes[1].plot(t, tables.S[:, r, c], lw=1.2,
                         label=f"S[{r},{c}]" if n <= 2 else None)
    axes[0].set_title("decoupling matrix P_k")
    axes[1].set_title("band-deflated S_k")
    for ax in axes:
        ax.set_xlabel("t")
        if n <= 2:
            ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def fig_kernel(kernel, path: str) -> str:
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    t = kernel.times
    n = kernel.P.shape[1]
    for r in range(n):
        for c in range(n):
            lbl = f"[{r},{c}]" if n <= 2 else None
            axes[0].plot(t, kernel.P[:, r, c], lw=1.2, label=lbl)
            axes[1].plot(t, kernel.Kdiag[:, r, c], lw=1.2, label=lbl)
            axes[2].plot(t, kernel.S[:, r, c], lw=1.2, label=lbl)
    for ax, name in zip(axes, ("P(t)", "P(t,t)", "S(t)")):
        ax.set_title(name)
        ax.set_xlabel("t")
        if n <= 2:
            ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def fig_paths(ens, path: str, max_shown: int = 40) -> str:
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2), sharex=True)
    t = ens.grid.times
    shown = min(max_shown, ens.x.shape[0])
    for name, arr, ax in (("x", ens.x, axes[0]), ("p", ens.p, axes[1]),
                          ("q", ens.q, axes[2])):
        for pth in range(shown):
            ax.plot(t, arr[pth, :, 0], lw=0.5, alpha=0.4, color="tab:blue")
        valid = ~np.all(np.isnan(arr[:, :, 0]), axis=0)
        ax.plot(t[valid], np.nanmean(arr[:, valid, 0], axis=0), lw=1.8,
                color="tab:red", label="ensemble mean")
        ax.set_title(f"{name}(t), {shown} of {ens.x.shape[0]} paths")
        ax.set_xlabel("t")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def fig_converge(rows, slope_p: float, slope_s: float, path: str) -> str:
    rows = list(rows)
    deltas = np.array([r[0] for r in rows])
    ep = np.array([r[1] for r in rows])
    es = np.array([r[2] for r in rows])
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    ax.loglog(deltas, ep, "o-", label=f"P error (slope {slope_p:.2f})")
    ax.loglog(deltas, es, "s-", label=f"S error (slope {slope_s:.2f})")
    ref = ep[0] * deltas / deltas[0]
    ax.loglog(deltas, ref, "k--", lw=0.8, label="order 1")
    ax.set_xlabel("delta")
    ax.set_ylabel("max error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def fig_gains(gains, path: str) -> str:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    t = gains.times
    m, n = gains.K.shape[1], gains.P.shape[1]
    for r in range(m):
        for c in range(n):
            axes[0].plot(t, gains.K[:, r, c], lw=1.2,
                         label=f"K[{r},{c}]" if m * n <= 4 else None)
    for r in range(n):
        for c in range(n):
            axes[1].plot(t, gains.P[:, r, c], lw=1.2,
                         label=f"P[{r},{c}]" if n <= 2 else None)
    axes[0].set_title("feedback gain K(t)")
    axes[1].set_title("value matrix P(t)")
    for ax in axes:
        ax.set_xlabel("t")
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def fig_cost(report, path: str) -> str:
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    ax.hist(report.path_costs, bins=60, color="tab:blue", alpha=0.75)
    ax.axvline(report.mean, color="tab:red", lw=1.5,
               label=f"mean {report.mean:.5g} +- {report.stderr:.2g}")
    ax.set_xlabel("path cost")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def fig_oracle(cmp: dict, path: str) -> str:
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    keys = ("max_rel_x", "max_rel_p", "max_rel_q", "tree_residual")
    vals = [max(cmp[k], 1e-18) for k in keys]
    ax.bar(range(len(keys)), vals, color="tab:blue")
    ax.set_yscale("log")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, fontsize=7)
    ax.set_ylabel("relative error")
    ax.axhline(cmp.get("tol", 1e-8), color="tab:red", lw=1.0, ls="--",
               label="tolerance")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
