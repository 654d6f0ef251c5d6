"""Problem-file ingestion and deterministic CSV/JSON emission.

Problem files are JSON. Matrices are nested row-major lists (a bare number is
accepted as 1x1); a coefficient may instead be a piecewise-constant table
{"breakpoints": [t0=0, t1, ...], "values": [M0, M1, ...]}. All floats are
written back with 17 significant digits so every CSV round-trips exactly and
reruns are byte-comparable.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .errors import ProblemFormatError
from .model import SystemSpec, TimeTable

GENERAL_FIELDS = ("A", "Abar", "B", "Bbar", "C", "Cbar", "D", "Dbar",
                  "Q", "PT")
LQ_FIELDS = ("A", "Abar", "B", "Bbar", "Q", "R", "H")


def fmt(v) -> str:
    return f"{float(v):.17g}"


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ProblemFormatError(f"problem file not found: {path}")
    except json.JSONDecodeError as e:
        raise ProblemFormatError(
            f"{path}: invalid JSON at line {e.lineno} column {e.colno}: "
            f"{e.msg}")
    if not isinstance(data, dict):
        raise ProblemFormatError(f"{path}: top level must be an object")
    return data


def _as_matrix_value(name: str, value):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return np.array([[float(value)]])
    if isinstance(value, list):
        arr = np.array(value, dtype=object)
        try:
            arr = arr.astype(float)
        except (ValueError, TypeError):
            raise ProblemFormatError(
                f"field '{name}': matrix entries must be numbers")
        if arr.ndim == 1:
            arr = arr.reshape(1, -1) if name != "x0" else arr
        if name != "x0" and arr.ndim != 2:
            raise ProblemFormatError(
                f"field '{name}': expected a matrix (list of rows), "
                f"got {arr.ndim}-d data")
        return arr
    raise ProblemFormatError(
        f"field '{name}': expected number, matrix, or table, "
        f"got {type(value).__name__}")


def _coeff_value(name: str, value):
    if isinstance(value, dict):
        missing = [k for k in ("breakpoints", "values") if k not in value]
        if missing:
            raise ProblemFormatError(
                f"field '{name}': table needs 'breakpoints' and 'values', "
                f"missing {missing}")
        vals = [_as_matrix_value(name, v) for v in value["values"]]
        return TimeTable(times=value["breakpoints"], values=np.array(vals))
    return _as_matrix_value(name, value)


def _require(data: dict, path: str, fields) -> None:
    missing = [f for f in fields if f not in data]
    if missing:
        raise ProblemFormatError(
            f"{path}: missing required field(s) {missing}")


def _scalar(data: dict, name: str) -> float:
    v = data[name]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ProblemFormatError(
            f"field '{name}': expected a number, got {type(v).__name__}")
    return float(v)


def _vector(name: str, value) -> np.ndarray:
    try:
        arr = np.atleast_1d(np.asarray(value, dtype=float)).ravel()
    except (ValueError, TypeError):
        raise ProblemFormatError(f"field '{name}': expected a vector")
    return arr


def load_problem(path: str) -> SystemSpec:
    """General coupled-system problem file -> SystemSpec."""
    data = _load_json(path)
    _require(data, path, GENERAL_FIELDS + ("h", "T", "x0"))
    kw = {name: _coeff_value(name, data[name]) for name in GENERAL_FIELDS}
    return SystemSpec(h=_scalar(data, "h"), T=_scalar(data, "T"),
                      x0=_vector("x0", data["x0"]), **kw)


def load_lq_problem(path: str):
    """Controlled-system problem file -> LqSpec."""
    from .lq import LqSpec

    data = _load_json(path)
    _require(data, path, LQ_FIELDS + ("h", "T", "x0"))
    kw = {name: _as_matrix_value(name, data[name]) for name in LQ_FIELDS}
    return LqSpec(h=_scalar(data, "h"), T=_scalar(data, "T"),
                  x0=_vector("x0", data["x0"]), **kw)


def _write_lines(path: str, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def write_matrix_table(path: str, mats: np.ndarray) -> None:
    """(k, row, col, value) rows for a stack of per-step matrices."""
    def rows():
        for k in range(mats.shape[0]):
            for r in range(mats.shape[1]):
                for c in range(mats.shape[2]):
                    yield (str(k), str(r), str(c), fmt(mats[k, r, c]))
    _write_lines(path, "k,row,col,value", rows())


def write_band_table(path: str, band: np.ndarray) -> None:
    """(k, i, row, col, value) rows for the staggered kernel weights."""
    def rows():
        for k in range(band.shape[0]):
            for i in range(band.shape[1]):
                for r in range(band.shape[2]):
                    for c in range(band.shape[3]):
                        yield (str(k), str(i), str(r), str(c),
                               fmt(band[k, i, r, c]))
    _write_lines(path, "k,i,row,col,value", rows())


def write_kernel(path: str, kernel) -> None:
    """(t, row, col, P, Kdiag, S) rows on the eta-grid."""
    def rows():
        for j, t in enumerate(kernel.times):
            for r in range(kernel.P.shape[1]):
                for c in range(kernel.P.shape[2]):
                    yield (fmt(t), str(r), str(c), fmt(kernel.P[j, r, c]),
                           fmt(kernel.Kdiag[j, r, c]),
                           fmt(kernel.S[j, r, c]))
    _write_lines(path, "t,row,col,P,Kdiag,S", rows())


def write_paths(path: str, ens) -> None:
    """Long-form trajectory dump; undefined slots stay nan."""
    n = ens.x.shape[2]
    names = [f"x{i}" for i in range(n)] + [f"p{i}" for i in range(n)] \
        + [f"q{i}" for i in range(n)]
    times = ens.grid.times

    def rows():
        for pth in range(ens.x.shape[0]):
            for k in range(ens.x.shape[1]):
                vals = [str(pth), str(k), fmt(times[k])]
                vals += [fmt(v) for v in ens.x[pth, k]]
                vals += [fmt(v) for v in ens.p[pth, k]]
                vals += [fmt(v) for v in ens.q[pth, k]]
                yield vals
    _write_lines(path, ",".join(["path", "k", "t"] + names), rows())


def write_gains(path: str, gains) -> None:
    """(t, row, col, K_value, P_value); entries outside a matrix's shape
    are nan so one row/col indexing covers both K (m x n) and P (n x n)."""
    m, n = gains.K.shape[1], gains.P.shape[1]
    nanv = fmt(float("nan"))

    def rows():
        for j, t in enumerate(gains.times):
            for r in range(max(m, n)):
                for c in range(n):
                    kv = fmt(gains.K[j, r, c]) if r < m else nanv
                    pv = fmt(gains.P[j, r, c]) if r < n else nanv
                    yield (fmt(t), str(r), str(c), kv, pv)
    _write_lines(path, "t,row,col,K_value,P_value", rows())


def write_converge(path: str, rows_in) -> None:
    """(delta, err_P, err_S) study table."""
    _write_lines(path, "delta,err_P,err_S",
                 ((fmt(d), fmt(ep), fmt(es)) for d, ep, es in rows_in))


def write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out_dir: str, mode: str, config: dict,
                   outputs: list) -> str:
    """Run manifest: config echo + artifact version + emitted files.

    Content is a pure function of the run configuration (no timestamps), so
    identical runs rewrite identical manifests.
    """
    from . import __version__

    payload = {
        "artifact": {"name": "dfbsde", "version": __version__},
        "mode": mode,
        "config": config,
        "outputs": sorted(os.path.basename(p) for p in outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    write_json(path, payload)
    return path
