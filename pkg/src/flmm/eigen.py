"""Eigen-decomposition of evaluated covariance surfaces.

Covariance surfaces are evaluated on an equidistant, cell-centred grid
``t_d = lo + (d - 1/2) a`` with ``a = |T| / D`` and decomposed with a cyclic
Jacobi solver.  Eigenvalues are multiplied by
``a`` and eigenvectors divided by ``sqrt(a)``, so the columns approximate
L2-orthonormal eigenfunctions.  Negative eigenvalues are set to zero, and
components are retained greedily across processes until a target share of
the total variance is explained.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .covfit import CovarianceFit, evaluate_surface

PROCESS_ORDER = ("B", "C", "E")


class NoSignalError(ValueError):
    """Every covariance surface has only non-positive eigenvalues."""


# ---------------------------------------------------------------------------
# symmetric eigensolver
# ---------------------------------------------------------------------------


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of ``0..n-1`` (n even) such that every pair meets once per sweep."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a, tol: float = 1e-12, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi.

    Each sweep visits all off-diagonal pairs in round-robin order; the
    ``n/2`` rotations of one round act on disjoint index pairs and are
    applied together.  Iteration stops once the off-diagonal Frobenius norm
    falls below ``tol`` times the Frobenius norm of ``a``.

    Returns
    -------
    values : ndarray, shape (n,)
        Descending eigenvalues.
    vectors : ndarray, shape (n, n)
        Orthonormal eigenvectors in columns.
    """
    a = np.array(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    if n % 2:
        # a decoupled zero row/column keeps the round-robin pairing complete
        a = np.pad(a, ((0, 1), (0, 1)))
    m = a.shape[0]
    v = np.eye(m)
    scale = np.linalg.norm(a)
    rounds = _round_robin(m) if m > 1 else []
    if scale > 0:
        for _ in range(max_sweeps):
            off = np.linalg.norm(a - np.diag(np.diag(a)))
            if off <= tol * scale:
                break
            for p, q in rounds:
                apq = a[p, q]
                active = apq != 0.0
                if not active.any():
                    continue
                with np.errstate(over="ignore"):
                    # |theta| = inf yields t = 0: the pair is already decoupled
                    theta = np.where(active, (a[q, q] - a[p, p]) / (2.0 * np.where(active, apq, 1.0)), 0.0)
                    t = np.where(
                        active, np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0
                    )
                t = np.where(active & (theta == 0.0), 1.0, t)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :], a[q, :]
                a[p, :], a[q, :] = c[:, None] * rp - s[:, None] * rq, s[:, None] * rp + c[:, None] * rq
                cp, cq = a[:, p], a[:, q]
                a[:, p], a[:, q] = cp * c - cq * s, cp * s + cq * c
                vp, vq = v[:, p], v[:, q]
                v[:, p], v[:, q] = vp * c - vq * s, vp * s + vq * c
        else:
            warnings.warn("Jacobi iteration did not converge", RuntimeWarning, stacklevel=2)
    vals = np.diag(a)[:n].copy()
    vecs = v[:n, :n] if m == n else v[:n, :][:, _drop_pad(v, n)]
    order = np.argsort(-vals, kind="stable")
    return vals[order], vecs[:, order]


def _drop_pad(v: np.ndarray, n: int) -> np.ndarray:
    # the padded coordinate stays decoupled; drop the column living on it
    return np.flatnonzero(np.abs(v[n, :]) < 0.5)


# ---------------------------------------------------------------------------
# eigen system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProcessEigen:
    """All trimmed, rescaled eigenpairs of one process (descending)."""

    values: np.ndarray
    functions: np.ndarray


@dataclass(frozen=True)
class EigenSystem:
    """Eigenfunctions on an equidistant grid plus the truncation.

    ``processes[X].values`` holds every computed eigenvalue (after trimming)
    and ``n_components[X]`` how many leading components are retained.
    """

    grid: np.ndarray
    spacing: float
    processes: dict
    n_components: dict
    sigma2: float
    level: float | None
    bounds: tuple[float, float] | None = None

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p for p in PROCESS_ORDER if p in self.processes)

    @property
    def domain(self) -> tuple[float, float]:
        if self.bounds is not None:
            return self.bounds
        half = 0.5 * self.spacing
        return float(self.grid[0] - half), float(self.grid[-1] + half)

    @property
    def domain_length(self) -> float:
        lo, hi = self.domain
        return hi - lo

    def values(self, process: str) -> np.ndarray:
        return self.processes[process].values[: self.n_components[process]]

    def functions(self, process: str) -> np.ndarray:
        return self.processes[process].functions[:, : self.n_components[process]]

    def reconstruct(self, process: str, retained: bool = False) -> np.ndarray:
        """``Phi diag(nu) Phi'`` on the grid."""
        pe = self.processes[process]
        k = self.n_components[process] if retained else pe.values.size
        phi = pe.functions[:, :k]
        return (phi * pe.values[:k]) @ phi.T

    def with_components(self, n_components: dict) -> "EigenSystem":
        n = _check_counts(self.processes, n_components)
        return EigenSystem(self.grid, self.spacing, self.processes, n, self.sigma2, None, self.bounds)


def _flip_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _decompose_one(mat: np.ndarray, spacing: float, solver: str) -> ProcessEigen:
    if solver == "jacobi":
        vals, vecs = jacobi_eigh(mat)
    elif solver == "numpy":
        vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
        vals, vecs = vals[::-1], vecs[:, ::-1]
    else:
        raise ValueError(f"unknown solver {solver!r}")
    vals = np.maximum(vals, 0.0) * spacing
    return ProcessEigen(vals, _flip_signs(vecs) / np.sqrt(spacing))


def _check_counts(processes: dict, n_components: dict) -> dict:
    out = {}
    for p, pe in processes.items():
        k = int(n_components.get(p, 0))
        positive = int(np.sum(pe.values > 0))
        if k < 0:
            raise ValueError(f"negative component count for {p}")
        if k > positive:
            warnings.warn(
                f"process {p}: requested {k} components but only {positive} positive eigenvalues",
                RuntimeWarning,
                stacklevel=3,
            )
            k = positive
        out[p] = k
    return out


def select_truncation(
    values: dict, sigma2: float, domain_length: float, level: float, total: float | None = None
) -> dict:
    """Greedy truncation across processes.

    Components are taken in order of decreasing eigenvalue (ties broken by
    process order B, C, E) until
    ``(selected + sigma2 |T|) / (total + sigma2 |T|) >= level``.  ``total``
    defaults to the sum of all supplied eigenvalues.
    """
    if not 0.0 < level <= 1.0:
        raise ValueError(f"explained-variance level must lie in (0, 1], got {level}")
    values = {p: np.asarray(v, dtype=float) for p, v in values.items()}
    noise = max(float(sigma2), 0.0) * domain_length
    if total is None:
        total = sum(float(v.sum()) for v in values.values())
    denom = total + noise
    counts = {p: 0 for p in values}
    if denom <= 0:
        return counts
    cands = [
        (-float(v[k]), PROCESS_ORDER.index(p), k, p)
        for p, v in values.items()
        for k in range(v.size)
        if v[k] > 0
    ]
    cands.sort()
    acc = noise
    for neg, _, _, p in cands:
        if acc / denom >= level:
            break
        acc += -neg
        counts[p] += 1
    return counts


def decompose_matrices(
    mats: dict,
    grid,
    sigma2: float,
    level: float | None = 0.95,
    n_components: dict | None = None,
    solver: str = "jacobi",
    domain: tuple[float, float] | None = None,
) -> EigenSystem:
    """Eigen system from covariance matrices already evaluated on ``grid``.

    ``domain`` defaults to the cells around a cell-centred grid, i.e. the
    grid extended by half a spacing on either side.
    """
    grid = np.asarray(grid, dtype=float)
    d = grid.size
    if d < 2:
        raise ValueError("grid needs at least two points")
    spacing = float(grid[-1] - grid[0]) / (d - 1)
    if not np.allclose(np.diff(grid), spacing, rtol=1e-9, atol=0):
        raise ValueError("grid must be equidistant")
    procs = {}
    for p in PROCESS_ORDER:
        if p in mats:
            mat = np.asarray(mats[p], dtype=float)
            if mat.shape != (d, d):
                raise ValueError(f"surface {p} has shape {mat.shape}, expected ({d}, {d})")
            procs[p] = _decompose_one(mat, spacing, solver)
    if not procs or all(not np.any(pe.values > 0) for pe in procs.values()):
        raise NoSignalError("no signal: all eigenvalues are non-positive")
    sigma2 = max(float(sigma2), 0.0)
    if domain is None:
        domain = (grid[0] - 0.5 * spacing, grid[-1] + 0.5 * spacing)
    bounds = (float(domain[0]), float(domain[1]))
    if n_components is not None:
        counts = _check_counts(procs, n_components)
        level = None
    else:
        if level is None:
            raise ValueError("either level or n_components is required")
        counts = select_truncation(
            {p: pe.values for p, pe in procs.items()}, sigma2, bounds[1] - bounds[0], level
        )
    return EigenSystem(grid, spacing, procs, counts, sigma2, level, bounds)


def decompose(
    fit: CovarianceFit,
    d: int = 100,
    level: float | None = 0.95,
    n_components: dict | None = None,
    solver: str = "jacobi",
) -> EigenSystem:
    """Evaluate the fitted surfaces on a ``d``-point grid and decompose them."""
    if d < 10:
        raise ValueError(f"grid size must be at least 10, got {d}")
    lo, hi = fit.domain
    grid = cell_grid(lo, hi, d)
    mats = {p: evaluate_surface(fit, p, grid) for p in fit.processes}
    return decompose_matrices(mats, grid, fit.sigma2, level, n_components, solver, (lo, hi))


def cell_grid(lo: float, hi: float, d: int) -> np.ndarray:
    """``d`` equidistant cell midpoints covering ``[lo, hi]``."""
    return lo + (np.arange(d) + 0.5) * ((hi - lo) / d)


@dataclass(frozen=True)
class VarianceDecomposition:
    """Shares of the integrated variance.

    ``shares[(X, k)]`` is the share of component ``k`` (0-based) of process
    ``X``; ``sigma2_share`` that of the white noise.  Shares are computed
    over all eigenvalues, retained or not, and sum to one.
    """

    shares: dict
    sigma2_share: float
    total: float
    retained: dict

    def as_dict(self) -> dict:
        comps = [
            {"process": p, "component": k + 1, "share": s, "retained": k < self.retained.get(p, 0)}
            for (p, k), s in self.shares.items()
            if s > 0
        ]
        return {"total": self.total, "sigma2_share": self.sigma2_share, "components": comps}


def variance_decomposition(es: EigenSystem) -> VarianceDecomposition:
    noise = es.sigma2 * es.domain_length
    total = noise + sum(float(pe.values.sum()) for pe in es.processes.values())
    if total <= 0:
        raise NoSignalError("total variance is zero")
    shares = {
        (p, k): float(v) / total for p in es.names for k, v in enumerate(es.processes[p].values)
    }
    return VarianceDecomposition(shares, noise / total, total, dict(es.n_components))


def interpolate_eigenfunctions(es: EigenSystem, process: str, ts) -> np.ndarray:
    """Linearly interpolate the retained eigenfunctions of ``process`` to ``ts``."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    lo, hi = es.domain
    slack = 1e-12 * max(1.0, hi - lo)
    if ts.size and (ts.min() < lo - slack or ts.max() > hi + slack):
        raise ValueError(f"cannot extrapolate eigenfunctions outside [{lo}, {hi}]")
    # np.interp holds the end values over the outer half cells
    phi = es.functions(process)
    return np.column_stack([np.interp(ts, es.grid, phi[:, k]) for k in range(phi.shape[1])]) \
        if phi.shape[1] else np.zeros((ts.size, 0))


def write_eigensystem(es: EigenSystem, out_dir) -> list[Path]:
    """Write retained eigenfunctions (CSV per process) and a JSON summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for p in es.names:
        phi = es.functions(p)
        path = out_dir / f"eigenfunctions_{p}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"phi_{k + 1}" for k in range(phi.shape[1])])
            for t, row in zip(es.grid, phi):
                w.writerow([format(t, ".17g")] + [format(v, ".17g") for v in row])
        paths.append(path)
    summary = {
        "grid_size": int(es.grid.size),
        "spacing": es.spacing,
        "domain": list(es.domain),
        "sigma2": es.sigma2,
        "level": es.level,
        "n_components": es.n_components,
        "eigenvalues": {p: es.values(p).tolist() for p in es.names},
        "all_eigenvalues": {p: es.processes[p].values.tolist() for p in es.names},
    }
    path = out_dir / "eigen.json"
    path.write_text(json.dumps(summary, indent=2))
    paths.append(path)
    vd = variance_decomposition(es)
    path = out_dir / "variance_decomposition.json"
    path.write_text(json.dumps(vd.as_dict(), indent=2))
    paths.append(path)
    return paths
