"""Smooth auto-covariance surfaces from cross-products of centered curves.

Every pair of observed points ``(a, b)`` whose curves share the first or
the second grouping level contributes one product ``y_a * y_b``.  The
products are regressed on indicator-weighted tensor-product spline surfaces,
one per random process, plus an error-variance column that is active only for
a point paired with itself:

    y_a y_b ~ sum_X delta_X(a, b) K^X(t_a, t_b) + delta_aa' sigma^2

The regression has at most ``3 K^2 + 1`` columns but can have ``10^7`` to
``10^8`` rows.  The default route never forms the rows: because every row is
a Kronecker product ``m_a (x) m_b`` of basis rows, the normal equations
collapse to sums over grouping levels of ``S_g (x) S_g`` with
``S_g = sum_{a in g} m_a m_a'``.  The streamed route enumerates the products
explicitly and is kept as a reference.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import scipy.sparse as sp

from .basis import (
    NormalEquations,
    PenalizedLsFit,
    Penalty,
    SplineBasis,
    difference_penalty,
    eval_basis,
    solve_normal_equations,
)
from .fdata import CurveSet, GroupingDesign


class DegenerateDesignError(ValueError):
    """Two random processes have identical indicator patterns."""


class ProductBlock(NamedTuple):
    """All products whose first point lies on one curve."""

    t: np.ndarray
    t2: np.ndarray
    same_g1: np.ndarray
    same_g2: np.ndarray
    same_curve: np.ndarray
    same_point: np.ndarray
    product: np.ndarray
    first: np.ndarray
    second: np.ndarray

    def indicator(self, process: str) -> np.ndarray:
        return {"B": self.same_g1, "C": self.same_g2, "E": self.same_curve}[process]


def _resolve_design(cs: CurveSet, design) -> GroupingDesign:
    if isinstance(design, GroupingDesign):
        return design
    return cs.design(design)


def enumerate_products(cs: CurveSet, design=None, order=None) -> Iterator[ProductBlock]:
    """Yield the products of centered responses, one block per first curve.

    Pairs are ordered and include each point paired with itself.  For the
    crossed design a pair is kept when the curves share ``g1`` or ``g2``;
    for the single-factor design when they share ``g1``.  ``order`` permutes
    the curves whose blocks are emitted.
    """
    design = _resolve_design(cs, design)
    crossed = design.kind == "crossed"
    starts = cs.curve_starts
    pg1 = cs.point_g1
    pg2 = cs.point_g2 if crossed else None
    curves = range(cs.n_curves) if order is None else order
    for c in curves:
        a = np.arange(starts[c], starts[c + 1])
        mask = pg1 == cs.g1[c]
        if crossed:
            mask |= pg2 == cs.g2[c]
        b = np.flatnonzero(mask)
        ia = np.repeat(a, b.size)
        ib = np.tile(b, a.size)
        same_g1 = pg1[ib] == cs.g1[c]
        same_g2 = pg2[ib] == cs.g2[c] if crossed else np.zeros(ib.size, dtype=bool)
        same_curve = cs.curve[ib] == c
        yield ProductBlock(
            t=cs.t[ia],
            t2=cs.t[ib],
            same_g1=same_g1,
            same_g2=same_g2,
            same_curve=same_curve,
            same_point=ia == ib,
            product=cs.y[ia] * cs.y[ib],
            first=ia,
            second=ib,
        )


def _group_sizes(cs: CurveSet, crossed: bool):
    """Point counts per speaker, word and cell."""
    npc = cs.points_per_curve
    by_g1 = np.bincount(cs.g1, weights=npc)
    by_g2 = np.bincount(cs.g2, weights=npc) if crossed else None
    by_cell = None
    if crossed:
        cell = cs.g1 * cs.n_g2 + cs.g2
        by_cell = np.bincount(cell, weights=npc)
    return by_g1, by_g2, by_cell


def count_products(cs: CurveSet, design=None) -> int:
    """Number of ordered pairs sharing ``g1`` or ``g2`` (inclusion-exclusion)."""
    design = _resolve_design(cs, design)
    crossed = design.kind == "crossed"
    by_g1, by_g2, by_cell = _group_sizes(cs, crossed)
    total = np.sum(by_g1**2)
    if crossed:
        total += np.sum(by_g2**2) - np.sum(by_cell**2)
    return int(round(total))


def _check_design(cs: CurveSet, design: GroupingDesign) -> None:
    """Reject designs in which two processes share the same pair set."""
    npc = cs.points_per_curve

    def nested(fine, coarse):
        # every coarse level contains exactly one fine level
        pairs = np.unique(np.c_[coarse, fine], axis=0)
        return np.unique(pairs[:, 0]).size == pairs.shape[0]

    curve = np.arange(cs.n_curves)
    checks = [("B", "E", nested(curve, cs.g1))]
    if design.kind == "crossed":
        checks.append(("C", "E", nested(curve, cs.g2)))
        checks.append(("B", "C", nested(cs.g2, cs.g1) and nested(cs.g1, cs.g2)))
    for x, y, same in checks:
        if same:
            raise DegenerateDesignError(
                f"degenerate design: processes {x} and {y} are active on exactly the same pairs"
            )
    if npc.sum() < 2:
        raise DegenerateDesignError("degenerate design: a single observed point")


def _tensor_rows(ma: np.ndarray, mb: np.ndarray) -> np.ndarray:
    return (ma[:, :, None] * mb[:, None, :]).reshape(ma.shape[0], -1)


def stream_normal_equations(
    cs: CurveSet, basis: SplineBasis, design=None, order=None
) -> NormalEquations:
    """Normal equations accumulated block by block from explicit products."""
    design = _resolve_design(cs, design)
    procs = design.processes
    k2 = basis.n_basis**2
    total = NormalEquations.zeros(len(procs) * k2 + 1)
    m = eval_basis(basis, cs.t)
    for blk in enumerate_products(cs, design, order):
        rows = _tensor_rows(m[blk.first], m[blk.second])
        x = np.zeros((rows.shape[0], total.ncols))
        for p, proc in enumerate(procs):
            x[:, p * k2:(p + 1) * k2] = rows * blk.indicator(proc)[:, None]
        x[:, -1] = blk.same_point
        total = total + NormalEquations.from_design(x, blk.product)
    return total


def _indicator(ids: np.ndarray, n_groups: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(ids.size), (ids, np.arange(ids.size))), shape=(n_groups, ids.size))


def grouped_normal_equations(cs: CurveSet, basis: SplineBasis, design=None) -> NormalEquations:
    """Exact normal equations of the product regression without forming rows.

    For processes ``X, Y`` the cross block is ``sum_g S_g (x) S_g`` over the
    groups on which both indicators are one, and the response block of ``X``
    is ``sum_g u_g (x) u_g`` with ``u_g = sum_{a in g} y_a m_a``.
    """
    design = _resolve_design(cs, design)
    crossed = design.kind == "crossed"
    procs = design.processes
    k = basis.n_basis
    k2 = k * k
    m = eval_basis(basis, cs.t)
    y = cs.y
    outer = (m[:, :, None] * m[:, None, :]).reshape(-1, k2)
    ids = {"B": cs.point_g1, "E": cs.curve}
    sizes = {"B": cs.n_g1, "E": cs.n_curves}
    if crossed:
        ids["C"] = cs.point_g2
        sizes["C"] = cs.n_g2
        ids["BC"] = cs.point_g1 * cs.n_g2 + cs.point_g2
        sizes["BC"] = cs.n_g1 * cs.n_g2

    stats = {}
    for key, gid in ids.items():
        g = _indicator(gid, sizes[key])
        stats[key] = (
            np.asarray(g @ outer).reshape(-1, k, k),  # S_g
            np.asarray(g @ (y[:, None] * m)),  # u_g
            np.asarray(g @ (y * y)).ravel(),  # sum of y^2
            np.asarray(g @ np.ones(y.size)).ravel(),  # point counts
        )

    def meet(x, z):
        if x == z:
            return x
        if "E" in (x, z):
            return "E"
        return "BC"

    p = len(procs)
    ncols = p * k2 + 1
    xtx = np.zeros((ncols, ncols))
    xty = np.zeros(ncols)
    diag_vec = outer.sum(axis=0)
    for i, x in enumerate(procs):
        for j, z in enumerate(procs):
            if j < i:
                continue
            s = stats[meet(x, z)][0]
            blk = np.einsum("gac,gbd->abcd", s, s).reshape(k2, k2)
            xtx[i * k2:(i + 1) * k2, j * k2:(j + 1) * k2] = blk
            xtx[j * k2:(j + 1) * k2, i * k2:(i + 1) * k2] = blk.T
        u = stats[x][1]
        xty[i * k2:(i + 1) * k2] = np.einsum("ga,gb->ab", u, u).ravel()
        xtx[i * k2:(i + 1) * k2, -1] = diag_vec
        xtx[-1, i * k2:(i + 1) * k2] = diag_vec
    xtx[-1, -1] = y.size
    xty[-1] = float(y @ y)
    yty = float(np.sum(stats["B"][2] ** 2))
    n = float(np.sum(stats["B"][3] ** 2))
    if crossed:
        yty += float(np.sum(stats["C"][2] ** 2) - np.sum(stats["BC"][2] ** 2))
        n += float(np.sum(stats["C"][3] ** 2) - np.sum(stats["BC"][3] ** 2))
    return NormalEquations(xtx, xty, yty, int(round(n)))


def surface_penalty(k: int, order: int, kind: str = "kronecker") -> np.ndarray:
    """Isotropic tensor penalty on a ``k x k`` coefficient surface.

    ``"kronecker"`` is ``S (x) S``; ``"sum"`` is ``S (x) I + I (x) S``.
    """
    s = difference_penalty(k, order)
    if kind == "kronecker":
        return np.kron(s, s)
    if kind == "sum":
        eye = np.eye(k)
        return np.kron(s, eye) + np.kron(eye, s)
    raise ValueError(f"unknown surface penalty {kind!r}")


@dataclass(frozen=True)
class CovarianceFit:
    """Fitted auto-covariance surfaces and error variance.

    ``coefs[X][k, l]`` multiplies ``b_k(t) b_l(t')`` in surface ``X``.
    ``sigma2`` is clamped at zero; ``sigma2_raw`` is the regression value.
    """

    basis: SplineBasis
    design: GroupingDesign
    coefs: dict
    sigma2: float
    sigma2_raw: float
    lambdas: dict
    n_products: int
    penalty_kind: str
    penalty_order: int
    fit: PenalizedLsFit | None = field(default=None, repr=False)

    @property
    def processes(self) -> tuple[str, ...]:
        return self.design.processes

    @property
    def sigma2_clamped(self) -> bool:
        return self.sigma2_raw < 0

    @property
    def domain(self) -> tuple[float, float]:
        return self.basis.domain

    def evaluate(self, process: str, grid) -> np.ndarray:
        return evaluate_surface(self, process, grid)


def evaluate_surface(fit: CovarianceFit, process: str, grid) -> np.ndarray:
    """Evaluate surface ``process`` on ``grid x grid`` and symmetrize it."""
    if process not in fit.coefs:
        raise KeyError(f"no surface for process {process!r}; have {sorted(fit.coefs)}")
    b = eval_basis(fit.basis, grid)
    mat = b @ fit.coefs[process] @ b.T
    return 0.5 * (mat + mat.T)


def fit_covariances(
    cs: CurveSet,
    design=None,
    k: int = 5,
    lam="select",
    penalty_order: int = 3,
    degree: int = 3,
    penalty: str = "kronecker",
    shared_lambda: bool = True,
    surface_lambdas: dict | None = None,
    method: str = "grouped",
    criterion: str = "reml",
) -> CovarianceFit:
    """Fit all auto-covariance surfaces and the error variance jointly.

    Parameters
    ----------
    cs : CurveSet
        Centered curves.
    design : {"crossed", "fri"} or GroupingDesign, optional
        Defaults to crossed when ``cs`` has a second grouping index.
    k : int
        Marginal basis size.
    lam : "select" or float
        Smoothing parameter for surfaces not listed in ``surface_lambdas``.
    penalty_order, degree : int
        Marginal difference-penalty order and spline degree.
    penalty : {"kronecker", "sum"}
        Tensor penalty, see :func:`surface_penalty`.
    shared_lambda : bool
        Use one smoothing parameter for all free surfaces.
    surface_lambdas : dict, optional
        Fixed smoothing parameters for individual surfaces.
    method : {"grouped", "stream"}
        How the normal equations are formed.
    criterion : {"reml", "gcv"}

    Returns
    -------
    CovarianceFit
    """
    design = _resolve_design(cs, design)
    _check_design(cs, design)
    basis = SplineBasis(k, cs.domain, degree)
    if method == "grouped":
        ne = grouped_normal_equations(cs, basis, design)
    elif method == "stream":
        ne = stream_normal_equations(cs, basis, design)
    else:
        raise ValueError(f"unknown method {method!r}")
    procs = design.processes
    k2 = k * k
    pen = surface_penalty(k, penalty_order, penalty)
    surface_lambdas = dict(surface_lambdas or {})
    unknown = set(surface_lambdas) - set(procs)
    if unknown:
        raise ValueError(f"surface_lambdas names unknown processes {sorted(unknown)}")
    if lam != "select":
        lam = float(lam)

    penalties = []
    free = [p for p in procs if p not in surface_lambdas]
    fixed_lam = None if lam == "select" else lam
    if shared_lambda and free:
        cols = np.concatenate([np.arange(procs.index(p) * k2, (procs.index(p) + 1) * k2) for p in free])
        penalties.append((free, Penalty(cols, np.kron(np.eye(len(free)), pen), fixed_lam)))
    else:
        for p in free:
            i = procs.index(p)
            penalties.append(([p], Penalty(slice(i * k2, (i + 1) * k2), pen, fixed_lam)))
    for p, value in surface_lambdas.items():
        i = procs.index(p)
        penalties.append(([p], Penalty(slice(i * k2, (i + 1) * k2), pen, float(value))))

    fit = solve_normal_equations(ne, [q for _, q in penalties], lambdas="select", criterion=criterion)
    lambdas = {}
    for (names, _), value in zip(penalties, fit.lambdas):
        for p in names:
            lambdas[p] = float(value)
    coefs = {p: fit.coef[i * k2:(i + 1) * k2].reshape(k, k).copy() for i, p in enumerate(procs)}
    raw = float(fit.coef[-1])
    return CovarianceFit(
        basis=basis,
        design=design,
        coefs=coefs,
        sigma2=max(raw, 0.0),
        sigma2_raw=raw,
        lambdas=lambdas,
        n_products=ne.n,
        penalty_kind=penalty,
        penalty_order=penalty_order,
        fit=fit,
    )


def write_surfaces(fit: CovarianceFit, grid, out_dir) -> list[Path]:
    """Write each evaluated surface as a ``D x D`` CSV (first row: grid)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = np.asarray(grid, dtype=float)
    paths = []
    for proc in fit.processes:
        mat = evaluate_surface(fit, proc, grid)
        path = out_dir / f"covariance_{proc}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [format(v, ".17g") for v in grid])
            for t, row in zip(grid, mat):
                w.writerow([format(t, ".17g")] + [format(v, ".17g") for v in row])
        paths.append(path)
    return paths


def read_surface(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a surface written by :func:`write_surfaces`; returns ``(grid, matrix)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    grid = np.array([float(v) for v in rows[0][1:]])
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    if mat.shape != (grid.size, grid.size):
        raise ValueError(f"{path}: expected a {grid.size}x{grid.size} surface, got {mat.shape}")
    return grid, mat
