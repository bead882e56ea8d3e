"""Prediction of functional random effects.

Given retained eigenfunctions ``phi^X_k`` and eigenvalues ``nu^X_k``, every
random process is represented by basis weights ``xi`` and

    y~ = Phi xi + eps,   xi ~ N(0, G),   eps ~ N(0, sigma^2 I),

with ``G`` diagonal.  The best linear predictor is

    xi = G Phi' (sigma^2 I + Phi G Phi')^{-1} y~
       = (sigma^2 G^{-1} + Phi' Phi)^{-1} Phi' y~ .

The second form only needs an ``N x N`` sparse solve and is the default.
:func:`fit_famm` instead re-estimates the mean jointly with the weights in one
penalized regression in which the weights get the ridge penalty
``sigma^2 diag(1/nu)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.sparse.linalg import lsqr, splu
from scipy.stats import norm

from .basis import PenalizedLsFit, Penalty, eval_basis, solve_penalized_ls
from .eigen import EigenSystem, interpolate_eigenfunctions
from .fdata import CurveSet, GroupingDesign
from .meanfit import MeanModel, mean_problem

_DENSE_LIMIT = 3000
_PINV_CUTOFF = 1e-10


@dataclass(frozen=True)
class ProcessBlock:
    """Column block of one process: ``n_levels * n_components`` columns, level-major."""

    process: str
    offset: int
    n_levels: int
    n_components: int

    @property
    def size(self) -> int:
        return self.n_levels * self.n_components

    @property
    def cols(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass(frozen=True)
class BlupSystem:
    """Stacked design ``Phi = [Phi^B | Phi^C | Phi^E]`` and prior variances.

    Column ``offset + l * N + k`` of a block holds eigenfunction ``k``
    evaluated at the points belonging to level ``l``.
    """

    phi: sp.csr_matrix
    g: np.ndarray
    sigma2: float
    blocks: tuple[ProcessBlock, ...]
    level_of_point: dict = field(repr=False)

    @property
    def n_points(self) -> int:
        return self.phi.shape[0]

    @property
    def n_weights(self) -> int:
        return self.phi.shape[1]

    def block(self, process: str) -> ProcessBlock:
        for b in self.blocks:
            if b.process == process:
                return b
        raise KeyError(process)


def _level_ids(cs: CurveSet, process: str) -> np.ndarray:
    if process == "B":
        return cs.point_g1
    if process == "C":
        if cs.g2 is None:
            raise ValueError("process C needs a second grouping index")
        return cs.point_g2
    if process == "E":
        return cs.curve
    raise ValueError(f"unknown process {process!r}")


def build_blup_system(cs: CurveSet, es: EigenSystem, design=None) -> BlupSystem:
    """Assemble ``Phi`` and ``G`` from interpolated eigenfunctions."""
    if not isinstance(design, GroupingDesign):
        design = cs.design(design)
    rows, cols, vals, gs, blocks, levels = [], [], [], [], [], {}
    offset = 0
    npts = cs.n_points
    for proc in design.processes:
        n_comp = es.n_components.get(proc, 0) if proc in es.processes else 0
        n_lev = design.levels[proc]
        ids = _level_ids(cs, proc)
        levels[proc] = ids
        blocks.append(ProcessBlock(proc, offset, n_lev, n_comp))
        if n_comp:
            f = interpolate_eigenfunctions(es, proc, cs.t)
            for k in range(n_comp):
                rows.append(np.arange(npts))
                cols.append(offset + ids * n_comp + k)
                vals.append(f[:, k])
            gs.append(np.tile(es.values(proc), n_lev))
        offset += n_lev * n_comp
    if offset == 0:
        raise ValueError("no retained components: the random-effect design is empty")
    g = np.concatenate(gs)
    if np.any(g <= 0):
        raise ValueError("retained eigenvalues must be positive")
    phi = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(npts, offset)
    )
    return BlupSystem(phi, g, es.sigma2, tuple(blocks), levels)


@dataclass
class PredictionResult:
    """Predicted weights and the implied random-effect curves.

    ``xi[X]`` has shape ``(n_levels, n_components)``.  ``point_effects[X]``
    is the contribution of process ``X`` at every observed point and
    ``fitted`` the mean plus all contributions.
    """

    method: str
    xi: dict
    point_effects: dict
    mean_points: np.ndarray
    fitted: np.ndarray
    grid: np.ndarray | None = None
    grid_curves: dict = field(default_factory=dict)

    @property
    def random_points(self) -> np.ndarray:
        return sum(self.point_effects.values(), np.zeros_like(self.fitted))


def _check_inputs(sys: BlupSystem, y) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if y.size != sys.n_points:
        raise ValueError(f"response has {y.size} entries, system has {sys.n_points} points")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(sys.phi.data)):
        raise ValueError("non-finite values in the prediction inputs")
    return y


def _pinv_solve(mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    w, v = eigh(0.5 * (mat + mat.T))
    keep = w > _PINV_CUTOFF * max(w.max(initial=0.0), 0.0)
    return v[:, keep] @ ((v[:, keep].T @ rhs) / w[keep])


def solve_weights(sys: BlupSystem, y, sigma2: float | None = None) -> np.ndarray:
    """``(sigma^2 G^{-1} + Phi'Phi)^{-1} Phi' y``; least squares when ``sigma^2 = 0``."""
    y = _check_inputs(sys, y)
    s2 = sys.sigma2 if sigma2 is None else float(sigma2)
    if s2 < 0:
        raise ValueError("sigma2 must be non-negative")
    phi = sys.phi
    rhs = phi.T @ y
    ptp = (phi.T @ phi).tocsc()
    if s2 > 0:
        a = ptp + sp.diags(s2 / sys.g, format="csc")
        if a.shape[0] <= _DENSE_LIMIT:
            dense = a.toarray()
            try:
                return np.linalg.solve(dense, rhs)
            except np.linalg.LinAlgError:
                return _pinv_solve(dense, rhs)
        return _sparse_spd_solve(a, rhs, sys)
    # minimum-norm least squares
    if ptp.shape[0] <= _DENSE_LIMIT:
        return _pinv_solve(ptp.toarray(), rhs)
    return lsqr(phi, y, atol=1e-14, btol=1e-14, iter_lim=20 * ptp.shape[0])[0]


def _sparse_spd_solve(a: sp.csc_matrix, rhs: np.ndarray, sys: BlupSystem) -> np.ndarray:
    """Solve with the largest block ordered first and diagonal pivots.

    The curve-level block is block diagonal, so eliminating it first
    confines fill-in to the (small) trailing speaker and word blocks.
    """
    big = max(sys.blocks, key=lambda b: b.size)
    first = np.arange(big.offset, big.offset + big.size)
    rest = np.setdiff1d(np.arange(a.shape[0]), first)
    perm = np.concatenate([first, rest])
    ap = a[perm][:, perm].tocsc()
    lu = splu(ap, permc_spec="NATURAL", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    out = np.empty_like(rhs)
    out[perm] = lu.solve(rhs[perm])
    return out


def eblup_direct(sys: BlupSystem, y, sigma2: float | None = None) -> np.ndarray:
    """``G Phi' (sigma^2 I + Phi G Phi')^{-1} y`` with dense linear algebra (small systems only)."""
    y = _check_inputs(sys, y)
    s2 = sys.sigma2 if sigma2 is None else float(sigma2)
    phi = sys.phi.toarray()
    v = s2 * np.eye(phi.shape[0]) + (phi * sys.g) @ phi.T
    try:
        z = np.linalg.solve(v, y)
    except np.linalg.LinAlgError:
        z = _pinv_solve(v, y)
    return sys.g * (phi.T @ z)


def _split_weights(sys: BlupSystem, w: np.ndarray) -> dict:
    return {b.process: w[b.cols].reshape(b.n_levels, b.n_components) for b in sys.blocks}


def _point_effects(sys: BlupSystem, w: np.ndarray) -> dict:
    out = {}
    for b in sys.blocks:
        part = np.zeros(sys.n_weights)
        part[b.cols] = w[b.cols]
        out[b.process] = np.asarray(sys.phi @ part).ravel()
    return out


def _grid_curves(es: EigenSystem, xi: dict) -> dict:
    return {p: x @ es.functions(p).T for p, x in xi.items() if p in es.processes}


def predict_eblup(
    sys: BlupSystem,
    y,
    mean_points=None,
    es: EigenSystem | None = None,
    sigma2: float | None = None,
) -> PredictionResult:
    """EBLUP of all basis weights from centered responses ``y``."""
    y = _check_inputs(sys, y)
    w = solve_weights(sys, y, sigma2)
    xi = _split_weights(sys, w)
    effects = _point_effects(sys, w)
    mean_points = np.zeros(y.size) if mean_points is None else np.asarray(mean_points, dtype=float)
    fitted = mean_points + sum(effects.values())
    return PredictionResult(
        method="eblup",
        xi=xi,
        point_effects=effects,
        mean_points=mean_points,
        fitted=fitted,
        grid=None if es is None else es.grid,
        grid_curves={} if es is None else _grid_curves(es, xi),
    )


@dataclass
class FammFit:
    """Joint fit of the mean and the basis weights.

    ``bands[name]`` is a tuple ``(grid, estimate, lower, upper)`` of
    point-wise bands for each mean term.
    """

    mean: MeanModel
    prediction: PredictionResult
    bands: dict
    fpc_lambdas: dict
    fit: PenalizedLsFit = field(repr=False)
    level: float = 0.95


def fit_famm(
    cs: CurveSet,
    es: EigenSystem,
    terms="t",
    k=8,
    penalty_order: int = 3,
    degree: int = 3,
    design=None,
    lambda_fix: float = 1.0,
    mean_lambdas="select",
    criterion: str = "reml",
    band_level: float = 0.95,
    constrain: bool = True,
    grid=None,
) -> FammFit:
    """Fit mean terms and random-effect weights in one penalized regression.

    The weights of process ``X`` get the penalty
    ``lambda_fix * sigma2 * diag(1 / nu^X)`` with ``lambda_fix`` fixed
    (default 1), which matches the prior ``xi ~ N(0, nu)`` at noise level
    ``sigma2``.  The mean smoothing parameters are selected by ``criterion``
    after the weight blocks have been profiled out.  With ``constrain`` the
    weights of every process and component sum to zero over levels.

    Parameters
    ----------
    cs : CurveSet
        Uncentered curves.
    es : EigenSystem
    terms, k, penalty_order, degree
        Mean specification as in :func:`flmm.meanfit.fit_mean`.
    design : str or GroupingDesign, optional
    lambda_fix : float
    mean_lambdas : "select" or sequence of float
    criterion : {"reml", "gcv"}
    band_level : float
        Nominal point-wise coverage of the bands.
    constrain : bool
    grid : array_like, optional
        Band grid; defaults to the eigenfunction grid.

    Returns
    -------
    FammFit
    """
    if not isinstance(design, GroupingDesign):
        design = cs.design(design)
    prob = mean_problem(cs, terms, k, penalty_order, degree)
    xm = prob.design
    p_mean = xm.shape[1]
    grid = es.grid if grid is None else np.asarray(grid, dtype=float)
    n_retained = sum(es.n_components.get(p, 0) for p in design.processes if p in es.processes)
    penalties = list(prob.penalties)
    fpc_lambdas = {}
    sys = None
    constraints = None
    if n_retained:
        sys = build_blup_system(cs, es, design)
        # noise floor keeps the ridge positive definite for noiseless fits
        s2 = max(es.sigma2, 1e-10 * float(np.mean(cs.y**2)) + 1e-300)
        x = sp.hstack([sp.csr_matrix(xm), sys.phi], format="csr")
        rows = []
        for b in sys.blocks:
            if not b.n_components:
                continue
            nu = es.values(b.process)
            lam = lambda_fix * s2
            fpc_lambdas[b.process] = lam
            cols = np.arange(p_mean + b.offset, p_mean + b.offset + b.size)
            penalties.append(Penalty(cols, sp.diags(np.tile(1.0 / nu, b.n_levels)), lam))
            if constrain:
                for comp in range(b.n_components):
                    row = np.zeros(x.shape[1])
                    row[cols[comp::b.n_components]] = 1.0
                    rows.append(row)
        if rows:
            constraints = np.array(rows)
        fit = solve_penalized_ls(
            x, cs.y, penalties, lambdas=mean_lambdas, criterion=criterion,
            constraints=constraints, eliminate=True,
        )
    else:
        fit = solve_penalized_ls(xm, cs.y, penalties, lambdas=mean_lambdas, criterion=criterion)
    coef = fit.coef
    mean = prob.model(coef[:p_mean], fit.lambdas[: len(prob.penalties)], fit)
    mean_points = xm @ coef[:p_mean]
    if sys is not None:
        w = coef[p_mean:]
        xi = _split_weights(sys, w)
        effects = _point_effects(sys, w)
    else:
        xi, effects = {}, {}
    pred = PredictionResult(
        method="famm",
        xi=xi,
        point_effects=effects,
        mean_points=mean_points,
        fitted=mean_points + sum(effects.values(), np.zeros(cs.n_points)),
        grid=es.grid,
        grid_curves=_grid_curves(es, xi),
    )
    bands = _mean_bands(mean, fit, grid, band_level)
    return FammFit(mean, pred, bands, fpc_lambdas, fit, band_level)


def _mean_bands(mean: MeanModel, fit: PenalizedLsFit, grid, level: float) -> dict:
    """Point-wise normal bands for every mean term on ``grid``."""
    z = norm.ppf(0.5 + level / 2.0)
    pos = {c: i for i, c in enumerate(fit.vcov_cols)}
    cov = fit.covariance
    bands, start = {}, 0
    curves = mean.term_curves(grid)
    for term, basis, est in zip(mean.terms, mean.bases, curves):
        idx = np.array([pos[c] for c in range(start, start + basis.n_basis)])
        b = eval_basis(basis, grid)
        var = np.einsum("ij,jk,ik->i", b, cov[np.ix_(idx, idx)], b)
        se = np.sqrt(np.maximum(var, 0.0))
        bands[term.name] = (np.asarray(grid), est, est - z * se, est + z * se)
        start += basis.n_basis
    return bands
