"""B-spline bases, difference penalties and a penalized least-squares engine.

Everything that fits a smooth in this package (the mean, the covariance
surfaces and the joint mixed-model fit) goes through
:func:`solve_penalized_ls` or :func:`solve_normal_equations`.  The engine
minimizes

    ||y - X b||^2 + sum_m lam_m * b[m]' S_m b[m]

optionally subject to linear equality constraints, with the smoothing
parameters either fixed or selected by REML (profiled over the scale) or
GCV.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import BSpline
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh
from scipy.sparse.linalg import splu

RHO_BOUNDS = (-12.0, 12.0)
_DENSE_LIMIT = 2000


class SingularSystemWarning(UserWarning):
    """Raised when a penalized normal matrix had to be regularized or pseudo-inverted."""


# ---------------------------------------------------------------------------
# bases and penalties
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis with equidistant interior knots.

    Parameters
    ----------
    n_basis : int
        Number of basis functions ``K``.
    domain : tuple of float
        Closed interval the basis lives on.
    degree : int, default=3
        Polynomial degree (3 = cubic).
    """

    n_basis: int
    domain: tuple[float, float] = (0.0, 1.0)
    degree: int = 3
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        if self.n_basis < self.degree + 1:
            raise ValueError(
                f"need at least degree + 1 = {self.degree + 1} basis functions, got {self.n_basis}"
            )
        lo, hi = map(float, self.domain)
        if not hi > lo:
            raise ValueError(f"empty domain {self.domain}")
        object.__setattr__(self, "domain", (lo, hi))
        inner = np.linspace(lo, hi, self.n_basis - self.degree + 1)
        knots = np.concatenate([np.full(self.degree, lo), inner, np.full(self.degree, hi)])
        object.__setattr__(self, "knots", knots)

    def __call__(self, ts) -> np.ndarray:
        return eval_basis(self, ts)


def _check_in_domain(ts: np.ndarray, domain: tuple[float, float]) -> np.ndarray:
    lo, hi = domain
    slack = 1e-12 * max(1.0, abs(hi - lo))
    if ts.size and (ts.min() < lo - slack or ts.max() > hi + slack or not np.all(np.isfinite(ts))):
        bad = ts[(ts < lo - slack) | (ts > hi + slack) | ~np.isfinite(ts)]
        raise ValueError(f"evaluation points outside domain [{lo}, {hi}]: {bad[:5]}")
    return np.clip(ts, lo, hi)


def eval_basis(basis: SplineBasis, ts, sparse: bool = False):
    """Evaluate all basis functions at ``ts``.

    Returns a ``(len(ts), K)`` matrix whose rows sum to one.  With
    ``sparse=True`` a CSR matrix is returned instead of a dense array.
    """
    ts = _check_in_domain(np.atleast_1d(np.asarray(ts, dtype=float)), basis.domain)
    if ts.size == 0:
        out = sp.csr_matrix((0, basis.n_basis))
    else:
        out = BSpline.design_matrix(ts, basis.knots, basis.degree)
    return out.tocsr() if sparse else out.toarray()


def difference_penalty(n_basis: int, order: int) -> np.ndarray:
    """Return ``D'D`` for the ``order``-th difference operator on ``n_basis`` coefficients."""
    if order < 1:
        raise ValueError("difference order must be >= 1")
    if n_basis <= order:
        raise ValueError(f"need n_basis > order, got n_basis={n_basis}, order={order}")
    dmat = np.diff(np.eye(n_basis), n=order, axis=0)
    return dmat.T @ dmat


# ---------------------------------------------------------------------------
# normal equations
# ---------------------------------------------------------------------------


@dataclass
class NormalEquations:
    """Sufficient statistics ``X'X``, ``X'y``, ``y'y`` and the row count."""

    xtx: np.ndarray
    xty: np.ndarray
    yty: float
    n: int

    @classmethod
    def zeros(cls, ncols: int) -> "NormalEquations":
        return cls(np.zeros((ncols, ncols)), np.zeros(ncols), 0.0, 0)

    @classmethod
    def from_design(cls, X, y) -> "NormalEquations":
        y = np.asarray(y, dtype=float)
        xtx = X.T @ X
        xty = X.T @ y
        if sp.issparse(xtx):
            xtx = xtx.toarray()
        return cls(np.asarray(xtx), np.asarray(xty).ravel(), float(y @ y), int(y.size))

    def __add__(self, other: "NormalEquations") -> "NormalEquations":
        return NormalEquations(
            self.xtx + other.xtx, self.xty + other.xty, self.yty + other.yty, self.n + other.n
        )

    @property
    def ncols(self) -> int:
        return self.xty.size


def accumulate_normal_equations(rows: Iterable, ncols: int, chunk_size: int = 100_000) -> NormalEquations:
    """Accumulate normal equations from a stream of ``(design_row, response)`` pairs.

    A design row is either a dense vector of length ``ncols`` or a sparse
    ``(indices, values)`` pair.  Rows are buffered in chunks, so the full
    design is never materialized.  Partial results from different workers
    can be merged with ``+``.
    """
    total = NormalEquations.zeros(ncols)
    buf = np.zeros((chunk_size, ncols))
    ybuf = np.zeros(chunk_size)
    k = 0
    for row, resp in rows:
        if isinstance(row, tuple):
            idx, vals = row
            buf[k].fill(0.0)
            np.add.at(buf[k], np.asarray(idx, dtype=int), vals)
        else:
            row = np.asarray(row, dtype=float)
            if row.shape != (ncols,):
                raise ValueError(f"design row has shape {row.shape}, expected ({ncols},)")
            buf[k] = row
        ybuf[k] = resp
        k += 1
        if k == chunk_size:
            total = total + NormalEquations.from_design(buf, ybuf)
            k = 0
    if k:
        total = total + NormalEquations.from_design(buf[:k], ybuf[:k])
    return total


# ---------------------------------------------------------------------------
# penalized least squares
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Penalty:
    """Quadratic penalty on one block of coefficients.

    ``cols`` is a slice or an integer index array; ``matrix`` may be dense
    or a scipy sparse matrix.  ``lam=None`` means the smoothing parameter is free (selected or passed
    through ``lambdas``); a number fixes it.
    """

    cols: slice | np.ndarray
    matrix: np.ndarray | sp.spmatrix
    lam: float | None = None

    def indices(self, ncols: int) -> np.ndarray:
        return np.arange(ncols)[self.cols]


@dataclass
class PenalizedLsFit:
    """Result of a penalized least-squares fit.

    ``vcov_factor`` is ``(X'X + S)^{-1}`` restricted to the columns in
    ``vcov_cols`` (all columns unless some blocks were eliminated), with any
    equality constraints already accounted for.  Multiply by ``scale`` to get
    the Bayesian coefficient covariance used for point-wise bands.
    """

    coef: np.ndarray
    lambdas: np.ndarray
    criterion: str
    score: float
    scale: float
    rss: float
    rss_pen: float
    n: int
    null_space_dim: int
    edf: float | None
    vcov_cols: np.ndarray
    vcov_factor: np.ndarray
    singular: bool = False
    fitted: np.ndarray | None = None
    lambda_scales: np.ndarray | None = None

    @property
    def covariance(self) -> np.ndarray:
        return self.scale * self.vcov_factor


class _DenseFactor:
    """Cholesky factor with jitter / pseudo-inverse fallback."""

    def __init__(self, mat: np.ndarray, warn: bool = True):
        self.k = mat.shape[0]
        self.singular = False
        self._chol = None
        self._pinv = None
        if self.k == 0:
            self.logdet = 0.0
            return
        mat = 0.5 * (mat + mat.T)
        chol = self._try_chol(mat)
        if chol is None:
            self.singular = True
            jitter = 1e-10 * max(np.trace(mat), 1e-300) / self.k
            chol = self._try_chol(mat + jitter * np.eye(self.k))
            if chol is not None and warn:
                warnings.warn(
                    "penalized normal matrix is numerically singular; solved with ridge jitter",
                    SingularSystemWarning,
                    stacklevel=3,
                )
        if chol is not None:
            self._chol = chol
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
            return
        w, v = eigh(mat)
        keep = w > 1e-10 * max(w.max(), 0.0)
        if warn:
            warnings.warn(
                "penalized normal matrix is rank deficient; using the generalized inverse",
                SingularSystemWarning,
                stacklevel=3,
            )
        self._pinv = (v[:, keep] / w[keep]) @ v[:, keep].T
        self.logdet = float(np.sum(np.log(w[keep])))

    @staticmethod
    def _try_chol(mat):
        try:
            c = cho_factor(mat, lower=True, check_finite=False)
        except (LinAlgError, ValueError):
            return None
        d = np.diag(c[0])
        if not np.all(np.isfinite(d)) or d.min() <= 0 or (d.min() / d.max()) ** 2 < 4 * np.finfo(float).eps:
            return None
        return c

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.k == 0:
            return np.zeros_like(rhs)
        if self._chol is not None:
            return cho_solve(self._chol, rhs, check_finite=False)
        return self._pinv @ rhs

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.k))


class _Eliminated:
    """Applies ``H = Z (Z'MZ)^{-1} Z'`` for a positive definite block ``M``.

    ``Z`` spans the null space of the equality constraints ``C b_e = 0``.
    """

    def __init__(self, mat, constraints: np.ndarray | None):
        self.p = mat.shape[0]
        if sp.issparse(mat) and self.p > _DENSE_LIMIT:
            self._lu = splu(sp.csc_matrix(mat))
            diag_u = self._lu.U.diagonal()
            if np.any(diag_u == 0) or not np.all(np.isfinite(diag_u)):
                raise LinAlgError("eliminated block is singular")
            self.logdet = float(np.sum(np.log(np.abs(diag_u))))
            self._solve = lambda r: self._lu.solve(np.asarray(r, dtype=float))
        else:
            dense = mat.toarray() if sp.issparse(mat) else np.asarray(mat)
            chol = cho_factor(0.5 * (dense + dense.T), lower=True)
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
            self._solve = lambda r: cho_solve(chol, r)
        self.c = None
        if constraints is not None and constraints.shape[0] > 0:
            self.c = np.asarray(constraints, dtype=float)
            self.w = self._solve(self.c.T)  # M^{-1} C'
            q = self.c @ self.w
            self.qfac = cho_factor(q, lower=True)
            cct = cho_factor(self.c @ self.c.T, lower=True)
            self.logdet += 2.0 * float(np.sum(np.log(np.diag(self.qfac[0]))))
            self.logdet -= 2.0 * float(np.sum(np.log(np.diag(cct[0]))))

    def apply(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self.p == 0:
            return np.zeros_like(rhs)
        out = self._solve(rhs)
        if self.c is not None:
            out = out - self.w @ cho_solve(self.qfac, self.w.T @ rhs)
        return out


def _is_diagonal(mat) -> bool:
    if sp.issparse(mat):
        coo = mat.tocoo()
        return bool(np.all(coo.row == coo.col))
    return False


def _penalty_rank(mat) -> int:
    if _is_diagonal(mat):
        d = mat.diagonal()
        return int(np.sum(d > 1e-9 * max(d.max(initial=0.0), 0.0))) if d.size and d.max() > 0 else 0
    if sp.issparse(mat):
        mat = mat.toarray()
    w = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    if w.size == 0 or w.max() <= 0:
        return 0
    return int(np.sum(w > 1e-9 * w.max()))


def _is_positive_definite(mat) -> bool:
    if _is_diagonal(mat):
        return bool(np.all(mat.diagonal() > 0)) and mat.shape[0] == mat.diagonal().size
    if sp.issparse(mat):
        mat = mat.toarray()
    try:
        cho_factor(0.5 * (mat + mat.T), lower=True)
    except LinAlgError:
        return False
    return True


def golden_section(fun, lo: float, hi: float, tol: float = 1e-6, max_iter: int = 200):
    """Minimize a scalar function on ``[lo, hi]`` by golden-section search."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
    return (c, fc) if fc <= fd else (d, fd)


class _Problem:
    """Penalized LS problem split into kept and eliminated column sets."""

    def __init__(self, akk, ake, aee, bk, be, yty, n, kept, elim, penalties, lam_fixed, constraints):
        self.kept, self.elim = kept, elim
        self.p = kept.size + elim.size
        self.n, self.yty = n, float(yty)
        self.akk, self.bk = akk, bk
        self.ake, self.be = ake, be
        self.penalties = penalties
        self.lam_fixed = lam_fixed
        self.pos_k = {c: i for i, c in enumerate(kept)}
        self.pos_e = {c: i for i, c in enumerate(elim)}
        self.ranks = [_penalty_rank(pen.matrix) for pen in penalties]

        if elim.size:
            rows, cols, vals = [], [], []
            for pen, lam in zip(penalties, lam_fixed):
                idx = pen.indices(self.p)
                if idx.size and idx[0] in self.pos_e:
                    loc = np.array([self.pos_e[c] for c in idx])
                    blk = sp.coo_matrix(lam * pen.matrix)
                    rows.append(loc[blk.row])
                    cols.append(loc[blk.col])
                    vals.append(blk.data)
            pen_e = sp.csc_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(elim.size, elim.size),
            )
            m = aee + pen_e if sp.issparse(aee) else aee + pen_e.toarray()
            self.elim_op = _Eliminated(sp.csc_matrix(m) if sp.issparse(m) else np.asarray(m), constraints)
            hae = self.elim_op.apply(ake.T) if kept.size else np.zeros((elim.size, 0))
            hbe = self.elim_op.apply(be)
            self.r0 = akk - ake @ hae
            self.r = bk - ake @ hbe
            self.q = float(be @ hbe)
            self.logdet_e = self.elim_op.logdet
        else:
            self.elim_op = None
            self.r0, self.r, self.q, self.logdet_e = akk, bk, 0.0, 0.0

        # columns of kept penalties in local coordinates
        self.kept_pen = []
        for m_idx, pen in enumerate(penalties):
            idx = pen.indices(self.p)
            if idx.size and idx[0] in self.pos_k:
                self.kept_pen.append((m_idx, np.array([self.pos_k[c] for c in idx])))

    def penalty_matrix_kept(self, lams: np.ndarray) -> np.ndarray:
        s = np.zeros((self.kept.size, self.kept.size))
        for m_idx, loc in self.kept_pen:
            mat = self.penalties[m_idx].matrix
            s[np.ix_(loc, loc)] += lams[m_idx] * (mat.toarray() if sp.issparse(mat) else mat)
        return s

    def null_space_dim(self, lams: np.ndarray) -> int:
        return self.p - sum(r for r, lam in zip(self.ranks, lams) if lam > 0)

    def evaluate(self, lams: np.ndarray, criterion: str, warn: bool = False):
        sk = self.penalty_matrix_kept(lams)
        fac = _DenseFactor(self.r0 + sk, warn=warn)
        theta = fac.solve(self.r)
        rss_pen = max(self.yty - self.q - float(theta @ self.r), 1e-14 * self.yty + 1e-300)
        mp = self.null_space_dim(lams)
        if criterion == "reml":
            logdet_s = sum(r * math.log(lam) for r, lam in zip(self.ranks, lams) if lam > 0)
            dof = max(self.n - mp, 1)
            score = dof * math.log(rss_pen) + fac.logdet + self.logdet_e - logdet_s
            return score, theta, fac, rss_pen
        if criterion == "gcv":
            if self.elim_op is not None:
                raise ValueError("GCV is not available when coefficient blocks are eliminated")
            rss = max(rss_pen - float(theta @ sk @ theta), 0.0)
            edf = float(np.trace(fac.solve(self.akk)))
            denom = max(self.n - edf, 1e-8)
            return self.n * rss / denom**2, theta, fac, rss_pen
        raise ValueError(f"unknown criterion {criterion!r}")

    def lambda_scale(self, m_idx: int) -> float:
        for j, loc in self.kept_pen:
            if j == m_idx:
                tr_s = float(self.penalties[m_idx].matrix.diagonal().sum())
                tr_a = float(np.trace(self.r0[np.ix_(loc, loc)]))
                if tr_s > 0 and tr_a > 0:
                    return tr_a / tr_s
        return 1.0


def _resolve_lambdas(penalties, lambdas):
    fixed = np.full(len(penalties), np.nan)
    free = []
    for m, pen in enumerate(penalties):
        if pen.lam is not None:
            fixed[m] = float(pen.lam)
        elif isinstance(lambdas, str):
            if lambdas != "select":
                raise ValueError(f"lambdas must be 'select' or numeric, got {lambdas!r}")
            free.append(m)
        else:
            fixed[m] = float(np.atleast_1d(lambdas)[m])
    if np.any(fixed[~np.isnan(fixed)] < 0):
        raise ValueError("smoothing parameters must be non-negative")
    return fixed, free


def _split_columns(ncols, penalties, fixed, constraints, eliminate):
    elim_mask = np.zeros(ncols, dtype=bool)
    constrained = np.zeros(ncols, dtype=bool)
    if constraints is not None and constraints.shape[0]:
        constrained = np.any(np.asarray(constraints) != 0, axis=0)
    for m, pen in enumerate(penalties):
        idx = pen.indices(ncols)
        if np.isnan(fixed[m]) or fixed[m] <= 0:
            continue
        want = eliminate if eliminate is not None else (ncols > 500 or constrained[idx].any())
        if want and _is_positive_definite(pen.matrix):
            elim_mask[idx] = True
    if constrained.any() and not np.all(elim_mask[constrained]):
        raise ValueError(
            "equality constraints are only supported on blocks with a fixed, positive definite penalty"
        )
    return np.flatnonzero(~elim_mask), np.flatnonzero(elim_mask)


def _check_penalties(penalties, ncols):
    seen = np.zeros(ncols, dtype=bool)
    for pen in penalties:
        idx = pen.indices(ncols)
        if pen.matrix.shape != (idx.size, idx.size):
            raise ValueError(
                f"penalty matrix shape {pen.matrix.shape} does not match block of {idx.size} columns"
            )
        if seen[idx].any():
            raise ValueError("penalty blocks overlap")
        seen[idx] = True


def _select(problem: _Problem, fixed, free, criterion, sweeps: int = 2):
    lams = fixed.copy()
    scales = {m: problem.lambda_scale(m) for m in free}
    rho = {m: 0.0 for m in free}
    for m in free:
        lams[m] = scales[m]

    def score_at(m, value):
        trial = lams.copy()
        trial[m] = scales[m] * math.exp(value)
        return problem.evaluate(trial, criterion)[0]

    lo, hi = RHO_BOUNDS
    for _ in range(sweeps if len(free) > 1 else 1):
        for m in free:
            grid = np.linspace(lo, hi, 25)
            vals = np.array([score_at(m, g) for g in grid])
            best = int(np.nanargmin(vals))
            a, b = grid[max(best - 1, 0)], grid[min(best + 1, grid.size - 1)]
            x, fx = golden_section(lambda v: score_at(m, v), a, b, tol=1e-7)
            rho[m] = x if fx <= vals[best] else grid[best]
            lams[m] = scales[m] * math.exp(rho[m])
    return lams


def _finish(problem: _Problem, lams, criterion, X=None):
    score, theta, fac, rss_pen = problem.evaluate(lams, criterion, warn=True)
    coef = np.zeros(problem.p)
    coef[problem.kept] = theta
    if problem.elim_op is not None:
        resid = problem.be - (problem.ake.T @ theta if problem.kept.size else 0.0)
        coef[problem.elim] = problem.elim_op.apply(resid)
    pen_val = 0.0
    for m, pen in enumerate(problem.penalties):
        if lams[m] > 0:
            b = coef[pen.cols]
            pen_val += lams[m] * float(b @ (pen.matrix @ b))
    rss = max(rss_pen - pen_val, 0.0)
    mp = problem.null_space_dim(lams)
    edf = None
    if problem.elim_op is None and problem.kept.size:
        edf = float(np.trace(fac.solve(problem.akk)))
    if criterion == "gcv" and edf is not None:
        scale = rss / max(problem.n - edf, 1e-8)
    else:
        scale = rss_pen / max(problem.n - mp, 1)
    fitted = None
    if X is not None:
        fitted = np.asarray(X @ coef).ravel()
    return PenalizedLsFit(
        coef=coef,
        lambdas=lams,
        criterion=criterion,
        score=score,
        scale=scale,
        rss=rss,
        rss_pen=rss_pen,
        n=problem.n,
        null_space_dim=mp,
        edf=edf,
        vcov_cols=problem.kept,
        vcov_factor=fac.inverse(),
        singular=fac.singular,
        fitted=fitted,
    )


def _build_problem(blocks, ncols, penalties, fixed, free, constraints, eliminate):
    """``blocks(kept, elim)`` returns the partitioned normal equations."""
    _check_penalties(penalties, ncols)
    kept, elim = _split_columns(ncols, penalties, fixed, constraints, eliminate)
    akk, ake, aee, bk, be, yty, n = blocks(kept, elim)
    c_e = None
    if constraints is not None and constraints.shape[0]:
        c_e = np.asarray(constraints)[:, elim]
    lam_fixed = np.where(np.isnan(fixed), 0.0, fixed)
    return _Problem(akk, ake, aee, bk, be, yty, n, kept, elim, penalties, lam_fixed, c_e)


def solve_normal_equations(
    ne: NormalEquations,
    penalties: Sequence[Penalty] = (),
    lambdas="select",
    criterion: str = "reml",
    constraints: np.ndarray | None = None,
) -> PenalizedLsFit:
    """Penalized least squares from accumulated normal equations."""
    penalties = list(penalties)
    fixed, free = _resolve_lambdas(penalties, lambdas)

    def blocks(kept, elim):
        a = ne.xtx
        return (
            a[np.ix_(kept, kept)],
            a[np.ix_(kept, elim)],
            a[np.ix_(elim, elim)],
            ne.xty[kept],
            ne.xty[elim],
            ne.yty,
            ne.n,
        )

    problem = _build_problem(blocks, ne.ncols, penalties, fixed, free, constraints, eliminate=False)
    lams = _select(problem, fixed, free, criterion) if free else fixed
    fit = _finish(problem, np.asarray(lams, dtype=float), criterion)
    fit.lambda_scales = np.array([problem.lambda_scale(m) for m in range(len(penalties))])
    return fit


def solve_penalized_ls(
    X,
    y,
    penalties: Sequence[Penalty] = (),
    lambdas="select",
    criterion: str = "reml",
    constraints: np.ndarray | None = None,
    eliminate: bool | None = None,
) -> PenalizedLsFit:
    """Minimize ``||y - Xb||^2 + sum_m lam_m b_m' S_m b_m`` subject to ``C b = 0``.

    Parameters
    ----------
    X : ndarray or sparse matrix, shape (n, p)
        Design matrix.
    y : ndarray, shape (n,)
        Response.
    penalties : sequence of Penalty
        Disjoint penalized blocks.  Columns not covered are unpenalized.
    lambdas : "select" or sequence of float
        Smoothing parameters for penalties whose ``lam`` is None.  With
        ``"select"`` they are chosen by ``criterion`` via coordinate-wise
        golden-section search on ``log(lambda)``.
    criterion : {"reml", "gcv"}
        Selection criterion.
    constraints : ndarray, shape (c, p), optional
        Equality constraints ``C b = 0``.  Only allowed on blocks with a
        fixed positive definite penalty (random-effect blocks); those blocks
        are eliminated before the smoothing parameters are searched.
    eliminate : bool, optional
        Force (True) or forbid (False) elimination of fixed positive definite
        blocks.  Default: eliminate when ``p > 500`` or when constrained.

    Returns
    -------
    PenalizedLsFit
    """
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.size} entries")
    if not np.all(np.isfinite(y)):
        raise ValueError("response contains non-finite values")
    penalties = list(penalties)
    fixed, free = _resolve_lambdas(penalties, lambdas)
    ncols = X.shape[1]
    is_sparse = sp.issparse(X)
    Xc = sp.csc_matrix(X) if is_sparse else np.asarray(X, dtype=float)

    def blocks(kept, elim):
        xk = Xc[:, kept]
        if is_sparse:
            xk = xk.toarray()
        xe = Xc[:, elim]
        akk = xk.T @ xk
        ake = np.asarray((xe.T @ xk).T) if elim.size else np.zeros((kept.size, 0))
        aee = xe.T @ xe
        if not is_sparse or elim.size <= _DENSE_LIMIT:
            aee = aee.toarray() if sp.issparse(aee) else np.asarray(aee)
        be = np.asarray(xe.T @ y).ravel()
        return akk, ake, aee, xk.T @ y, be, float(y @ y), y.size

    problem = _build_problem(blocks, ncols, penalties, fixed, free, constraints, eliminate)
    lams = _select(problem, fixed, free, criterion) if free else fixed
    fit = _finish(problem, np.asarray(lams, dtype=float), criterion, X=Xc)
    fit.lambda_scales = np.array([problem.lambda_scale(m) for m in range(len(penalties))])
    return fit


def reml_score(
    X, y, penalties: Sequence[Penalty], lambdas: Sequence[float], criterion: str = "reml"
) -> float:
    """Criterion value at given smoothing parameters (used to check the optimizer)."""
    y = np.asarray(y, dtype=float)
    ne = NormalEquations.from_design(X, y)
    penalties = [Penalty(p.cols, p.matrix, None) for p in penalties]
    fixed, _ = _resolve_lambdas(penalties, lambdas)

    def blocks(kept, elim):
        a = ne.xtx
        return (a[np.ix_(kept, kept)], a[np.ix_(kept, elim)], a[np.ix_(elim, elim)],
                ne.xty[kept], ne.xty[elim], ne.yty, ne.n)

    problem = _build_problem(blocks, ne.ncols, penalties, fixed, [], None, eliminate=False)
    return problem.evaluate(fixed, criterion)[0]
