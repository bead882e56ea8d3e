"""Varying-coefficient mean ``mu(t, x) = f_0(t) + sum_p f_p(t) x_p`` under working independence."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .basis import PenalizedLsFit, Penalty, SplineBasis, difference_penalty, eval_basis, solve_penalized_ls
from .fdata import CurveSet


class ConfoundingWarning(UserWarning):
    """A varying-coefficient term cannot be separated from the intercept."""


class SmallSampleWarning(UserWarning):
    """Fewer observations than mean coefficients."""


@dataclass(frozen=True)
class MeanTerm:
    """One term ``f(t) * prod(covariates)``; the intercept has no covariates."""

    covariates: tuple[str, ...] = ()

    @property
    def name(self) -> str:
        return ":".join(("t",) + self.covariates)

    def weights(self, cov: np.ndarray, names: Sequence[str]) -> np.ndarray:
        """Per-row multiplier of the term given a covariate matrix."""
        w = np.ones(cov.shape[0])
        for c in self.covariates:
            try:
                w = w * cov[:, list(names).index(c)]
            except ValueError:
                raise KeyError(f"unknown covariate {c!r}; available: {list(names)}") from None
        return w


def parse_terms(spec) -> list[MeanTerm]:
    """Parse ``"t + t:order + t:order:stress"`` into terms.

    A list of strings is accepted too.  The functional intercept ``t`` is
    always included and always first.
    """
    parts = spec.split("+") if isinstance(spec, str) else list(spec)
    terms = [MeanTerm()]
    for raw in parts:
        tokens = [tok.strip() for tok in str(raw).split(":") if tok.strip()]
        if not tokens:
            continue
        if tokens[0] != "t":
            raise ValueError(f"mean term {raw!r} must start with 't'")
        term = MeanTerm(tuple(tokens[1:]))
        if term not in terms:
            terms.append(term)
    return terms


@dataclass(frozen=True)
class MeanModel:
    """Fitted additive mean.

    ``coefs[p]`` holds the spline coefficients of term ``p``; ``bases[p]``
    the matching basis.  ``fit`` keeps the underlying penalized fit so that
    point-wise standard errors can be computed.
    """

    terms: tuple[MeanTerm, ...]
    bases: tuple[SplineBasis, ...]
    coefs: tuple[np.ndarray, ...]
    lambdas: np.ndarray
    penalty_order: int
    covariate_names: tuple[str, ...]
    fit: PenalizedLsFit | None = None

    @property
    def term_names(self) -> list[str]:
        return [term.name for term in self.terms]

    @property
    def domain(self) -> tuple[float, float]:
        return self.bases[0].domain

    def term_curves(self, grid) -> np.ndarray:
        """Evaluate each ``f_p`` on ``grid``; shape ``(n_terms, len(grid))``."""
        return np.array([eval_basis(b, grid) @ c for b, c in zip(self.bases, self.coefs)])

    def predict(self, t, x=None) -> np.ndarray:
        """Mean at times ``t`` for a single covariate row ``x``.

        ``x`` is a mapping from covariate name to value or a vector ordered
        like ``covariate_names``.  Missing ``x`` means all covariates zero.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        row = self._covariate_row(x)
        out = np.zeros(t.size)
        for term, b, c in zip(self.terms, self.bases, self.coefs):
            w = term.weights(row[None, :], self.covariate_names)[0]
            if w != 0.0:
                out += w * (eval_basis(b, t) @ c)
        return out

    def predict_points(self, cs: CurveSet) -> np.ndarray:
        """Mean at every observed point of ``cs``."""
        return self.design(cs) @ np.concatenate(self.coefs)

    def design(self, cs: CurveSet) -> np.ndarray:
        """Row-tensor design: term multiplier times spline basis, per point."""
        cov = self._align(cs)
        blocks = [
            term.weights(cov, self.covariate_names)[:, None] * eval_basis(b, cs.t)
            for term, b in zip(self.terms, self.bases)
        ]
        return np.hstack(blocks)

    def _align(self, cs: CurveSet) -> np.ndarray:
        names = list(cs.covariate_names)
        missing = [n for n in self.covariate_names if n not in names]
        if missing:
            raise ValueError(f"curve set lacks covariates {missing} used by the mean model")
        cols = [names.index(n) for n in self.covariate_names]
        return cs.covariates[cs.curve][:, cols]

    def _covariate_row(self, x) -> np.ndarray:
        k = len(self.covariate_names)
        if x is None:
            return np.zeros(k)
        if isinstance(x, Mapping):
            unknown = set(x) - set(self.covariate_names)
            if unknown:
                raise KeyError(f"unknown covariates {sorted(unknown)}")
            return np.array([float(x.get(n, 0.0)) for n in self.covariate_names])
        row = np.asarray(x, dtype=float).ravel()
        if row.size != k:
            raise ValueError(f"covariate row has {row.size} entries, expected {k}")
        return row


def mean_design(cs: CurveSet, terms: Sequence[MeanTerm], bases: Sequence[SplineBasis]) -> np.ndarray:
    cov = cs.covariates[cs.curve]
    return np.hstack(
        [t.weights(cov, cs.covariate_names)[:, None] * eval_basis(b, cs.t) for t, b in zip(terms, bases)]
    )


@dataclass(frozen=True)
class MeanProblem:
    """Design and penalties of the mean model for one curve set."""

    terms: tuple[MeanTerm, ...]
    bases: tuple[SplineBasis, ...]
    design: np.ndarray
    penalties: tuple[Penalty, ...]
    covariate_names: tuple[str, ...]
    penalty_order: int

    def model(self, coef: np.ndarray, lambdas, fit: PenalizedLsFit | None = None) -> MeanModel:
        coefs = tuple(np.asarray(coef)[p.cols].copy() for p in self.penalties)
        return MeanModel(
            terms=self.terms,
            bases=self.bases,
            coefs=coefs,
            lambdas=np.asarray(lambdas, dtype=float),
            penalty_order=self.penalty_order,
            covariate_names=self.covariate_names,
            fit=fit,
        )


def mean_problem(cs: CurveSet, terms="t", k=8, penalty_order: int = 3, degree: int = 3) -> MeanProblem:
    """Build the row-tensor mean design and its difference penalties.

    Warns when a term multiplier is constant (confounded with the intercept)
    or when there are fewer observations than coefficients.
    """
    term_list = parse_terms(terms)
    ks = [int(k)] * len(term_list) if np.isscalar(k) else [int(v) for v in k]
    if len(ks) != len(term_list):
        raise ValueError(f"{len(ks)} basis sizes for {len(term_list)} terms")
    for term in term_list:
        for c in term.covariates:
            if c not in cs.covariate_names:
                raise KeyError(f"unknown covariate {c!r}; available: {list(cs.covariate_names)}")
    used = tuple(n for n in cs.covariate_names if any(n in term.covariates for term in term_list))
    cov = cs.covariates[cs.curve]
    for term in term_list[1:]:
        if np.ptp(term.weights(cov, cs.covariate_names)) == 0.0:
            warnings.warn(
                f"term {term.name!r} has a constant multiplier and is confounded with the intercept",
                ConfoundingWarning,
                stacklevel=3,
            )
    if cs.n_points <= sum(ks):
        warnings.warn(
            f"{cs.n_points} observations for {sum(ks)} mean coefficients",
            SmallSampleWarning,
            stacklevel=3,
        )
    bases = tuple(SplineBasis(kk, cs.domain, degree) for kk in ks)
    penalties, start = [], 0
    for kk in ks:
        penalties.append(Penalty(slice(start, start + kk), difference_penalty(kk, penalty_order)))
        start += kk
    return MeanProblem(
        terms=tuple(term_list),
        bases=bases,
        design=mean_design(cs, term_list, bases),
        penalties=tuple(penalties),
        covariate_names=used,
        penalty_order=penalty_order,
    )


def fit_mean(
    cs: CurveSet,
    terms="t",
    k: int | Sequence[int] = 8,
    penalty_order: int = 3,
    degree: int = 3,
    lambdas="select",
    criterion: str = "reml",
) -> MeanModel:
    """Fit the mean by penalized splines, ignoring within-curve correlation.

    Parameters
    ----------
    cs : CurveSet
    terms : str or list of str
        Term specification such as ``"t + t:order"``.
    k : int or sequence of int
        Basis size per term (a single value is used for all terms).
    penalty_order : int
        Order of the coefficient difference penalty.
    degree : int
        Spline degree.
    lambdas : "select" or sequence of float
        Smoothing parameters, one per term.
    criterion : {"reml", "gcv"}

    Returns
    -------
    MeanModel
    """
    prob = mean_problem(cs, terms, k, penalty_order, degree)
    fit = solve_penalized_ls(prob.design, cs.y, prob.penalties, lambdas=lambdas, criterion=criterion)
    return prob.model(fit.coef, fit.lambdas, fit)


def zero_mean(cs: CurveSet, k: int = 8, penalty_order: int = 3, degree: int = 3) -> MeanModel:
    """Intercept-only mean that is identically zero."""
    basis = SplineBasis(k, cs.domain, degree)
    return MeanModel((MeanTerm(),), (basis,), (np.zeros(k),), np.zeros(1), penalty_order, ())


def predict_mean(m: MeanModel, t, x=None) -> np.ndarray:
    """``sum_p x_p f_p(t)`` with ``x_0 = 1``; see :meth:`MeanModel.predict`."""
    return m.predict(t, x)
