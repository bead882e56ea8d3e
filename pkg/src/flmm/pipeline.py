"""End-to-end fit: mean, covariances, eigen system, prediction, optional refinement."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .covfit import CovarianceFit, fit_covariances
from .eigen import EigenSystem, decompose
from .fdata import CurveSet, GroupingDesign, center_responses
from .meanfit import MeanModel, fit_mean
from .predict import FammFit, PredictionResult, build_blup_system, fit_famm, predict_eblup


class DivergenceWarning(RuntimeWarning):
    """The refinement loop stopped because the mean kept moving further."""


@dataclass(frozen=True)
class PipelineOptions:
    """Settings of one full fit.

    ``n_components`` fixes the truncation per process; otherwise ``level``
    selects it by explained variance.
    """

    design: str | None = None
    terms: str = "t"
    k_mean: int = 8
    k_cov: int = 5
    mean_order: int = 3
    cov_order: int = 3
    degree: int = 3
    cov_penalty: str = "kronecker"
    cov_lambda: float | str = "select"
    cov_method: str = "grouped"
    grid_d: int = 100
    level: float = 0.95
    n_components: dict | None = None
    predict: str = "eblup"
    criterion: str = "reml"
    solver: str = "jacobi"
    lambda_fix: float = 1.0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineState:
    cs: CurveSet
    design: GroupingDesign
    options: PipelineOptions
    mean: MeanModel
    cov: CovarianceFit
    eigen: EigenSystem
    prediction: PredictionResult | None
    famm: FammFit | None = None
    iterations: int = 0
    history: list = field(default_factory=list)


def _steps_2_to_4(cs: CurveSet, design: GroupingDesign, mean: MeanModel, opt: PipelineOptions):
    centered = center_responses(cs, mean)
    cov = fit_covariances(
        centered,
        design,
        k=opt.k_cov,
        lam=opt.cov_lambda,
        penalty_order=opt.cov_order,
        degree=opt.degree,
        penalty=opt.cov_penalty,
        method=opt.cov_method,
        criterion=opt.criterion,
    )
    es = decompose(cov, opt.grid_d, opt.level, opt.n_components, opt.solver)
    pred = None
    if opt.predict in ("eblup", "both"):
        sys = build_blup_system(centered, es, design)
        pred = predict_eblup(sys, centered.y, mean.predict_points(cs), es)
    famm = None
    if opt.predict in ("famm", "both"):
        famm = fit_famm(
            cs, es, opt.terms, opt.k_mean, opt.mean_order, opt.degree, design,
            lambda_fix=opt.lambda_fix, criterion=opt.criterion,
        )
    return cov, es, pred, famm


def fit_flmm(cs: CurveSet, options: PipelineOptions | None = None, **kwargs) -> PipelineState:
    """Run the four estimation steps once.

    Keyword arguments override fields of ``options``.
    """
    opt = replace(options or PipelineOptions(), **kwargs)
    if opt.predict not in ("eblup", "famm", "both"):
        raise ValueError(f"unknown prediction method {opt.predict!r}")
    design = cs.design(opt.design)
    mean = fit_mean(cs, opt.terms, opt.k_mean, opt.mean_order, opt.degree, criterion=opt.criterion)
    cov, es, pred, famm = _steps_2_to_4(cs, design, mean, opt)
    return PipelineState(cs, design, opt, mean, cov, es, pred, famm)


def _mean_grid(mean: MeanModel, grid) -> np.ndarray:
    return mean.term_curves(grid).ravel()


def iterate(state: PipelineState, max_iters: int = 5, tol: float = 1e-3) -> PipelineState:
    """Refine the fit by re-estimating the mean from de-noised responses.

    Each pass subtracts the predicted random-effect curves from the raw
    responses, refits the mean, and repeats the covariance, eigen and
    prediction steps.  Stops when the relative change of the mean term
    curves on the grid drops below ``tol``, after ``max_iters`` passes, or
    (with a :class:`DivergenceWarning`) when the change grew in two
    consecutive passes.
    """
    if max_iters <= 0:
        return state
    opt = state.options
    cs = state.cs
    grid = state.eigen.grid
    current = state
    changes = list(state.history)
    for it in range(max_iters):
        pred = current.prediction if current.prediction is not None else current.famm.prediction
        adjusted = cs.with_y(cs.y - pred.random_points)
        mean = fit_mean(adjusted, opt.terms, opt.k_mean, opt.mean_order, opt.degree, criterion=opt.criterion)
        old = _mean_grid(current.mean, grid)
        new = _mean_grid(mean, grid)
        change = float(np.linalg.norm(new - old) / max(np.linalg.norm(old), 1e-300))
        cov, es, pred_new, famm = _steps_2_to_4(cs, current.design, mean, opt)
        changes.append(change)
        current = PipelineState(
            cs, current.design, opt, mean, cov, es, pred_new, famm, current.iterations + 1, list(changes)
        )
        if change < tol:
            break
        if len(changes) >= 3 and changes[-1] > changes[-2] > changes[-3]:
            warnings.warn(
                f"mean change grew in two consecutive iterations ({changes[-3]:.3g} -> "
                f"{changes[-2]:.3g} -> {changes[-1]:.3g}); stopping",
                DivergenceWarning,
                stacklevel=2,
            )
            break
    return current
