"""Synthetic scenarios, error metrics and a replicate runner.

A scenario draws curves on a crossed (or single-factor) design with known
mean, eigenfunctions, eigenvalues and noise level, fits the full pipeline and
scores every estimated quantity by the root relative mean squared error

    rrMSE(theta, theta_hat) = sqrt( mean((theta - theta_hat)^2) / mean(theta^2) ).
"""

from __future__ import annotations

import csv
import json
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .fdata import CurveSet
from .pipeline import PipelineOptions, fit_flmm

# ---------------------------------------------------------------------------
# function libraries
# ---------------------------------------------------------------------------

SQ2 = math.sqrt(2.0)


def _legendre(k: int):
    coefs = {
        0: lambda u: np.ones_like(u),
        1: lambda u: math.sqrt(3.0) * (2 * u - 1),
        2: lambda u: math.sqrt(5.0) * (6 * u**2 - 6 * u + 1),
        3: lambda u: math.sqrt(7.0) * (20 * u**3 - 30 * u**2 + 12 * u - 1),
    }
    return coefs[k]


BASIS_FUNCTIONS = {
    "legendre0": _legendre(0),
    "legendre1": _legendre(1),
    "legendre2": _legendre(2),
    "legendre3": _legendre(3),
    "sin2pi": lambda u: SQ2 * np.sin(2 * np.pi * u),
    "cos2pi": lambda u: SQ2 * np.cos(2 * np.pi * u),
    "sin4pi": lambda u: SQ2 * np.sin(4 * np.pi * u),
    "cos4pi": lambda u: SQ2 * np.cos(4 * np.pi * u),
}

MEAN_FUNCTIONS = {
    "zero": lambda t: np.zeros_like(t),
    "sin_plus_t": lambda t: np.sin(t) + t,
    "offset_wave": lambda t: 0.4 + 0.3 * np.sin(2 * np.pi * t),
    "linear_drop": lambda t: 0.25 - 0.5 * t,
    "bump": lambda t: 0.3 * np.exp(-(((t - 0.5) / 0.2) ** 2)),
}


def eigenfunction(name: str, t, domain=(0.0, 1.0)) -> np.ndarray:
    """Orthonormal function ``name`` on ``domain`` (mapped from ``[0, 1]``)."""
    lo, hi = domain
    u = (np.asarray(t, dtype=float) - lo) / (hi - lo)
    return BASIS_FUNCTIONS[name](u) / math.sqrt(hi - lo)


# ---------------------------------------------------------------------------
# scenario configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProcessSpec:
    functions: tuple[str, ...]
    eigenvalues: tuple[float, ...]


@dataclass(frozen=True)
class ScenarioConfig:
    """Data-generating settings of one scenario.

    ``points`` is either a fixed count per curve or inclusive bounds
    ``(lo, hi)`` of a discrete uniform law.  ``mean`` maps mean-term names
    (``"t"``, ``"t:x1"``, ...) to entries of :data:`MEAN_FUNCTIONS`.  With
    ``covariates="word_bits"`` curve covariates ``x1, x2, ...`` are the
    binary digits of the word index.
    """

    design: str = "crossed"
    n_g1: int = 40
    n_g2: int = 40
    n_rep: int = 3
    points: tuple[int, int] | int = (3, 10)
    domain: tuple[float, float] = (0.0, 1.0)
    mean: dict = field(default_factory=lambda: {"t": "sin_plus_t"})
    covariates: str | None = None
    processes: dict = field(default_factory=dict)
    sigma2: float = 0.05
    seed: int = 0
    n_replicates: int = 50
    center_decorrelate: bool = True

    def __post_init__(self):
        procs = {}
        for name, spec in dict(self.processes).items():
            if not isinstance(spec, ProcessSpec):
                spec = ProcessSpec(tuple(spec["functions"]), tuple(float(v) for v in spec["eigenvalues"]))
            procs[name] = spec
        object.__setattr__(self, "processes", procs)
        object.__setattr__(self, "mean", dict(self.mean))
        if isinstance(self.points, (list, tuple)):
            object.__setattr__(self, "points", tuple(int(v) for v in self.points))
        object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))
        self.validate()

    def validate(self) -> None:
        if self.design not in ("crossed", "fri"):
            raise ValueError(f"unknown design {self.design!r}")
        allowed = ("B", "C", "E") if self.design == "crossed" else ("B", "E")
        for name, spec in self.processes.items():
            if name not in allowed:
                raise ValueError(f"process {name!r} not allowed in a {self.design} design")
            ev = np.asarray(spec.eigenvalues)
            if len(spec.functions) != ev.size or ev.size == 0:
                raise ValueError(f"process {name}: need one eigenvalue per function")
            if np.any(ev <= 0) or np.any(np.diff(ev) > 0):
                raise ValueError(f"process {name}: eigenvalues must be positive and descending")
            for f in spec.functions:
                if f not in BASIS_FUNCTIONS:
                    raise ValueError(f"unknown eigenfunction {f!r}; choose from {sorted(BASIS_FUNCTIONS)}")
        lo_hi = self.points if isinstance(self.points, tuple) else (self.points, self.points)
        if len(lo_hi) != 2 or lo_hi[0] < 1 or lo_hi[1] < lo_hi[0]:
            raise ValueError(f"invalid point-count law {self.points!r}")
        if min(self.n_g1, self.n_g2, self.n_rep) < 1:
            raise ValueError("level counts must be positive")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")
        if "t" not in self.mean:
            raise ValueError("mean needs an intercept term 't'")
        for name, f in self.mean.items():
            if f not in MEAN_FUNCTIONS:
                raise ValueError(f"unknown mean function {f!r}; choose from {sorted(MEAN_FUNCTIONS)}")
        if self.covariates not in (None, "word_bits"):
            raise ValueError(f"unknown covariate law {self.covariates!r}")

    @property
    def n_curves(self) -> int:
        return self.n_g1 * self.n_g2 * self.n_rep

    @property
    def mean_terms(self) -> str:
        return " + ".join(self.mean)

    def as_dict(self) -> dict:
        out = asdict(self)
        out["processes"] = {
            k: {"functions": list(v.functions), "eigenvalues": list(v.eigenvalues)}
            for k, v in self.processes.items()
        }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        data = dict(data)
        preset = data.pop("preset", None)
        base = PRESETS[preset]() if preset else cls()
        unknown = set(data) - set(base.as_dict())
        if unknown:
            raise ValueError(f"unknown scenario keys {sorted(unknown)}")
        return replace(base, **data)


def sparse_scenario(**overrides) -> ScenarioConfig:
    """Crossed design, 40 x 40 x 3 curves with 3 to 10 points each."""
    cfg = ScenarioConfig(
        design="crossed",
        n_g1=40,
        n_g2=40,
        n_rep=3,
        points=(3, 10),
        mean={"t": "sin_plus_t"},
        processes={
            "B": {"functions": ["legendre0", "legendre2"], "eigenvalues": [2.0, 1.0]},
            "C": {"functions": ["legendre1", "legendre3"], "eigenvalues": [2.0, 1.0]},
            "E": {"functions": ["sin2pi", "cos2pi"], "eigenvalues": [2.0, 1.0]},
        },
        sigma2=0.05,
    )
    return replace(cfg, **overrides)


def fri_scenario(**overrides) -> ScenarioConfig:
    """Speaker intercept plus curve-level process, two binary word covariates."""
    cfg = ScenarioConfig(
        design="fri",
        n_g1=9,
        n_g2=16,
        n_rep=2,
        points=(15, 30),
        mean={"t": "offset_wave", "t:x1": "linear_drop", "t:x2": "bump"},
        covariates="word_bits",
        processes={
            "B": {"functions": ["legendre0", "legendre1"], "eigenvalues": [5.84e-3, 3.23e-3]},
            "E": {"functions": ["sin2pi", "cos2pi", "sin4pi"], "eigenvalues": [19.53e-3, 7.59e-3, 2.73e-3]},
        },
        sigma2=3.94e-3,
    )
    return replace(cfg, **overrides)


def dense_exact_scenario(**overrides) -> ScenarioConfig:
    """Noiseless, densely sampled curve-level process inside the spline space.

    With a single process there are no cross-products between processes, so
    the only errors left are smoothing and discretization.
    """
    cfg = ScenarioConfig(
        design="crossed",
        n_g1=20,
        n_g2=20,
        n_rep=2,
        points=20,
        mean={"t": "sin_plus_t"},
        processes={"E": {"functions": ["legendre0", "legendre1"], "eigenvalues": [2.0, 1.0]}},
        sigma2=0.0,
        n_replicates=5,
    )
    return replace(cfg, **overrides)


PRESETS = {"sparse": sparse_scenario, "fri": fri_scenario, "dense-exact": dense_exact_scenario}


# ---------------------------------------------------------------------------
# data generation
# ---------------------------------------------------------------------------


@dataclass
class GroundTruth:
    """Everything needed to score a fit of a generated data set."""

    config: ScenarioConfig
    xi: dict
    mean_terms: dict
    covariates: np.ndarray
    covariate_names: tuple[str, ...]

    def process_functions(self, process: str, grid) -> np.ndarray:
        spec = self.config.processes[process]
        return np.column_stack([eigenfunction(f, grid, self.config.domain) for f in spec.functions])

    def eigenvalues(self, process: str) -> np.ndarray:
        return np.asarray(self.config.processes[process].eigenvalues)

    def kernel(self, process: str, grid) -> np.ndarray:
        phi = self.process_functions(process, grid)
        return (phi * self.eigenvalues(process)) @ phi.T

    def term_curves(self, grid) -> dict:
        return {name: MEAN_FUNCTIONS[f](np.asarray(grid, dtype=float)) for name, f in self.config.mean.items()}

    def mean_matrix(self, grid) -> np.ndarray:
        """True mean of every curve on ``grid``, shape ``(n_curves, len(grid))``."""
        terms = self.term_curves(grid)
        out = np.zeros((self.covariates.shape[0], len(grid)))
        for name, curve in terms.items():
            w = np.ones(self.covariates.shape[0])
            for c in name.split(":")[1:]:
                w = w * self.covariates[:, self.covariate_names.index(c)]
            out += w[:, None] * curve[None, :]
        return out

    def process_curves(self, process: str, grid) -> np.ndarray:
        return self.xi[process] @ self.process_functions(process, grid).T


def center_decorrelate(w: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Center columns, whiten with the empirical covariance, rescale to ``nu``.

    The empirical covariance uses the ``1/n`` normalization, so afterwards
    ``w.mean(0) == 0`` and ``w.T @ w / n == diag(nu)`` up to rounding.
    """
    n = w.shape[0]
    if n <= w.shape[1]:
        raise ValueError("need more levels than components to decorrelate weights")
    w = w - w.mean(axis=0)
    cov = w.T @ w / n
    chol = np.linalg.cholesky(cov)
    white = np.linalg.solve(chol, w.T).T
    return white * np.sqrt(nu)


def generate(cfg: ScenarioConfig, seed: int | None = None) -> tuple[CurveSet, GroundTruth]:
    """Draw one data set; ``seed`` defaults to ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n_g1, n_g2, n_rep = cfg.n_g1, cfg.n_g2, cfg.n_rep
    n = cfg.n_curves
    g1 = np.repeat(np.arange(n_g1), n_g2 * n_rep)
    g2 = np.tile(np.repeat(np.arange(n_g2), n_rep), n_g1)
    rep = np.tile(np.arange(n_rep), n_g1 * n_g2)
    if isinstance(cfg.points, tuple):
        counts = rng.integers(cfg.points[0], cfg.points[1] + 1, size=n)
    else:
        counts = np.full(n, cfg.points)
    lo, hi = cfg.domain
    curve = np.repeat(np.arange(n), counts)
    t = rng.uniform(lo, hi, size=curve.size)
    order = np.lexsort((t, curve))
    t = t[order]

    if cfg.covariates == "word_bits":
        n_bits = max(1, int(math.ceil(math.log2(max(n_g2, 2)))))
        names = tuple(f"x{b + 1}" for b in range(n_bits))
        cov = np.array([[(j >> b) & 1 for b in range(n_bits)] for j in g2], dtype=float)
    else:
        names, cov = (), np.zeros((n, 0))

    levels = {"B": (n_g1, g1), "C": (n_g2, g2), "E": (n, np.arange(n))}
    xi = {}
    y = np.zeros(curve.size)
    for name in ("B", "C", "E"):
        if name not in cfg.processes:
            continue
        spec = cfg.processes[name]
        nu = np.asarray(spec.eigenvalues)
        n_lev, ids = levels[name]
        w = rng.standard_normal((n_lev, nu.size)) * np.sqrt(nu)
        if cfg.center_decorrelate:
            w = center_decorrelate(w, nu)
        xi[name] = w
        phi = np.column_stack([eigenfunction(f, t, cfg.domain) for f in spec.functions])
        y += np.sum(phi * w[ids[curve]], axis=1)

    truth = GroundTruth(cfg, xi, dict(cfg.mean), cov, names)
    for name, f in cfg.mean.items():
        mult = np.ones(n)
        for c in name.split(":")[1:]:
            mult = mult * cov[:, names.index(c)]
        y += mult[curve] * MEAN_FUNCTIONS[f](t)
    if cfg.sigma2 > 0:
        y += rng.normal(scale=math.sqrt(cfg.sigma2), size=y.size)
    cs = CurveSet(
        curve=curve,
        t=t,
        y=y,
        g1=g1,
        g2=g2,
        rep=rep,
        covariates=cov,
        covariate_names=names,
        domain=cfg.domain,
    )
    return cs, truth


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _rr(true, est) -> float:
    true = np.asarray(true, dtype=float)
    est = np.asarray(est, dtype=float)
    if true.shape != est.shape:
        raise ValueError(f"shape mismatch {true.shape} vs {est.shape}")
    denom = float(np.mean(true**2))
    if denom == 0.0:
        raise ZeroDivisionError("true value is identically zero; use an absolute error instead")
    return math.sqrt(float(np.mean((true - est) ** 2)) / denom)


def rrmse_scalar(true: float, est: float) -> float:
    return _rr(np.atleast_1d(true), np.atleast_1d(est))


def rrmse_vector(true, est) -> float:
    return _rr(true, est)


def rrmse_function(true, est, flip: bool = False) -> float:
    """Error of a function on a grid; ``flip`` takes the better of ``est`` and ``-est``."""
    err = _rr(true, est)
    if flip:
        err = min(err, _rr(true, -np.asarray(est)))
    return err


def rrmse_surface(true, est) -> float:
    return _rr(true, est)


def _sign_for(true_phi, est_phi) -> float:
    return 1.0 if np.sum((true_phi - est_phi) ** 2) <= np.sum((true_phi + est_phi) ** 2) else -1.0


def score_fit(state, truth: GroundTruth) -> dict:
    """rrMSE of every estimated quantity of one pipeline fit."""
    es = state.eigen
    grid = es.grid
    cfg = truth.config
    out = {}
    est_terms = dict(zip(state.mean.term_names, state.mean.term_curves(grid)))
    true_terms = truth.term_curves(grid)
    for name, curve in true_terms.items():
        key = "mu" if len(true_terms) == 1 else f"mu[{name}]"
        if np.any(curve != 0):
            out[key] = rrmse_function(curve, est_terms[name])
    pred = state.prediction
    y_true = truth.mean_matrix(grid)
    y_est = _mean_matrix_est(state, grid)
    for p in state.design.processes:
        if p not in cfg.processes:
            continue
        out[f"K{p}"] = rrmse_surface(truth.kernel(p, grid), state.cov.evaluate(p, grid))
        phi_true = truth.process_functions(p, grid)
        nu_true = truth.eigenvalues(p)
        nu_est = es.values(p)
        phi_est = es.functions(p)
        ids = _level_index(state.cs, p)
        x_true = truth.process_curves(p, grid)
        y_true += x_true[ids]
        for k in range(min(nu_true.size, nu_est.size)):
            sign = _sign_for(phi_true[:, k], phi_est[:, k])
            out[f"phi{p}{k + 1}"] = rrmse_function(phi_true[:, k], phi_est[:, k], flip=True)
            out[f"nu{p}{k + 1}"] = rrmse_scalar(nu_true[k], nu_est[k])
            if pred is not None:
                out[f"xi{p}{k + 1}"] = rrmse_vector(truth.xi[p][:, k], sign * pred.xi[p][:, k])
        if pred is not None:
            x_est = pred.grid_curves[p] if p in pred.grid_curves else np.zeros_like(x_true)
            out[f"{p}"] = rrmse_surface(x_true, x_est)
            y_est += x_est[ids]
    if pred is not None:
        out["Y"] = rrmse_surface(y_true, y_est)
    if cfg.sigma2 > 0:
        out["sigma2"] = rrmse_scalar(cfg.sigma2, state.cov.sigma2)
    else:
        out["sigma2_abs"] = abs(state.cov.sigma2)
    if state.famm is not None:
        famm_terms = dict(zip(state.famm.mean.term_names, state.famm.mean.term_curves(grid)))
        for name, curve in true_terms.items():
            if np.any(curve != 0):
                suffix = "" if len(true_terms) == 1 else f"[{name}]"
                out[f"famm_mu{suffix}"] = rrmse_function(curve, famm_terms[name])
                _, _, lo, hi = state.famm.bands[name]
                out[f"coverage{suffix}"] = float(np.mean((curve >= lo) & (curve <= hi)))
    return out


def _level_index(cs: CurveSet, process: str) -> np.ndarray:
    return {"B": cs.g1, "C": cs.g2, "E": np.arange(cs.n_curves)}[process]


def _mean_matrix_est(state, grid) -> np.ndarray:
    mean = state.mean
    curves = mean.term_curves(grid)
    cov = state.cs.covariates
    out = np.zeros((state.cs.n_curves, len(grid)))
    for term, curve in zip(mean.terms, curves):
        w = term.weights(cov, state.cs.covariate_names)
        out += w[:, None] * curve[None, :]
    return out


# ---------------------------------------------------------------------------
# study runner
# ---------------------------------------------------------------------------


@dataclass
class RrmseReport:
    """Average errors over successful replicates plus the raw per-replicate values."""

    config: dict
    options: dict
    averages: dict
    per_replicate: list
    failures: list

    @property
    def n_ok(self) -> int:
        return sum(1 for r in self.per_replicate if r is not None)

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "options": self.options,
                "n_ok": self.n_ok,
                "n_failed": len(self.failures),
                "failures": self.failures,
                "averages": self.averages,
                "per_replicate": self.per_replicate,
            },
            indent=2,
            sort_keys=True,
        )

    def table_rows(self) -> list[list[str]]:
        """Rows of a process-by-quantity table of average errors."""
        avg = self.averages
        header = ["process", "K", "phi1", "phi2", "phi3", "nu1", "nu2", "nu3", "xi1", "xi2", "xi3", "X"]
        rows = [header]
        for p in ("B", "C", "E"):
            if f"K{p}" not in avg:
                continue
            keys = [f"K{p}"] + [f"{q}{p}{k}" for q in ("phi", "nu", "xi") for k in (1, 2, 3)] + [p]
            rows.append([p] + [_fmt(avg.get(k)) for k in keys])
        return rows

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = out_dir / "report.json"
        report.write_text(self.to_json())
        table = out_dir / "rrmse_table.csv"
        with open(table, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.table_rows())
        scalars = out_dir / "rrmse_scalars.csv"
        with open(scalars, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["quantity", "average"])
            for key in sorted(self.averages):
                w.writerow([key, _fmt(self.averages[key])])
        return [report, table, scalars]


def _fmt(v) -> str:
    return "" if v is None else format(float(v), ".17g")


def _truncation(cfg: ScenarioConfig, options: PipelineOptions, mode: str) -> PipelineOptions:
    if mode == "fixed":
        return replace(options, n_components={p: len(s.eigenvalues) for p, s in cfg.processes.items()})
    if mode == "level":
        return replace(options, n_components=None)
    raise ValueError(f"unknown truncation mode {mode!r}")


def run_replicate(cfg: ScenarioConfig, options: PipelineOptions, replicate: int) -> dict:
    cs, truth = generate(cfg, cfg.seed + replicate)
    state = fit_flmm(cs, options)
    return score_fit(state, truth)


def _safe_replicate(args):
    cfg, options, r = args
    try:
        return r, run_replicate(cfg, options, r), None
    except Exception as exc:  # recorded, reported and excluded
        return r, None, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


def run_study(
    cfg: ScenarioConfig,
    options: PipelineOptions | None = None,
    n_replicates: int | None = None,
    workers: int = 1,
    truncation: str = "fixed",
) -> RrmseReport:
    """Generate, fit and score ``n_replicates`` data sets.

    Replicate ``r`` uses seed ``cfg.seed + r``, so results do not depend on
    ``workers``.  Failed replicates are listed in ``failures`` and excluded
    from the averages.
    """
    n_rep = cfg.n_replicates if n_replicates is None else int(n_replicates)
    options = options or PipelineOptions()
    options = replace(options, design=cfg.design, terms=cfg.mean_terms)
    options = _truncation(cfg, options, truncation)
    jobs = [(cfg, options, r) for r in range(n_rep)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_replicate, jobs))
    else:
        results = [_safe_replicate(j) for j in jobs]
    results.sort(key=lambda x: x[0])
    per_rep = [res for _, res, _ in results]
    failures = [{"replicate": r, "error": err} for r, _, err in results if err is not None]
    keys = sorted({k for res in per_rep if res for k in res})
    averages = {}
    for k in keys:
        vals = [res[k] for res in per_rep if res and k in res]
        averages[k] = float(np.mean(vals))
    return RrmseReport(cfg.as_dict(), options.as_dict(), averages, per_rep, failures)
