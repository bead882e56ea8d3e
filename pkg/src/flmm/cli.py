"""Command-line interface: ``flmm fit``, ``flmm simulate``, ``flmm decompose``.

Settings are resolved in three layers: built-in defaults, then an optional
``--config`` file (JSON or YAML), then flags given explicitly on the command
line.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .covfit import read_surface, write_surfaces
from .eigen import decompose_matrices, write_eigensystem
from .fdata import CurveSet, load_curveset
from .pipeline import PipelineOptions, PipelineState, fit_flmm, iterate
from .sim import PRESETS, ScenarioConfig, run_study

DEFAULTS = {
    "input": None,
    "output_dir": "flmm-out",
    "design": None,
    "mean": "t",
    "k_mean": 8,
    "k_cov": 5,
    "grid_d": 100,
    "var_level": 0.95,
    "n_components": None,
    "predict": "eblup",
    "iterate": 0,
    "tol": 1e-3,
    "seed": 0,
    "threads": 1,
    "schema": None,
    "domain": None,
    "scenario": "sparse",
    "replicates": None,
    "truncation": "fixed",
}


class ConfigError(ValueError):
    """Invalid command-line or configuration-file settings."""


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _parse_components(text):
    if text is None or isinstance(text, dict):
        return text
    out = {}
    for part in str(text).split(","):
        if not part.strip():
            continue
        name, _, value = part.partition("=")
        if name.strip() not in ("B", "C", "E") or not value.strip().isdigit():
            raise ConfigError(f"bad component count {part!r}; expected e.g. B=2,C=1,E=3")
        out[name.strip()] = int(value)
    return out


def _parse_schema(text):
    if text is None or isinstance(text, dict):
        return text
    out = {}
    for part in str(text).split(","):
        key, _, value = part.partition("=")
        if not value:
            raise ConfigError(f"bad schema entry {part!r}; expected canonical=column")
        out[key.strip()] = value.strip()
    return out


def _parse_domain(value):
    if value is None:
        return None
    if isinstance(value, str):
        value = [v for v in value.split(",")]
    lo, hi = (float(v) for v in value)
    if not hi > lo:
        raise ConfigError(f"empty domain {value}")
    return lo, hi


def load_config(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags (later wins)."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        file_cfg = load_config(args.config)
        unknown = set(file_cfg) - set(DEFAULTS) - {"scenario_config", "options"}
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        cfg.update(file_cfg)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            cfg[key] = value
    cfg["n_components"] = _parse_components(cfg["n_components"])
    cfg["schema"] = _parse_schema(cfg["schema"])
    cfg["domain"] = _parse_domain(cfg["domain"])
    if not 0 < float(cfg["var_level"]) <= 1:
        raise ConfigError("--var-level must lie in (0, 1]")
    if int(cfg["grid_d"]) < 10:
        raise ConfigError("--grid-d must be at least 10")
    if cfg["predict"] not in ("eblup", "famm", "both"):
        raise ConfigError(f"unknown prediction method {cfg['predict']!r}")
    if cfg["design"] not in (None, "fri", "crossed"):
        raise ConfigError(f"unknown design {cfg['design']!r}")
    return cfg


def pipeline_options(cfg: dict) -> PipelineOptions:
    extra = dict(cfg.get("options") or {})
    opt = PipelineOptions(
        design=cfg["design"],
        terms=cfg["mean"],
        k_mean=int(cfg["k_mean"]),
        k_cov=int(cfg["k_cov"]),
        grid_d=int(cfg["grid_d"]),
        level=float(cfg["var_level"]),
        n_components=cfg["n_components"],
        predict=cfg["predict"],
    )
    return replace(opt, **extra) if extra else opt


def manifest(command: str, cfg: dict) -> dict:
    return {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "versions": {
            "flmm": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default))


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _writer(path: Path):
    fh = open(path, "w", newline="", encoding="utf-8")
    return fh, csv.writer(fh, lineterminator="\n")


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _level_labels(cs: CurveSet, process: str) -> list:
    labels = cs.labels or {}
    key = {"B": "g1", "C": "g2", "E": "curve"}[process]
    n = {"B": cs.n_g1, "C": cs.n_g2, "E": cs.n_curves}[process]
    return labels.get(key) or list(range(n))


def write_fit(state: PipelineState, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cs, es = state.cs, state.eigen
    grid = es.grid

    fh, w = _writer(out / "mean_coefficients.csv")
    with fh:
        w.writerow(["term", "k", "coef", "lambda"])
        for name, coef, lam in zip(state.mean.term_names, state.mean.coefs, state.mean.lambdas):
            for k, c in enumerate(coef):
                w.writerow([name, k, _fmt(c), _fmt(lam)])
    fh, w = _writer(out / "mean_curves.csv")
    with fh:
        curves = state.mean.term_curves(grid)
        w.writerow(["t"] + state.mean.term_names)
        for i, t in enumerate(grid):
            w.writerow([_fmt(t)] + [_fmt(c[i]) for c in curves])

    write_surfaces(state.cov, grid, out)
    _write_json(
        out / "covariance.json",
        {
            "sigma2": state.cov.sigma2,
            "sigma2_raw": state.cov.sigma2_raw,
            "sigma2_clamped": state.cov.sigma2_clamped,
            "lambdas": state.cov.lambdas,
            "n_products": state.cov.n_products,
            "marginal_basis_size": state.cov.basis.n_basis,
            "penalty": state.cov.penalty_kind,
            "design": state.design.kind,
            "domain": list(cs.domain),
        },
    )
    write_eigensystem(es, out)

    curve_labels = _level_labels(cs, "E")
    results = []
    if state.prediction is not None:
        results.append(("eblup", state.prediction))
    if state.famm is not None:
        results.append(("famm", state.famm.prediction))
    for tag, pred in results:
        fh, w = _writer(out / f"weights_{tag}.csv")
        with fh:
            w.writerow(["process", "level", "component", "value"])
            for proc, xi in pred.xi.items():
                labels = _level_labels(cs, proc)
                for lev in range(xi.shape[0]):
                    for k in range(xi.shape[1]):
                        w.writerow([proc, labels[lev], k + 1, _fmt(xi[lev, k])])
        fh, w = _writer(out / f"fitted_{tag}.csv")
        with fh:
            procs = list(pred.point_effects)
            w.writerow(["curve_id", "t", "y", "mean", *procs, "fitted"])
            for a in range(cs.n_points):
                w.writerow(
                    [curve_labels[cs.curve[a]], _fmt(cs.t[a]), _fmt(cs.y[a]), _fmt(pred.mean_points[a])]
                    + [_fmt(pred.point_effects[p][a]) for p in procs]
                    + [_fmt(pred.fitted[a])]
                )
    if state.famm is not None:
        fh, w = _writer(out / "bands.csv")
        with fh:
            w.writerow(["term", "t", "est", "lo", "hi"])
            for term, (g, est, lo, hi) in state.famm.bands.items():
                for i in range(g.size):
                    w.writerow([term, _fmt(g[i]), _fmt(est[i]), _fmt(lo[i]), _fmt(hi[i])])
    if state.history:
        _write_json(out / "iterations.json", {"iterations": state.iterations, "changes": state.history})


def cmd_fit(cfg: dict) -> int:
    if not cfg["input"]:
        raise ConfigError("fit needs --input")
    out = Path(cfg["output_dir"])
    cs = load_curveset(cfg["input"], cfg["schema"], cfg["domain"])
    state = fit_flmm(cs, pipeline_options(cfg))
    if int(cfg["iterate"]) > 0:
        state = iterate(state, int(cfg["iterate"]), float(cfg["tol"]))
    write_fit(state, out)
    _write_json(out / "manifest.json", manifest("fit", cfg))
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def scenario_from(cfg: dict) -> ScenarioConfig:
    spec = cfg.get("scenario_config")
    if spec is None:
        name = cfg["scenario"]
        if name not in PRESETS:
            raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(PRESETS)}")
        spec = {"preset": name}
    try:
        scen = ScenarioConfig.from_dict(spec)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"invalid scenario configuration: {exc}") from None
    overrides = {"seed": int(cfg["seed"])}
    if cfg["replicates"] is not None:
        overrides["n_replicates"] = int(cfg["replicates"])
    return replace(scen, **overrides)


def cmd_simulate(cfg: dict) -> int:
    out = Path(cfg["output_dir"])
    scen = scenario_from(cfg)
    report = run_study(
        scen, pipeline_options(cfg), workers=int(cfg["threads"]), truncation=cfg["truncation"]
    )
    report.write(out)
    _write_json(out / "manifest.json", manifest("simulate", {**cfg, "scenario_config": scen.as_dict()}))
    return 0


# ---------------------------------------------------------------------------
# decompose
# ---------------------------------------------------------------------------


def cmd_decompose(cfg: dict) -> int:
    if not cfg["input"]:
        raise ConfigError("decompose needs --input (a directory written by 'flmm fit')")
    src = Path(cfg["input"])
    meta = json.loads((src / "covariance.json").read_text())
    mats, grid = {}, None
    for proc in ("B", "C", "E"):
        path = src / f"covariance_{proc}.csv"
        if path.exists():
            g, mat = read_surface(path)
            if grid is not None and not np.array_equal(g, grid):
                raise ConfigError(f"{path}: grid differs from the other surfaces")
            grid = g
            mats[proc] = mat
    if not mats:
        raise ConfigError(f"{src}: no covariance_*.csv surfaces found")
    es = decompose_matrices(
        mats,
        grid,
        meta["sigma2"],
        level=float(cfg["var_level"]),
        n_components=cfg["n_components"],
        domain=tuple(meta["domain"]),
    )
    out = Path(cfg["output_dir"])
    write_eigensystem(es, out)
    _write_json(out / "manifest.json", manifest("decompose", cfg))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flmm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flmm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or YAML file with settings (flags override it)")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--design", choices=["fri", "crossed"])
        p.add_argument("--mean", help='mean terms, e.g. "t + t:order"')
        p.add_argument("--k-mean", dest="k_mean", type=int)
        p.add_argument("--k-cov", dest="k_cov", type=int)
        p.add_argument("--grid-d", dest="grid_d", type=int)
        p.add_argument("--var-level", dest="var_level", type=float)
        p.add_argument("--n-components", dest="n_components", help="fixed truncation, e.g. B=2,C=1,E=3")
        p.add_argument("--predict", choices=["eblup", "famm", "both"])
        p.add_argument("--iterate", type=int)
        p.add_argument("--tol", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)

    p_fit = sub.add_parser("fit", help="fit a curve file")
    common(p_fit)
    p_fit.add_argument("--input")
    p_fit.add_argument("--schema", help="column map, e.g. curve_id=id,g1=speaker,g2=word")
    p_fit.add_argument("--domain", help="declared domain lo,hi")

    p_sim = sub.add_parser("simulate", help="run a simulation study")
    common(p_sim)
    p_sim.add_argument("--scenario", choices=sorted(PRESETS))
    p_sim.add_argument("--replicates", type=int)
    p_sim.add_argument("--truncation", choices=["fixed", "level"])

    p_dec = sub.add_parser("decompose", help="decompose surfaces written by 'fit'")
    common(p_dec)
    p_dec.add_argument("--input")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    commands = {"fit": cmd_fit, "simulate": cmd_simulate, "decompose": cmd_decompose}
    out = Path(args.output_dir or DEFAULTS["output_dir"])
    try:
        cfg = resolve(args)
        out = Path(cfg["output_dir"])
        return commands[args.command](cfg)
    except Exception as exc:
        err = {
            "command": args.command,
            "error": type(exc).__name__,
            "message": str(exc),
            "traceback": traceback.format_exc(limit=5),
        }
        try:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "error.json", err)
        except OSError:
            pass
        print(f"flmm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
