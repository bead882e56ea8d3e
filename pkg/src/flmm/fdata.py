"""Irregularly sampled curves with a two-way grouping structure.

A :class:`CurveSet` stores all observed points in flat arrays (one entry per
point) plus per-curve grouping indices and covariates.  Curves are ordered
by ``(g1, g2, rep)`` so that design matrices built downstream have the
speaker-major block layout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

REQUIRED_COLUMNS = ("curve_id", "g1", "t", "y")
OPTIONAL_COLUMNS = ("g2", "rep")


class ValidationError(ValueError):
    """Input data violates the curve-set contract."""


class SchemaError(ValidationError):
    """A required column is missing from an input file."""


@dataclass(frozen=True)
class GroupingDesign:
    """Random-process layout implied by the grouping indices.

    ``kind`` is ``"crossed"`` (speaker and word intercepts plus a curve-level
    process) or ``"fri"`` (speaker intercept plus curve-level process).
    ``levels`` maps each process name to its number of levels.
    """

    kind: str
    levels: dict

    @property
    def processes(self) -> tuple[str, ...]:
        return ("B", "C", "E") if self.kind == "crossed" else ("B", "E")


@dataclass(frozen=True)
class CurveSet:
    """Observed points of ``n`` curves.

    Parameters
    ----------
    curve : ndarray of int, shape (n_points,)
        Curve index of every point, non-decreasing.
    t, y : ndarray, shape (n_points,)
        Observation times and responses.
    g1 : ndarray of int, shape (n_curves,)
        First grouping index (speaker) of each curve.
    g2 : ndarray of int or None
        Second grouping index (word); ``None`` for one-factor designs.
    rep : ndarray of int, shape (n_curves,)
        Repetition index within the ``(g1, g2)`` cell.
    covariates : ndarray, shape (n_curves, P)
        Scalar covariates per curve.
    covariate_names : tuple of str
    domain : tuple of float
    labels : dict
        Original identifiers keyed by ``"curve"``, ``"g1"``, ``"g2"``, ``"rep"``.
    """

    curve: np.ndarray
    t: np.ndarray
    y: np.ndarray
    g1: np.ndarray
    g2: np.ndarray | None
    rep: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...] = ()
    domain: tuple[float, float] = (0.0, 1.0)
    labels: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        curve = np.array(self.curve, dtype=np.int64)
        t = np.array(self.t, dtype=float)
        y = np.array(self.y, dtype=float)
        g1 = np.array(self.g1, dtype=np.int64)
        rep = np.array(self.rep, dtype=np.int64)
        n = g1.size
        cov = np.array(self.covariates, dtype=float).reshape(n, -1)
        g2 = None if self.g2 is None else np.array(self.g2, dtype=np.int64)
        lo, hi = map(float, self.domain)
        if not (curve.shape == t.shape == y.shape) or curve.ndim != 1:
            raise ValidationError("curve, t and y must be 1-d arrays of equal length")
        if rep.shape != (n,) or (g2 is not None and g2.shape != (n,)):
            raise ValidationError("per-curve arrays g1, g2, rep must have equal length")
        if len(self.covariate_names) != cov.shape[1]:
            raise ValidationError(
                f"{cov.shape[1]} covariate columns but {len(self.covariate_names)} names"
            )
        if n == 0:
            raise ValidationError("no curves")
        if curve.size and (curve.min() < 0 or curve.max() >= n or np.any(np.diff(curve) < 0)):
            raise ValidationError("curve indices must be sorted and lie in [0, n_curves)")
        counts = np.bincount(curve, minlength=n)
        if np.any(counts == 0):
            raise ValidationError(f"curve {int(np.argmin(counts))} has no observations")
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(y)):
            raise ValidationError("non-finite t or y")
        if not np.all(np.isfinite(cov)):
            raise ValidationError("non-finite covariate value")
        if not hi > lo:
            raise ValidationError(f"empty domain {self.domain}")
        if t.min() < lo or t.max() > hi:
            raise ValidationError(f"observation times outside domain [{lo}, {hi}]")
        for arr in (curve, t, y, g1, rep, cov) + (() if g2 is None else (g2,)):
            arr.setflags(write=False)
        object.__setattr__(self, "curve", curve)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "g1", g1)
        object.__setattr__(self, "g2", g2)
        object.__setattr__(self, "rep", rep)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "domain", (lo, hi))

    # sizes -----------------------------------------------------------------
    @property
    def n_curves(self) -> int:
        return int(self.g1.size)

    @property
    def n_points(self) -> int:
        return int(self.t.size)

    @property
    def n_g1(self) -> int:
        return int(self.g1.max()) + 1

    @property
    def n_g2(self) -> int:
        return 0 if self.g2 is None else int(self.g2.max()) + 1

    @property
    def points_per_curve(self) -> np.ndarray:
        return np.bincount(self.curve, minlength=self.n_curves)

    @property
    def curve_starts(self) -> np.ndarray:
        return np.r_[0, np.cumsum(self.points_per_curve)]

    @property
    def point_g1(self) -> np.ndarray:
        return self.g1[self.curve]

    @property
    def point_g2(self) -> np.ndarray | None:
        return None if self.g2 is None else self.g2[self.curve]

    @property
    def point_covariates(self) -> np.ndarray:
        return self.covariates[self.curve]

    def design(self, kind: str | None = None) -> GroupingDesign:
        """Grouping design; ``kind`` defaults to crossed when ``g2`` is present."""
        if kind is None:
            kind = "fri" if self.g2 is None else "crossed"
        if kind not in ("fri", "crossed"):
            raise ValueError(f"unknown design kind {kind!r}")
        if kind == "crossed":
            if self.g2 is None:
                raise ValidationError("crossed design requires a g2 index on every curve")
            return GroupingDesign("crossed", {"B": self.n_g1, "C": self.n_g2, "E": self.n_curves})
        return GroupingDesign("fri", {"B": self.n_g1, "E": self.n_curves})

    def with_y(self, y) -> "CurveSet":
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise ValidationError(f"response has shape {y.shape}, expected {self.y.shape}")
        return replace(self, y=y)

    def covariate_column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}; available: {list(self.covariate_names)}") from None


def from_arrays(
    curve,
    t,
    y,
    g1,
    g2=None,
    rep=None,
    covariates=None,
    covariate_names=(),
    domain=None,
) -> CurveSet:
    """Build a :class:`CurveSet` from point-level arrays with arbitrary labels.

    ``curve``, ``g1``, ``g2`` and ``rep`` are given per point and may hold any
    hashable labels; ``covariates`` is a ``(n_points, P)`` array that must be
    constant within each curve.  Labels are mapped to dense 0-based indices
    in order of first appearance and curves are sorted by ``(g1, g2, rep)``.
    Points keep their input order within a curve.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    npts = t.size
    cov = np.zeros((npts, 0)) if covariates is None else np.asarray(covariates, dtype=float).reshape(npts, -1)
    rows = {
        "curve": list(curve),
        "g1": list(g1),
        "g2": None if g2 is None else list(g2),
        "rep": None if rep is None else list(rep),
    }
    return _assemble(rows, t, y, cov, tuple(covariate_names), domain, row_numbers=None)


def _first_appearance(values) -> tuple[np.ndarray, list]:
    index: dict = {}
    out = np.empty(len(values), dtype=np.int64)
    for k, v in enumerate(values):
        out[k] = index.setdefault(v, len(index))
    return out, list(index)


def _assemble(rows, t, y, cov, names, domain, row_numbers):
    npts = t.size
    if npts == 0:
        raise ValidationError("no observations")

    def where(k):
        return f"row {row_numbers[k]}" if row_numbers is not None else f"point {k}"

    bad = np.flatnonzero(~np.isfinite(t) | ~np.isfinite(y))
    if bad.size:
        raise ValidationError(f"non-finite t or y at {where(bad[0])}")
    if domain is None:
        domain = (float(t.min()), float(t.max()))
        if domain[1] <= domain[0]:
            raise ValidationError("cannot infer a domain from a single distinct time; declare it")
    lo, hi = map(float, domain)
    out = np.flatnonzero((t < lo) | (t > hi))
    if out.size:
        raise ValidationError(f"t={t[out[0]]!r} outside domain [{lo}, {hi}] at {where(out[0])}")

    cid, curve_labels = _first_appearance(rows["curve"])
    n = len(curve_labels)
    first = np.full(n, -1)
    for k in range(npts):
        if first[cid[k]] < 0:
            first[cid[k]] = k

    def per_curve(key):
        vals = rows[key]
        if vals is None:
            return None
        for k in range(npts):
            if vals[k] != vals[first[cid[k]]]:
                raise ValidationError(
                    f"curve {curve_labels[cid[k]]!r} has conflicting {key} values at {where(k)}"
                )
        return [vals[first[c]] for c in range(n)]

    g1_lab = per_curve("g1")
    g2_lab = per_curve("g2")
    rep_lab = per_curve("rep")
    bad_cov = np.flatnonzero(np.any(cov != cov[first[cid]], axis=1)) if cov.shape[1] else []
    if len(bad_cov):
        raise ValidationError(f"covariates vary within a curve at {where(bad_cov[0])}")
    bad_cov = np.flatnonzero(~np.all(np.isfinite(cov), axis=1)) if cov.shape[1] else []
    if len(bad_cov):
        raise ValidationError(f"non-finite covariate at {where(bad_cov[0])}")

    g1_idx, g1_levels = _first_appearance(g1_lab)
    g2_idx, g2_levels = (None, None) if g2_lab is None else _first_appearance(g2_lab)
    cell = list(zip(g1_idx, g2_idx if g2_idx is not None else np.zeros(n, dtype=np.int64)))
    # repetition index: order of first appearance within the (g1, g2) cell
    rep_idx = np.empty(n, dtype=np.int64)
    seen: dict = {}
    seen_rep: set = set()
    for c in range(n):
        if rep_lab is not None:
            key = (cell[c], rep_lab[c])
            if key in seen_rep:
                raise ValidationError(
                    f"curves share the grouping triple (g1, g2, rep) = "
                    f"({g1_lab[c]!r}, {None if g2_lab is None else g2_lab[c]!r}, {rep_lab[c]!r})"
                )
            seen_rep.add(key)
        rep_idx[c] = seen.get(cell[c], 0)
        seen[cell[c]] = rep_idx[c] + 1

    order = np.lexsort((rep_idx, g2_idx if g2_idx is not None else np.zeros(n), g1_idx))
    new_of_old = np.empty(n, dtype=np.int64)
    new_of_old[order] = np.arange(n)
    pcurve = new_of_old[cid]
    perm = np.argsort(pcurve, kind="stable")
    labels = {
        "curve": [curve_labels[c] for c in order],
        "g1": g1_levels,
        "g2": g2_levels,
        "rep": None if rep_lab is None else [rep_lab[c] for c in order],
    }
    return CurveSet(
        curve=pcurve[perm],
        t=t[perm],
        y=y[perm],
        g1=g1_idx[order],
        g2=None if g2_idx is None else g2_idx[order],
        rep=rep_idx[order],
        covariates=cov[first[order]],
        covariate_names=names,
        domain=(lo, hi),
        labels=labels,
    )


def load_curveset(
    path,
    schema: Mapping[str, str] | None = None,
    domain: tuple[float, float] | None = None,
    covariates: list[str] | None = None,
) -> CurveSet:
    """Read a CSV file of point-level observations.

    Parameters
    ----------
    path : path-like
        Comma-separated file with a header row.
    schema : mapping, optional
        Maps the canonical names ``curve_id, g1, g2, rep, t, y`` to the
        column names used in the file.
    domain : tuple of float, optional
        Declared domain.  Defaults to the observed range of ``t``.
    covariates : list of str, optional
        Covariate columns.  Defaults to every column whose name starts with
        ``x_``; the prefix is stripped from the covariate name.

    Raises
    ------
    SchemaError
        A required column is missing.
    ValidationError
        Non-finite values, times outside the domain or inconsistent curves.
        The message names the offending file row (header = row 1).
    """
    schema = dict(schema or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        body = [row for row in reader if row]
    col = {}
    for name in REQUIRED_COLUMNS + OPTIONAL_COLUMNS:
        src = schema.get(name, name)
        if src in header:
            col[name] = header.index(src)
        elif name in REQUIRED_COLUMNS:
            raise SchemaError(f"{path}: missing required column {src!r} (for {name})")
    if covariates is None:
        cov_cols = [(h[2:], i) for i, h in enumerate(header) if h.startswith("x_")]
    else:
        missing = [c for c in covariates if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing covariate columns {missing}")
        cov_cols = [(c, header.index(c)) for c in covariates]

    npts = len(body)
    t = np.empty(npts)
    y = np.empty(npts)
    cov = np.empty((npts, len(cov_cols)))
    for k, row in enumerate(body):
        if len(row) != len(header):
            raise ValidationError(f"row {k + 2}: expected {len(header)} fields, got {len(row)}")
        try:
            t[k] = float(row[col["t"]])
            y[k] = float(row[col["y"]])
            for j, (_, i) in enumerate(cov_cols):
                cov[k, j] = float(row[i])
        except ValueError as exc:
            raise ValidationError(f"row {k + 2}: {exc}") from None
        if not (math.isfinite(t[k]) and math.isfinite(y[k])):
            raise ValidationError(f"row {k + 2}: non-finite t or y")
    rows = {
        "curve": [r[col["curve_id"]] for r in body],
        "g1": [r[col["g1"]] for r in body],
        "g2": [r[col["g2"]] for r in body] if "g2" in col else None,
        "rep": [r[col["rep"]] for r in body] if "rep" in col else None,
    }
    return _assemble(
        rows, t, y, cov, tuple(n for n, _ in cov_cols), domain, row_numbers=np.arange(2, npts + 2)
    )


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_curveset(cs: CurveSet, path) -> None:
    """Write ``cs`` as CSV; :func:`load_curveset` reads it back exactly."""
    labels = cs.labels or {}
    curve_lab = labels.get("curve") or list(range(cs.n_curves))
    g1_lab = labels.get("g1") or list(range(cs.n_g1))
    g2_lab = labels.get("g2") or (None if cs.g2 is None else list(range(cs.n_g2)))
    rep_lab = labels.get("rep")
    header = ["curve_id", "g1"] + (["g2"] if cs.g2 is not None else []) + ["rep", "t", "y"]
    header += ["x_" + n for n in cs.covariate_names]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(cs.n_points):
            c = cs.curve[k]
            row = [curve_lab[c], g1_lab[cs.g1[c]]]
            if cs.g2 is not None:
                row.append(g2_lab[cs.g2[c]])
            row.append(rep_lab[c] if rep_lab is not None else int(cs.rep[c]))
            row += [_fmt(cs.t[k]), _fmt(cs.y[k])]
            row += [_fmt(v) for v in cs.covariates[c]]
            w.writerow(row)


def center_responses(cs: CurveSet, mean) -> CurveSet:
    """Subtract a fitted mean ``mean.predict_points(cs)`` from the responses."""
    return cs.with_y(cs.y - mean.predict_points(cs))
