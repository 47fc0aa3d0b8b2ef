"""Experiment protocols: the attribute x view table, the activity-bin study and the quality study."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyModality, MoralLensError, NoActiveUsers, UnfillableCap, UserSetMismatch
from .evaluation import CvReport, fit_fold, fold_auroc, one_vs_all_eval, stratified_folds
from .feature_matrix import SelectionMode, SelectionPlan, SparseMatrix, apply_selection, build_matrix, fuse_early
from .forest import HyperParams, derive_seed, median_params, predict_proba
from .psychometrics import TargetSet, assemble_targets
from .schema import VIEWS, Modality

log = logging.getLogger(__name__)


# attribute table ----------------------------------------------------------------

def view_matrix(cohort, view: str) -> SparseMatrix:
    """Feature matrix of one report column: a single modality or the fused mobile view."""
    mods = VIEWS[view] if view in VIEWS else (Modality.parse(view),)
    mats = [build_matrix(cohort, m) for m in mods]
    out = mats[0]
    for m in mats[1:]:
        out = fuse_early(out, m)
    return out


@dataclass
class AttributeTable:
    targets: list[str]
    views: list[str]
    cells: dict[tuple[str, str], CvReport] = field(default_factory=dict)
    failures: dict[tuple[str, str], str] = field(default_factory=dict)

    def best_view(self, target: str) -> str | None:
        scored = [(self.cells[(target, v)].mean, -i, v) for i, v in enumerate(self.views)
                  if (target, v) in self.cells and not math.isnan(self.cells[(target, v)].mean)]
        return max(scored)[2] if scored else None

    def status(self, target: str, view: str) -> str:
        if (target, view) in self.cells:
            return "ok"
        return self.failures.get((target, view), "absent")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target", "view", "mean", "std", "best", "status"])
        for t in self.targets:
            best = self.best_view(t)
            for v in self.views:
                rep = self.cells.get((t, v))
                if rep is None:
                    w.writerow([t, v, "", "", "", self.status(t, v)])
                else:
                    w.writerow([t, v, f"{rep.mean:.6f}", f"{rep.std:.6f}", int(v == best), "ok"])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "targets": self.targets,
            "views": self.views,
            "best": {t: self.best_view(t) for t in self.targets},
            "cells": {f"{t}|{v}": rep.to_dict() for (t, v), rep in sorted(self.cells.items())},
            "failures": {f"{t}|{v}": msg for (t, v), msg in sorted(self.failures.items())},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def fold_csv(self) -> str:
        from .evaluation import CSV_HEADER
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t in self.targets:
            for v in self.views:
                if (t, v) in self.cells:
                    w.writerows(self.cells[(t, v)].csv_rows())
        return buf.getvalue()


def run_attribute_table(cohort, targets: Sequence[str], grid: Sequence[HyperParams], seed: int,
                        views: Sequence[str] = tuple(VIEWS), target_set: TargetSet | None = None,
                        outer_folds: int = 5, inner_folds: int = 5, n_jobs: int = 1) -> AttributeTable:
    """One cross-validated report per target and feature view; failures are recorded, not raised."""
    ts = target_set or assemble_targets(cohort)
    table = AttributeTable(list(targets), list(views))
    matrices: dict[str, SparseMatrix | str] = {}
    for v in views:
        try:
            matrices[v] = view_matrix(cohort, v)
        except (EmptyModality, UserSetMismatch) as err:
            matrices[v] = f"absent: {err}"
    for ti, t in enumerate(targets):
        if t not in ts.labels:
            for v in views:
                table.failures[(t, v)] = f"failed: unknown target {t!r}"
            continue
        rows, y = ts.column(t)
        y = y.astype(str)
        for vi, v in enumerate(views):
            X = matrices[v]
            if isinstance(X, str):
                table.failures[(t, v)] = X
                continue
            if t in ts.untrainable:
                table.failures[(t, v)] = "failed: degenerate label distribution"
                continue
            cell_seed = derive_seed(seed, ti, vi)
            try:
                table.cells[(t, v)] = one_vs_all_eval(
                    X.take_rows(rows), y, grid, seed=cell_seed, outer_folds=outer_folds,
                    inner_folds=inner_folds, target=t, modality=v, n_jobs=n_jobs)
            except MoralLensError as err:
                table.failures[(t, v)] = f"failed: {type(err).__name__}: {err}"
            log.info("table cell %s/%s done", t, v)
    return table


# curves -----------------------------------------------------------------------

@dataclass
class CurvePoint:
    series: str
    x: float
    mean: float
    std: float
    n: int
    values: list[float]


@dataclass
class CurveReport:
    """Plot-ready curves: one point per (series, plan-point)."""

    kind: str
    points: list[CurvePoint] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    def series(self) -> list[str]:
        out = []
        for p in self.points:
            if p.series not in out:
                out.append(p.series)
        return out

    def curve(self, series: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pts = [p for p in self.points if p.series == series]
        return (np.array([p.x for p in pts]), np.array([p.mean for p in pts]),
                np.array([p.std for p in pts]))

    def to_json(self) -> str:
        doc = {
            "kind": self.kind,
            "meta": self.meta,
            "tables": self.tables,
            "points": [{**asdict(p), "mean": _num(p.mean), "std": _num(p.std),
                        "values": [_num(v) for v in p.values]} for p in self.points],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["series", "x", "mean", "std", "n"])
        for p in self.points:
            w.writerow([p.series, _g(p.x), _f(p.mean), _f(p.std), p.n])
        return buf.getvalue()

    def curve_files(self) -> dict[str, str]:
        """Three-column text per series: x, mean, std (NaN where undefined)."""
        out = {}
        for s in self.series():
            x, m, sd = self.curve(s)
            lines = ["# x mean std"] + [f"{_g(a)} {_f(b)} {_f(c)}" for a, b, c in zip(x, m, sd)]
            out[f"{self.kind}_{_slug(s)}.dat"] = "\n".join(lines) + "\n"
        return out


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def _f(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def _g(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:.6g}"


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in s)


def _mean_std(vals: Sequence[float]) -> tuple[float, float]:
    v = np.array(vals, dtype=float)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def _split(y: np.ndarray, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test split of row indices."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(train_fraction * idx.size))
        train.append(idx[:k])
        test.append(idx[k:])
    train, test = np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
    if np.intersect1d(train, test).size:
        raise AssertionError("train and test portions overlap")
    return train, test


def _fold_models(X, y, rows, params, n_folds, seed, select=None):
    """Train one model per cross-validation fold of ``rows``.

    ``select(fold, train_rows)`` may return a replacement matrix holding just
    the training rows (per-user feature selection).
    """
    folds = stratified_folds(y[rows], n_folds, derive_seed(seed, 0))
    models = []
    for f, held in enumerate(folds):
        train = rows[np.setdiff1d(np.arange(rows.size), held)]
        p = HyperParams(**{**asdict(params), "seed": derive_seed(seed, 1, f)})
        if select is None:
            models.append(fit_fold(X, y, train, train[:0], p))
        else:
            local = np.arange(train.size)
            models.append(fit_fold(select(f, train), y[train], local, local[:0], p))
    return models


def _score_rows(models, X, test, classes) -> list[np.ndarray]:
    """Class-score matrices of each fold model on the ``test`` rows."""
    out = []
    Xt_full = X.take_rows(test)
    for model, _ in models:
        cols = model.vocabulary
        Xt = Xt_full if cols == Xt_full.vocab.keys else Xt_full.take_columns(
            [Xt_full.vocab.index[k] for k in cols])
        proba = predict_proba(model, Xt)
        full = np.zeros((test.size, len(classes)))
        for k, c in enumerate(model.classes):
            full[:, classes.index(c)] = proba[:, k]
        out.append(full)
    return out


# activity-bin study --------------------------------------------------------------

@dataclass(frozen=True)
class ActivityBinPlan:
    n_train_bins: int = 20
    n_test_bins: int = 100
    train_fraction: float = 0.8
    first_edge: int = 19
    caps: dict | None = None
    n_folds: int = 5
    cumulative: bool = True
    train_edges: tuple[float, ...] | None = None
    params: HyperParams = field(default_factory=median_params)

    def __post_init__(self):
        if self.n_train_bins < 1 or self.n_test_bins < 1:
            raise ValueError("bin counts must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.caps is not None and any(c < 1 for c in self.caps.values()):
            raise ValueError("caps must be >= 1")
        if self.train_edges is not None and np.any(np.diff(self.train_edges) <= 0):
            raise ValueError("training bin edges must be strictly increasing")


def train_bin_edges(activity: np.ndarray, plan: ActivityBinPlan) -> np.ndarray:
    """Upper edges of the training bins: the first at ``first_edge``, then geometric to the maximum."""
    if plan.train_edges is not None:
        return np.asarray(plan.train_edges, dtype=float)
    hi = float(activity.max())
    first = float(plan.first_edge)
    if hi <= first:
        # everything fits in the first bin; later edges are placeholders
        return first + np.arange(plan.n_train_bins, dtype=float)
    if plan.n_train_bins == 1:
        return np.array([hi])
    edges = np.geomspace(first, hi, plan.n_train_bins)
    edges[-1] = hi
    return edges


def held_out_bin_edges(activity: np.ndarray, n_bins: int) -> np.ndarray:
    """Upper edges of ``n_bins`` equal-width bins over [1, max activity]."""
    hi = max(float(activity.max()), 1.0)
    return np.linspace(1.0, hi, n_bins + 1)[1:]


def run_activity_bin_study(matrix: SparseMatrix, labels, plan: ActivityBinPlan, seed: int,
                           activity: np.ndarray | None = None) -> CurveReport:
    """Train on activity-limited subsets of equal size and composition, test on activity-limited subsets.

    Training subset n holds training users with activity up to the n-th edge
    (or within bin n when ``plan.cumulative`` is false), subsampled to the
    per-class caps. Each subset trains ``plan.n_folds`` fold models; every
    model is scored on each test subset m (test users with activity up to
    the m-th test edge). One series per training bin.
    """
    y = np.asarray(labels).astype(str)
    act = matrix.activity() if activity is None else np.asarray(activity)
    classes = tuple(np.unique(y).tolist())
    if len(classes) != 2:
        raise ValueError("the activity-bin study needs a binary target")
    train, test = _split(y, plan.train_fraction, derive_seed(seed, 0))

    edges = train_bin_edges(act[train], plan)
    lower = np.r_[-np.inf, edges[:-1]]
    populated, members = [], []
    for n, (lo, hi) in enumerate(zip(lower, edges)):
        if math.isnan(hi):
            own = np.zeros(train.size, dtype=bool)
        else:
            own = (act[train] > lo) & (act[train] <= hi)
        pool = (act[train] <= hi) if plan.cumulative and not math.isnan(hi) else own
        populated.append(bool(own.any()))
        members.append(train[pool])

    fillable = [n for n in range(len(edges)) if populated[n]]
    if plan.caps is not None:
        caps = {str(k): int(v) for k, v in plan.caps.items()}
    else:
        caps = {c: min(int(np.sum(y[members[n]] == c)) for n in fillable) for c in classes} if fillable else {}
    for n in fillable:
        for c in classes:
            have = int(np.sum(y[members[n]] == c))
            if have < caps.get(c, 0):
                raise UnfillableCap(n + 1, f"(class {c}: {have} < {caps[c]})")
    if not fillable or min(caps.values()) < 2:
        raise UnfillableCap(fillable[0] + 1 if fillable else 1, f"(caps {caps} too small to train)")

    t_edges = held_out_bin_edges(act[test], plan.n_test_bins)
    prevalence = {c: float(np.mean(y[test] == c)) for c in classes}
    report = CurveReport("activity")
    report.meta = {
        "seed": seed, "caps": caps, "train_edges": [float(e) for e in edges],
        "test_edges": [float(e) for e in t_edges], "populated": populated,
        "cumulative": plan.cumulative, "params": asdict(plan.params),
        "n_train": int(train.size), "n_test": int(test.size),
    }
    report.tables["train"] = []
    report.tables["test"] = [
        {"bin": m + 1, "edge": float(e), **{c: int(np.sum(y[test][act[test] <= e] == c)) for c in classes}}
        for m, e in enumerate(t_edges)
    ]

    sizes = set()
    for n in range(len(edges)):
        if not populated[n]:
            report.tables["train"].append({"bin": n + 1, "edge": _num(float(edges[n])), "status": "empty"})
            continue
        rng = np.random.default_rng(derive_seed(seed, 1, n))
        picked = []
        for c in classes:
            pool = members[n][y[members[n]] == c]
            picked.append(np.sort(rng.choice(pool, size=caps[c], replace=False)))
        rows = np.sort(np.concatenate(picked))
        comp = tuple(int(np.sum(y[rows] == c)) for c in classes)
        sizes.add((rows.size, comp))
        report.tables["train"].append({"bin": n + 1, "edge": float(edges[n]), "status": "trained",
                                       **{c: k for c, k in zip(classes, comp)}})
        models = _fold_models(matrix, y, rows, plan.params, plan.n_folds, derive_seed(seed, 2, n))
        scores = _score_rows(models, matrix, test, classes)
        for m, e in enumerate(t_edges):
            sub = act[test] <= e
            vals = [fold_auroc(s[sub], y[test][sub], classes, prevalence)[0] if sub.any() else float("nan")
                    for s in scores]
            mean, std = _mean_std(vals)
            report.points.append(CurvePoint(f"train{n + 1:02d}", m + 1, mean, std, int(sub.sum()), vals))
    if len(sizes) > 1:
        raise AssertionError(f"training subsets differ in size or composition: {sizes}")
    return report


def band_std(report: CurveReport, series: str, lo: int, hi: int) -> float:
    """Std of a curve's mean values over plan-points lo..hi inclusive (NaNs ignored)."""
    x, m, _ = report.curve(series)
    sel = (x >= lo) & (x <= hi) & ~np.isnan(m)
    return float(np.std(m[sel]))


def band_mean(report: CurveReport, series: str, lo: int, hi: int) -> float:
    x, m, _ = report.curve(series)
    sel = (x >= lo) & (x <= hi) & ~np.isnan(m)
    return float(np.mean(m[sel]))


# quality study ------------------------------------------------------------------

@dataclass(frozen=True)
class QualityStudyPlan:
    active_threshold: int = 200
    levels: tuple[int, ...] = tuple(int(round(v)) for v in np.linspace(1, 200, 20))
    modes: tuple[str, ...] = (SelectionMode.TOP_K.value, SelectionMode.RANDOM_K.value)
    train_fraction: float = 0.8
    n_folds: int = 5
    params: HyperParams = field(default_factory=median_params)

    def __post_init__(self):
        if self.active_threshold < 1:
            raise ValueError("active_threshold must be >= 1")
        if list(self.levels) != sorted(self.levels) or not self.levels or self.levels[0] < 1:
            raise ValueError("levels must be ascending positive integers")
        for m in self.modes:
            SelectionMode(m)


def run_quality_study(matrix: SparseMatrix, targets: dict[str, np.ndarray], plan: QualityStudyPlan,
                      seed: int, activity: np.ndarray | None = None) -> CurveReport:
    """Curves of held-out AUROC against the number of items kept per training user.

    ``targets`` maps a target name to labels aligned with the matrix rows
    (None marks rows without a label). Only active users are used; selection
    is applied to training rows, the held-out set keeps every item.
    """
    act = matrix.activity() if activity is None else np.asarray(activity)
    active = np.flatnonzero(act >= plan.active_threshold)
    if active.size == 0:
        raise NoActiveUsers(f"no user reaches {plan.active_threshold} unique items")
    report = CurveReport("quality")
    report.meta = {"seed": seed, "active_users": int(active.size), "levels": list(plan.levels),
                   "modes": list(plan.modes), "params": asdict(plan.params),
                   "active_threshold": plan.active_threshold}
    for ti, (name, labels) in enumerate(targets.items()):
        lab = np.asarray(labels, dtype=object)
        rows = active[np.array([lab[i] is not None for i in active], dtype=bool)]
        y_all = np.array(["" if v is None else str(v) for v in lab])
        classes = tuple(np.unique(y_all[rows]).tolist())
        if len(classes) < 2:
            report.meta.setdefault("skipped", {})[name] = "single class among active users"
            continue
        sub_train, sub_test = _split(y_all[rows], plan.train_fraction, derive_seed(seed, ti, 0))
        train, test = rows[sub_train], rows[sub_test]
        prevalence = {c: float(np.mean(y_all[test] == c)) for c in classes}
        report.meta.setdefault("split", {})[name] = {"train": int(train.size), "test": int(test.size)}
        for mi, mode in enumerate(plan.modes):
            for li, k in enumerate(plan.levels):
                def select(f, tr, k=k, mode=mode, li=li, mi=mi):
                    sp = SelectionPlan(mode, k, derive_seed(seed, ti, 1, mi, li, f)
                                       if mode == SelectionMode.RANDOM_K.value else None)
                    return apply_selection(matrix.take_rows(tr), sp)
                models = _fold_models(matrix, y_all, train, plan.params, plan.n_folds,
                                      derive_seed(seed, ti, 2, li), select=select)
                scores = _score_rows(models, matrix, test, classes)
                vals = [fold_auroc(s, y_all[test], classes, prevalence)[0] for s in scores]
                mean, std = _mean_std(vals)
                report.points.append(CurvePoint(f"{name}:{mode}", k, mean, std, int(test.size), vals))
    return report


def isotonic_violation(y: Sequence[float]) -> float:
    """Largest drop of a curve below its running maximum."""
    y = np.asarray(y, dtype=float)
    y = y[~np.isnan(y)]
    if y.size == 0:
        return 0.0
    return float(np.max(np.maximum.accumulate(y) - y))


def write_curves(report: CurveReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in report.curve_files().items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths
