"""AUROC, prevalence-weighted AUROC and the nested cross-validation harness."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (InsufficientSamples, NoEvaluableClass, SingleClassEvaluation,
                     SingleClassTraining, StratificationImpossible)
from .forest import HyperParams, derive_seed, predict_proba, train_forest


@dataclass(frozen=True)
class RocResult:
    auroc: float
    n_pos: int
    n_neg: int
    curve: tuple[tuple[float, float], ...]
    u2: int
    """Twice the Mann-Whitney U of the positive class (an exact integer)."""


def _binary_labels(labels, positive=None) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.dtype == bool:
        return lab
    if positive is not None:
        return lab == positive
    uniq = np.unique(lab)
    if set(uniq.tolist()) <= {0, 1}:
        return lab.astype(bool)
    if uniq.size == 2:
        return lab == uniq[1]
    raise ValueError(f"binary labels expected, got {uniq.size} distinct values")


def auroc(scores, labels, positive=None, with_curve: bool = True) -> RocResult:
    """Rank-based AUROC: P(score_pos > score_neg) + 0.5 P(tie).

    ``labels`` may be booleans, 0/1, or any two values (the larger is
    positive unless ``positive`` is given).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary_labels(labels, positive).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClassEvaluation(f"AUROC undefined with {n_pos} positive and {n_neg} negative rows")
    # doubled average ranks are integers, so the statistic is exact
    r2 = np.rint(2.0 * rankdata(s, method="average")).astype(np.int64)
    u2 = int(r2[y].sum()) - n_pos * (n_pos + 1)
    value = u2 / (2 * n_pos * n_neg)
    curve = _roc_curve(s, y, n_pos, n_neg) if with_curve else ()
    return RocResult(value, n_pos, n_neg, curve, u2)


def _roc_curve(s: np.ndarray, y: np.ndarray, n_pos: int, n_neg: int):
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    pts = [(0.0, 0.0)] + [(float(f) / n_neg, float(t) / n_pos) for f, t in zip(fp, tp)]
    return tuple(pts)


def curve_area(curve: Sequence[tuple[float, float]]) -> float:
    x = np.array([p[0] for p in curve])
    y = np.array([p[1] for p in curve])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def weighted_auroc(per_class: Sequence[tuple]) -> float:
    """Prevalence-weighted mean of per-class AUROCs.

    Entries are ``(class, prevalence, auroc)``; an auroc of None or NaN marks
    the class unevaluable and the remaining prevalences are renormalized.
    """
    usable = [(p, a) for _, p, a in per_class
              if a is not None and not (isinstance(a, float) and math.isnan(a))]
    if any(p < 0 for p, _ in usable):
        raise ValueError("prevalences must be non-negative")
    total = sum(p for p, _ in usable)
    if not usable or total <= 0:
        raise NoEvaluableClass("no class with a defined AUROC and positive prevalence")
    if all(a == usable[0][1] for _, a in usable):
        return float(usable[0][1])
    return float(sum(p * a for p, a in usable) / total)


def fold_auroc(scores: np.ndarray, y: np.ndarray, classes: Sequence, prevalence: dict) -> tuple[float, list]:
    """Weighted AUROC of a score matrix (columns follow ``classes``) and the unevaluable classes."""
    if len(classes) == 2:
        try:
            return auroc(scores[:, 1], y == classes[1], with_curve=False).auroc, []
        except SingleClassEvaluation:
            return float("nan"), list(classes)
    rows, missing = [], []
    for k, c in enumerate(classes):
        try:
            rows.append((c, prevalence[c], auroc(scores[:, k], y == c, with_curve=False).auroc))
        except SingleClassEvaluation:
            missing.append(c)
    if not rows:
        return float("nan"), missing
    return weighted_auroc(rows), missing


def stratified_folds(y, n_folds: int, seed: int) -> list[np.ndarray]:
    """Test-index arrays of ``n_folds`` stratified folds (each sorted)."""
    y = np.asarray(y)
    if y.size < n_folds:
        raise InsufficientSamples(f"{y.size} rows cannot form {n_folds} folds")
    rng = np.random.default_rng(seed)
    assign = np.empty(y.size, dtype=np.int64)
    offset = 0
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(idx.size)]
        assign[idx] = (offset + np.arange(idx.size)) % n_folds
        offset = (offset + idx.size) % n_folds
    return [np.flatnonzero(assign == f) for f in range(n_folds)]


def check_partition(folds: Sequence[np.ndarray], n: int) -> None:
    seen = np.zeros(n, dtype=np.int64)
    for f in folds:
        np.add.at(seen, f, 1)
    if not np.all(seen == 1):
        raise AssertionError("outer test folds do not partition the rows")


@dataclass
class FoldResult:
    fold: int
    auroc: float
    params: HyperParams
    inner_scores: list[float]
    n_train: int
    n_test: int
    unevaluable: list = field(default_factory=list)
    tie: bool = False


@dataclass
class CvReport:
    target: str
    modality: str
    folds: list[FoldResult]
    classes: tuple
    prevalence: dict
    flags: list[str] = field(default_factory=list)
    per_class: dict = field(default_factory=dict)

    @property
    def fold_aurocs(self) -> np.ndarray:
        return np.array([f.auroc for f in self.folds])

    @property
    def mean(self) -> float:
        v = self.fold_aurocs
        v = v[~np.isnan(v)]
        return float(v.mean()) if v.size else float("nan")

    @property
    def std(self) -> float:
        v = self.fold_aurocs
        v = v[~np.isnan(v)]
        return float(v.std()) if v.size else float("nan")

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "modality": self.modality,
            "classes": [str(c) for c in self.classes],
            "prevalence": {str(k): v for k, v in self.prevalence.items()},
            "mean": _num(self.mean),
            "std": _num(self.std),
            "flags": list(self.flags),
            "folds": [{
                "fold": f.fold, "auroc": _num(f.auroc), "params": asdict(f.params),
                "inner_scores": [_num(s) for s in f.inner_scores],
                "n_train": f.n_train, "n_test": f.n_test,
                "unevaluable": [str(c) for c in f.unevaluable], "tie": f.tie,
            } for f in self.folds],
            "per_class": {str(k): [_num(x) for x in v] for k, v in self.per_class.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_rows(self) -> list[list]:
        rows = [[self.target, self.modality, f.fold, _fmt(f.auroc), f.params.label()] for f in self.folds]
        rows.append([self.target, self.modality, "mean", _fmt(self.mean), ""])
        rows.append([self.target, self.modality, "std", _fmt(self.std), ""])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.csv_rows())
        return buf.getvalue()


CSV_HEADER = ["target", "modality", "fold", "auroc", "chosen_params"]


def _num(x: float):
    return None if x is None or math.isnan(x) else float(x)


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.6f}"


def _prevalence(y, classes) -> dict:
    return {c: float(np.mean(y == c)) for c in classes}


def _rows(X, idx):
    return X.take_rows(idx) if hasattr(X, "take_rows") else X[idx]


def _fit_score(X, y, train, test, params, classes, prevalence, n_jobs, fold_vocabulary=True):
    """Train on ``train`` rows, score ``test`` rows; returns (weighted AUROC, unevaluable classes)."""
    model, Xt = fit_fold(X, y, train, test, params, n_jobs, fold_vocabulary)
    return score_model(model, Xt, y[test], classes, prevalence)


def fit_fold(X, y, train, test, params, n_jobs=1, fold_vocabulary=True):
    """Fit on the training rows over the columns they actually use.

    Returns the model and the test rows restricted to the same columns. With
    ``fold_vocabulary=False`` every column of ``X`` is kept.
    """
    Xtr, Xt = _rows(X, train), _rows(X, test)
    if fold_vocabulary and hasattr(Xtr, "take_columns"):
        used = np.unique(Xtr.data.indices)
        if used.size < Xtr.shape[1]:
            Xtr, Xt = Xtr.take_columns(used), Xt.take_columns(used)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SingleClassTraining)
        model = train_forest(Xtr, np.asarray(y)[train], params, n_jobs=n_jobs)
    return model, Xt


def score_model(model, Xt, yt, classes, prevalence) -> tuple[float, list]:
    proba = predict_proba(model, Xt)
    full = np.zeros((proba.shape[0], len(classes)))
    for k, c in enumerate(model.classes):
        full[:, classes.index(c)] = proba[:, k]
    return fold_auroc(full, np.asarray(yt), classes, prevalence)


def _reseed(params: HyperParams, seed: int) -> HyperParams:
    return HyperParams(**{**asdict(params), "seed": seed})


def nested_cv(X, y, grid: Sequence[HyperParams], outer_folds: int = 5, inner_folds: int = 5,
              seed: int = 0, target: str = "", modality: str = "", n_jobs: int = 1,
              strata=None, fold_vocabulary: bool = True) -> CvReport:
    """Outer k-fold evaluation with an inner k-fold grid search on each training portion.

    The grid winner is the highest inner mean weighted AUROC; ties go to the
    earlier grid entry. ``strata`` overrides the labels used for stratified
    folding (so per-class runs of a multi-class target share folds). Each fit
    sees only the columns used by its training rows unless
    ``fold_vocabulary`` is false.
    """
    y = np.asarray(y)
    strata = y if strata is None else np.asarray(strata)
    n = y.size
    if not grid:
        raise ValueError("empty hyper-parameter grid")
    if n < outer_folds * inner_folds:
        raise InsufficientSamples(f"{n} rows, need at least {outer_folds * inner_folds}")
    classes = tuple(np.unique(y).tolist())
    if len(classes) < 2:
        raise StratificationImpossible("a single class is present")
    counts = {c: int(np.sum(y == c)) for c in classes}
    if min(counts.values()) < 2:
        raise StratificationImpossible(f"class sizes {counts} leave some training fold without a class")
    prevalence = _prevalence(y, classes)
    outer = stratified_folds(strata, outer_folds, derive_seed(seed, 0))
    check_partition(outer, n)

    results, flags = [], []
    for f, test in enumerate(outer):
        train = np.setdiff1d(np.arange(n), test)
        inner = stratified_folds(strata[train], inner_folds, derive_seed(seed, 1, f))
        inner_scores = []
        # a single configuration wins regardless of its inner score
        for g, params in enumerate(grid if len(grid) > 1 else ()):
            vals = []
            for i, itest in enumerate(inner):
                itrain = np.setdiff1d(np.arange(train.size), itest)
                p = _reseed(params, derive_seed(seed, 2, f, g, i))
                v, _ = _fit_score(X, y, train[itrain], train[itest], p, classes, prevalence, n_jobs,
                                  fold_vocabulary)
                vals.append(v)
            vals = np.array(vals)
            inner_scores.append(float(vals[~np.isnan(vals)].mean()) if (~np.isnan(vals)).any() else float("nan"))
        ranked = np.array([-np.inf if math.isnan(s) else s for s in inner_scores] or [0.0])
        best = int(np.argmax(ranked))
        tie = int(np.sum(ranked == ranked[best])) > 1
        chosen = _reseed(grid[best], derive_seed(seed, 3, f))
        v, missing = _fit_score(X, y, train, test, chosen, classes, prevalence, n_jobs, fold_vocabulary)
        if missing:
            flags.append(f"fold {f}: unevaluable classes {[str(c) for c in missing]}")
        if tie:
            flags.append(f"fold {f}: grid tie resolved to first entry")
        results.append(FoldResult(f, v, grid[best], inner_scores, int(train.size), int(test.size),
                                  missing, tie))
    return CvReport(target, modality, results, classes, prevalence, flags)


def one_vs_all_eval(X, y, grid: Sequence[HyperParams], seed: int = 0, outer_folds: int = 5,
                    inner_folds: int = 5, target: str = "", modality: str = "",
                    n_jobs: int = 1) -> CvReport:
    """Per-class binary nested CV, combined per fold with prevalence weights.

    Two-class targets reduce to the direct binary path.
    """
    y = np.asarray(y)
    classes = tuple(np.unique(y).tolist())
    if len(classes) < 2:
        raise StratificationImpossible("a single class is present")
    if len(classes) == 2:
        return nested_cv(X, y, grid, outer_folds, inner_folds, seed, target, modality, n_jobs)
    prevalence = _prevalence(y, classes)
    per_class, flags = {}, []
    for k, c in enumerate(classes):
        if np.sum(y == c) < 2:
            flags.append(f"class {c}: fewer than 2 members, not evaluated")
            continue
        rep = nested_cv(X, (y == c).astype(np.int64), grid, outer_folds, inner_folds,
                        seed, target, modality, n_jobs, strata=y)
        per_class[c] = rep
    if not per_class:
        raise NoEvaluableClass("no class could be evaluated")
    folds = []
    for f in range(outer_folds):
        rows = [(c, prevalence[c], r.folds[f].auroc) for c, r in per_class.items()]
        missing = [c for c, _, a in rows if math.isnan(a)] + [c for c in classes if c not in per_class]
        try:
            v = weighted_auroc(rows)
        except NoEvaluableClass:
            v = float("nan")
        if missing:
            flags.append(f"fold {f}: unevaluable classes {[str(c) for c in missing]}")
        first = next(iter(per_class.values())).folds[f]
        folds.append(FoldResult(f, v, first.params, [], first.n_train, first.n_test, missing))
    return CvReport(target, modality, folds, classes, prevalence, flags,
                    per_class={c: list(r.fold_aurocs) for c, r in per_class.items()})
