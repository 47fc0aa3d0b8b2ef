"""Questionnaire scoring (MFQ-30, PVQ-40) and median binarisation of continuous targets.

Item-to-scale keying lives in ``data/keying_v1.csv`` so that it can be audited
or swapped without touching code. MFQ items are coded 0-5, PVQ items 1-7.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateDistribution, MissingSurvey, OutOfRangeItem, WrongItemCount
from .schema import DEM_REP_LABELS, DEM_REP_TARGET, DEMOGRAPHIC_LABELS

MFQ_RANGE = (0, 5)
PVQ_RANGE = (1, 7)

FOUNDATIONS = ("care", "fairness", "loyalty", "authority", "purity")
INDIVIDUALIZING = ("care", "fairness")
BINDING = ("loyalty", "authority", "purity")

VALUES = (
    "self_direction", "stimulation", "hedonism", "achievement", "power",
    "security", "conformity", "tradition", "benevolence", "universalism",
)
QUADRANTS = {
    "openness": ("self_direction", "stimulation"),
    "conservation": ("security", "conformity", "tradition"),
    "self_enhancement": ("power", "achievement"),
    "self_transcendence": ("universalism", "benevolence"),
}

LOW, HIGH = "Low", "High"
INDIVIDUALIST, BINDER = "Individualist", "Binder"

MORAL_TARGETS = FOUNDATIONS + ("individualist_binding",)
VALUE_TARGETS = VALUES + tuple(QUADRANTS)
DEMOGRAPHIC_TARGETS = tuple(DEMOGRAPHIC_LABELS)
ALL_TARGETS = MORAL_TARGETS + VALUE_TARGETS + DEMOGRAPHIC_TARGETS


@dataclass(frozen=True)
class Keying:
    """Item -> scale assignment for both instruments, in file order."""

    mfq: dict[str, str]
    pvq: dict[str, str]

    @property
    def mfq_items(self) -> tuple[str, ...]:
        return tuple(self.mfq)

    @property
    def pvq_items(self) -> tuple[str, ...]:
        return tuple(self.pvq)

    def pvq_items_for(self, value: str) -> tuple[str, ...]:
        return tuple(k for k, v in self.pvq.items() if v == value)

    def mfq_items_for(self, foundation: str) -> tuple[str, ...]:
        return tuple(k for k, v in self.mfq.items() if v == foundation)


def load_keying(path: str | Path | None = None) -> Keying:
    if path is None:
        text = resources.files("morallens").joinpath("data/keying_v1.csv").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    mfq: dict[str, str] = {}
    pvq: dict[str, str] = {}
    for row in csv.DictReader(io.StringIO(text)):
        instrument = row["instrument"].strip().upper()
        target = {"MFQ": mfq, "PVQ": pvq}.get(instrument)
        if target is None:
            raise ValueError(f"unknown instrument {row['instrument']!r} in keying file")
        target[row["item_id"].strip()] = row["scale_id"].strip()
    if set(mfq.values()) != set(FOUNDATIONS):
        raise ValueError("MFQ keying must cover exactly the five foundations")
    if set(pvq.values()) != set(VALUES):
        raise ValueError("PVQ keying must cover exactly the ten basic values")
    return Keying(mfq, pvq)


@lru_cache(maxsize=1)
def default_keying() -> Keying:
    return load_keying()


def _check_range(values: np.ndarray, bounds: tuple[int, int], what: str) -> None:
    lo, hi = bounds
    if values.size and (values.min() < lo or values.max() > hi):
        bad = values[(values < lo) | (values > hi)][0]
        raise OutOfRangeItem(f"{what} response {bad} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class MoralScores:
    care: float
    fairness: float
    loyalty: float
    authority: float
    purity: float
    individualizing: float | None = None
    binding: float | None = None

    def foundations(self) -> dict[str, float]:
        return {f: getattr(self, f) for f in FOUNDATIONS}

    @property
    def individualist_label(self) -> str:
        """``Individualist`` iff individualizing strictly exceeds binding; ties go to ``Binder``."""
        if self.individualizing is None or self.binding is None:
            raise ValueError("superfoundations not derived")
        return INDIVIDUALIST if self.individualizing > self.binding else BINDER


def score_mfq(items: Sequence[int] | Mapping[str, int], keying: Keying | None = None) -> MoralScores:
    """Average the six keyed items of each foundation.

    ``items`` is either the 30 responses in keying order or a mapping from
    item id to response.
    """
    keying = keying or default_keying()
    ids = keying.mfq_items
    if isinstance(items, Mapping):
        missing = [i for i in ids if i not in items]
        if missing or len(items) != len(ids):
            raise WrongItemCount(f"expected MFQ items {len(ids)}, got {len(items)}")
        arr = np.array([items[i] for i in ids], dtype=float)
    else:
        arr = np.asarray(items, dtype=float)
        if arr.shape != (len(ids),):
            raise WrongItemCount(f"expected {len(ids)} MFQ responses, got {arr.size}")
    _check_range(arr, MFQ_RANGE, "MFQ")
    scale = np.array([keying.mfq[i] for i in ids])
    return MoralScores(**{f: float(arr[scale == f].mean()) for f in FOUNDATIONS})


def derive_superfoundations(m: MoralScores) -> MoralScores:
    return dataclasses.replace(
        m,
        individualizing=float(np.mean([m.care, m.fairness])),
        binding=float(np.mean([m.loyalty, m.authority, m.purity])),
    )


@dataclass(frozen=True)
class ValueScores:
    raw: dict[str, float]
    adjusted: dict[str, float]
    quadrants: dict[str, float]


def score_pvq(items: Mapping[str, Sequence[int]] | Mapping[str, int],
              keying: Keying | None = None) -> ValueScores:
    """Score the ten basic values.

    ``items`` maps each value name to its responses, or maps item ids
    (``pvq_<value>_<k>``) to single responses. Adjusted scores are the raw
    value means centred on the respondent's mean across the ten values;
    quadrants are sums of the raw items of their constituent values.
    """
    keying = keying or default_keying()
    per_value: dict[str, np.ndarray] = {}
    if items and all(k in keying.pvq for k in items):
        if len(items) != len(keying.pvq):
            raise WrongItemCount(f"expected {len(keying.pvq)} PVQ items, got {len(items)}")
        for v in VALUES:
            per_value[v] = np.array([items[i] for i in keying.pvq_items_for(v)], dtype=float)
    else:
        for v in VALUES:
            if v not in items:
                raise WrongItemCount(f"missing PVQ value {v!r}")
            arr = np.asarray(items[v], dtype=float).ravel()
            expected = len(keying.pvq_items_for(v))
            if arr.size != expected:
                raise WrongItemCount(f"value {v!r}: expected {expected} items, got {arr.size}")
            per_value[v] = arr
    for v, arr in per_value.items():
        _check_range(arr, PVQ_RANGE, f"PVQ {v}")

    raw = {v: float(per_value[v].mean()) for v in VALUES}
    raw_vec = np.array([raw[v] for v in VALUES])
    centred = raw_vec - raw_vec.mean()
    adjusted = dict(zip(VALUES, centred.tolist()))
    quadrants = {
        q: float(sum(per_value[v].sum() for v in members)) for q, members in QUADRANTS.items()
    }
    return ValueScores(raw, adjusted, quadrants)


def binarize_at_median(scores: Sequence[float]) -> tuple[np.ndarray, float]:
    """Split at the median: strictly above is ``High``; at or below is ``Low``.

    Raises DegenerateDistribution (carrying the all-``Low`` labels and the
    threshold as attributes) when every score is equal.
    """
    x = np.asarray(scores, dtype=float)
    if x.size < 2 or not np.all(np.isfinite(x)):
        raise ValueError("need at least two finite scores")
    threshold = float(np.median(x))
    labels = np.where(x > threshold, HIGH, LOW).astype(object)
    if np.all(x == x[0]):
        err = DegenerateDistribution(f"all {x.size} scores equal {x[0]}")
        err.labels = labels
        err.threshold = threshold
        raise err
    return labels, threshold


@dataclass
class TargetSet:
    """Per-user labels for every prediction target.

    ``labels[target]`` is an object array aligned with ``users``; ``None``
    marks a user excluded from a restricted target (Dem-vs-Rep).
    """

    users: tuple[str, ...]
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    scores: dict[str, np.ndarray] = field(default_factory=dict)
    thresholds: dict[str, float] = field(default_factory=dict)
    median_ties: dict[str, int] = field(default_factory=dict)
    untrainable: set[str] = field(default_factory=set)
    individualist_ties: int = 0

    @property
    def targets(self) -> tuple[str, ...]:
        return tuple(self.labels)

    def __len__(self) -> int:
        return len(self.users)

    def column(self, target: str) -> tuple[np.ndarray, np.ndarray]:
        """(row indices, labels) of users that carry a label for ``target``."""
        lab = self.labels[target]
        keep = np.array([v is not None for v in lab], dtype=bool)
        return np.flatnonzero(keep), lab[keep]

    def row(self, user: str) -> dict[str, object]:
        i = self.users.index(user)
        return {t: lab[i] for t, lab in self.labels.items()}

    def write_csv(self, fh) -> None:
        score_cols = list(self.scores)
        label_cols = list(self.labels)
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user", *(f"score_{c}" for c in score_cols), *label_cols])
        for i, u in enumerate(self.users):
            writer.writerow([
                u,
                *(repr(float(self.scores[c][i])) for c in score_cols),
                *("" if self.labels[c][i] is None else self.labels[c][i] for c in label_cols),
            ])


def _binarize_target(ts: TargetSet, name: str, values: np.ndarray) -> None:
    ts.scores[name] = values
    if len(values) < 2:
        ts.labels[name] = np.array([LOW] * len(values), dtype=object)
        ts.untrainable.add(name)
        return
    try:
        labels, thr = binarize_at_median(values)
    except DegenerateDistribution as err:
        warnings.warn(f"target {name!r}: {err}; marked untrainable", stacklevel=3)
        labels, thr = err.labels, err.threshold
        ts.untrainable.add(name)
    ts.labels[name] = labels
    ts.thresholds[name] = thr
    ts.median_ties[name] = int(np.sum(values == thr))


def assemble_targets(source, keying: Keying | None = None) -> TargetSet:
    """Score every survey and label all targets over the given users.

    ``source`` is a Cohort (its retained users, in order) or an iterable of
    survey records.
    """
    keying = keying or default_keying()
    if hasattr(source, "surveys") and hasattr(source, "users"):
        users = tuple(source.users)
        missing = [u for u in users if u not in source.surveys]
        if missing:
            raise MissingSurvey(f"{len(missing)} users without survey, e.g. {missing[0]!r}")
        records = [source.surveys[u] for u in users]
    else:
        records = list(source)
        users = tuple(r.user for r in records)

    ts = TargetSet(users=users)
    n = len(records)
    if n == 0:
        return ts

    moral = [derive_superfoundations(score_mfq(r.mfq_items, keying)) for r in records]
    values = [score_pvq(r.pvq_items, keying) for r in records]

    for f in FOUNDATIONS:
        _binarize_target(ts, f, np.array([getattr(m, f) for m in moral]))
    ts.scores["individualizing"] = np.array([m.individualizing for m in moral])
    ts.scores["binding"] = np.array([m.binding for m in moral])
    ts.labels["individualist_binding"] = np.array([m.individualist_label for m in moral], dtype=object)
    ts.individualist_ties = int(np.sum(ts.scores["individualizing"] == ts.scores["binding"]))

    for v in VALUES:
        _binarize_target(ts, v, np.array([s.adjusted[v] for s in values]))
    for q in QUADRANTS:
        _binarize_target(ts, q, np.array([s.quadrants[q] for s in values]))

    for attr in DEMOGRAPHIC_TARGETS:
        ts.labels[attr] = np.array([r.demographics.get(attr) for r in records], dtype=object)
    party = ts.labels["political_party"]
    ts.labels[DEM_REP_TARGET] = np.array(
        [p if p in DEM_REP_LABELS else None for p in party], dtype=object
    )
    return ts

