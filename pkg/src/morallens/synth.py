"""Synthetic cohorts with planted item-attribute associations.

Counts for user u and item i are Poisson with rate
``activity_u * popularity_i * multiplier_ui * G_ui`` where ``G_ui`` is a
mean-one gamma draw, so counts are negative binomial and heavy tailed. Survey
answers are simulated first; psychometric labels come from scoring them the
same way real surveys are scored, and signals are planted on those labels.
"""

from __future__ import annotations

import datetime as dt
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import SpecInvalid
from .evaluation import auroc, weighted_auroc
from .feature_matrix import SparseMatrix, Vocabulary, _csr
from .cohort_ingest import BehaviorEvent, Cohort, SurveyRecord, filter_min_activity, write_behavior_log, write_survey
from .psychometrics import BINDER, FOUNDATIONS, HIGH, INDIVIDUALIST, LOW, MFQ_RANGE, PVQ_RANGE, VALUES, assemble_targets, default_keying
from .schema import DEM_REP_LABELS, DEM_REP_TARGET, DEMOGRAPHIC_LABELS, Modality, default_marginals

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True)
class TargetSpec:
    """Marginals of a demographic attribute (psychometric labels come from the surveys)."""

    name: str
    labels: tuple[str, ...]
    marginals: tuple[float, ...]


@dataclass(frozen=True)
class SignalSpec:
    """Items whose rate is multiplied for users of ``label`` on ``target``.

    Items are either listed by column index (``items``, 0 = most popular) or
    ``n_items`` are drawn from the popularity ranks ``rank_range``.
    """

    target: str
    label: str
    modality: str = "desktop"
    n_items: int = 10
    multiplier: float = 4.0
    rank_range: tuple[int, int] | None = None
    items: tuple[int, ...] | None = None


@dataclass(frozen=True)
class GeneratorSpec:
    n_users: int
    vocab_sizes: Mapping[str, int] = field(default_factory=lambda: {"desktop": 510})
    popularity_exponent: float = 1.0
    activity_mu: float = 6.0
    activity_sigma: float = 0.8
    dispersion: float = 2.0
    n_days: int = 14
    start_day: str = "2015-03-01"
    targets: tuple[TargetSpec, ...] = ()
    signals: tuple[SignalSpec, ...] = ()
    correlation: float = 0.0
    survey_noise: float = 0.8
    bayes_samples: int = 0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.n_users < 1:
            problems.append("n_users must be >= 1")
        if not self.vocab_sizes:
            problems.append("at least one modality vocabulary is required")
        for m, size in self.vocab_sizes.items():
            try:
                Modality.parse(m)
            except ValueError:
                problems.append(f"unknown modality {m!r}")
            if size < 1:
                problems.append(f"vocabulary of {m} must be non-empty")
        if self.activity_sigma < 0 or self.dispersion <= 0 or self.n_days < 1:
            problems.append("activity_sigma >= 0, dispersion > 0 and n_days >= 1 required")
        if not 0.0 <= self.correlation < 1.0:
            problems.append("correlation must lie in [0, 1)")
        for t in self.targets:
            if t.name not in DEMOGRAPHIC_LABELS:
                problems.append(f"target {t.name!r} is not a demographic attribute")
            elif set(t.labels) - set(DEMOGRAPHIC_LABELS[t.name]):
                problems.append(f"target {t.name!r} has labels outside its label set")
            if len(t.labels) != len(t.marginals) or any(p < 0 for p in t.marginals) \
                    or abs(sum(t.marginals) - 1.0) > 1e-9:
                problems.append(f"marginals of {t.name!r} must be non-negative and sum to 1")
        for s in self.signals:
            if not s.multiplier > 0:
                problems.append(f"signal on {s.target!r}: multiplier must be > 0")
            if s.modality not in self.vocab_sizes:
                problems.append(f"signal on {s.target!r}: modality {s.modality!r} has no vocabulary")
                continue
            size = self.vocab_sizes[s.modality]
            if s.items is not None:
                if any(not 0 <= i < size for i in s.items) or len(set(s.items)) != len(s.items):
                    problems.append(f"signal on {s.target!r}: items must be distinct vocabulary indices")
            else:
                lo, hi = s.rank_range or (0, size)
                if not (0 <= lo < hi <= size and s.n_items <= hi - lo and s.n_items >= 1):
                    problems.append(f"signal on {s.target!r}: cannot draw {s.n_items} items from ranks [{lo}, {hi})")
        if problems:
            raise SpecInvalid("; ".join(problems))

    @property
    def modalities(self) -> tuple[Modality, ...]:
        return tuple(Modality.parse(m) for m in self.vocab_sizes)

    def target_spec(self, name: str) -> TargetSpec:
        for t in self.targets:
            if t.name == name:
                return t
        marg = default_marginals(name)
        return TargetSpec(name, tuple(marg), tuple(marg.values()))


def _parse_target(d) -> TargetSpec:
    return TargetSpec(d["name"], tuple(d["labels"]), tuple(float(x) for x in d["marginals"]))


def _parse_signal(d) -> SignalSpec:
    return SignalSpec(
        target=d["target"], label=d["label"], modality=d.get("modality", "desktop"),
        n_items=int(d.get("n_items", 10)), multiplier=float(d.get("multiplier", 4.0)),
        rank_range=tuple(d["rank_range"]) if "rank_range" in d else None,
        items=tuple(d["items"]) if "items" in d else None,
    )


def spec_from_dict(d: Mapping) -> GeneratorSpec:
    d = dict(d)
    try:
        kw = {k: d.pop(k) for k in list(d) if k in GeneratorSpec.__dataclass_fields__
              and k not in ("targets", "signals", "vocab_sizes")}
        kw["vocab_sizes"] = dict(d.pop("vocabulary", d.pop("vocab_sizes", {"desktop": 510})))
        kw["targets"] = tuple(_parse_target(t) for t in d.pop("targets", ()))
        kw["signals"] = tuple(_parse_signal(s) for s in d.pop("signals", ()))
    except (KeyError, TypeError, ValueError) as err:
        raise SpecInvalid(f"malformed generator spec: {err}") from None
    d.pop("output", None)
    if d:
        raise SpecInvalid(f"unknown generator keys: {sorted(d)}")
    return GeneratorSpec(**kw)


def load_spec(path: str | Path) -> GeneratorSpec:
    """Read a TOML generator spec (top level or under a ``[synth]`` table)."""
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise SpecInvalid(f"{path}: {err}") from None
    return spec_from_dict(doc.get("synth", doc))


def spec_to_dict(spec: GeneratorSpec) -> dict:
    d = asdict(spec)
    d["vocabulary"] = dict(d.pop("vocab_sizes"))
    d["targets"] = [{"name": t.name, "labels": list(t.labels), "marginals": list(t.marginals)}
                    for t in spec.targets]
    sig = []
    for s in spec.signals:
        e = {"target": s.target, "label": s.label, "modality": s.modality,
             "n_items": s.n_items, "multiplier": s.multiplier}
        if s.rank_range is not None:
            e["rank_range"] = list(s.rank_range)
        if s.items is not None:
            e["items"] = list(s.items)
        sig.append(e)
    d["signals"] = sig
    return d


# generation ------------------------------------------------------------------

def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=keys))


def quota_counts(marginals: Sequence[float], n: int) -> np.ndarray:
    """Largest-remainder allocation of ``n`` units to ``marginals``."""
    p = np.asarray(marginals, dtype=float)
    raw = p * n
    base = np.floor(raw).astype(np.int64)
    rem = n - int(base.sum())
    order = np.lexsort((np.arange(p.size), -(raw - base)))
    base[order[:rem]] += 1
    return base


def popularity(size: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, size + 1) ** exponent
    return w / w.sum()


def item_name(modality: Modality, index: int) -> str:
    return f"w{index:05d}.com" if modality.is_web else f"App {index:05d}"


def user_name(index: int) -> str:
    return f"u{index:05d}"


def _simulate_surveys(spec: GeneratorSpec) -> list[SurveyRecord]:
    keying = default_keying()
    rng = _stream(spec.seed, 0)
    n = spec.n_users
    mfq_latent = rng.standard_normal((n, len(FOUNDATIONS)))
    pvq_latent = rng.standard_normal((n, len(VALUES)))
    mfq_pos = [FOUNDATIONS.index(keying.mfq[item]) for item in keying.mfq_items]
    mfq = np.clip(np.rint(2.5 + mfq_latent[:, mfq_pos] + spec.survey_noise * rng.standard_normal((n, len(mfq_pos)))),
                  *MFQ_RANGE).astype(int)
    pvq = {}
    for k, v in enumerate(VALUES):
        m = len(keying.pvq_items_for(v))
        pvq[v] = np.clip(np.rint(4.0 + 1.2 * pvq_latent[:, [k]] + spec.survey_noise * rng.standard_normal((n, m))),
                         *PVQ_RANGE).astype(int)

    common = rng.standard_normal(n)
    demo_cols = {}
    for attr, labels in DEMOGRAPHIC_LABELS.items():
        t = spec.target_spec(attr)
        latent = math.sqrt(spec.correlation) * common + math.sqrt(1 - spec.correlation) * rng.standard_normal(n)
        counts = quota_counts(t.marginals, n)
        order = np.argsort(latent, kind="stable")
        col = np.empty(n, dtype=object)
        start = 0
        for label, c in zip(t.labels, counts):
            col[order[start:start + c]] = label
            start += c
        demo_cols[attr] = col

    return [
        SurveyRecord(user_name(u), tuple(int(x) for x in mfq[u]),
                     {v: tuple(int(x) for x in pvq[v][u]) for v in VALUES},
                     {a: str(demo_cols[a][u]) for a in DEMOGRAPHIC_LABELS})
        for u in range(n)
    ]


def _signal_items(spec: GeneratorSpec, k: int, s: SignalSpec) -> np.ndarray:
    if s.items is not None:
        return np.array(sorted(s.items), dtype=np.int64)
    lo, hi = s.rank_range or (0, spec.vocab_sizes[s.modality])
    rng = _stream(spec.seed, 2, k)
    return np.sort(lo + rng.choice(hi - lo, size=s.n_items, replace=False))


@dataclass
class GeneratorLedger:
    """Ground truth behind a generated cohort."""

    users: tuple[str, ...]
    labels: dict[str, np.ndarray]
    activity: np.ndarray
    counts: dict[Modality, SparseMatrix]
    signal_items: list[tuple[SignalSpec, tuple[str, ...]]]
    bayes_auroc: dict[str, float] = field(default_factory=dict)

    def signal_keys(self, target: str | None = None, modality: Modality | str | None = None) -> set[str]:
        """Planted item keys (``web:...`` / ``app:...``) optionally restricted to a target or modality."""
        out = set()
        for s, keys in self.signal_items:
            if target is not None and s.target != target:
                continue
            m = Modality.parse(s.modality)
            if modality is not None and Modality.parse(modality) is not m:
                continue
            out.update(f"{m.prefix}:{k}" for k in keys)
        return out

    def to_json(self) -> str:
        doc = {
            "users": len(self.users),
            "signals": [{"target": s.target, "label": s.label, "modality": s.modality,
                         "multiplier": s.multiplier, "items": list(keys)} for s, keys in self.signal_items],
            "bayes_auroc": dict(sorted(self.bayes_auroc.items())),
            "label_counts": {t: {str(k): int(v) for k, v in zip(*np.unique(lab[lab != None].astype(str), return_counts=True))}  # noqa: E711
                             for t, lab in sorted(self.labels.items())},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


@dataclass
class SyntheticCohort:
    spec: GeneratorSpec
    events: dict[Modality, list[BehaviorEvent]]
    surveys: list[SurveyRecord]
    ledger: GeneratorLedger

    def cohort(self, min_activity: int = 30, modality: Modality | str | None = None) -> Cohort:
        modality = Modality.parse(modality) if modality is not None else self.spec.modalities[0]
        events = [e for m in self.spec.modalities for e in self.events[m]]
        return filter_min_activity(events, self.surveys, min_activity, modality)

    def write(self, out_dir: str | Path) -> list[Path]:
        """Emit behaviour logs, the survey CSV and the ledger; returns written paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for m, events in self.events.items():
            p = out / f"{m.value}.jsonl"
            with open(p, "w", encoding="utf-8", newline="\n") as fh:
                write_behavior_log(events, fh)
            written.append(p)
        p = out / "survey.csv"
        with open(p, "w", encoding="utf-8", newline="") as fh:
            write_survey(self.surveys, fh)
        written.append(p)
        p = out / "ledger.json"
        p.write_text(self.ledger.to_json(), encoding="utf-8")
        written.append(p)
        p = out / "ledger_labels.csv"
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            names = sorted(self.ledger.labels)
            fh.write(",".join(["user", "activity", *names]) + "\n")
            for i, u in enumerate(self.ledger.users):
                vals = ["" if self.ledger.labels[t][i] is None else str(self.ledger.labels[t][i]) for t in names]
                fh.write(",".join([u, repr(float(self.ledger.activity[i])), *vals]) + "\n")
        written.append(p)
        return written


def _user_labels(surveys: list[SurveyRecord]) -> dict[str, np.ndarray]:
    return dict(assemble_targets(surveys).labels)


def _rate_multipliers(spec, labels, sig_items, modality, size):
    mult = np.ones((spec.n_users, size))
    for s, items in sig_items:
        if Modality.parse(s.modality) is not modality:
            continue
        if s.target not in labels:
            raise SpecInvalid(f"signal target {s.target!r} is not a known target")
        hit = labels[s.target] == s.label
        mult[np.ix_(hit, items)] *= s.multiplier
    return mult


def generate_cohort(spec: GeneratorSpec) -> SyntheticCohort:
    surveys = _simulate_surveys(spec)
    labels = _user_labels(surveys)
    users = tuple(r.user for r in surveys)
    activity = np.exp(_stream(spec.seed, 1).normal(spec.activity_mu, spec.activity_sigma, spec.n_users))
    sig_items = [(s, _signal_items(spec, k, s)) for k, s in enumerate(spec.signals)]
    start = dt.date.fromisoformat(spec.start_day)
    days = [start + dt.timedelta(days=d) for d in range(spec.n_days)]
    r = spec.dispersion

    events: dict[Modality, list[BehaviorEvent]] = {}
    counts: dict[Modality, SparseMatrix] = {}
    for mi, (mname, size) in enumerate(spec.vocab_sizes.items()):
        modality = Modality.parse(mname)
        pop = popularity(size, spec.popularity_exponent)
        mult = _rate_multipliers(spec, labels, sig_items, modality, size)
        names = [item_name(modality, i) for i in range(size)]
        ev: list[BehaviorEvent] = []
        rows, cols, vals = [], [], []
        for u in range(spec.n_users):
            rng = _stream(spec.seed, 3, mi, u)
            rate = activity[u] * pop * mult[u] * rng.gamma(r, 1.0 / r, size)
            c = rng.poisson(rate)
            items = np.flatnonzero(c)
            rows.append(np.full(items.size, u))
            cols.append(items)
            vals.append(c[items])
            if items.size == 0:
                continue
            # spread each item's visits uniformly over the observation window
            owner = np.repeat(np.arange(items.size), c[items])
            day = rng.integers(0, spec.n_days, owner.size)
            key, n_visits = np.unique(owner * spec.n_days + day, return_counts=True)
            dwell = rng.poisson(45.0 * n_visits)
            item_of, day_of = np.divmod(key, spec.n_days)
            user = users[u]
            for j, d, v, w in zip(items[item_of], day_of, n_visits, dwell):
                ev.append(BehaviorEvent(user, modality, names[j], days[d], int(v), int(w)))
        events[modality] = ev
        vocab = Vocabulary(f"{modality.prefix}:{n}" for n in names)
        data = _csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (spec.n_users, size))
        counts[modality] = SparseMatrix(users, vocab, data)

    ledger = GeneratorLedger(
        users=users,
        labels=labels,
        activity=activity,
        counts=counts,
        signal_items=[(s, tuple(item_name(Modality.parse(s.modality), i) for i in items))
                      for s, items in sig_items],
    )
    if spec.bayes_samples > 0:
        for t in sorted({s.target for s in spec.signals}):
            ledger.bayes_auroc[t] = bayes_reference_auroc(spec, t, spec.bayes_samples)
    return SyntheticCohort(spec, events, surveys, ledger)


# reference separability ----------------------------------------------------------

def _nb_logpmf(x: np.ndarray, mean: np.ndarray, r: float) -> np.ndarray:
    return (gammaln(x + r) - gammaln(r) - gammaln(x + 1)
            + r * np.log(r / (r + mean)) + x * np.log(mean / (r + mean)))


def _target_classes(spec: GeneratorSpec, target: str) -> tuple[tuple[str, ...], np.ndarray]:
    if target in DEMOGRAPHIC_LABELS:
        t = spec.target_spec(target)
        return t.labels, np.asarray(t.marginals, dtype=float)
    if target == DEM_REP_TARGET:
        t = spec.target_spec("political_party")
        p = np.array([t.marginals[t.labels.index(c)] for c in DEM_REP_LABELS])
        return DEM_REP_LABELS, p / p.sum()
    if target == "individualist_binding":
        return (BINDER, INDIVIDUALIST), np.array([0.5, 0.5])
    # median splits are balanced up to ties
    return (LOW, HIGH), np.array([0.5, 0.5])


def bayes_reference_auroc(spec: GeneratorSpec, target: str, n_samples: int = 100_000,
                          seed: int | None = None) -> float:
    """Monte-Carlo AUROC of the exact class posterior for ``target``.

    Users are drawn from the generative model; the scorer knows each user's
    activity level, the item popularities and the planted multipliers, so no
    classifier trained on the counts should beat it beyond sampling noise.
    Multi-class targets return the prevalence-weighted one-against-all AUROC.
    """
    classes, prior = _target_classes(spec, target)
    signals = [s for s in spec.signals if s.target == target]
    rng = _stream(spec.seed if seed is None else seed, 9, 0)
    n = int(n_samples)
    if not signals:
        return 0.5
    k = len(classes)
    y = rng.choice(k, size=n, p=prior / prior.sum())
    activity = np.exp(rng.normal(spec.activity_mu, spec.activity_sigma, n))
    r = spec.dispersion
    loglik = np.zeros((n, k))
    for (mname, size) in spec.vocab_sizes.items():
        modality = Modality.parse(mname)
        pop = popularity(size, spec.popularity_exponent)
        mine = [(s, _signal_items(spec, spec.signals.index(s), s)) for s in signals
                if Modality.parse(s.modality) is modality]
        if not mine:
            continue
        items = np.unique(np.concatenate([it for _, it in mine]))
        col = {int(i): j for j, i in enumerate(items)}
        class_mult = np.ones((k, items.size))
        for s, it in mine:
            if s.label in classes:
                class_mult[classes.index(s.label), [col[int(i)] for i in it]] *= s.multiplier
        mean_true = activity[:, None] * pop[items][None, :] * class_mult[y]
        x = rng.poisson(mean_true * rng.gamma(r, 1.0 / r, mean_true.shape))
        for c in range(k):
            mean_c = activity[:, None] * pop[items][None, :] * class_mult[c][None, :]
            loglik[:, c] += _nb_logpmf(x, mean_c, r).sum(axis=1)
    logpost = loglik + np.log(prior)[None, :]
    logpost -= logpost.max(axis=1, keepdims=True)
    post = np.exp(logpost)
    post /= post.sum(axis=1, keepdims=True)
    if k == 2:
        return auroc(post[:, 1], y == 1).auroc
    rows = [(classes[c], float(np.mean(y == c)), auroc(post[:, c], y == c).auroc)
            for c in range(k) if 0 < np.sum(y == c) < n]
    return weighted_auroc(rows)
