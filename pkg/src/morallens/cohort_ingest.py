"""Behaviour-log and survey parsing, the minimum-activity filter, and cohort summaries."""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, NamedTuple, TextIO

import tldextract

from .errors import (
    EmptyCohort,
    MalformedRecord,
    MissingReferenceLabel,
    OutOfRangeResponse,
    SchemaMismatch,
)
from .psychometrics import MFQ_RANGE, PVQ_RANGE, VALUES, Keying, default_keying
from .schema import DEMOGRAPHIC_LABELS, Modality


class BehaviorEvent(NamedTuple):
    user: str
    modality: Modality
    item: str
    day: dt.date
    visits: int
    dwell: int


@dataclass(frozen=True)
class SurveyRecord:
    user: str
    mfq_items: tuple[int, ...]
    pvq_items: dict[str, tuple[int, ...]]
    demographics: dict[str, str]


# behaviour logs ------------------------------------------------------------

_SCHEME = re.compile(r"^[a-z][a-z0-9+.\-]*://", re.I)


@lru_cache(maxsize=1)
def _extractor() -> tldextract.TLDExtract:
    # bundled public-suffix snapshot only; never fetch
    return tldextract.TLDExtract(suffix_list_urls=(), cache_dir=None)


@lru_cache(maxsize=200_000)
def normalize_domain(raw: str) -> str:
    """Reduce a URL or host name to its lower-cased registrable domain."""
    host = _SCHEME.sub("", raw.strip().lower())
    host = re.split(r"[/?#]", host, maxsplit=1)[0]
    host = host.rsplit("@", 1)[-1].split(":", 1)[0].strip(".")
    if not host:
        return ""
    registrable = _extractor()(host).top_domain_under_public_suffix
    if registrable:
        return registrable
    return host[4:] if host.startswith("www.") else host


def normalize_item(raw: str, modality: Modality) -> str:
    if modality.is_web:
        return normalize_domain(raw)
    return raw.strip()


def _as_int(value, name: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"{name} must be an integer, got {value!r}")
        value = int(value)
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def _parse_event(line: str, modality: Modality) -> BehaviorEvent:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise ValueError("record is not a JSON object")
    missing = [k for k in ("user", "day", "item", "visits", "dwell") if k not in rec]
    if missing:
        raise ValueError(f"missing field(s) {', '.join(missing)}")
    user = rec["user"]
    if not isinstance(user, str) or not user.strip():
        raise ValueError("user must be a non-empty string")
    if not isinstance(rec["item"], str):
        raise ValueError("item must be a string")
    item = normalize_item(rec["item"], modality)
    if not item:
        raise ValueError(f"item {rec['item']!r} has no usable domain")
    try:
        day = dt.date.fromisoformat(str(rec["day"]))
    except ValueError:
        raise ValueError(f"day {rec['day']!r} is not an ISO-8601 date") from None
    visits = _as_int(rec["visits"], "visits", 1)
    dwell = _as_int(rec["dwell"], "dwell", 0)
    return BehaviorEvent(user.strip(), modality, item, day, visits, dwell)


def _lines(stream: TextIO | str | Iterable[str]) -> Iterable[str]:
    if isinstance(stream, str):
        return io.StringIO(stream)
    return stream


def parse_behavior_log(stream, modality: Modality | str) -> tuple[list[BehaviorEvent], list[MalformedRecord]]:
    """Parse a JSON-lines behaviour log for one modality.

    Returns the parsed events and one MalformedRecord per rejected line
    (1-based line numbers). Blank lines are ignored.
    """
    modality = Modality.parse(modality)
    events: list[BehaviorEvent] = []
    errors: list[MalformedRecord] = []
    for lineno, line in enumerate(_lines(stream), start=1):
        if not line.strip():
            continue
        try:
            events.append(_parse_event(line, modality))
        except ValueError as exc:
            errors.append(MalformedRecord(lineno, str(exc)))
    return events, errors


def write_behavior_log(events: Iterable[BehaviorEvent], fh: TextIO) -> None:
    for e in events:
        fh.write(json.dumps(
            {"user": e.user, "day": e.day.isoformat(), "item": e.item,
             "visits": int(e.visits), "dwell": int(e.dwell)},
            separators=(",", ":"),
        ))
        fh.write("\n")


# surveys -------------------------------------------------------------------

def survey_columns(keying: Keying | None = None) -> list[str]:
    keying = keying or default_keying()
    return ["user", *keying.mfq_items, *keying.pvq_items, *DEMOGRAPHIC_LABELS]


def _likert(value: str, bounds: tuple[int, int]) -> int:
    v = int(value.strip())
    if not bounds[0] <= v <= bounds[1]:
        raise ValueError
    return v


def parse_survey(stream, keying: Keying | None = None) -> tuple[list[SurveyRecord], list[OutOfRangeResponse]]:
    """Parse the survey CSV. Rows with any invalid field are rejected whole.

    Raises SchemaMismatch if the header does not carry exactly the expected
    columns (any order). Row numbers in rejects are 1-based data rows.
    """
    keying = keying or default_keying()
    reader = csv.reader(_lines(stream))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaMismatch("survey file is empty") from None
    expected = survey_columns(keying)
    if len(header) != len(set(header)) or set(header) != set(expected):
        missing = sorted(set(expected) - set(header))
        extra = sorted(set(header) - set(expected))
        raise SchemaMismatch(f"survey header mismatch: missing={missing[:5]} extra={extra[:5]}")
    col = {name: i for i, name in enumerate(header)}
    canonical = {
        attr: {lab.lower(): lab for lab in labels} for attr, labels in DEMOGRAPHIC_LABELS.items()
    }
    pvq_by_value = {v: keying.pvq_items_for(v) for v in VALUES}

    records: list[SurveyRecord] = []
    rejects: list[OutOfRangeResponse] = []
    seen: set[str] = set()
    for rowno, row in enumerate(reader, start=1):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            rejects.append(OutOfRangeResponse(rowno, "<row>", f"{len(row)} fields"))
            continue
        field_name = "user"
        try:
            user = row[col["user"]].strip()
            if not user or user in seen:
                raise ValueError
            field_name = ""
            mfq = []
            for item in keying.mfq_items:
                field_name = item
                mfq.append(_likert(row[col[item]], MFQ_RANGE))
            pvq = {}
            for value, items in pvq_by_value.items():
                vals = []
                for item in items:
                    field_name = item
                    vals.append(_likert(row[col[item]], PVQ_RANGE))
                pvq[value] = tuple(vals)
            demo = {}
            for attr, labels in canonical.items():
                field_name = attr
                demo[attr] = labels[row[col[attr]].strip().lower()]
        except (ValueError, KeyError):
            bad = row[col[field_name]] if field_name in col else None
            rejects.append(OutOfRangeResponse(rowno, field_name, bad))
            continue
        seen.add(user)
        records.append(SurveyRecord(user, tuple(mfq), pvq, demo))
    return records, rejects


def write_survey(records: Iterable[SurveyRecord], fh: TextIO, keying: Keying | None = None) -> None:
    keying = keying or default_keying()
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(survey_columns(keying))
    for r in records:
        pvq = [x for v in VALUES for x in r.pvq_items[v]]
        writer.writerow([r.user, *r.mfq_items, *pvq, *(r.demographics[a] for a in DEMOGRAPHIC_LABELS)])


# cohort --------------------------------------------------------------------

@dataclass(frozen=True)
class Cohort:
    """Users that passed the activity filter, with their events and surveys.

    ``users`` is sorted; ``events`` holds every modality's events of retained
    users, in input order.
    """

    users: tuple[str, ...]
    events: Mapping[Modality, tuple[BehaviorEvent, ...]]
    surveys: Mapping[str, SurveyRecord]
    min_activity: int
    modality: Modality
    excluded: Mapping[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def modalities(self) -> tuple[Modality, ...]:
        return tuple(m for m in Modality if self.events.get(m))

    def events_for(self, modality: Modality | str) -> tuple[BehaviorEvent, ...]:
        return self.events.get(Modality.parse(modality), ())

    def all_events(self) -> list[BehaviorEvent]:
        return [e for m in Modality for e in self.events.get(m, ())]

    def unique_items(self, modality: Modality | str) -> dict[str, int]:
        return unique_item_counts(self.events_for(modality))


def unique_item_counts(events: Iterable[BehaviorEvent]) -> dict[str, int]:
    seen: dict[str, set[str]] = defaultdict(set)
    for e in events:
        seen[e.user].add(e.item)
    return {u: len(s) for u, s in seen.items()}


def filter_min_activity(events: Iterable[BehaviorEvent], surveys, n: int,
                        modality: Modality | str) -> Cohort:
    """Keep users with a survey and at least ``n`` unique items in ``modality``.

    The threshold is inclusive. Events of other modalities are carried along
    for retained users. Exclusion counts are reported in ``Cohort.excluded``.
    """
    if n < 1:
        raise ValueError("minimum activity must be >= 1")
    modality = Modality.parse(modality)
    if isinstance(surveys, Mapping):
        survey_map = dict(surveys)
    else:
        survey_map = {r.user: r for r in surveys}
    events = list(events)
    counts = unique_item_counts(e for e in events if e.modality is modality)
    candidates = set(counts) | set(survey_map)
    retained = sorted(u for u in candidates if u in survey_map and counts.get(u, 0) >= n)
    excluded = {
        "below_min_activity": sum(1 for u in candidates if counts.get(u, 0) < n),
        "no_survey": sum(1 for u in candidates if u not in survey_map and counts.get(u, 0) >= n),
    }
    if not retained:
        raise EmptyCohort(f"no user has >= {n} unique items in {modality.value}")
    keep = set(retained)
    by_modality: dict[Modality, list[BehaviorEvent]] = defaultdict(list)
    for e in events:
        if e.user in keep:
            by_modality[e.modality].append(e)
    return Cohort(
        users=tuple(retained),
        events={m: tuple(v) for m, v in by_modality.items()},
        surveys={u: survey_map[u] for u in retained},
        min_activity=n,
        modality=modality,
        excluded=excluded,
    )


# representativeness -------------------------------------------------------

@dataclass(frozen=True)
class RepresentativenessRow:
    attribute: str
    label: str
    observed_pct: float
    expected_pct: float
    difference_pct: float


def read_reference(stream) -> dict[str, dict[str, float]]:
    """Read ``attribute,label,expected_proportion`` rows."""
    ref: dict[str, dict[str, float]] = defaultdict(dict)
    for row in csv.DictReader(_lines(stream)):
        ref[row["attribute"].strip()][row["label"].strip()] = float(row["expected_proportion"])
    return dict(ref)


def summarize_cohort(cohort, reference: Mapping[str, Mapping[str, float]]) -> list[RepresentativenessRow]:
    """Observed vs expected label shares (percent) for every referenced attribute.

    ``cohort`` is a Cohort or any iterable of survey records.
    """
    if hasattr(cohort, "surveys") and hasattr(cohort, "users"):
        records = [cohort.surveys[u] for u in cohort.users]
    else:
        records = list(cohort)
    n = len(records)
    rows: list[RepresentativenessRow] = []
    for attr, expected in reference.items():
        observed = Counter(r.demographics[attr] for r in records)
        unknown = sorted(set(observed) - set(expected))
        if unknown:
            raise MissingReferenceLabel(f"{attr}: no reference proportion for {unknown}")
        for label, p in expected.items():
            obs = 100.0 * observed.get(label, 0) / n if n else 0.0
            exp = 100.0 * p
            rows.append(RepresentativenessRow(attr, label, obs, exp, abs(obs - exp)))
    return rows
