"""Sparse user x item frequency matrices, early fusion, and per-user column selection."""

from __future__ import annotations

import csv
import enum
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np
import scipy.sparse as sp

from .errors import EmptyModality, EmptySelection, UserSetMismatch
from .schema import Modality


class Vocabulary:
    """Ordered, bijective item-key <-> column mapping."""

    __slots__ = ("keys", "index")

    def __init__(self, keys: Iterable[str]):
        self.keys: tuple[str, ...] = tuple(keys)
        self.index: dict[str, int] = {k: i for i, k in enumerate(self.keys)}
        if len(self.index) != len(self.keys):
            raise ValueError("duplicate vocabulary keys")

    @classmethod
    def by_frequency(cls, totals: dict[str, float]) -> "Vocabulary":
        """Descending total frequency, ties broken lexicographically."""
        return cls(sorted(totals, key=lambda k: (-totals[k], k)))

    def __len__(self) -> int:
        return len(self.keys)

    def __iter__(self):
        return iter(self.keys)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.keys == other.keys

    def __repr__(self) -> str:
        return f"Vocabulary({len(self.keys)} keys)"


@dataclass(frozen=True)
class SparseMatrix:
    """Users x items counts in CSR form; rows follow ``users``, columns ``vocab``."""

    users: tuple[str, ...]
    vocab: Vocabulary
    data: sp.csr_matrix

    def __post_init__(self):
        if self.data.shape != (len(self.users), len(self.vocab)):
            raise ValueError(f"shape {self.data.shape} does not match "
                             f"{len(self.users)} users x {len(self.vocab)} items")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def nnz(self) -> int:
        return int(self.data.nnz)

    @property
    def density(self) -> float:
        n, p = self.shape
        return self.nnz / (n * p) if n and p else 0.0

    def activity(self) -> np.ndarray:
        """Unique items per user (stored non-zeros per row)."""
        return np.diff(self.data.indptr)

    def toarray(self) -> np.ndarray:
        return self.data.toarray()

    def take_rows(self, rows: Sequence[int]) -> "SparseMatrix":
        rows = np.asarray(rows, dtype=np.intp)
        return SparseMatrix(tuple(self.users[i] for i in rows), self.vocab, self.data[rows])

    def take_columns(self, cols: Sequence[int]) -> "SparseMatrix":
        cols = np.asarray(cols, dtype=np.intp)
        return SparseMatrix(self.users, Vocabulary(self.vocab.keys[i] for i in cols),
                            self.data[:, cols].tocsr())

    def triplets(self) -> set[tuple[str, str, float]]:
        coo = self.data.tocoo()
        return {(self.users[r], self.vocab.keys[c], float(v))
                for r, c, v in zip(coo.row, coo.col, coo.data)}


def _csr(rows, cols, vals, shape) -> sp.csr_matrix:
    m = sp.csr_matrix((np.asarray(vals, dtype=np.float64), (rows, cols)), shape=shape)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


def from_counts(users: Sequence[str], counts: Sequence[dict[str, float]]) -> SparseMatrix:
    """Build a matrix from one ``{item_key: value}`` dict per user."""
    totals: dict[str, float] = defaultdict(float)
    for row in counts:
        for k, v in row.items():
            totals[k] += v
    vocab = Vocabulary.by_frequency({k: v for k, v in totals.items() if v != 0})
    r, c, v = [], [], []
    for i, row in enumerate(counts):
        for k, val in row.items():
            if val != 0:
                r.append(i)
                c.append(vocab.index[k])
                v.append(val)
    return SparseMatrix(tuple(users), vocab, _csr(r, c, v, (len(users), len(vocab))))


def build_matrix(cohort, modality: Modality | str, users: Sequence[str] | None = None,
                 value: str = "visits") -> SparseMatrix:
    """Total per-user item counts over the observation window.

    Rows follow ``users`` (default: the cohort's user order). ``value`` selects
    the summed field, ``"visits"`` (default) or ``"dwell"``.
    """
    if value not in ("visits", "dwell"):
        raise ValueError("value must be 'visits' or 'dwell'")
    modality = Modality.parse(modality)
    events = cohort.events_for(modality)
    if not events:
        raise EmptyModality(f"cohort has no {modality.value} events")
    users = tuple(cohort.users if users is None else users)
    row_of = {u: i for i, u in enumerate(users)}
    per_user: list[dict[str, float]] = [defaultdict(float) for _ in users]
    prefix = modality.prefix + ":"
    for e in events:
        i = row_of.get(e.user)
        if i is not None:
            per_user[i][prefix + e.item] += getattr(e, value)
    return from_counts(users, per_user)


def fuse_early(a: SparseMatrix, b: SparseMatrix) -> SparseMatrix:
    """Concatenate the feature columns of two views of the same users."""
    if a.users != b.users:
        raise UserSetMismatch("fused matrices must share users in the same order")
    overlap = set(a.vocab.index) & set(b.vocab.index)
    if overlap:
        raise ValueError(f"vocabularies overlap on {sorted(overlap)[:3]}; use distinct modality prefixes")
    stacked = sp.hstack([a.data, b.data], format="csr")
    keys = a.vocab.keys + b.vocab.keys
    totals = np.asarray(stacked.sum(axis=0)).ravel()
    order = sorted(range(len(keys)), key=lambda j: (-totals[j], keys[j]))
    data = stacked[:, order].tocsr() if keys else stacked
    data.sort_indices()
    return SparseMatrix(a.users, Vocabulary(keys[j] for j in order), data)


class SelectionMode(str, enum.Enum):
    TOP_K = "top-k"
    RANDOM_K = "random-k"


@dataclass(frozen=True)
class SelectionPlan:
    mode: SelectionMode
    k: int
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", SelectionMode(self.mode))
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode is SelectionMode.RANDOM_K and self.seed is None:
            raise ValueError("RandomK selection requires a seed")


def apply_selection(matrix: SparseMatrix, plan: SelectionPlan) -> SparseMatrix:
    """Keep at most ``plan.k`` items per user.

    Top-k keeps the most visited items; ties fall to the column order, which
    is global frequency then key. Random-k draws a seeded uniform sample
    without replacement. Users with fewer than k items are untouched.
    """
    src = matrix.data
    if src.nnz == 0:
        return matrix
    rng = np.random.default_rng(plan.seed) if plan.mode is SelectionMode.RANDOM_K else None
    keep_mask = np.ones(src.nnz, dtype=bool)
    for i in range(src.shape[0]):
        lo, hi = src.indptr[i], src.indptr[i + 1]
        nnz = hi - lo
        if nnz <= plan.k:
            continue
        if rng is None:
            order = np.lexsort((src.indices[lo:hi], -src.data[lo:hi]))
            chosen = order[:plan.k]
        else:
            chosen = rng.choice(nnz, size=plan.k, replace=False)
        row_mask = np.zeros(nnz, dtype=bool)
        row_mask[chosen] = True
        keep_mask[lo:hi] = row_mask
    indptr = np.zeros_like(src.indptr)
    indptr[1:] = np.cumsum(np.minimum(np.diff(src.indptr), plan.k))
    data = sp.csr_matrix((src.data[keep_mask], src.indices[keep_mask], indptr), shape=src.shape)
    return SparseMatrix(matrix.users, matrix.vocab, data)


def user_activity(matrix: SparseMatrix, cohort=None) -> np.ndarray:
    """Unique items per matrix row, counted from the cohort's events when given."""
    if cohort is None:
        return matrix.activity()
    prefixes = {k.split(":", 1)[0] for k in matrix.vocab.keys}
    counts = np.zeros(len(matrix.users), dtype=np.int64)
    row_of = {u: i for i, u in enumerate(matrix.users)}
    for m in Modality:
        if m.prefix not in prefixes:
            continue
        for u, c in cohort.unique_items(m).items():
            if u in row_of:
                counts[row_of[u]] += c
    return counts


def restrict_to_activity_range(matrix: SparseMatrix, cohort, lo: int, hi: int) -> SparseMatrix:
    """Rows whose unique-item count lies in ``[lo, hi]`` (inclusive)."""
    if lo > hi:
        raise ValueError("lo must be <= hi")
    act = user_activity(matrix, cohort)
    rows = np.flatnonzero((act >= lo) & (act <= hi))
    if rows.size == 0:
        raise EmptySelection(f"no user with activity in [{lo}, {hi}]")
    return matrix.take_rows(rows)


# triplet dump --------------------------------------------------------------

def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def dump_matrix(matrix: SparseMatrix, fh: TextIO, vocab_fh: TextIO, users_fh: TextIO | None = None) -> None:
    coo = matrix.data.tocoo()
    order = np.lexsort((coo.col, coo.row))
    n, p = matrix.shape
    fh.write(f"{n} {p} {coo.nnz}\n")
    for k in order:
        fh.write(f"{coo.row[k]} {coo.col[k]} {_fmt(coo.data[k])}\n")
    w = csv.writer(vocab_fh, lineterminator="\n")
    w.writerow(["column_id", "item_key"])
    for j, key in enumerate(matrix.vocab.keys):
        w.writerow([j, key])
    if users_fh is not None:
        w = csv.writer(users_fh, lineterminator="\n")
        w.writerow(["row_id", "user"])
        for i, u in enumerate(matrix.users):
            w.writerow([i, u])


def load_matrix(fh: TextIO, vocab_fh: TextIO, users_fh: TextIO | None = None) -> SparseMatrix:
    n, p, nnz = (int(x) for x in fh.readline().split())
    r = np.empty(nnz, dtype=np.int64)
    c = np.empty(nnz, dtype=np.int64)
    v = np.empty(nnz, dtype=np.float64)
    for k in range(nnz):
        a, b, val = fh.readline().split()
        r[k], c[k], v[k] = int(a), int(b), float(val)
    keys = [row["item_key"] for row in sorted(csv.DictReader(vocab_fh), key=lambda x: int(x["column_id"]))]
    if users_fh is not None:
        users = tuple(row["user"] for row in csv.DictReader(users_fh))
    else:
        users = tuple(str(i) for i in range(n))
    return SparseMatrix(users, Vocabulary(keys), _csr(r, c, v, (n, p)))
