"""Random forest classifier for sparse count features.

Trees are grown on bootstrap samples with inverse-frequency class weights and
per-node feature subsampling. Targets with more than two classes are handled
one-against-all: one binary forest per class.
"""

from __future__ import annotations

import io
import itertools
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import _tree_kernel as K
from .errors import EmptyNode, SingleClassTraining, VocabularyMismatch
from .feature_matrix import SparseMatrix

FORMAT_VERSION = 1

DEFAULT_GRID_VALUES = {
    "n_trees": (150, 300, 600),
    "max_features_multiplier": (0.5, 1.0, 2.0),
    "max_depth": (5, 7, 15),
    "criterion": ("entropy", "gini"),
}


def _class_weighted(counts) -> tuple[np.ndarray, float]:
    c = np.asarray(counts, dtype=float)
    if c.ndim != 1 or c.size == 0 or np.any(c < 0):
        raise ValueError("class counts must be a non-empty vector of non-negative numbers")
    total = c.sum()
    if total <= 0:
        raise EmptyNode("impurity of an empty node is undefined")
    return c, total


def gini_impurity(class_counts) -> float:
    c, total = _class_weighted(class_counts)
    p = c / total
    return float(1.0 - np.sum(p * p))


def entropy_impurity(class_counts) -> float:
    c, total = _class_weighted(class_counts)
    p = c[c > 0] / total
    return float(-np.sum(p * np.log2(p))) + 0.0


@dataclass(frozen=True)
class HyperParams:
    n_trees: int = 300
    max_features_multiplier: float = 1.0
    max_depth: int = 7
    min_samples_leaf: int = 5
    criterion: str = "gini"
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_features_multiplier <= 0:
            raise ValueError("max_features_multiplier must be > 0")
        if self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError("max_depth must be >= 0 and min_samples_leaf >= 1")
        if self.criterion not in ("gini", "entropy"):
            raise ValueError(f"criterion must be 'gini' or 'entropy', not {self.criterion!r}")

    def max_features(self, n_columns: int) -> int:
        k = math.ceil(self.max_features_multiplier * math.sqrt(n_columns))
        return max(1, min(k, max(n_columns, 1)))

    def in_default_grid(self) -> bool:
        return (self.min_samples_leaf == 5
                and all(getattr(self, k) in v for k, v in DEFAULT_GRID_VALUES.items()))

    def label(self) -> str:
        return (f"trees={self.n_trees};mf={self.max_features_multiplier:g};"
                f"depth={self.max_depth};leaf={self.min_samples_leaf};crit={self.criterion}")


def default_grid(seed: int = 0) -> list[HyperParams]:
    """The full 3x3x3x2 search space in canonical order."""
    v = DEFAULT_GRID_VALUES
    return [
        HyperParams(n_trees=t, max_features_multiplier=m, max_depth=d, criterion=c, seed=seed)
        for t, m, d, c in itertools.product(v["n_trees"], v["max_features_multiplier"],
                                            v["max_depth"], v["criterion"])
    ]


def median_params(seed: int = 0) -> HyperParams:
    """Middle value of every grid axis (gini for the two-valued criterion axis)."""
    return HyperParams(n_trees=300, max_features_multiplier=1.0, max_depth=7, criterion="gini", seed=seed)


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 63-bit child seed addressed by ``keys`` (order-free of execution)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf, ``x <= threshold`` goes left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    weighted_n: np.ndarray
    impurity: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X) -> np.ndarray:
        return _predict_packed(_pack([self]), _as_csr(X), self.value.shape[1],
                               int(self.feature.max(initial=-1)) + 1)

    def leaf_partition(self, X) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        feat, thr, left, right, _, roots = _pack([self])
        csr = _as_csr(X)
        return K.apply_trees(feat, thr, left, right, roots, csr.indptr, csr.indices,
                             csr.data, csr.shape[1])[:, 0]


@dataclass
class ForestModel:
    params: HyperParams
    classes: tuple
    n_features: int
    trees: list[Tree] = field(default_factory=list)
    members: list["ForestModel"] = field(default_factory=list)
    importances: np.ndarray | None = None
    class_weights: dict = field(default_factory=dict)
    vocabulary: tuple[str, ...] | None = None
    degenerate: bool = False
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def one_vs_all(self) -> bool:
        return bool(self.members)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def packed(self):
        if self._packed is None:
            self._packed = _pack(self.trees)
        return self._packed


def _as_csr(X) -> sp.csr_matrix:
    if isinstance(X, SparseMatrix):
        X = X.data
    if sp.issparse(X):
        csr = sp.csr_matrix(X, dtype=np.float64)
    else:
        csr = sp.csr_matrix(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    if not csr.has_sorted_indices:
        csr = csr.copy()
        csr.sort_indices()
    csr.indptr = csr.indptr.astype(np.int64, copy=False)
    csr.indices = csr.indices.astype(np.int64, copy=False)
    return csr


def _pack(trees: Sequence[Tree]):
    offsets = np.cumsum([0] + [t.n_nodes for t in trees])
    feature = np.concatenate([t.feature for t in trees]) if trees else np.zeros(0, np.int64)
    threshold = np.concatenate([t.threshold for t in trees]) if trees else np.zeros(0)
    left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(trees, offsets)]) \
        if trees else np.zeros(0, np.int64)
    right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(trees, offsets)]) \
        if trees else np.zeros(0, np.int64)
    value = np.concatenate([t.value for t in trees]) if trees else np.zeros((0, 2))
    roots = offsets[:-1].astype(np.int64)
    return feature, threshold, left, right, value, roots


def _predict_packed(packed, csr: sp.csr_matrix, n_classes: int, n_features: int) -> np.ndarray:
    feature, threshold, left, right, value, roots = packed
    if roots.size == 0:
        raise ValueError("model has no trees")
    return K.predict_trees(feature, threshold, left, right, value, roots,
                           csr.indptr, csr.indices, csr.data, max(n_features, 1))


def balanced_weights(y_idx: np.ndarray, n_classes: int, multiplicity: np.ndarray | None = None) -> np.ndarray:
    """Inverse-frequency class weights ``n / (K * n_c)``; absent classes get 0."""
    if multiplicity is None:
        counts = np.bincount(y_idx, minlength=n_classes).astype(float)
    else:
        counts = np.bincount(y_idx, weights=multiplicity, minlength=n_classes)
    total = counts.sum()
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, total / (n_classes * np.maximum(counts, 1e-300)), 0.0)
    return w


def _grow_one(args):
    (csc, csr, y_idx, n_classes, params, max_features, tree_seed) = args
    n = csr.shape[0]
    rng = np.random.default_rng(tree_seed)
    draws = rng.integers(0, n, size=n)
    mult = np.bincount(draws, minlength=n).astype(np.float64)
    rows = np.flatnonzero(mult).astype(np.int64)
    cw = balanced_weights(y_idx, n_classes, mult)
    w = mult * cw[y_idx]
    kernel_seed = int(rng.integers(0, 2**63 - 1))
    out = K.grow_tree(csc.indptr, csc.indices, csc.data, csr.indptr, csr.indices, csr.data,
                      y_idx, n_classes, rows, w, max_features, params.max_depth,
                      params.min_samples_leaf, K.GINI if params.criterion == "gini" else K.ENTROPY,
                      kernel_seed)
    tree = Tree(*out[:8])
    return tree, out[8]


def _train_binary(csr: sp.csr_matrix, y_idx: np.ndarray, params: HyperParams, n_jobs: int):
    csc = csr.tocsc()
    csc.sort_indices()
    csc.indptr = csc.indptr.astype(np.int64, copy=False)
    csc.indices = csc.indices.astype(np.int64, copy=False)
    p = csr.shape[1]
    max_features = params.max_features(p)
    seeds = [derive_seed(params.seed, t) for t in range(params.n_trees)]
    jobs = [(csc, csr, y_idx, 2, params, max_features, s) for s in seeds]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_grow_one, jobs))
    else:
        results = [_grow_one(j) for j in jobs]
    trees = [t for t, _ in results]
    total = np.zeros(p)
    for _, imp in results:
        s = imp.sum()
        if s > 0:
            total += imp / s
    if total.sum() > 0:
        total /= total.sum()
    return trees, total


def train_forest(X, y, params: HyperParams, n_jobs: int = 1) -> ForestModel:
    """Fit a forest on ``X`` (SparseMatrix, sparse or dense array) and labels ``y``.

    Two classes give one binary forest; more classes give one forest per class
    trained against the rest. A single class yields a constant, degenerate
    model and a SingleClassTraining warning.
    """
    csr = _as_csr(X)
    if csr.nnz and csr.data.min() < 0:
        raise ValueError("feature values must be non-negative counts")
    y = np.asarray(y)
    if y.shape[0] != csr.shape[0]:
        raise ValueError(f"{csr.shape[0]} rows but {y.shape[0]} labels")
    if y.shape[0] == 0:
        raise ValueError("cannot train on zero rows")
    vocab = X.vocab.keys if isinstance(X, SparseMatrix) else None
    classes = tuple(np.unique(y).tolist())
    p = csr.shape[1]

    if len(classes) < 2:
        warnings.warn("training labels contain a single class; returning a constant model",
                      SingleClassTraining, stacklevel=2)
        return ForestModel(params, classes, p, importances=np.zeros(p),
                           vocabulary=vocab, degenerate=True)

    if len(classes) == 2:
        y_idx = (y == classes[1]).astype(np.int64)
        trees, imp = _train_binary(csr, y_idx, params, n_jobs)
        cw = balanced_weights(y_idx, 2)
        return ForestModel(params, classes, p, trees=trees, importances=imp,
                           class_weights={c: float(w) for c, w in zip(classes, cw)},
                           vocabulary=vocab, degenerate=not imp.any())

    members = []
    for k, c in enumerate(classes):
        y_idx = (y == c).astype(np.int64)
        sub = replace(params, seed=derive_seed(params.seed, 1_000_003, k))
        trees, imp = _train_binary(csr, y_idx, sub, n_jobs)
        cw = balanced_weights(y_idx, 2)
        members.append(ForestModel(sub, ("__rest__", c), p, trees=trees, importances=imp,
                                   class_weights={"__rest__": float(cw[0]), c: float(cw[1])},
                                   vocabulary=vocab, degenerate=not imp.any()))
    imp = np.mean([m.importances for m in members], axis=0)
    if imp.sum() > 0:
        imp = imp / imp.sum()
    counts = np.array([np.sum(y == c) for c in classes], dtype=float)
    cw = counts.sum() / (len(classes) * counts)
    return ForestModel(params, classes, p, members=members, importances=imp,
                       class_weights={c: float(w) for c, w in zip(classes, cw)},
                       vocabulary=vocab, degenerate=not imp.any())


def _align(model: ForestModel, X) -> sp.csr_matrix:
    if isinstance(X, SparseMatrix) and model.vocabulary is not None:
        if X.vocab.keys == model.vocabulary:
            return _as_csr(X)
        index = {k: i for i, k in enumerate(model.vocabulary)}
        src = [j for j, k in enumerate(X.vocab.keys) if k in index]
        if not src and X.vocab.keys and model.vocabulary:
            raise VocabularyMismatch("input vocabulary shares no item with the model")
        dst = [index[X.vocab.keys[j]] for j in src]
        coo = X.data[:, src].tocoo() if src else sp.coo_matrix((X.shape[0], 0))
        cols = np.asarray(dst, dtype=np.int64)[coo.col] if src else coo.col
        return _as_csr(sp.csr_matrix((coo.data, (coo.row, cols)),
                                     shape=(X.shape[0], model.n_features)))
    csr = _as_csr(X)
    if csr.shape[1] != model.n_features:
        raise VocabularyMismatch(f"model expects {model.n_features} columns, got {csr.shape[1]}")
    return csr


def predict_proba(model: ForestModel, X) -> np.ndarray:
    """Class scores per row, columns in ``model.classes`` order; rows sum to 1."""
    csr = _align(model, X)
    n = csr.shape[0]
    if model.degenerate and not model.trees and not model.members:
        out = np.zeros((n, len(model.classes)))
        out[:, 0] = 1.0
        return out
    if not model.members:
        return _predict_packed(model.packed(), csr, 2, model.n_features)
    pos = np.column_stack([_predict_packed(m.packed(), csr, 2, m.n_features)[:, 1]
                           for m in model.members])
    total = pos.sum(axis=1, keepdims=True)
    k = len(model.classes)
    return np.where(total > 0, pos / np.where(total > 0, total, 1.0), 1.0 / k)


def feature_importances(model: ForestModel) -> list[tuple[str, float]]:
    """Columns ranked by mean decrease in impurity; ties by item key. Empty if degenerate."""
    if model.degenerate or model.importances is None or not model.importances.any():
        return []
    keys = model.vocabulary or tuple(str(j) for j in range(model.n_features))
    pairs = [(keys[j], float(v)) for j, v in enumerate(model.importances)]
    return sorted(pairs, key=lambda kv: (-kv[1], kv[0]))


# serialisation ---------------------------------------------------------------

_MAGIC = b"MORALLENS-FOREST\n"
_TREE_FIELDS = ("feature", "threshold", "left", "right", "value", "n_samples", "weighted_n", "impurity")


def _model_meta(model: ForestModel, arrays: list[np.ndarray], prefix: str) -> dict:
    meta = {
        "params": asdict(model.params),
        "classes": list(model.classes),
        "n_features": model.n_features,
        "class_weights": [[k, v] for k, v in model.class_weights.items()],
        "degenerate": model.degenerate,
        "importances": len(arrays),
    }
    arrays.append(np.asarray(model.importances if model.importances is not None
                             else np.zeros(model.n_features), dtype=np.float64))
    meta["trees"] = []
    for t in model.trees:
        ids = {}
        for f in _TREE_FIELDS:
            ids[f] = len(arrays)
            arrays.append(getattr(t, f))
        meta["trees"].append(ids)
    meta["members"] = [_model_meta(m, arrays, prefix) for m in model.members]
    return meta


def dumps_model(model: ForestModel) -> bytes:
    arrays: list[np.ndarray] = []
    meta = {"format": FORMAT_VERSION, "vocabulary": list(model.vocabulary) if model.vocabulary else None,
            "model": _model_meta(model, arrays, "")}
    specs = []
    offset = 0
    for a in arrays:
        a = np.ascontiguousarray(a)
        specs.append({"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    meta["arrays"] = specs
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(len(header).to_bytes(8, "little"))
    buf.write(header)
    for a in arrays:
        buf.write(np.ascontiguousarray(a).tobytes())
    return buf.getvalue()


def _model_from_meta(meta: dict, arrays: list[np.ndarray], vocab) -> ForestModel:
    trees = [Tree(*(arrays[ids[f]] for f in _TREE_FIELDS)) for ids in meta["trees"]]
    members = [_model_from_meta(m, arrays, vocab) for m in meta["members"]]
    return ForestModel(
        params=HyperParams(**meta["params"]),
        classes=tuple(meta["classes"]),
        n_features=meta["n_features"],
        trees=trees,
        members=members,
        importances=arrays[meta["importances"]],
        class_weights={k: v for k, v in meta["class_weights"]},
        vocabulary=vocab,
        degenerate=meta["degenerate"],
    )


def loads_model(blob: bytes) -> ForestModel:
    if not blob.startswith(_MAGIC):
        raise ValueError("not a forest model file")
    pos = len(_MAGIC)
    n = int.from_bytes(blob[pos:pos + 8], "little")
    pos += 8
    meta = json.loads(blob[pos:pos + n])
    pos += n
    if meta.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format {meta.get('format')}")
    arrays = []
    for s in meta["arrays"]:
        start = pos + s["offset"]
        a = np.frombuffer(blob[start:start + s["nbytes"]], dtype=np.dtype(s["dtype"]))
        arrays.append(a.reshape(s["shape"]).copy())
    vocab = tuple(meta["vocabulary"]) if meta["vocabulary"] is not None else None
    return _model_from_meta(meta["model"], arrays, vocab)


def save_model(model: ForestModel, path: str | Path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path: str | Path) -> ForestModel:
    return loads_model(Path(path).read_bytes())
