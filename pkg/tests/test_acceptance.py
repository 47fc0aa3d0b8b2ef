"""Acceptance criteria 1-11; each test reports one PASS/FAIL line in the terminal summary."""

import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from morallens import evaluation as ev
from morallens.cli import main
from morallens.evaluation import auroc, nested_cv, one_vs_all_eval, weighted_auroc
from morallens.experiments import (ActivityBinPlan, QualityStudyPlan, band_mean, band_std, isotonic_violation,
                                   run_activity_bin_study, run_quality_study)
from morallens.feature_matrix import build_matrix
from morallens.forest import HyperParams, entropy_impurity, feature_importances, gini_impurity, train_forest
from morallens.psychometrics import HIGH, LOW, VALUES, assemble_targets, binarize_at_median, default_keying, score_pvq
from morallens.synth import GeneratorSpec, SignalSpec, TargetSpec, bayes_reference_auroc, generate_cohort

GENDER = TargetSpec("gender", ("Female", "Male"), (0.5, 0.5))


def report(request, text):
    request.node.criterion_detail = text
    print(text)


def brute(s, y):
    pos, neg = s[y], s[~y]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (pos.size * neg.size)


def tied_instance(rng, n_max=50):
    n = int(rng.integers(2, n_max + 1))
    y = rng.random(n) < rng.uniform(0.2, 0.8)
    y[0], y[1] = True, False
    levels = int(rng.integers(1, max(2, n // 2) + 1))
    s = rng.integers(0, levels, size=n) / levels
    jitter = rng.random(n) < 0.3
    s[jitter] = rng.random(int(jitter.sum()))
    return s, y


@pytest.mark.criterion(1, "rank AUROC equals brute-force pairwise probability")
def test_c01_auroc_oracle(request):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst, ties = 0.0, 0
    for _ in range(500):
        s, y = tied_instance(rng)
        ties += int(np.unique(s).size < s.size)
        worst = max(worst, abs(auroc(s, y).auroc - brute(s, y)))
    elapsed = time.perf_counter() - t0
    report(request, f"500 instances, {ties} with ties, max |diff| {worst:.1e}, {elapsed:.2f}s")
    assert ties >= 400
    assert worst <= 1e-12
    assert elapsed < 5.0


@pytest.mark.criterion(2, "AUROC complement and monotone-invariance identities")
def test_c02_auroc_algebra(request):
    rng = np.random.default_rng(2)
    for _ in range(200):
        s, y = tied_instance(rng)
        r = auroc(s, y)
        whole = 2 * r.n_pos * r.n_neg
        # u2 is twice the Mann-Whitney statistic, so these identities are exact integer equalities
        assert r.u2 + auroc(s, ~y).u2 == whole
        assert r.u2 + auroc(-s, y).u2 == whole
        for f in (np.exp, lambda v: 3 * v ** 3 + v - 11, np.arctan):
            assert auroc(f(s), y).u2 == r.u2
        assert auroc(np.exp(s), y).auroc == r.auroc
        assert abs(1 - auroc(s, ~y).auroc - r.auroc) <= 2 ** -52
    report(request, "200 instances, integer-exact")


@pytest.mark.criterion(3, "weighted AUROC equals the prevalence-weighted mean")
def test_c03_weighted(request):
    rng = np.random.default_rng(3)
    for _ in range(100):
        k = int(rng.integers(1, 9))
        prev = rng.dirichlet(np.ones(k))
        vals = rng.random(k)
        table = [(f"c{i}", prev[i], vals[i]) for i in range(k)]
        direct = float(np.sum(prev * vals) / np.sum(prev))
        assert abs(weighted_auroc(table) - direct) <= 1e-12
        v = float(rng.random())
        assert weighted_auroc([(c, p, v) for c, p, _ in table]) == v
    report(request, "100 tables")


@pytest.mark.criterion(4, "impurity function values")
def test_c04_impurity(request):
    assert gini_impurity([2, 2]) == 0.5
    assert gini_impurity([4, 0]) == 0.0
    assert abs(gini_impurity([3, 1]) - 0.375) <= 1e-15
    assert entropy_impurity([1, 1]) == 1.0
    assert abs(entropy_impurity([3, 1]) - 0.811278) <= 1e-6
    report(request, f"entropy([3,1]) = {entropy_impurity([3, 1]):.9f}")


# planted-signal cohorts -------------------------------------------------------------

ACCEPT_GRID = [HyperParams(n_trees=150, max_features_multiplier=m, max_depth=7, criterion="gini")
               for m in (0.5, 1.0)]


def planted(seed, multiplier):
    return GeneratorSpec(
        n_users=2000, vocab_sizes={"desktop": 510}, targets=(GENDER,),
        signals=(SignalSpec("gender", "Male", n_items=10, multiplier=multiplier, rank_range=(20, 120)),),
        seed=seed)


def cohort_xy(spec):
    sc = generate_cohort(spec)
    # every generated user is kept so the target stays exactly balanced
    cohort = sc.cohort(1)
    X = build_matrix(cohort, "desktop")
    rows, y = assemble_targets(cohort).column("gender")
    return sc, X.take_rows(rows), y.astype(str)


@pytest.mark.criterion(5, "planted-signal recovery")
def test_c05_planted_signal(request):
    t0 = time.perf_counter()
    means, bayes, hits = [], [], []
    for seed in range(10):
        spec = planted(seed, 4.0)
        sc, X, y = cohort_xy(spec)
        assert X.shape == (2000, 510) and abs(np.mean(y == "Male") - 0.5) < 1e-9
        rep = nested_cv(X, y, ACCEPT_GRID, seed=seed, target="gender", modality="desktop")
        model = train_forest(X, y, HyperParams(n_trees=300, seed=seed))
        top20 = {k for k, _ in feature_importances(model)[:20]}
        means.append(rep.mean)
        bayes.append(bayes_reference_auroc(spec, "gender", 100_000))
        hits.append(len(top20 & sc.ledger.signal_keys("gender")))
    elapsed = time.perf_counter() - t0
    report(request, f"AUROC {min(means):.3f}-{max(means):.3f}, Bayes {min(bayes):.3f}-{max(bayes):.3f}, "
                    f"median top-20 hits {np.median(hits):.0f}, {elapsed:.0f}s")
    assert min(means) >= 0.85
    assert all(m <= b + 0.03 for m, b in zip(means, bayes))
    assert np.median(hits) >= 8
    assert elapsed < 600


@pytest.mark.criterion(6, "null control")
def test_c06_null(request):
    means = []
    for seed in range(10):
        _, X, y = cohort_xy(planted(100 + seed, 1.0))
        means.append(nested_cv(X, y, ACCEPT_GRID, seed=seed).mean)
    report(request, f"AUROC range {min(means):.3f}-{max(means):.3f}, mean {np.mean(means):.3f}")
    assert all(0.45 <= m <= 0.55 for m in means)


@pytest.mark.criterion(7, "activity-bin study: high-activity training wins, curves settle")
def test_c07_activity(request):
    spec = GeneratorSpec(
        n_users=3000, vocab_sizes={"desktop": 1500}, activity_mu=4.4, activity_sigma=1.3, targets=(GENDER,),
        signals=(SignalSpec("gender", "Male", n_items=20, multiplier=3.0, rank_range=(10, 300)),), seed=0)
    sc = generate_cohort(spec)
    cohort = sc.cohort(1)
    X = build_matrix(cohort, "desktop")
    rows, y = assemble_targets(cohort).column("gender")
    plan = ActivityBinPlan(params=HyperParams(n_trees=100, max_depth=7))
    rep = run_activity_bin_study(X.take_rows(rows), y, plan, seed=0)
    series = rep.series()
    low, high = series[0], series[-1]
    gap = band_mean(rep, high, 30, 100) - band_mean(rep, low, 30, 100)
    settled = {s: (band_std(rep, s, 30, 100), band_std(rep, s, 1, 30)) for s in (low, high)}
    report(request, f"top-bin minus bottom-bin {gap:.3f}; std [30,100] vs [1,30]: "
                    + ", ".join(f"{s} {a:.4f}<{b:.4f}" for s, (a, b) in settled.items()))
    assert gap >= 0.05
    for a, b in settled.values():
        assert a < b


@pytest.mark.criterion(8, "quality study: ranked curve monotone, random band wider")
def test_c08_quality(request):
    plan = QualityStudyPlan(params=HyperParams(n_trees=100, max_depth=7))
    top, rand, top_sd, rand_sd = [], [], [], []
    for seed in range(10):
        spec = GeneratorSpec(
            n_users=600, vocab_sizes={"desktop": 1000}, activity_mu=6.8, activity_sigma=0.5, targets=(GENDER,),
            signals=(SignalSpec("gender", "Male", n_items=20, multiplier=3.0, rank_range=(20, 400)),), seed=seed)
        sc = generate_cohort(spec)
        cohort = sc.cohort(30)
        X = build_matrix(cohort, "desktop")
        ts = assemble_targets(cohort)
        rep = run_quality_study(X, {"gender": ts.labels["gender"]}, plan, seed=seed)
        k, m, sd = rep.curve("gender:top-k")
        _, mr, sdr = rep.curve("gender:random-k")
        top.append(m)
        rand.append(mr)
        top_sd.append(sd[k <= 40].mean())
        rand_sd.append(sdr[k <= 40].mean())
    mean_curve = np.mean(top, axis=0)
    violation = isotonic_violation(mean_curve)
    report(request, f"top-k violation {violation:.4f} (per-seed max "
                    f"{max(isotonic_violation(c) for c in top):.3f}); band k<=40: "
                    f"random {np.mean(rand_sd):.4f} vs ranked {np.mean(top_sd):.4f}")
    assert violation <= 0.02
    assert np.mean(rand_sd) > np.mean(top_sd)


# determinism ----------------------------------------------------------------------

SYNTH_TOML = """
n_users = 300
n_days = 4
[vocabulary]
desktop = 200
mobile-web = 120
mobile-apps = 60
[[targets]]
name = "gender"
labels = ["Female", "Male"]
marginals = [0.5, 0.5]
[[signals]]
target = "gender"
label = "Male"
n_items = 8
rank_range = [5, 80]
"""

RUN_TOML = """
[inputs]
survey = "syn/cohort/survey.csv"
desktop = "syn/cohort/desktop.jsonl"
mobile-web = "syn/cohort/mobile-web.jsonl"
mobile-apps = "syn/cohort/mobile-apps.jsonl"
[cohort]
min_activity = 20
[grid]
n_trees = [20, 40]
max_features_multiplier = 1.0
max_depth = 5
criterion = "gini"
[evaluate]
targets = ["gender", "political_party", "care"]
[train]
targets = ["gender", "age"]
views = ["desktop", "fused"]
[train.params]
n_trees = 30
[activity]
target = "gender"
n_train_bins = 3
n_test_bins = 12
first_edge = 25
[activity.params]
n_trees = 20
[quality]
targets = ["gender", "care"]
active_threshold = 40
levels = [3, 15, 40]
[quality.params]
n_trees = 20
"""


def _snapshot(out: Path) -> dict:
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "manifest.json":
                doc = json.loads(data)
                doc.pop("timing")
                data = json.dumps(doc, sort_keys=True).encode()
            files[str(p.relative_to(out))] = data
    return files


@pytest.mark.criterion(9, "every subcommand is byte-identical on rerun")
def test_c09_determinism(request, tmp_path):
    (tmp_path / "synth.toml").write_text(SYNTH_TOML, encoding="utf-8")
    (tmp_path / "run.toml").write_text(RUN_TOML, encoding="utf-8")
    assert main(["synth", "--config", str(tmp_path / "synth.toml"), "--seed", "5", "--out", str(tmp_path / "syn")]) == 0
    cfg = str(tmp_path / "run.toml")
    commands = {
        "synth": ["synth", "--config", str(tmp_path / "synth.toml"), "--seed", "5"],
        "score": ["score", str(tmp_path / "syn/cohort/survey.csv")],
        "evaluate": ["evaluate", "--config", cfg, "--seed", "7"],
        "train": ["train", "--config", cfg, "--seed", "7"],
        "activity": ["experiment", "activity", "--config", cfg, "--seed", "7"],
        "quality": ["experiment", "quality", "--config", cfg, "--seed", "7"],
    }
    counted = 0
    for name, argv in commands.items():
        snaps = []
        for rep in range(2):
            out = tmp_path / f"{name}{rep}"
            assert main([*argv, "--out", str(out)]) == 0, name
            snaps.append(_snapshot(out))
        assert snaps[0] == snaps[1], name
        counted += len(snaps[0])
    model = tmp_path / "train0/models/gender_fused.forest"
    snaps = []
    for rep in range(2):
        out = tmp_path / f"imp{rep}"
        assert main(["importance", str(model), "--out", str(out)]) == 0
        snaps.append(_snapshot(out))
    assert snaps[0] == snaps[1]
    counted += len(snaps[0])
    jobs = tmp_path / "evaluate_jobs"
    assert main([*commands["evaluate"], "--jobs", "3", "--out", str(jobs)]) == 0
    assert _snapshot(jobs) == _snapshot(tmp_path / "evaluate0")
    report(request, f"7 subcommands, {counted} files compared, --jobs 3 identical")


@pytest.mark.criterion(10, "psychometric and one-vs-all reduction checks")
def test_c10_psychometrics(request):
    rng = np.random.default_rng(10)
    keying = default_keying()
    worst = 0.0
    for _ in range(2000):
        items = {v: rng.integers(1, 8, len(keying.pvq_items_for(v))) for v in VALUES}
        worst = max(worst, abs(sum(score_pvq(items).adjusted.values())))
    assert worst <= 1e-12

    # continuous scores: at most one sample sits on the median
    for n in (10_000, 9_999, 7_633):
        x = rng.normal(size=n)
        labels, thr = binarize_at_median(x)
        assert abs(np.sum(labels == HIGH) - np.sum(labels == LOW)) <= np.sum(x == thr)
    # tied scores: ties go to Low, and the strictly-above/below split is bounded by the ties
    for _ in range(500):
        x = rng.integers(0, int(rng.integers(2, 12)), size=int(rng.integers(2, 300))).astype(float)
        if np.all(x == x[0]):
            continue
        labels, thr = binarize_at_median(x)
        ties = int(np.sum(x == thr))
        assert abs(int(np.sum(x > thr)) - int(np.sum(x < thr))) <= ties
        assert np.sum(labels == LOW) == np.sum(x <= thr)

    spec = GeneratorSpec(n_users=400, vocab_sizes={"desktop": 200}, n_days=5, targets=(GENDER,),
                         signals=(SignalSpec("gender", "Male", n_items=8, multiplier=2.0, rank_range=(5, 80)),),
                         seed=10)
    sc = generate_cohort(spec)
    cohort = sc.cohort(30)
    X = build_matrix(cohort, "desktop")
    rows, y = assemble_targets(cohort).column("gender")
    grid = [HyperParams(n_trees=30, max_depth=5), HyperParams(n_trees=30, max_depth=3)]
    a = one_vs_all_eval(X.take_rows(rows), y, grid, seed=4)
    b = nested_cv(X.take_rows(rows), y, grid, seed=4)
    diff = float(np.max(np.abs(a.fold_aurocs - b.fold_aurocs)))
    report(request, f"max |sum adjusted| {worst:.1e}; one-vs-all vs binary max diff {diff:.1e}")
    assert diff <= 1e-12


@pytest.mark.criterion(11, "outer test folds partition the rows on every run")
def test_c11_fold_hygiene(request, monkeypatch):
    seen = []
    real = ev.check_partition

    def spy(folds, n):
        union = np.concatenate(folds)
        seen.append((n, union.size == n and np.array_equal(np.sort(union), np.arange(n))))
        return real(folds, n)

    monkeypatch.setattr(ev, "check_partition", spy)
    rng = np.random.default_rng(11)
    grid = [HyperParams(n_trees=5, max_depth=3)]
    runs = 0
    for n, k in itertools.product((30, 53, 101), (2, 3, 4)):
        X = rng.poisson(1.0, size=(n, 8)).astype(float)
        y = rng.integers(0, k, size=n)
        y[:2 * k] = np.repeat(np.arange(k), 2)
        if k == 2:
            nested_cv(X, y, grid, seed=n)
            runs += 1
        else:
            one_vs_all_eval(X, y, grid, seed=n)
            runs += k
    assert len(seen) == runs and all(ok for _, ok in seen)

    def overlapping(y, k, seed):
        idx = np.arange(len(y))
        return [idx[f::k] for f in range(k - 1)] + [idx[: len(y) // k + 1]]

    monkeypatch.setattr(ev, "stratified_folds", overlapping)
    with pytest.raises(AssertionError):
        nested_cv(rng.poisson(1.0, size=(40, 5)).astype(float), np.arange(40) % 2, grid, seed=0)
    report(request, f"{runs} nested runs checked; corrupted folds rejected")
