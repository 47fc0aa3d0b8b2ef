import json

import numpy as np
import pytest

from morallens.errors import NoActiveUsers, UnfillableCap
from morallens.experiments import (ActivityBinPlan, QualityStudyPlan, held_out_bin_edges,
                                   isotonic_violation, run_activity_bin_study, run_attribute_table,
                                   run_quality_study, train_bin_edges, view_matrix, write_curves)
from morallens.feature_matrix import from_counts
from morallens.forest import HyperParams
from morallens.psychometrics import MORAL_TARGETS, assemble_targets
from morallens.synth import GeneratorSpec, SignalSpec, generate_cohort

from conftest import GENDER

FAST = [HyperParams(n_trees=30, max_depth=5)]


def test_fused_view_wins(mobile_synth):
    cohort = mobile_synth.cohort(1, "mobile-web")
    table = run_attribute_table(cohort, ["gender"], FAST, seed=1)
    assert table.best_view("gender") == "fused"
    means = {v: table.cells[("gender", v)].mean for v in table.views}
    assert means["desktop"] < 0.65 < means["fused"]
    rows = table.to_csv().splitlines()
    assert rows[0] == "target,view,mean,std,best,status" and len(rows) == 1 + 4


def test_missing_mobile_is_absent(small_synth):
    cohort = small_synth.cohort(30)
    table = run_attribute_table(cohort, ["gender"], FAST, seed=1)
    assert table.status("gender", "desktop") == "ok"
    for v in ("mobile-web", "mobile-apps", "fused"):
        assert table.status("gender", v).startswith("absent")
    assert json.loads(table.to_json())["best"]["gender"] == "desktop"


def test_six_moral_rows(small_synth):
    cohort = small_synth.cohort(30)
    table = run_attribute_table(cohort, list(MORAL_TARGETS), FAST, seed=2, views=["desktop"])
    rows = [r.split(",") for r in table.to_csv().splitlines()[1:]]
    assert [r[0] for r in rows] == ["care", "fairness", "loyalty", "authority", "purity", "individualist_binding"]
    assert all(r[5] == "ok" for r in rows)
    assert len(table.fold_csv().splitlines()) == 1 + 6 * 7


def test_unknown_target_recorded(small_synth):
    table = run_attribute_table(small_synth.cohort(30), ["shoe_size"], FAST, seed=0, views=["desktop"])
    assert table.status("shoe_size", "desktop").startswith("failed")


def test_bin_edges():
    act = np.array([1, 5, 19, 40, 400])
    edges = train_bin_edges(act, ActivityBinPlan(n_train_bins=5))
    assert edges[0] == 19 and edges[-1] == 400 and np.all(np.diff(edges) > 0)
    t = held_out_bin_edges(np.array([1, 1002]), 100)
    assert t[0] == pytest.approx(1 + 1001 / 100) and t[-1] == 1002 and t.size == 100


@pytest.fixture(scope="module")
def activity_data():
    spec = GeneratorSpec(n_users=700, vocab_sizes={"desktop": 400}, activity_mu=4.2, activity_sigma=1.1,
                         n_days=3, targets=(GENDER,),
                         signals=(SignalSpec("gender", "Male", n_items=15, multiplier=3.0, rank_range=(5, 150)),),
                         seed=13)
    sc = generate_cohort(spec)
    m = sc.ledger.counts[sc.spec.modalities[0]]
    keep = np.flatnonzero(m.activity() > 0)
    return m.take_rows(keep), sc.ledger.labels["gender"][keep]


PLAN = ActivityBinPlan(n_train_bins=4, n_test_bins=20, params=HyperParams(n_trees=30, max_depth=5))


def test_activity_study_shape(activity_data):
    m, y = activity_data
    rep = run_activity_bin_study(m, y, PLAN, seed=3)
    assert rep.series() == ["train01", "train02", "train03", "train04"]
    assert len(rep.points) == 4 * 20
    trained = [r for r in rep.tables["train"] if r["status"] == "trained"]
    assert len({(r["Female"], r["Male"]) for r in trained}) == 1
    assert rep.meta["caps"] == {"Female": trained[0]["Female"], "Male": trained[0]["Male"]}
    assert rep.to_json() == run_activity_bin_study(m, y, PLAN, seed=3).to_json()


def test_activity_cap_unfillable(activity_data):
    m, y = activity_data
    with pytest.raises(UnfillableCap) as info:
        run_activity_bin_study(m, y, ActivityBinPlan(n_train_bins=4, caps={"Female": 10_000, "Male": 5}), seed=0)
    assert info.value.bin_index == 1


def test_identical_activity_single_bin():
    rng = np.random.default_rng(0)
    users = tuple(f"u{i}" for i in range(120))
    rows = [{f"web:s{j}": 1 + int(rng.integers(0, 3)) for j in rng.choice(40, 10, replace=False)} for _ in users]
    m = from_counts(users, rows)
    y = np.array(["Female", "Male"] * 60)
    rep = run_activity_bin_study(m, y, ActivityBinPlan(n_train_bins=5, n_test_bins=4,
                                                       params=HyperParams(n_trees=10)), seed=0)
    status = [r["status"] for r in rep.tables["train"]]
    assert status.count("trained") == 1 and status.count("empty") == 4


@pytest.fixture(scope="module")
def quality_data():
    spec = GeneratorSpec(n_users=250, vocab_sizes={"desktop": 600}, activity_mu=6.8, activity_sigma=0.4,
                         n_days=3, targets=(GENDER,),
                         signals=(SignalSpec("gender", "Male", n_items=15, multiplier=3.0, rank_range=(10, 300)),),
                         seed=21)
    sc = generate_cohort(spec)
    m = sc.ledger.counts[sc.spec.modalities[0]]
    return m, {"gender": sc.ledger.labels["gender"]}


QPLAN = QualityStudyPlan(active_threshold=100, levels=(5, 20, 60), params=HyperParams(n_trees=30, max_depth=5))


def test_quality_shape(quality_data, tmp_path):
    m, t = quality_data
    rep = run_quality_study(m, t, QPLAN, seed=1)
    assert len(rep.points) == 3 * 2
    assert rep.series() == ["gender:top-k", "gender:random-k"]
    assert rep.to_csv() == run_quality_study(m, t, QPLAN, seed=1).to_csv()
    paths = write_curves(rep, tmp_path)
    assert sorted(p.name for p in paths) == ["quality_gender_random-k.dat", "quality_gender_top-k.dat"]
    assert paths[0].read_text().splitlines()[0] == "# x mean std"


def test_quality_saturation(quality_data):
    m, t = quality_data
    top = int(m.activity().max())
    plan = QualityStudyPlan(active_threshold=100, levels=(top,), params=HyperParams(n_trees=20))
    rep = run_quality_study(m, t, plan, seed=5)
    (_, a, _), (_, b, _) = rep.curve("gender:top-k"), rep.curve("gender:random-k")
    assert a.tolist() == b.tolist()


def test_quality_no_active(quality_data):
    m, t = quality_data
    with pytest.raises(NoActiveUsers):
        run_quality_study(m, t, QualityStudyPlan(active_threshold=10**6), seed=0)


def test_isotonic_violation():
    assert isotonic_violation([0.5, 0.6, 0.58, 0.7]) == pytest.approx(0.02)
    assert isotonic_violation([0.1, 0.2, 0.3]) == 0.0


def test_view_matrix_fused(mobile_synth):
    cohort = mobile_synth.cohort(1, "mobile-web")
    f = view_matrix(cohort, "fused")
    assert {k.split(":")[0] for k in f.vocab.keys} == {"web", "app"}
    assert f.users == tuple(cohort.users)
    ts = assemble_targets(cohort)
    assert len(ts) == len(f.users)
