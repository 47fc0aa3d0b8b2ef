"""How much browsing data does a user need? Two curve studies on synthetic users.

Run: python3 demos/activity_and_quality.py [out_dir]
Writes plot-ready .dat files (x, mean, std) into out_dir (default demo_curves/).
"""

import sys

from morallens.experiments import (ActivityBinPlan, QualityStudyPlan, band_mean, band_std,
                                   run_activity_bin_study, run_quality_study, write_curves)
from morallens.feature_matrix import build_matrix
from morallens.forest import HyperParams
from morallens.psychometrics import assemble_targets
from morallens.synth import GeneratorSpec, SignalSpec, TargetSpec, generate_cohort

out = sys.argv[1] if len(sys.argv) > 1 else "demo_curves"
gender = TargetSpec("gender", ("Female", "Male"), (0.5, 0.5))
params = HyperParams(n_trees=60, max_depth=7)

# Activity study: wide spread of activity, so training bins range from light to heavy users.
spec = GeneratorSpec(n_users=2000, vocab_sizes={"desktop": 1200}, activity_mu=4.4, activity_sigma=1.3,
                     targets=(gender,),
                     signals=(SignalSpec("gender", "Male", n_items=20, multiplier=3.0, rank_range=(10, 300)),),
                     seed=1)
cohort = generate_cohort(spec).cohort(min_activity=1)
X = build_matrix(cohort, "desktop")
rows, y = assemble_targets(cohort).column("gender")
plan = ActivityBinPlan(n_train_bins=8, n_test_bins=50, params=params)
activity = run_activity_bin_study(X.take_rows(rows), y, plan, seed=1)
print(f"caps per class: {activity.meta['caps']}")
print("training bin edge -> mean AUROC on test bins 15..50, std over 15..50 vs 1..15")
for s, edge in zip(activity.series(), activity.meta["train_edges"]):
    print(f"  {s} (<= {edge:6.0f} sites): {band_mean(activity, s, 15, 50):.3f}  "
          f"{band_std(activity, s, 15, 50):.4f} vs {band_std(activity, s, 1, 15):.4f}")

# Quality study: only heavy users, keep k sites per training user, ranked or at random.
spec = GeneratorSpec(n_users=400, vocab_sizes={"desktop": 1000}, activity_mu=6.8, activity_sigma=0.5,
                     targets=(gender,),
                     signals=(SignalSpec("gender", "Male", n_items=20, multiplier=3.0, rank_range=(20, 400)),),
                     seed=2)
cohort = generate_cohort(spec).cohort(min_activity=30)
X = build_matrix(cohort, "desktop")
labels = assemble_targets(cohort).labels["gender"]
quality = run_quality_study(X, {"gender": labels}, QualityStudyPlan(levels=(1, 5, 10, 20, 40, 80, 160),
                                                                    params=params), seed=2)
print(f"active users: {quality.meta['active_users']}")
print("   k   top-k (std)       random-k (std)")
(k, m1, s1), (_, m2, s2) = quality.curve("gender:top-k"), quality.curve("gender:random-k")
for row in zip(k, m1, s1, m2, s2):
    print("{:4.0f}   {:.3f} ({:.3f})    {:.3f} ({:.3f})".format(*row))

paths = write_curves(activity, out) + write_curves(quality, out)
print(f"wrote {len(paths)} curve files to {out}/")
