"""Command-line entry point.

Every subcommand writes into ``--out`` using a fixed layout::

    reports/      CSV and JSON reports
    models/       serialized forests
    curves/       plot-ready x/mean/std text files
    manifest.json run record (inputs, config hash, seed, outputs, errors)

Files are written atomically and only after all computation succeeded.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import itertools
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path


from . import __version__
from .errors import MoralLensError
from .forest import DEFAULT_GRID_VALUES, HyperParams, dumps_model, feature_importances, load_model, train_forest

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("morallens")


class UsageError(MoralLensError):
    pass


# output handling ----------------------------------------------------------------

def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Run:
    """Collects outputs in memory and commits them with a manifest."""

    def __init__(self, command: str, out: Path, seed: int | None, config_bytes: bytes | None):
        self.command = command
        self.out = out
        self.seed = seed
        self.config_hash = _digest(config_bytes) if config_bytes is not None else None
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, bytes] = {}
        self.errors: list[str] = []
        self.warnings: list[str] = []
        self.started = time.perf_counter()

    def add_input(self, path: Path) -> bytes:
        if not path.is_file():
            raise UsageError(f"input file not found: {path}")
        data = path.read_bytes()
        self.inputs[str(path)] = _digest(data)
        return data

    def emit(self, rel: str, data: str | bytes) -> None:
        self.outputs[rel] = data.encode("utf-8") if isinstance(data, str) else data

    def commit(self) -> int:
        for rel, data in sorted(self.outputs.items()):
            atomic_write(self.out / rel, data)
        manifest = {
            "tool": "morallens",
            "version": __version__,
            "command": self.command,
            "config_sha256": self.config_hash,
            "seed": self.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {rel: _digest(d) for rel, d in sorted(self.outputs.items())},
            "errors": self.errors,
            "warnings": self.warnings,
            "timing": {"elapsed_seconds": round(time.perf_counter() - self.started, 3)},
        }
        atomic_write(self.out / "manifest.json",
                     (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        return 0 if not self.errors else 1


# configuration -----------------------------------------------------------------

def read_config(path: str | None) -> tuple[dict, bytes | None, Path]:
    if path is None:
        return {}, None, Path.cwd()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    data = p.read_bytes()
    try:
        cfg = tomllib.loads(data.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as err:
        raise UsageError(f"{p}: {err}") from None
    return cfg, data, p.parent


def grid_from_config(section: dict | None) -> list[HyperParams]:
    """Cartesian product of the listed values in canonical axis order (defaults: full grid)."""
    section = section or {}
    axes = {}
    for k, default in DEFAULT_GRID_VALUES.items():
        v = section.get(k, default)
        axes[k] = list(v) if isinstance(v, (list, tuple)) else [v]
    leaf = section.get("min_samples_leaf", 5)
    return [HyperParams(n_trees=int(t), max_features_multiplier=float(m), max_depth=int(d),
                        criterion=str(c), min_samples_leaf=int(leaf))
            for t, m, d, c in itertools.product(*axes.values())]


def params_from_config(section: dict | None, default: HyperParams) -> HyperParams:
    if not section:
        return default
    return HyperParams(**{**asdict(default), **section})


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_cohort(cfg: dict, base: Path, run: Run):
    from .cohort_ingest import filter_min_activity, parse_behavior_log, parse_survey
    from .schema import Modality

    inputs = cfg.get("inputs", {})
    if "survey" not in inputs:
        raise UsageError("config [inputs] must name a survey file")
    logs = {Modality.parse(k): _resolve(base, v) for k, v in inputs.items()
            if k not in ("survey", "reference")}
    if not logs:
        raise UsageError("config [inputs] must name at least one behaviour log")
    survey_bytes = run.add_input(_resolve(base, inputs["survey"]))
    raw_logs = {m: run.add_input(p) for m, p in logs.items()}

    records, rejects = parse_survey(io.StringIO(survey_bytes.decode("utf-8")))
    for r in rejects:
        run.warnings.append(f"survey: {r}")
    events = []
    for m, data in raw_logs.items():
        ev, bad = parse_behavior_log(io.StringIO(data.decode("utf-8")), m)
        events.extend(ev)
        for b in bad[:100]:
            run.warnings.append(f"{m.value} log: {b}")
        if len(bad) > 100:
            run.warnings.append(f"{m.value} log: {len(bad) - 100} more malformed lines")
    section = cfg.get("cohort", {})
    modality = Modality.parse(section.get("modality", next(iter(logs)).value))
    return filter_min_activity(events, records, int(section.get("min_activity", 30)), modality)


def _views(cfg_section: dict, args) -> list[str]:
    from .schema import VIEWS
    if args.modality:
        return [args.modality]
    views = cfg_section.get("views", list(VIEWS))
    for v in views:
        if v not in VIEWS:
            raise UsageError(f"unknown view {v!r}; expected one of {list(VIEWS)}")
    return list(views)


def _require_seed(args) -> int:
    if args.seed is None:
        raise UsageError("this subcommand needs an explicit --seed")
    return int(args.seed)


# subcommands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import generate_cohort, spec_from_dict, spec_to_dict

    cfg, raw, _ = read_config(args.config)
    doc = dict(cfg.get("synth", cfg))
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = spec_from_dict(doc)
    run = Run("synth", Path(args.out), spec.seed, raw)
    result = generate_cohort(spec)
    tmp = Path(tempfile.mkdtemp())
    try:
        for p in result.write(tmp):
            run.emit(f"cohort/{p.name}", p.read_bytes())
    finally:
        for p in tmp.iterdir():
            p.unlink()
        tmp.rmdir()
    run.emit("reports/generator_spec.json", json.dumps(spec_to_dict(spec), indent=2, sort_keys=True) + "\n")
    return run.commit()


def cmd_score(args) -> int:
    from .cohort_ingest import parse_survey
    from .psychometrics import assemble_targets

    run = Run("score", Path(args.out), None, None)
    data = run.add_input(Path(args.survey))
    records, rejects = parse_survey(io.StringIO(data.decode("utf-8")))
    ts = assemble_targets(records)
    buf = io.StringIO()
    ts.write_csv(buf)
    run.emit("reports/targets.csv", buf.getvalue())
    rej = io.StringIO()
    rej.write("row,field,value\n")
    for r in rejects:
        rej.write(f"{r.row},{r.field},{'' if r.value is None else r.value}\n")
    run.emit("reports/rejects.csv", rej.getvalue())
    run.warnings.extend(f"untrainable target {t}" for t in sorted(ts.untrainable))
    return run.commit()


def cmd_evaluate(args) -> int:
    from .experiments import run_attribute_table

    cfg, raw, base = read_config(args.config)
    seed = _require_seed(args)
    run = Run("evaluate", Path(args.out), seed, raw)
    cohort = load_cohort(cfg, base, run)
    section = cfg.get("evaluate", {})
    targets = section.get("targets")
    if not targets:
        raise UsageError("config [evaluate] must list targets")
    table = run_attribute_table(
        cohort, targets, grid_from_config(cfg.get("grid")), seed, views=_views(section, args),
        outer_folds=int(section.get("outer_folds", 5)), inner_folds=int(section.get("inner_folds", 5)),
        n_jobs=args.jobs)
    run.emit("reports/table.csv", table.to_csv())
    run.emit("reports/table.json", table.to_json())
    run.emit("reports/folds.csv", table.fold_csv())
    for key, msg in sorted(table.failures.items()):
        run.warnings.append(f"{key[0]}/{key[1]}: {msg}")
    if not table.cells:
        run.errors.append("every table cell failed")
    return run.commit()


def cmd_train(args) -> int:
    from .experiments import view_matrix
    from .psychometrics import assemble_targets

    cfg, raw, base = read_config(args.config)
    seed = _require_seed(args)
    run = Run("train", Path(args.out), seed, raw)
    cohort = load_cohort(cfg, base, run)
    section = cfg.get("train", {})
    params = params_from_config(section.get("params"), HyperParams(seed=seed))
    params = HyperParams(**{**asdict(params), "seed": seed})
    ts = assemble_targets(cohort)
    for view in _views(section, args):
        X = view_matrix(cohort, view)
        for target in section.get("targets", []):
            rows, y = ts.column(target)
            model = train_forest(X.take_rows(rows), y.astype(str), params, n_jobs=args.jobs)
            name = f"{target}_{view}"
            run.emit(f"models/{name}.forest", dumps_model(model))
            run.emit(f"reports/importance_{name}.csv", _importance_csv(model))
    if not run.outputs:
        run.errors.append("no model trained: config [train] lists no targets")
    return run.commit()


def _importance_csv(model) -> str:
    lines = ["rank,item_key,importance"]
    for i, (k, v) in enumerate(feature_importances(model), start=1):
        lines.append(f"{i},{k},{v!r}")
    return "\n".join(lines) + "\n"


def cmd_importance(args) -> int:
    run = Run("importance", Path(args.out), None, None)
    run.add_input(Path(args.model))
    model = load_model(args.model)
    run.emit(f"reports/importance_{Path(args.model).stem}.csv", _importance_csv(model))
    if model.degenerate:
        run.warnings.append("model is degenerate (single-class training): no importances")
    return run.commit()


def cmd_experiment(args) -> int:
    from .experiments import (ActivityBinPlan, QualityStudyPlan, run_activity_bin_study,
                              run_quality_study, view_matrix)
    from .forest import median_params
    from .psychometrics import assemble_targets

    cfg, raw, base = read_config(args.config)
    seed = _require_seed(args)
    run = Run(f"experiment {args.study}", Path(args.out), seed, raw)
    cohort = load_cohort(cfg, base, run)
    ts = assemble_targets(cohort)
    section = dict(cfg.get(args.study, {}))
    view = args.modality or section.pop("view", "desktop")
    section.pop("view", None)
    X = view_matrix(cohort, view)
    params = params_from_config(section.pop("params", None), median_params())

    if args.study == "activity":
        target = section.pop("target", "gender")
        if "train_edges" in section:
            section["train_edges"] = tuple(section["train_edges"])
        plan = ActivityBinPlan(params=params, **section)
        rows, y = ts.column(target)
        report = run_activity_bin_study(X.take_rows(rows), y, plan, seed)
    else:
        targets = section.pop("targets", ["gender"])
        if "levels" in section:
            section["levels"] = tuple(section["levels"])
        if "modes" in section:
            section["modes"] = tuple(section["modes"])
        plan = QualityStudyPlan(params=params, **section)
        report = run_quality_study(X, {t: ts.labels[t] for t in targets}, plan, seed)
    run.emit(f"reports/{args.study}.json", report.to_json())
    run.emit(f"reports/{args.study}.csv", report.to_csv())
    for name, text in report.curve_files().items():
        run.emit(f"curves/{name}", text)
    return run.commit()


# argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="root seed for all randomness")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for tree training")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--modality", choices=["desktop", "mobile-web", "mobile-apps", "fused"],
                        help="restrict to one feature view")

    parser = argparse.ArgumentParser(prog="morallens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate a synthetic cohort").set_defaults(func=cmd_synth)
    p = sub.add_parser("score", parents=[common], help="score a survey file into target labels")
    p.add_argument("survey")
    p.set_defaults(func=cmd_score)
    sub.add_parser("train", parents=[common], help="train forests and save them").set_defaults(func=cmd_train)
    sub.add_parser("evaluate", parents=[common], help="nested cross-validation table").set_defaults(func=cmd_evaluate)
    p = sub.add_parser("experiment", parents=[common], help="activity-bin or quality study")
    p.add_argument("study", choices=["activity", "quality"])
    p.set_defaults(func=cmd_experiment)
    p = sub.add_parser("importance", parents=[common], help="ranked feature importances of a model")
    p.add_argument("model")
    p.set_defaults(func=cmd_importance)
    return parser


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("MORALLENS_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("morallens: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except MoralLensError as err:
        print(f"morallens: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError) as err:
        print(f"morallens: invalid configuration: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
