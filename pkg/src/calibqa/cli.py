"""Command-line entry point.

Subcommands: synth, validate, train, eval, rerank, project. Settings come
from an INI config file ([data], [features], [learner], [protocol], [run]
sections); every flag overrides its config key. All randomness flows from
config seeds, and outputs are written canonically, so reruns with identical
inputs are byte-identical.

Exit codes: 0 ok, 2 input error, 3 compatibility (fingerprint/version)
error, 4 metric undefined.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .classifiers import (
    CalibratorError,
    CalibratorModel,
    FingerprintMismatchError,
    GbtGrid,
    GbtHyperparams,
    ModelVersionError,
    RunProtocol,
    gbt_learner,
    grid_search,
    run_protocol,
    train_gbt,
    train_knn,
    train_logistic,
)
from .features import FeatureConfig, FeatureError, feature_matrix, pool_mean
from .gbt import GbtError
from .metrics import UndefinedMetricError
from .records import (
    InterchangeError,
    TaskKind,
    collect_file_errors,
    read_records,
    split_records,
    write_records,
)
from .rerank import RerankError, rerank_eval, write_rerank_results
from .synth import SynthError, SynthSpec, generate

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_COMPAT = 3
EXIT_METRIC = 4


@dataclass
class RunConfig:
    """Resolved settings for one command: config file values with flag overrides."""

    records: str | None = None
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    parts: tuple[str, ...] = ("kamath17",)
    pooling: str = "mean"
    hidden_dim: int = 0
    per_candidate: bool = False
    learner: str = "gbt"
    hp: GbtHyperparams = field(default_factory=GbtHyperparams)
    grid: bool = False
    knn_k: int = 5
    logistic_l2: float = 1.0
    logistic_max_iters: int = 100
    logistic_tol: float = 1e-6
    protocol: RunProtocol = field(default_factory=RunProtocol)
    fractions: tuple[float, float, float] = (0.4, 0.1, 0.5)
    seed: int = 0
    threshold: float = 0.5
    strict: bool = False
    em_strict: bool = False
    top_n: int = 1000
    jobs: int = 1
    output_dir: str = "out"

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig.from_part_names(
            self.parts, pooling=self.pooling, hidden_dim=self.hidden_dim
        )


def _get(cp: configparser.ConfigParser, section: str, key: str, fallback=None):
    if cp.has_option(section, key):
        return cp.get(section, key)
    return fallback


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def load_run_config(args) -> RunConfig:
    cp = configparser.ConfigParser()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cp.read(path)

    rc = RunConfig()
    rc.records = _get(cp, "data", "records")
    rc.train = _get(cp, "data", "train")
    rc.dev = _get(cp, "data", "dev")
    rc.test = _get(cp, "data", "test")

    parts = _get(cp, "features", "parts")
    if parts:
        rc.parts = tuple(p.strip() for p in parts.split(","))
    rc.pooling = _get(cp, "features", "pooling", rc.pooling)
    rc.hidden_dim = int(_get(cp, "features", "hidden_dim", rc.hidden_dim))
    rc.per_candidate = _bool(_get(cp, "features", "per_candidate", rc.per_candidate))

    rc.learner = _get(cp, "learner", "kind", rc.learner)
    colsample = float(_get(cp, "learner", "colsample", 1.0))
    rc.hp = GbtHyperparams(
        n_estimators=int(_get(cp, "learner", "n_estimators", 100)),
        learning_rate=float(_get(cp, "learner", "learning_rate", 0.1)),
        colsample_by_tree=colsample,
        colsample_by_level=colsample,
        colsample_by_node=colsample,
        max_depth=int(_get(cp, "learner", "max_depth", 6)),
        l2_leaf_reg=float(_get(cp, "learner", "l2_leaf_reg", 1.0)),
        min_child_weight=float(_get(cp, "learner", "min_child_weight", 1.0)),
        seed=int(_get(cp, "learner", "seed", 0)),
    )
    rc.grid = _bool(_get(cp, "learner", "grid", False))
    rc.knn_k = int(_get(cp, "learner", "knn_k", rc.knn_k))
    rc.logistic_l2 = float(_get(cp, "learner", "logistic_l2", rc.logistic_l2))
    rc.logistic_max_iters = int(
        _get(cp, "learner", "logistic_max_iters", rc.logistic_max_iters)
    )
    rc.logistic_tol = float(_get(cp, "learner", "logistic_tol", rc.logistic_tol))

    n_runs = int(_get(cp, "protocol", "n_runs", 5))
    seeds_text = _get(cp, "protocol", "seeds")
    seeds = _ints(seeds_text) if seeds_text else tuple(range(1, n_runs + 1))
    rc.protocol = RunProtocol(
        n_runs=n_runs,
        seeds=seeds,
        resplit_each_run=_bool(_get(cp, "protocol", "resplit_each_run", True)),
    )
    fractions = _get(cp, "protocol", "fractions")
    if fractions:
        rc.fractions = _floats(fractions)

    rc.seed = int(_get(cp, "run", "seed", rc.seed))
    rc.threshold = float(_get(cp, "run", "threshold", rc.threshold))
    rc.strict = _bool(_get(cp, "run", "strict", rc.strict))
    rc.em_strict = _get(cp, "run", "em_mode", "normalized") == "strict"
    rc.top_n = int(_get(cp, "run", "top_n", rc.top_n))
    rc.jobs = int(_get(cp, "run", "jobs", os.environ.get("CALIBQA_JOBS", 1)))
    rc.output_dir = _get(cp, "run", "output_dir", rc.output_dir)

    # flag overrides
    for flag, attr in (
        ("records", "records"),
        ("train", "train"),
        ("dev", "dev"),
        ("test", "test"),
        ("pooling", "pooling"),
        ("learner", "learner"),
        ("output_dir", "output_dir"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(rc, attr, value)
    if getattr(args, "parts", None):
        rc.parts = tuple(p.strip() for p in args.parts.split(","))
    for flag, attr, cast in (
        ("hidden_dim", "hidden_dim", int),
        ("seed", "seed", int),
        ("threshold", "threshold", float),
        ("top_n", "top_n", int),
        ("jobs", "jobs", int),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(rc, attr, cast(value))
    if getattr(args, "strict", False):
        rc.strict = True
    if getattr(args, "em_mode", None):
        rc.em_strict = args.em_mode == "strict"
    if getattr(args, "grid", False):
        rc.grid = True
    if getattr(args, "per_candidate", False):
        rc.per_candidate = True
    if getattr(args, "n_runs", None) is not None:
        seeds = tuple(range(1, args.n_runs + 1))
        rc.protocol = RunProtocol(
            n_runs=args.n_runs, seeds=seeds, resplit_each_run=rc.protocol.resplit_each_run
        )
    if getattr(args, "seeds", None):
        seeds = _ints(args.seeds)
        rc.protocol = RunProtocol(
            n_runs=len(seeds), seeds=seeds, resplit_each_run=rc.protocol.resplit_each_run
        )
    return rc


def _read_all(path, rc: RunConfig):
    if path is None:
        raise FileNotFoundError("no input records path given (config [data] or flag)")
    return list(read_records(path, strict=rc.strict, em_strict=rc.em_strict))


def _train_dev(rc: RunConfig):
    """Explicit train/dev files, or an internal split of [data] records."""
    if rc.train:
        train = _read_all(rc.train, rc)
        dev = _read_all(rc.dev, rc) if rc.dev else []
        return train, dev
    records = _read_all(rc.records, rc)
    train, dev, _ = split_records(records, rc.fractions, seed=rc.seed)
    return train, dev


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=False))
        fh.write("\n")


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _report_text(report: metrics.EvalReport) -> str:
    lines = [f"n_examples {report.n_examples}"]
    for name in metrics.EvalReport.METRIC_NAMES:
        value = getattr(report, name)
        if value is not None:
            lines.append(f"{name} {100 * value:.1f}")
    return "\n".join(lines) + "\n"


def _aggregate_text(agg: metrics.AggregateReport) -> str:
    lines = [f"n_runs {agg.n_runs}"]
    for name in metrics.EvalReport.METRIC_NAMES:
        if name in agg.stats:
            lines.append(f"{name} {agg.formatted(name)}")
    return "\n".join(lines) + "\n"


def _train_model(rc: RunConfig, train_fm, dev_fm) -> tuple[CalibratorModel, dict]:
    """Train per the learner settings; returns (model, training summary)."""
    info: dict = {"learner": rc.learner}
    cfg = rc.feature_config()
    if rc.learner == "gbt":
        hp = rc.hp
        if rc.grid:
            result = grid_search(
                train_fm, dev_fm, GbtGrid(), base=hp,
                feature_config=cfg, threshold=rc.threshold, jobs=rc.jobs,
            )
            hp = result.best
            info["grid_best_dev_accuracy"] = result.best_dev_accuracy
        info["hyperparams"] = hp.to_dict()
        model = train_gbt(train_fm.values, train_fm.labels, hp, cfg, rc.threshold)
    elif rc.learner == "logistic":
        info["hyperparams"] = {
            "l2": rc.logistic_l2,
            "max_iters": rc.logistic_max_iters,
            "tol": rc.logistic_tol,
        }
        model = train_logistic(
            train_fm.values, train_fm.labels,
            l2=rc.logistic_l2, max_iters=rc.logistic_max_iters, tol=rc.logistic_tol,
            feature_config=cfg, decision_threshold=rc.threshold,
        )
    elif rc.learner == "knn":
        info["hyperparams"] = {"k": rc.knn_k}
        model = train_knn(
            train_fm.values, train_fm.labels, k=rc.knn_k,
            feature_config=cfg, decision_threshold=rc.threshold,
        )
    else:
        raise ValueError(f"unknown learner kind {rc.learner!r}")
    return model, info


def _make_learner(rc: RunConfig, cfg: FeatureConfig):
    if rc.learner == "gbt":
        return gbt_learner(rc.hp, cfg, rc.threshold, grid=GbtGrid() if rc.grid else None)
    if rc.learner == "logistic":
        def learn_logistic(train_fm, dev_fm, seed):
            return train_logistic(
                train_fm.values, train_fm.labels,
                l2=rc.logistic_l2, max_iters=rc.logistic_max_iters, tol=rc.logistic_tol,
                feature_config=cfg, decision_threshold=rc.threshold,
            )
        return learn_logistic
    if rc.learner == "knn":
        def learn_knn(train_fm, dev_fm, seed):
            return train_knn(
                train_fm.values, train_fm.labels, k=rc.knn_k,
                feature_config=cfg, decision_threshold=rc.threshold,
            )
        return learn_knn
    raise ValueError(f"unknown learner kind {rc.learner!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_examples=args.n,
        m=args.hidden_dim if args.hidden_dim is not None else 16,
        score_informativeness=args.score_informativeness,
        embedding_informativeness=args.embedding_informativeness,
        candidates_per_example=args.candidates,
        passages_per_example=args.passages,
        noise_std=args.noise_std,
        seed=args.seed if args.seed is not None else 0,
        task_kind=TaskKind(args.task_kind),
        label_margin=args.label_margin,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    count = write_records(generate(spec), args.out)
    print(f"wrote {count} records to {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    any_errors = False
    for path in args.paths:
        if not Path(path).exists():
            raise FileNotFoundError(f"records file not found: {path}")
        errors = collect_file_errors(path, strict=args.strict, em_strict=False)
        if errors:
            any_errors = True
            for message in errors:
                print(f"{path}: {message}")
        else:
            with open(path, encoding="utf-8") as fh:
                count = sum(1 for line in fh if line.strip())
            print(f"{path}: OK ({count} records)")
    return EXIT_INPUT if any_errors else EXIT_OK


def cmd_train(args) -> int:
    rc = load_run_config(args)
    outdir = Path(rc.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    train, dev = _train_dev(rc)
    cfg = rc.feature_config()
    train_fm = feature_matrix(train, cfg, per_candidate=rc.per_candidate)
    dev_fm = feature_matrix(dev, cfg, per_candidate=rc.per_candidate) if dev else train_fm
    model, info = _train_model(rc, train_fm, dev_fm)
    model_path = outdir / "model.json"
    model.save(model_path)
    dev_report = metrics.evaluate_scores(
        model.predict_proba(dev_fm), dev_fm.labels.astype(bool), rc.threshold
    )
    report_obj = {"training": info, "dev": dev_report.to_dict()}
    _write_json(outdir / "dev_report.json", report_obj)
    _write_text(outdir / "dev_report.txt", _report_text(dev_report))
    print(f"model written to {model_path}")
    print(_report_text(dev_report), end="")
    return EXIT_OK


def _check_feature_compat(rc: RunConfig, model: CalibratorModel, args) -> None:
    # an explicit feature selection that disagrees with the model is a
    # compatibility error, not silently ignored
    if getattr(args, "parts", None) or getattr(args, "hidden_dim", None) is not None:
        requested = rc.feature_config()
        if requested.fingerprint() != model.feature_config.fingerprint():
            raise FingerprintMismatchError(
                f"requested feature config {requested.canonical_text()!r} does not "
                f"match the model's {model.feature_config.canonical_text()!r}"
            )


def cmd_eval(args) -> int:
    rc = load_run_config(args)
    outdir = Path(rc.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    if args.model:
        model = CalibratorModel.load(args.model)
        _check_feature_compat(rc, model, args)
        test = _read_all(rc.test if rc.test else rc.records, rc)
        test_fm = feature_matrix(test, model.feature_config)
        report = metrics.evaluate_scores(
            model.predict_proba(test_fm), test_fm.labels.astype(bool), rc.threshold
        )
        _write_json(outdir / "eval_report.json", report.to_dict())
        _write_text(outdir / "eval_report.txt", _report_text(report))
        _write_text(outdir / "curve.csv", report.curve_csv())
        print(_report_text(report), end="")
        return EXIT_OK

    # protocol mode: resplit + retrain per run from the full record set
    records = _read_all(rc.records, rc)
    cfg = rc.feature_config()
    learner = _make_learner(rc, cfg)
    reports, aggregate = run_protocol(
        records, cfg, learner, rc.protocol, rc.fractions, rc.threshold, rc.jobs
    )
    for i, report in enumerate(reports):
        _write_json(outdir / f"eval_run{i}.json", report.to_dict())
        _write_text(outdir / f"curve_run{i}.csv", report.curve_csv())
    _write_json(outdir / "aggregate.json", aggregate.to_dict())
    _write_text(outdir / "aggregate.txt", _aggregate_text(aggregate))
    print(_aggregate_text(aggregate), end="")
    return EXIT_OK


def cmd_rerank(args) -> int:
    rc = load_run_config(args)
    outdir = Path(rc.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    model = CalibratorModel.load(args.model)
    _check_feature_compat(rc, model, args)
    records = _read_all(rc.test if rc.test else rc.records, rc)
    report, results = rerank_eval(records, model, rc.top_n, rc.em_strict)
    write_rerank_results(results, outdir / "rerank.jsonl")
    _write_json(outdir / "rerank_report.json", report.to_dict())
    _write_text(outdir / "rerank_table.txt", report.table())
    print(report.table(), end="")
    return EXIT_OK


def cmd_project(args) -> int:
    rc = load_run_config(args)
    out_path = Path(args.out) if args.out else Path(rc.output_dir) / "projection.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in args.records_files:
        domain = Path(path).stem
        for record in read_records(path, strict=rc.strict, em_strict=rc.em_strict):
            emb = record.embeddings.original
            pooled = emb.values if emb.kind == "pooled" else pool_mean(emb.values)
            correct = record.candidates[0].is_correct
            rows.append((pooled, domain, correct))
    if not rows:
        raise ValueError("no records to project")
    X = np.vstack([r[0] for r in rows])
    if args.labels_by == "domain":
        labels = np.array([r[1] for r in rows])
    else:
        if any(r[2] is None for r in rows):
            raise ValueError("correctness labels missing; cannot project by correctness")
        labels = np.array([int(r[2]) for r in rows])
    coords = metrics.lda_project(X, labels)
    lines = ["x,y,domain,correct"]
    for (x, y), (_, domain, correct) in zip(coords, rows):
        flag = "" if correct is None else str(int(correct))
        lines.append(f"{float(x)!r},{float(y)!r},{domain},{flag}")
    _write_text(out_path, "\n".join(lines) + "\n")
    print(f"wrote {len(rows)} projected points to {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its keys")
    p.add_argument("--records", help="full record set (internally split)")
    p.add_argument("--train", help="training records file")
    p.add_argument("--dev", help="development records file")
    p.add_argument("--test", help="test records file")
    p.add_argument("--parts", help="comma-separated feature parts")
    p.add_argument("--pooling", choices=["mean", "cls"])
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--learner", choices=["gbt", "logistic", "knn"])
    p.add_argument("--per-candidate", dest="per_candidate", action="store_true",
                   help="one training row per (record, candidate) -- for rerankers")
    p.add_argument("--grid", action="store_true", help="grid-search GBT hyperparameters")
    p.add_argument("--n-runs", dest="n_runs", type=int)
    p.add_argument("--seeds", help="comma-separated per-run seeds")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--strict", action="store_true", help="reject unknown record keys")
    p.add_argument("--em-mode", dest="em_mode", choices=["normalized", "strict"])
    p.add_argument("--top-n", dest="top_n", type=int)
    p.add_argument("--jobs", type=int, help="worker cap (CALIBQA_JOBS fallback)")
    p.add_argument("--out-dir", dest="output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calibqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic records")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--score-informativeness", type=float, default=0.5)
    p.add_argument("--embedding-informativeness", type=float, default=0.5)
    p.add_argument("--candidates", type=int, default=5)
    p.add_argument("--passages", type=int, default=1)
    p.add_argument("--noise-std", type=float, default=0.5)
    p.add_argument("--label-margin", dest="label_margin", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--task-kind",
        default="reading_comprehension",
        choices=[t.value for t in TaskKind],
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="validate record files")
    p.add_argument("paths", nargs="+")
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train a calibrator")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model, or run the multi-run protocol")
    _add_common(p)
    p.add_argument("--model", help="trained model file (omit for protocol mode)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rerank", help="rerank candidates with a trained calibrator")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("project", help="2-D discriminant projection of embeddings")
    _add_common(p)
    p.add_argument("records_files", nargs="+")
    p.add_argument("--labels-by", dest="labels_by", choices=["domain", "correctness"],
                   default="domain")
    p.add_argument("--out")
    p.set_defaults(func=cmd_project)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FingerprintMismatchError, ModelVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except UndefinedMetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_METRIC
    except (
        FileNotFoundError,
        InterchangeError,
        FeatureError,
        GbtError,
        CalibratorError,
        RerankError,
        SynthError,
        metrics.MetricError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
