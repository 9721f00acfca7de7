"""``isoguard`` command line: train, score, label, evaluate, sweep, stream.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model error. Errors
are reported on stderr as one line of JSON. File outputs are first written
to ``<path>.partial`` and renamed into place only when complete.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from . import __version__
from .dataio import DeadLetterSink, read_table
from .errors import DataError, IsoGuardError, ModelError
from .eval import (
    DEFAULT_SEEDS,
    manifest,
    parse_grid,
    run_benchmark,
    sweep,
    write_json,
    write_sweep_table,
)
from .features import FeatureSchema
from .iforest import ForestParams, default_threads
from .labeler import ANOMALY, NORMAL, label_mask
from .model_store import load, save
from .pipeline import LabelerConfig, encode, fit_labeler, fit_pipeline, summary
from .stream import stream_score

logger = logging.getLogger("isoguard")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

# Defaults for options that may also come from --config.
DEFAULTS: dict[str, Any] = {
    "trees": 256,
    "subsample": 256,
    "height_limit": None,
    "seed": 0,
    "labeler": "kmeans",
    "k": 2,
    "contamination": 0.1,
    "relative_error": 0.0,
    "threads": None,
    "schema": None,
    "delimiter": ",",
    "label_column": None,
    "positive_label": "1",
    "no_header": False,
    "seeds": "1:10",
    "method": "iforest-kmeans",
    "param": "contamination",
    "grid": None,
    "stats": None,
    "stats_interval": 10.0,
    "dead_letter": None,
    "workers": 1,
    "score_column": "score",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2
        raise UsageError(message)


def _formatter(prog: str) -> argparse.HelpFormatter:
    return argparse.HelpFormatter(prog, max_help_position=32, width=88)


def _default(key: str) -> str:
    value = DEFAULTS[key]
    if key == "threads":
        return "available cores, or $ISOGUARD_THREADS"
    if value is None:
        return "none"
    return repr(value) if isinstance(value, str) else str(value)


def _add(p: argparse.ArgumentParser, flag: str, key: str, help: str, **kw: Any) -> None:
    p.add_argument(flag, dest=key, default=None, help=f"{help} (default: {_default(key)})", **kw)


def _forest_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("forest")
    _add(g, "--trees", "trees", "number of isolation trees", type=int, metavar="N")
    _add(g, "--subsample", "subsample", "rows sampled per tree (psi)", type=int, metavar="N")
    _add(g, "--height-limit", "height_limit", "max tree depth; none means ceil(log2(psi))", type=int, metavar="N")
    _add(g, "--seed", "seed", "random seed", type=int, metavar="N")
    _add(g, "--threads", "threads", "worker threads", type=int, metavar="N")


def _labeler_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("labeler")
    _add(g, "--labeler", "labeler", "kmeans or quantile", choices=("kmeans", "quantile"))
    _add(g, "--k", "k", "clusters for the kmeans labeler", type=int, metavar="K")
    _add(g, "--contamination", "contamination", "anomaly fraction for the quantile labeler", type=float, metavar="CR")
    _add(g, "--relative-error", "relative_error", "quantile rank error for the quantile labeler", type=float, metavar="EPS")


def _input_flags(p: argparse.ArgumentParser, labels: bool = False) -> None:
    g = p.add_argument_group("input")
    g.add_argument("--input", "-i", required=True, help="delimited file or .ndjson/.jsonl (required)")
    _add(g, "--delimiter", "delimiter", "field delimiter for delimited input")
    _add(g, "--no-header", "no_header", "input has no header row", action="store_true")
    _add(g, "--schema", "schema", "JSON column config; none means all columns numeric")
    _add(g, "--label-column", "label_column", "ground-truth column" + (" (required)" if labels else ", dropped before fitting"))
    _add(g, "--positive-label", "positive_label", "label value meaning anomaly")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="isoguard",
        description="Isolation-forest anomaly scoring with a K-Means or quantile labeler.",
        formatter_class=_formatter,
    )
    parser.add_argument("--version", action="version", version=f"isoguard {__version__}")
    parser.add_argument("--config", default=None, help="JSON file of option defaults; flags win (default: none)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging; repeat for debug (default: 0)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("train", help="fit a model bundle", formatter_class=_formatter)
    _input_flags(p)
    _forest_flags(p)
    _labeler_flags(p)
    p.add_argument("--model", "-m", required=True, help="output model file (required)")

    p = sub.add_parser("score", help="score records with a model", formatter_class=_formatter)
    _input_flags(p)
    p.add_argument("--model", "-m", required=True, help="model file (required)")
    p.add_argument("--output", "-o", required=True, help="output score table (required)")

    p = sub.add_parser("label", help="label a score table", formatter_class=_formatter)
    p.add_argument("--input", "-i", required=True, help="table with a score column (required)")
    p.add_argument("--output", "-o", required=True, help="output label table (required)")
    p.add_argument("--model", "-m", default=None, help="use this bundle's labeler instead of fitting one (default: none)")
    _add(p, "--score-column", "score_column", "name of the score column")
    _add(p, "--delimiter", "delimiter", "field delimiter")
    _add(p, "--seed", "seed", "random seed for kmeans seeding", type=int, metavar="N")
    _labeler_flags(p)

    p = sub.add_parser("evaluate", help="multi-seed AUC benchmark on a labeled dataset", formatter_class=_formatter)
    _input_flags(p, labels=True)
    _forest_flags(p)
    _labeler_flags(p)
    _add(p, "--method", "method", "iforest-kmeans or iforest-quantile", choices=("iforest-kmeans", "iforest-quantile"))
    _add(p, "--seeds", "seeds", "seed list: a:b range or comma list")
    p.add_argument("--output", "-o", required=True, help="output JSON report (required)")

    p = sub.add_parser("sweep", help="quantile-labeler parameter sweep", formatter_class=_formatter)
    _input_flags(p, labels=True)
    _forest_flags(p)
    _labeler_flags(p)
    _add(p, "--param", "param", "contamination or relative_error", choices=("contamination", "relative_error"))
    _add(p, "--grid", "grid", "start:stop:step (inclusive) or comma list; required")
    _add(p, "--seeds", "seeds", "seed list: a:b range or comma list")
    p.add_argument("--output", "-o", required=True, help="output table; manifest goes to <output>.json (required)")

    p = sub.add_parser("stream", help="score NDJSON records one at a time", formatter_class=_formatter)
    p.add_argument("--model", "-m", required=True, help="model file (required)")
    p.add_argument("--input", "-i", default="-", help="NDJSON source; - is stdin (default: '-')")
    p.add_argument("--output", "-o", default="-", help="NDJSON sink; - is stdout (default: '-')")
    _add(p, "--dead-letter", "dead_letter", "file for rejected records")
    _add(p, "--stats", "stats", "JSON stats file, rewritten periodically")
    _add(p, "--stats-interval", "stats_interval", "seconds between stats flushes", type=float, metavar="S")
    _add(p, "--workers", "workers", "parallel scoring threads; output order is kept", type=int, metavar="N")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

class Options:
    """Parsed flags layered over the config file layered over DEFAULTS."""

    def __init__(self, ns: argparse.Namespace, config: dict[str, Any]):
        self._ns = ns
        self._config = config

    def __getattr__(self, key: str) -> Any:
        value = getattr(self._ns, key, None)
        if value is not None and value is not False:
            return value
        if key in self._config:
            return self._config[key]
        if value is False:
            return DEFAULTS.get(key, False)
        return DEFAULTS.get(key)


def _load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path!r}: {exc.strerror}") from exc
    except ValueError as exc:
        raise UsageError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path!r} must be a JSON object")
    out = {k.replace("-", "_"): v for k, v in doc.items()}
    unknown = sorted(set(out) - set(DEFAULTS))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    return out


@contextlib.contextmanager
def atomic_output(path: str) -> Iterator[str]:
    """Yield ``path.partial``; rename to ``path`` only if the block succeeds."""
    partial = f"{path}.partial"
    yield partial
    os.replace(partial, path)


def _forest_params(o: Options) -> ForestParams:
    return ForestParams(num_trees=o.trees, subsample_size=o.subsample, height_limit=o.height_limit, seed=o.seed)


def _labeler_config(o: Options) -> LabelerConfig:
    return LabelerConfig(kind=o.labeler, k=o.k, contamination=o.contamination, relative_error=o.relative_error)


def _threads(o: Options) -> int:
    return o.threads if o.threads is not None else default_threads()


def _schema(o: Options) -> FeatureSchema | None:
    if o.schema is None:
        return None
    try:
        with open(o.schema, encoding="utf-8") as fh:
            return FeatureSchema.from_spec(json.load(fh))
    except OSError as exc:
        raise UsageError(f"cannot read schema {o.schema!r}: {exc.strerror}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad schema config {o.schema!r}: {exc}") from exc


def _read(o: Options, path: str, labels: bool = False):
    if labels and o.label_column is None:
        raise UsageError("--label-column is required for this command")
    return read_table(
        path,
        delimiter=o.delimiter,
        has_header=not o.no_header,
        label_column=o.label_column,
        positive=str(o.positive_label),
    ) if not path.lower().endswith((".ndjson", ".jsonl")) else read_table(path, label_column=o.label_column, positive=str(o.positive_label))


def _seeds(text: Any) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    text = str(text)
    if ":" in text:
        a, b = text.split(":", 1)
        seeds = list(range(int(a), int(b) + 1))
    else:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    if not seeds:
        raise UsageError("seed list is empty")
    return seeds


def _emit(obj: Any) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(o: Options) -> int:
    ds = _read(o, o.input)
    bundle = fit_pipeline(ds.unlabeled(), _schema(o), _forest_params(o), _labeler_config(o), n_jobs=_threads(o))
    with atomic_output(o.model) as tmp:
        save(bundle, tmp)
    _emit({"model": o.model, **summary(bundle)})
    return EXIT_OK


def cmd_score(o: Options) -> int:
    bundle = load(o.model)
    ds = _read(o, o.input)
    X = encode(ds.rows, bundle.feature_schema)
    scores = bundle.forest.score(X)
    with atomic_output(o.output) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "score"])
            for i, s in enumerate(scores):
                w.writerow([i, repr(float(s))])
    _emit({"rows": len(scores), "output": o.output})
    return EXIT_OK


def cmd_label(o: Options) -> int:
    ds = read_table(o.input, delimiter=o.delimiter)
    col = o.score_column
    if col not in ds.columns:
        raise DataError(f"{o.input}: no {col!r} column (columns: {', '.join(ds.columns)})")
    try:
        scores = np.array([float(r[col]) for r in ds.rows], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{o.input}: non-numeric score ({exc})") from None
    if o.model is not None:
        model = load(o.model).labeler
    else:
        if scores.size == 0:
            raise DataError(f"{o.input}: no scores to fit a labeler on")
        model = fit_labeler(scores, _labeler_config(o), seed=o.seed)
    mask = label_mask(model, scores)
    with atomic_output(o.output) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(ds.columns) + ["label"])
            for row, m in zip(ds.rows, mask):
                w.writerow([row[c] for c in ds.columns] + [ANOMALY if m else NORMAL])
    _emit({"rows": int(scores.size), "anomalies": int(mask.sum()), "labeler": model.kind, "output": o.output})
    return EXIT_OK


def _report_doc(report) -> dict[str, Any]:
    doc = asdict(report)
    doc["seeds"] = list(report.seeds)
    return doc


def cmd_evaluate(o: Options) -> int:
    ds = _read(o, o.input, labels=True)
    seeds = _seeds(o.seeds)
    report = run_benchmark(ds, o.method, _forest_params(o), _labeler_config(o), seeds, _schema(o), _threads(o))
    doc = manifest("evaluate", _report_doc(report), {"input": o.input})
    with atomic_output(o.output) as tmp:
        write_json(doc, tmp)
    _emit(
        {
            "dataset": report.dataset,
            "method": report.method,
            "auc_labels": report.auc_labels,
            "auc_labels_std": report.auc_labels_std,
            "auc_scores": report.auc_scores,
            "auc_scores_std": report.auc_scores_std,
            "output": o.output,
        }
    )
    return EXIT_OK


def cmd_sweep(o: Options) -> int:
    if o.grid is None:
        raise UsageError("--grid is required for sweep")
    ds = _read(o, o.input, labels=True)
    grid = parse_grid(str(o.grid))
    results = sweep(ds, o.param, grid, _forest_params(o), _labeler_config(o), _seeds(o.seeds), _schema(o), _threads(o))
    with atomic_output(o.output) as tmp:
        write_sweep_table(results, tmp, o.param)
    with atomic_output(o.output + ".json") as tmp:
        write_json(
            manifest("sweep", [{"value": v, "report": _report_doc(r)} for v, r in results], {"input": o.input, "param": o.param}),
            tmp,
        )
    _emit({"param": o.param, "rows": len(results), "output": o.output})
    return EXIT_OK


def cmd_stream(o: Options) -> int:
    bundle = load(o.model)
    with contextlib.ExitStack() as stack:
        src = sys.stdin if o.input == "-" else stack.enter_context(open(o.input, encoding="utf-8"))
        if o.output == "-":
            sink = sys.stdout
        else:
            sink = stack.enter_context(open(o.output, "w", encoding="utf-8"))
        dead = DeadLetterSink.to_path(o.dead_letter) if o.dead_letter else DeadLetterSink()
        stack.callback(dead.close)
        stats = stream_score(
            src,
            bundle,
            sink,
            stats_out=o.stats,
            dead_letter=dead,
            stats_interval=o.stats_interval,
            workers=o.workers,
        )
    d = stats.to_dict()
    d["latency_us"].pop("histogram")
    print(json.dumps(d, sort_keys=True), file=sys.stderr)
    return EXIT_OK


COMMANDS: dict[str, Callable[[Options], int]] = {
    "train": cmd_train,
    "score": cmd_score,
    "label": cmd_label,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "stream": cmd_stream,
}


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "exit": code, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(
            level=logging.WARNING - 10 * min(ns.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        options = Options(ns, _load_config(ns.config))
        return COMMANDS[ns.command](options)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except DataError as exc:
        return _fail(EXIT_DATA, exc)
    except (ModelError, OSError) as exc:
        code = EXIT_MODEL if isinstance(exc, ModelError) else EXIT_DATA
        return _fail(code, exc)
    except IsoGuardError as exc:  # ParameterError and friends: bad values on the command line
        return _fail(EXIT_USAGE, exc)


if __name__ == "__main__":
    sys.exit(main())
