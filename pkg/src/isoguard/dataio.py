"""Read datasets from delimited files and records from NDJSON streams.

Labels ride along on :class:`Dataset` for evaluation only. Fitting code takes
a :class:`RecordView`, which has no label attribute at all.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import IO, Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import IngestError, ParameterError
from .labeler import ANOMALY, NORMAL

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RecordView:
    """Label-free rows handed to fit paths."""

    rows: tuple[Mapping[str, Any], ...]
    columns: tuple[str, ...]
    source: str = ""

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class Dataset:
    """Rows in file order plus optional per-row ``normal``/``anomaly`` labels."""

    rows: tuple[Mapping[str, Any], ...]
    columns: tuple[str, ...]
    labels: tuple[str, ...] | None = None
    source: str = ""
    label_column: str | None = None

    def __post_init__(self) -> None:
        if self.labels is not None:
            if len(self.labels) != len(self.rows):
                raise ParameterError(f"{len(self.labels)} labels for {len(self.rows)} rows")
            bad = set(self.labels) - {NORMAL, ANOMALY}
            if bad:
                raise ParameterError(f"labels must be {NORMAL!r}/{ANOMALY!r}, got {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def name(self) -> str:
        return os.path.splitext(os.path.basename(self.source))[0] if self.source else ""

    @property
    def schema_hint(self) -> dict[str, str]:
        """``column -> "numeric" | "string"`` from the values present."""
        hint = {}
        for col in self.columns:
            kind = "numeric"
            for row in self.rows:
                try:
                    float(row[col])
                except (TypeError, ValueError):
                    kind = "string"
                    break
            hint[col] = kind
        return hint

    def unlabeled(self) -> RecordView:
        return RecordView(rows=self.rows, columns=self.columns, source=self.source)

    def truth(self) -> np.ndarray:
        """Boolean array, True for anomalies."""
        if self.labels is None:
            raise ParameterError(f"dataset {self.name or '<memory>'} carries no labels")
        return np.array([lab == ANOMALY for lab in self.labels], dtype=bool)

    @property
    def anomaly_rate(self) -> float:
        truth = self.truth()
        return float(truth.mean()) if truth.size else 0.0


def read_delimited(
    path: str | os.PathLike,
    delimiter: str = ",",
    has_header: bool = True,
    label_column: str | None = None,
    positive: str = "1",
) -> Dataset:
    """Load a delimited text file.

    Without a header, columns are named ``c0, c1, ...``. If ``label_column``
    is given it is removed from the rows and turned into labels; a value equal
    to ``positive`` (after stripping whitespace) means anomaly.

    Raises:
        IngestError: unreadable file, ragged row, or missing label column.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot open {os.fspath(path)!r}: {exc.strerror}") from exc
    with fh:
        try:
            return _read_delimited(fh, os.fspath(path), delimiter, has_header, label_column, positive)
        except csv.Error as exc:
            raise IngestError(f"{os.fspath(path)}: {exc}") from exc
        except UnicodeDecodeError as exc:
            raise IngestError(f"{os.fspath(path)}: not UTF-8 text ({exc.reason})") from exc


def _read_delimited(
    fh: IO[str], source: str, delimiter: str, has_header: bool, label_column: str | None, positive: str
) -> Dataset:
    reader = csv.reader(fh, delimiter=delimiter)
    header: list[str] | None = None
    body: list[tuple[int, list[str]]] = []
    for raw in reader:
        if not raw or (len(raw) == 1 and not raw[0].strip()):
            continue
        if header is None and has_header:
            header = [h.strip() for h in raw]
            continue
        body.append((reader.line_num, raw))
    if header is None:
        width = len(body[0][1]) if body else 0
        header = [f"c{i}" for i in range(width)]
    if label_column is not None and label_column not in header:
        raise IngestError(f"{source}: label column {label_column!r} not in header {header}", line=1 if has_header else None)
    width = len(header)
    rows: list[dict[str, str]] = []
    labels: list[str] | None = [] if label_column is not None else None
    for line, values in body:
        if len(values) != width:
            raise IngestError(f"{source}: expected {width} fields, found {len(values)}", line=line)
        rec = dict(zip(header, values))
        if labels is not None:
            labels.append(ANOMALY if rec.pop(label_column).strip() == positive else NORMAL)
        rows.append(rec)
    columns = tuple(h for h in header if h != label_column)
    logger.debug("read %d rows x %d columns from %s", len(rows), len(columns), source)
    return Dataset(
        rows=tuple(rows),
        columns=columns,
        labels=tuple(labels) if labels is not None else None,
        source=source,
        label_column=label_column,
    )


def write_delimited(dataset: Dataset, path: str | os.PathLike, delimiter: str = ",", positive: str = "1", negative: str = "0") -> None:
    """Inverse of :func:`read_delimited`; the label column goes last."""
    label_col = dataset.label_column or "label"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        header = list(dataset.columns)
        if dataset.labels is not None:
            header.append(label_col)
        writer.writerow(header)
        for i, row in enumerate(dataset.rows):
            values = [row[c] for c in dataset.columns]
            if dataset.labels is not None:
                values.append(positive if dataset.labels[i] == ANOMALY else negative)
            writer.writerow(values)


def numeric_matrix(rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> np.ndarray:
    """Fast path for all-numeric data; raises IngestError naming the bad cell."""
    out = np.empty((len(rows), len(columns)), dtype=np.float64)
    for i, row in enumerate(rows):
        for j, col in enumerate(columns):
            try:
                out[i, j] = float(row[col])
            except (TypeError, ValueError):
                raise IngestError(f"non-numeric value {row[col]!r} in column {col!r} (row {i})") from None
    return out


# ---------------------------------------------------------------------------
# NDJSON
# ---------------------------------------------------------------------------

@dataclass
class DeadLetterSink:
    """Line-oriented sink for rejected input; one JSON object per rejection."""

    stream: IO[str] | None = None
    count: int = 0
    reasons: list[str] = field(default_factory=list, repr=False)
    keep_reasons: int = 100

    @classmethod
    def to_path(cls, path: str | os.PathLike) -> "DeadLetterSink":
        return cls(stream=open(path, "w", encoding="utf-8"))

    def put(self, line: int | None, raw: Any, reason: str) -> None:
        self.count += 1
        if len(self.reasons) < self.keep_reasons:
            self.reasons.append(reason)
        if self.stream is not None:
            if not isinstance(raw, str):
                try:
                    raw = json.dumps(raw, sort_keys=True, default=str)
                except (TypeError, ValueError):
                    raw = repr(raw)
            self.stream.write(json.dumps({"line": line, "reason": reason, "raw": raw.rstrip("\n")}) + "\n")

    def close(self) -> None:
        if self.stream is not None:
            self.stream.close()


def parse_record(line: str) -> dict[str, Any]:
    """Decode one NDJSON line into a record; ValueError on anything but an object."""
    rec = json.loads(line)
    if not isinstance(rec, dict):
        raise ValueError(f"expected a JSON object, got {type(rec).__name__}")
    return rec


def read_ndjson_stream(
    source: Iterable[str] | IO[str],
    dead_letter: DeadLetterSink | None = None,
    fail_fast: bool = False,
) -> Iterator[dict[str, Any]]:
    """Yield records lazily in arrival order.

    Blank lines are ignored. Malformed lines go to ``dead_letter`` (a
    counting sink is used if none is given) unless ``fail_fast``, in which
    case :class:`IngestError` is raised with the line number.
    """
    sink = dead_letter if dead_letter is not None else DeadLetterSink()
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            yield parse_record(line)
        except ValueError as exc:
            if fail_fast:
                raise IngestError(f"malformed record: {exc}", line=lineno) from exc
            logger.debug("dead-lettering line %d: %s", lineno, exc)
            sink.put(lineno, line, f"malformed record: {exc}")


def read_ndjson(path: str | os.PathLike) -> Dataset:
    """Load a whole NDJSON file as an unlabeled dataset (fail-fast)."""
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot open {os.fspath(path)!r}: {exc.strerror}") from exc
    with fh:
        rows = list(read_ndjson_stream(fh, fail_fast=True))
    columns: dict[str, None] = {}
    for r in rows:
        columns.update(dict.fromkeys(r))
    return Dataset(rows=tuple(rows), columns=tuple(columns), source=os.fspath(path))


def read_table(path: str | os.PathLike, **kwargs: Any) -> Dataset:
    """Dispatch on extension: ``.ndjson``/``.jsonl`` vs delimited text."""
    ext = os.path.splitext(os.fspath(path))[1].lower()
    if ext in (".ndjson", ".jsonl"):
        ds = read_ndjson(path)
        label_column = kwargs.get("label_column")
        if label_column is None:
            return ds
        positive = kwargs.get("positive", "1")
        labels, rows = [], []
        for i, r in enumerate(ds.rows):
            if label_column not in r:
                raise IngestError(f"record lacks label column {label_column!r}", line=i + 1)
            r = dict(r)
            labels.append(ANOMALY if str(r.pop(label_column)).strip() == positive else NORMAL)
            rows.append(r)
        cols = tuple(c for c in ds.columns if c != label_column)
        return Dataset(rows=tuple(rows), columns=cols, labels=tuple(labels), source=ds.source, label_column=label_column)
    if ext == ".tsv" and "delimiter" not in kwargs:
        kwargs["delimiter"] = "\t"
    return read_delimited(path, **kwargs)


def from_text(text: str, **kwargs: Any) -> Dataset:
    """Parse delimited text held in memory (handy in tests)."""
    return _read_delimited(
        io.StringIO(text),
        "<memory>",
        kwargs.get("delimiter", ","),
        kwargs.get("has_header", True),
        kwargs.get("label_column"),
        kwargs.get("positive", "1"),
    )
