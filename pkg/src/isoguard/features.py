"""Encode raw log records into fixed-length numeric feature vectors.

Four encoders are supported, one per schema column:

``timestamp``
    hour of the week, ``weekday * 24 + hour`` with Monday = 0, evaluated in a
    configurable fixed timezone (UTC by default). Range 0..167.
``ip``
    dotted-quad IPv4, each octet zero-padded to three digits and the digits
    concatenated: ``10.220.50.51 -> 010220050051``.
``categorical``
    lowercased string index, most frequent value first (ties broken
    lexicographically). Values unseen at fit time map to ``V``, the vocab
    size, and are counted.
``numeric_passthrough``
    the value as a float.

Encoders work per column, and isolation trees split one feature at a time,
so the very different magnitudes (IPs ~1e11, hours <= 167) are left alone.
"""
from __future__ import annotations

import math
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone, tzinfo
from typing import Any, Iterable, Mapping, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .errors import EncodingError, ParameterError, SchemaError, StateError

TIMESTAMP = "timestamp"
IP = "ip"
CATEGORICAL = "categorical"
NUMERIC = "numeric_passthrough"
ENCODER_KINDS = (TIMESTAMP, IP, CATEGORICAL, NUMERIC)

SCHEMA_VERSION = 1

_IPV4 = re.compile(r"^(\d{1,3})\.(\d{1,3})\.(\d{1,3})\.(\d{1,3})$")
_ORDINAL = re.compile(r"(\d+)(st|nd|rd|th)\b", re.IGNORECASE)
_TS_FORMATS = (
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M:%S.%f",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M:%S.%f",
    "%Y/%m/%d %H:%M:%S",
    "%d/%b/%Y:%H:%M:%S %z",
    "%B %d %Y, %H:%M:%S.%f",
    "%B %d %Y, %H:%M:%S",
    "%b %d %Y %H:%M:%S",
)


def _zone(name: str | tzinfo) -> tzinfo:
    if isinstance(name, tzinfo):
        return name
    if name.upper() == "UTC":
        return timezone.utc
    try:
        return ZoneInfo(name)
    except Exception as exc:
        raise ParameterError(f"unknown timezone {name!r}") from exc


def parse_timestamp(ts: Any, tz: str | tzinfo = "UTC") -> datetime:
    """Parse ``ts`` into an aware datetime in zone ``tz``.

    Accepts datetimes, epoch seconds (int/float), ISO-8601 strings and a few
    common log formats including ``"January 14th 2019, 23:59:59.994"``.
    Naive values are taken to be wall-clock time in ``tz``.
    """
    zone = _zone(tz)
    if isinstance(ts, datetime):
        dt = ts
    elif isinstance(ts, (int, float)) and not isinstance(ts, bool):
        if not math.isfinite(ts):
            raise EncodingError(f"non-finite epoch timestamp {ts!r}")
        return datetime.fromtimestamp(ts, tz=timezone.utc).astimezone(zone)
    elif isinstance(ts, str):
        text = ts.strip()
        dt = None
        iso = text[:-1] + "+00:00" if text.endswith("Z") else text
        try:
            dt = datetime.fromisoformat(iso)
        except ValueError:
            cleaned = _ORDINAL.sub(r"\1", text)
            for fmt in _TS_FORMATS:
                try:
                    dt = datetime.strptime(cleaned, fmt)
                    break
                except ValueError:
                    continue
        if dt is None:
            raise EncodingError(f"unparseable timestamp {ts!r}")
    else:
        raise EncodingError(f"unparseable timestamp {ts!r}")
    if dt.tzinfo is None:
        return dt.replace(tzinfo=zone)
    return dt.astimezone(zone)


def encode_timestamp(ts: Any, tz: str | tzinfo = "UTC") -> float:
    """Hour of the week: ``weekday * 24 + hour`` (Monday 00:xx -> 0, Sunday 23:xx -> 167)."""
    dt = parse_timestamp(ts, tz)
    return float(dt.weekday() * 24 + dt.hour)


def encode_ip(ip: Any) -> float:
    """``"10.220.50.51" -> 10220050051.0`` (the 12-digit string 010220050051)."""
    if not isinstance(ip, str):
        raise EncodingError(f"IPv4 address must be a string, got {type(ip).__name__}")
    m = _IPV4.match(ip.strip())
    if not m:
        raise EncodingError(f"not a dotted-quad IPv4 address: {ip!r}")
    octets = [int(g) for g in m.groups()]
    if any(o > 255 for o in octets):
        raise EncodingError(f"IPv4 octet out of range in {ip!r}")
    return float(int("".join(f"{o:03d}" for o in octets)))


def _norm_category(value: Any) -> str:
    return str(value).lower()


def fit_categorical(column_values: Iterable[Any]) -> dict[str, int]:
    """Lowercase, then index by descending frequency with lexicographic tie-break."""
    counts = Counter(_norm_category(v) for v in column_values)
    if not counts:
        raise ParameterError("cannot fit a categorical encoder on an empty column")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {value: i for i, (value, _) in enumerate(ordered)}


def encode_numeric(value: Any) -> float:
    if isinstance(value, bool):
        return float(value)
    try:
        out = float(value)
    except (TypeError, ValueError) as exc:
        raise EncodingError(f"not a number: {value!r}") from exc
    if not math.isfinite(out):
        raise EncodingError(f"non-finite number: {value!r}")
    return out


@dataclass(frozen=True)
class Column:
    name: str
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise ParameterError(f"column {self.name!r}: unknown encoder {self.kind!r}; expected one of {ENCODER_KINDS}")


@dataclass(eq=False)
class FeatureSchema:
    """Ordered column encoders plus fitted categorical vocabularies.

    Once fitted, a schema is treated as read-only; the only thing that
    changes afterwards is ``oov_counts``, a per-column tally of unseen
    categorical values met during :func:`transform` (guarded by a lock,
    not part of equality or serialisation).
    """

    columns: tuple[Column, ...]
    categorical_vocab: dict[str, dict[str, int]] = field(default_factory=dict)
    timezone: str = "UTC"
    fitted: bool = False
    oov_counts: Counter = field(default_factory=Counter, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self) -> None:
        self.columns = tuple(c if isinstance(c, Column) else Column(*c) for c in self.columns)
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column names in schema: {names}")
        if not names:
            raise SchemaError("schema has no columns")
        self._zone = _zone(self.timezone)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def dimension(self) -> int:
        return len(self.columns)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureSchema):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def from_spec(cls, spec: Mapping[str, Any] | Sequence[Any]) -> "FeatureSchema":
        """Build an unfitted schema from a config mapping.

        ``{"columns": [{"name": "proto", "kind": "categorical"}, ...], "timezone": "UTC"}``
        or just the list of columns.
        """
        if isinstance(spec, Mapping):
            cols = spec.get("columns")
            tz = spec.get("timezone", "UTC")
        else:
            cols, tz = spec, "UTC"
        if not cols:
            raise SchemaError("schema config lists no columns")
        parsed = []
        for c in cols:
            if isinstance(c, Mapping):
                parsed.append(Column(c["name"], c.get("kind", NUMERIC)))
            elif isinstance(c, str):
                parsed.append(Column(c, NUMERIC))
            else:
                parsed.append(Column(*c))
        return cls(columns=tuple(parsed), timezone=tz)

    @classmethod
    def numeric(cls, names: Sequence[str]) -> "FeatureSchema":
        return cls(columns=tuple(Column(n, NUMERIC) for n in names), fitted=True)

    def fit(self, records: Iterable[Mapping[str, Any]]) -> "FeatureSchema":
        """Return a fitted copy; vocabularies come from ``records``."""
        cats = [c.name for c in self.columns if c.kind == CATEGORICAL]
        values: dict[str, list[Any]] = {name: [] for name in cats}
        n = 0
        for i, rec in enumerate(records):
            n += 1
            for name in cats:
                if name not in rec:
                    raise SchemaError(f"record {i} lacks column {name!r}")
                values[name].append(rec[name])
        if cats and n == 0:
            raise ParameterError("cannot fit categorical columns on zero records")
        vocab = {name: fit_categorical(values[name]) for name in cats}
        return FeatureSchema(columns=self.columns, categorical_vocab=vocab, timezone=self.timezone, fitted=True)

    def fit_columns(self, columns: Mapping[str, Sequence[Any] | np.ndarray]) -> "FeatureSchema":
        """Columnar :meth:`fit`."""
        vocab = {}
        for c in self.columns:
            if c.kind != CATEGORICAL:
                continue
            if c.name not in columns:
                raise SchemaError(f"missing column {c.name!r}")
            uniq, counts = np.unique(np.asarray(columns[c.name]).astype(str), return_counts=True)
            merged: Counter = Counter()
            for value, count in zip(uniq.tolist(), counts.tolist()):
                merged[_norm_category(value)] += count
            if not merged:
                raise ParameterError(f"cannot fit categorical column {c.name!r} on zero rows")
            ordered = sorted(merged.items(), key=lambda kv: (-kv[1], kv[0]))
            vocab[c.name] = {value: i for i, (value, _) in enumerate(ordered)}
        return FeatureSchema(columns=self.columns, categorical_vocab=vocab, timezone=self.timezone, fitted=True)

    def encode_value(self, column: Column, value: Any) -> float:
        kind = column.kind
        if kind == NUMERIC:
            return encode_numeric(value)
        if kind == IP:
            return encode_ip(value)
        if kind == TIMESTAMP:
            return encode_timestamp(value, self._zone)
        vocab = self.categorical_vocab[column.name]
        idx = vocab.get(_norm_category(value))
        if idx is None:
            with self._lock:
                self.oov_counts[column.name] += 1
            return float(len(vocab))
        return float(idx)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "columns": [{"name": c.name, "kind": c.kind} for c in self.columns],
            "categorical_vocab": {
                name: sorted(vocab.items(), key=lambda kv: kv[1])
                for name, vocab in sorted(self.categorical_vocab.items())
            },
            "timezone": self.timezone,
            "fitted": self.fitted,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "FeatureSchema":
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {version!r}")
        vocab = {name: {str(k): int(v) for k, v in pairs} for name, pairs in doc.get("categorical_vocab", {}).items()}
        return cls(
            columns=tuple(Column(c["name"], c["kind"]) for c in doc["columns"]),
            categorical_vocab=vocab,
            timezone=doc.get("timezone", "UTC"),
            fitted=bool(doc.get("fitted", False)),
        )


def transform(record: Mapping[str, Any], schema: FeatureSchema, row: int | None = None) -> np.ndarray:
    """Encode one record into a vector ordered like ``schema.columns``."""
    if not schema.fitted:
        raise StateError("feature schema is not fitted")
    out = np.empty(schema.dimension, dtype=np.float64)
    for j, col in enumerate(schema.columns):
        if col.name not in record:
            raise SchemaError(f"row {row}: missing column {col.name!r}" if row is not None else f"missing column {col.name!r}")
        try:
            out[j] = schema.encode_value(col, record[col.name])
        except EncodingError as exc:
            raise EncodingError(str(exc).split(" (")[0], column=col.name, row=row) from None
    return out


def transform_many(
    records: Iterable[Mapping[str, Any]],
    schema: FeatureSchema,
    skip_errors: bool = False,
) -> tuple[np.ndarray, list[int], list[tuple[int, str]]]:
    """Encode many records.

    Returns ``(matrix, kept_rows, errors)``. With ``skip_errors=False`` the
    first failing row raises; otherwise failing rows are left out of the
    matrix and reported in ``errors`` as ``(row, message)``.
    """
    vectors: list[np.ndarray] = []
    kept: list[int] = []
    errors: list[tuple[int, str]] = []
    for i, rec in enumerate(records):
        try:
            vectors.append(transform(rec, schema, row=i))
            kept.append(i)
        except (EncodingError, SchemaError) as exc:
            if not skip_errors:
                raise
            errors.append((i, str(exc)))
    if vectors:
        matrix = np.vstack(vectors)
    else:
        matrix = np.empty((0, schema.dimension), dtype=np.float64)
    return matrix, kept, errors


def transform_columns(columns: Mapping[str, Sequence[Any] | np.ndarray], schema: FeatureSchema) -> np.ndarray:
    """Columnar :func:`transform` for large tables.

    Each column's distinct values are encoded once with the scalar encoder
    and broadcast back, so the output equals row-by-row :func:`transform`.
    Numeric epoch timestamps are bucketed to 15 minutes first (every real
    timezone offset is a multiple of that).
    """
    if not schema.fitted:
        raise StateError("feature schema is not fitted")
    n = None
    out_cols = []
    for col in schema.columns:
        if col.name not in columns:
            raise SchemaError(f"missing column {col.name!r}")
        raw = np.asarray(columns[col.name])
        if n is None:
            n = raw.shape[0]
        elif raw.shape[0] != n:
            raise SchemaError(f"column {col.name!r} has {raw.shape[0]} rows, expected {n}")
        if col.kind == NUMERIC and raw.dtype.kind in "iufb":
            vals = raw.astype(np.float64)
            if not np.isfinite(vals).all():
                row = int(np.flatnonzero(~np.isfinite(vals))[0])
                raise EncodingError(f"non-finite number: {vals[row]!r}", column=col.name, row=row)
            out_cols.append(vals)
            continue
        if col.kind == TIMESTAMP and raw.dtype.kind in "iuf":
            raw = np.floor(raw.astype(np.float64) / 900.0) * 900.0
        uniq, inverse = np.unique(raw, return_inverse=True)
        codes = np.empty(uniq.shape[0], dtype=np.float64)
        for u, value in enumerate(uniq):
            value = value.item() if isinstance(value, np.generic) else value
            try:
                if col.kind == CATEGORICAL:
                    vocab = schema.categorical_vocab[col.name]
                    idx = vocab.get(_norm_category(value))
                    codes[u] = float(len(vocab)) if idx is None else float(idx)
                else:
                    codes[u] = schema.encode_value(col, value)
            except EncodingError as exc:
                row = int(np.flatnonzero(inverse == u)[0])
                raise EncodingError(str(exc), column=col.name, row=row) from None
        if col.kind == CATEGORICAL:
            vocab = schema.categorical_vocab[col.name]
            unseen = int((codes[inverse] == len(vocab)).sum())
            if unseen:
                with schema._lock:
                    schema.oov_counts[col.name] += unseen
        out_cols.append(codes[inverse.reshape(-1)])
    return np.column_stack(out_cols) if out_cols else np.empty((0, 0))
