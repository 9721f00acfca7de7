"""Score records one at a time against a loaded bundle.

Each input item (an NDJSON line or an already-parsed mapping) is decoded,
encoded, scored, labeled and written to the sink as one JSON line
``{"id", "score", "label", "latency_us"}``. Anything that fails decoding or
encoding goes to the dead-letter sink instead; the stream keeps going.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Any, Callable, Iterable, Iterator, Mapping

import numpy as np

from .dataio import DeadLetterSink, parse_record
from .errors import DataError, ParameterError
from .features import transform
from .labeler import ANOMALY, NORMAL, label_mask
from .model_store import ModelBundle

logger = logging.getLogger(__name__)


class BundleHandle:
    """Holder for the active bundle; ``swap`` replaces it between records."""

    def __init__(self, bundle: ModelBundle):
        self._bundle = bundle
        self._lock = threading.Lock()

    def get(self) -> ModelBundle:
        with self._lock:
            return self._bundle

    def swap(self, bundle: ModelBundle) -> ModelBundle:
        warm_up(bundle)
        with self._lock:
            old, self._bundle = self._bundle, bundle
        logger.info("model swapped (fingerprint %s)", bundle.train_fingerprint)
        return old


@dataclass
class StreamStats:
    """Counters and a per-record latency histogram with 1 microsecond buckets."""

    records_seen: int = 0
    records_scored: int = 0
    records_dead_lettered: int = 0
    histogram: Counter = field(default_factory=Counter)
    latency_total_us: int = 0
    started: float = field(default_factory=time.perf_counter)
    elapsed_s: float = 0.0

    def record_latency(self, micros: int) -> None:
        self.histogram[micros] += 1
        self.latency_total_us += micros

    def percentile(self, q: float) -> float:
        """Smallest bucket whose cumulative count reaches ``q`` of the total."""
        count = sum(self.histogram.values())
        if count == 0:
            return 0.0
        need = max(1, int(np.ceil(q * count)))
        seen = 0
        for bucket in sorted(self.histogram):
            seen += self.histogram[bucket]
            if seen >= need:
                return float(bucket)
        return float(max(self.histogram))

    @property
    def mean_latency_us(self) -> float:
        n = sum(self.histogram.values())
        return self.latency_total_us / n if n else 0.0

    @property
    def throughput(self) -> float:
        return self.records_seen / self.elapsed_s if self.elapsed_s > 0 else 0.0

    def tick(self) -> None:
        self.elapsed_s = time.perf_counter() - self.started

    def to_dict(self) -> dict[str, Any]:
        return {
            "records_seen": self.records_seen,
            "records_scored": self.records_scored,
            "records_dead_lettered": self.records_dead_lettered,
            "latency_us": {
                "mean": self.mean_latency_us,
                "p50": self.percentile(0.50),
                "p95": self.percentile(0.95),
                "p99": self.percentile(0.99),
                "histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            },
            "elapsed_s": self.elapsed_s,
            "throughput_rps": self.throughput,
        }


def write_stats(stats: StreamStats, path: str | os.PathLike) -> None:
    """Replace ``path`` atomically with the current stats."""
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(stats.to_dict(), fh, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


@dataclass
class _Outcome:
    index: int
    line: int
    raw: Any
    result: dict[str, Any] | None
    error: str | None
    start_ns: int


def _process(bundle: ModelBundle, index: int, line: int, item: Any, start_ns: int) -> _Outcome:
    try:
        rec = parse_record(item) if isinstance(item, str) else item
        if not isinstance(rec, Mapping):
            raise ValueError(f"expected a record object, got {type(rec).__name__}")
        vec = transform(rec, bundle.feature_schema, row=index)
        score = bundle.forest.score(vec.reshape(1, -1))
        anomalous = bool(label_mask(bundle.labeler, score)[0])
    except (ValueError, DataError) as exc:
        return _Outcome(index, line, item, None, str(exc), start_ns)
    rid = rec.get("id", index)
    return _Outcome(index, line, item, {"id": rid, "score": float(score[0]), "label": ANOMALY if anomalous else NORMAL}, None, start_ns)


def _items(source: Iterable[Any]) -> Iterator[tuple[int, int, Any, int]]:
    """Skip blank lines; stamp each item as it is dequeued."""
    index = 0
    for line, item in enumerate(source, start=1):
        if isinstance(item, str) and not item.strip():
            continue
        yield index, line, item, time.perf_counter_ns()
        index += 1


def warm_up(bundle: ModelBundle) -> None:
    """Load compiled kernels and pack the trees before timing starts."""
    bundle.forest.score(np.zeros((1, bundle.forest.n_features)))


def stream_score(
    source: Iterable[Any],
    bundle: ModelBundle | BundleHandle,
    sink: IO[str] | Callable[[str], Any],
    stats_out: str | os.PathLike | Callable[[StreamStats], Any] | None = None,
    dead_letter: DeadLetterSink | None = None,
    stats_interval: float = 10.0,
    workers: int = 1,
    batch_size: int = 256,
) -> StreamStats:
    """Score ``source`` in order and write one JSON line per record to ``sink``.

    ``stats_out`` (a path or a callback) receives the stats every
    ``stats_interval`` seconds and once at the end. With ``workers > 1``
    records are scored in batches spread over a thread pool and written back
    in source order. A failing sink stops the stream; the partial stats are
    still flushed before the exception propagates.
    """
    if workers < 1 or batch_size < 1:
        raise ParameterError("workers and batch_size must be >= 1")
    handle = bundle if isinstance(bundle, BundleHandle) else BundleHandle(bundle)
    write = sink if callable(sink) and not hasattr(sink, "write") else sink.write  # type: ignore[union-attr]
    dead = dead_letter if dead_letter is not None else DeadLetterSink()
    warm_up(handle.get())
    stats = StreamStats()
    last_flush = time.monotonic()

    def flush() -> None:
        stats.tick()
        if stats_out is None:
            return
        if callable(stats_out):
            stats_out(stats)
        else:
            write_stats(stats, stats_out)

    def emit(out: _Outcome) -> None:
        stats.records_seen += 1
        if out.result is None:
            dead.put(out.line, out.raw, out.error or "unknown error")
            stats.records_dead_lettered += 1
            return
        latency_us = (time.perf_counter_ns() - out.start_ns) // 1000
        out.result["latency_us"] = latency_us
        write(json.dumps(out.result) + "\n")
        stats.records_scored += 1
        stats.record_latency(int(latency_us))

    try:
        if workers == 1:
            for entry in _items(source):
                emit(_process(handle.get(), *entry))
                if stats_out is not None and time.monotonic() - last_flush >= stats_interval:
                    flush()
                    last_flush = time.monotonic()
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                batch: list[tuple[int, int, Any, int]] = []

                def drain() -> None:
                    b = handle.get()
                    for out in pool.map(lambda t: _process(b, *t), batch):
                        emit(out)
                    batch.clear()

                for entry in _items(source):
                    batch.append(entry)
                    if len(batch) >= batch_size * workers:
                        drain()
                        if stats_out is not None and time.monotonic() - last_flush >= stats_interval:
                            flush()
                            last_flush = time.monotonic()
                if batch:
                    drain()
    finally:
        flush()
    return stats
