from __future__ import annotations

import io
import json

import numpy as np
import pytest

from isoguard.dataio import (
    Dataset,
    DeadLetterSink,
    RecordView,
    from_text,
    read_delimited,
    read_ndjson_stream,
    read_table,
    write_delimited,
)
from isoguard.errors import IngestError
from isoguard.labeler import ANOMALY, NORMAL
from isoguard.pipeline import fit_pipeline


def test_breastw_fixture_shape(breastw_path):
    ds = read_delimited(breastw_path, label_column="label")
    assert len(ds) == 683 and len(ds.columns) == 9
    assert ds.anomaly_rate == pytest.approx(0.35, abs=0.005)
    assert ds.name == "breastw"


def test_header_only_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("a,b,label\n")
    ds = read_delimited(p, label_column="label")
    assert len(ds) == 0 and ds.columns == ("a", "b") and ds.labels == ()


def test_positive_value_and_no_header():
    ds = from_text("1,2,yes\n3,4,no\n", has_header=False, label_column="c2", positive="yes")
    assert ds.columns == ("c0", "c1")
    assert ds.labels == (ANOMALY, NORMAL)


def test_ragged_row_reports_line():
    with pytest.raises(IngestError) as info:
        from_text("a,b\n1,2\n3\n")
    assert info.value.line == 3


def test_missing_label_column():
    with pytest.raises(IngestError):
        from_text("a,b\n1,2\n", label_column="label")


def test_unreadable_file(tmp_path):
    with pytest.raises(IngestError):
        read_delimited(tmp_path / "missing.csv")


def test_round_trip(tmp_path):
    ds = from_text("x,y,label\n1,a,1\n2,b,0\n3,c,1\n", label_column="label")
    out = tmp_path / "rt.csv"
    write_delimited(ds, out)
    again = read_delimited(out, label_column="label")
    assert again.rows == ds.rows and again.labels == ds.labels


def test_unlabeled_view_has_no_labels():
    ds = from_text("x,label\n1,1\n2,0\n", label_column="label")
    view = ds.unlabeled()
    assert isinstance(view, RecordView) and not hasattr(view, "labels")
    assert all("label" not in r for r in view.rows)
    with pytest.raises(TypeError):
        fit_pipeline(ds)  # type: ignore[arg-type]


def test_truth_and_schema_hint():
    ds = from_text("x,host,label\n1,a,1\n2.5,b,0\n", label_column="label")
    assert np.array_equal(ds.truth(), [True, False])
    assert ds.schema_hint == {"x": "numeric", "host": "string"}


def test_label_length_checked():
    with pytest.raises(ValueError):
        Dataset(rows=({"a": 1},), columns=("a",), labels=(NORMAL, NORMAL))


def test_ndjson_in_order_and_dead_letter():
    lines = [json.dumps({"i": i}) for i in range(10)]
    lines[4] = "{oops"
    sink = DeadLetterSink(stream=io.StringIO())
    recs = list(read_ndjson_stream(lines, dead_letter=sink))
    assert [r["i"] for r in recs] == [0, 1, 2, 3, 5, 6, 7, 8, 9]
    assert sink.count == 1
    assert json.loads(sink.stream.getvalue())["line"] == 5


def test_ndjson_three_and_empty():
    assert [r["a"] for r in read_ndjson_stream(['{"a":1}', '{"a":2}\n', '{"a":3}'])] == [1, 2, 3]
    assert list(read_ndjson_stream([])) == []


def test_ndjson_non_object_and_fail_fast():
    sink = DeadLetterSink()
    assert list(read_ndjson_stream(["[1,2]", "3"], dead_letter=sink)) == []
    assert sink.count == 2
    with pytest.raises(IngestError) as info:
        list(read_ndjson_stream(['{"a":1}', "nope"], fail_fast=True))
    assert info.value.line == 2


def test_ndjson_is_lazy():
    def gen():
        yield '{"a": 1}'
        raise RuntimeError("source should not be read this far")

    it = read_ndjson_stream(gen())
    assert next(it) == {"a": 1}


def test_read_table_ndjson_with_labels(tmp_path):
    p = tmp_path / "d.ndjson"
    p.write_text('{"x": 1, "y": 0}\n{"x": 2, "y": 1}\n')
    ds = read_table(p, label_column="y")
    assert ds.columns == ("x",) and ds.labels == (NORMAL, ANOMALY)
