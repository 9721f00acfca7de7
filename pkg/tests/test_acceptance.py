"""End-to-end acceptance checks. Each test records one PASS/FAIL line.

Run alone with ``pytest -m acceptance -s``; the lines are also repeated in
the terminal summary.
"""
from __future__ import annotations

import io
import itertools
import json
import math
import time
from functools import lru_cache

import numpy as np
import pytest

from isoguard.dataio import DeadLetterSink, read_delimited
from isoguard.errors import DegenerateInputError, ModelLoadError, UnsupportedVersionError
from isoguard.eval import auc, evaluate_scores, seed_scores
from isoguard.features import FeatureSchema, transform_columns
from isoguard.iforest import ForestParams, avg_path_length_c, fit
from isoguard.labeler import KMeansLabelerModel, approx_quantile, kmeans_fit, label_mask
from isoguard.model_store import dumps, load, loads, save
from isoguard.pipeline import LabelerConfig, fit_pipeline, label_scores, score_records
from isoguard.dataio import Dataset
from isoguard.stream import stream_score
from isoguard.synth import SCHEMA_SPEC, generate_week

from conftest import ACADEMIC

pytestmark = pytest.mark.acceptance

SEEDS = tuple(range(1, 11))
KMEANS = LabelerConfig("kmeans")

# (target label-AUC, tolerance)
REQUIRED = {
    "breastw": (0.98, 0.05),
    "pima": (0.64, 0.07),
    "ionosphere": (0.78, 0.07),
    "arrhythmia": (0.76, 0.07),
    "satellite": (0.73, 0.06),
    "shuttle": (0.98, 0.05),
    "annthyroid": (0.75, 0.07),
}
OPTIONAL = {
    "http": (0.96, 0.07),
    "forestcover": (0.88, 0.07),
    "mulcross": (0.92, 0.07),
    "smtp": (0.85, 0.07),
    "mammography": (0.82, 0.07),
}
CR_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)


def available(name: str) -> bool:
    return (ACADEMIC / f"{name}.csv").exists()


@lru_cache(maxsize=None)
def academic(name: str):
    ds = read_delimited(ACADEMIC / f"{name}.csv", label_column="label")
    return ds.truth(), seed_scores(ds, ForestParams(), SEEDS)


def report(name: str, labeler: LabelerConfig):
    truth, scores = academic(name)
    return evaluate_scores(name, truth, scores, labeler)


def run_datasets() -> list[str]:
    return [n for n in [*REQUIRED, *OPTIONAL] if available(n)]


# -- 1 -------------------------------------------------------------------------

@pytest.mark.parametrize("name", list(REQUIRED))
def test_c1_label_auc_required(name, criterion):
    target, tol = REQUIRED[name]
    if not available(name):
        criterion(f"C1 {name}", False, f"dataset file {name}.csv not available offline; target {target}±{tol} unverified")
    t0 = time.perf_counter()
    rep = report(name, KMEANS)
    took = time.perf_counter() - t0
    criterion(
        f"C1 {name}",
        abs(rep.auc_labels - target) <= tol,
        f"label-AUC {rep.auc_labels:.3f}±{rep.auc_labels_std:.3f} over 10 seeds "
        f"(target {target}±{tol}); score-AUC {rep.auc_scores:.3f}; {took:.1f}s",
    )


@pytest.mark.parametrize("name", list(OPTIONAL))
def test_c1_label_auc_optional(name, criterion):
    if not available(name):
        pytest.skip(f"optional dataset {name} not fetched")
    target, tol = OPTIONAL[name]
    rep = report(name, KMEANS)
    criterion(f"C1 {name}", abs(rep.auc_labels - target) <= tol, f"label-AUC {rep.auc_labels:.3f} (target {target}±{tol})")


# -- 2 -------------------------------------------------------------------------

def test_c2_kmeans_beats_quantile(criterion):
    names = run_datasets()
    wins = []
    for n in names:
        km = report(n, KMEANS).auc_labels
        q = report(n, LabelerConfig("quantile", contamination=0.1)).auc_labels
        wins.append((n, km, q))
    won = sum(km > q for _, km, q in wins)
    detail = ", ".join(f"{n} {km:.3f} vs {q:.3f}" for n, km, q in wins)
    # 7 of 10 scaled to the number of datasets actually run
    criterion("C2", bool(names) and won >= math.ceil(0.7 * len(names)), f"K-Means wins {won}/{len(names)}: {detail}")


# -- 3 -------------------------------------------------------------------------

def test_c3_breastw_cr_trend(criterion):
    lo = report("breastw", LabelerConfig("quantile", contamination=0.1)).auc_labels
    hi = report("breastw", LabelerConfig("quantile", contamination=0.4)).auc_labels
    gain = hi / lo - 1.0
    criterion("C3 breastw", gain >= 0.30, f"label-AUC CR=0.1 {lo:.3f}, CR=0.4 {hi:.3f}, gain {gain:+.1%} (need >= +30%)")


def test_c3_http_cr_trend(criterion):
    if not available("http"):
        pytest.skip("optional dataset http not fetched")
    aucs = [report("http", LabelerConfig("quantile", contamination=c)).auc_labels for c in CR_GRID]
    ok = all(b <= a for a, b in itertools.pairwise(aucs))
    criterion("C3 http", ok, "label-AUC over CR 0.1..0.5: " + ", ".join(f"{a:.3f}" for a in aucs))


# -- 4 -------------------------------------------------------------------------

@pytest.mark.parametrize("name", list(REQUIRED))
def test_c4_relative_error_trend(name, criterion):
    if not available(name):
        pytest.skip(f"{name} not available; covered by its C1 failure")
    by_cr = {c: report(name, LabelerConfig("quantile", contamination=c)).auc_labels for c in CR_GRID}
    best = max(by_cr, key=by_cr.get)
    e0 = report(name, LabelerConfig("quantile", contamination=best, relative_error=0.0))
    e5 = report(name, LabelerConfig("quantile", contamination=best, relative_error=0.5))
    criterion(
        f"C4 {name}",
        e5.auc_labels <= e0.auc_labels and e5.auc_scores == e0.auc_scores,
        f"best CR {best}: label-AUC eps=0 {e0.auc_labels:.3f}, eps=0.5 {e5.auc_labels:.3f}; "
        f"score-AUC {e0.auc_scores:.6f} vs {e5.auc_scores:.6f}",
    )


# -- 5 -------------------------------------------------------------------------

def test_c5a_approx_quantile_oracle(criterion):
    rng = np.random.default_rng(501)
    bad = []
    for case in range(1000):
        n = int(rng.integers(1, 2000))
        x = rng.choice([rng.random(n), rng.integers(0, 20, n) / 20.0])
        q = float(rng.random())
        eps = float(rng.choice([0.0, 0.001, 0.01, 0.05, 0.1, 0.5]))
        v = approx_quantile(x, q, eps)
        s = np.sort(x)
        target = min(max(math.ceil(q * n), 1), n)
        # 1-based rank interval occupied by v in the sorted oracle
        lo = int(np.searchsorted(s, v, "left")) + 1
        hi = int(np.searchsorted(s, v, "right"))
        if hi < lo or lo > target + eps * n or hi < target - eps * n:
            bad.append((case, n, q, eps))
    criterion("C5a", not bad, f"1000 cases vs full-sort oracle, {len(bad)} outside eps*n rank error")


def brute_wcss(x: np.ndarray) -> float:
    best = math.inf
    n = x.size
    for mask in range(1, 2 ** (n - 1)):
        sel = np.array([(mask >> i) & 1 for i in range(n)], bool)
        a, b = x[sel], x[~sel]
        best = min(best, ((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum())
    return best


def model_wcss(model: KMeansLabelerModel, x: np.ndarray) -> float:
    assign = model.assign(x)
    return float(sum(((x[assign == j] - x[assign == j].mean()) ** 2).sum() for j in set(assign.tolist())))


def test_c5b_two_means_vs_brute_force(criterion):
    rng = np.random.default_rng(502)
    bad = 0
    done = 0
    while done < 500:
        n = int(rng.integers(2, 13))
        x = rng.choice([rng.random(n), rng.integers(0, 5, n) / 4.0])
        try:
            model = kmeans_fit(x, k=2, seed=int(rng.integers(0, 1000)))
        except DegenerateInputError:
            continue
        done += 1
        if model_wcss(model, x) > brute_wcss(x) + 1e-12:
            bad += 1
    criterion("C5b", bad == 0, f"500 cases n<=12, {bad} above the brute-force WCSS minimum")


def concordance(truth: np.ndarray, v: np.ndarray) -> float:
    p, q = v[truth], v[~truth]
    diff = p[:, None] - q[None, :]
    return float(((diff > 0) + 0.5 * (diff == 0)).mean())


def test_c5c_auc_vs_concordance(criterion):
    rng = np.random.default_rng(503)
    bad = 0
    done = 0
    while done < 500:
        n = int(rng.integers(2, 201))
        truth = rng.random(n) < rng.uniform(0.05, 0.95)
        if truth.all() or not truth.any():
            continue
        v = rng.choice([rng.random(n), rng.integers(0, 10, n) / 10.0])
        done += 1
        if abs(auc(truth, v) - concordance(truth, v)) > 1e-12:
            bad += 1
    criterion("C5c", bad == 0, f"500 cases n<=200, {bad} disagreements with the pairwise oracle")


def separated_by_one_cut(scores: np.ndarray, anomalous: np.ndarray) -> bool:
    if anomalous.all() or not anomalous.any():
        return True
    a, nrm = scores[anomalous], scores[~anomalous]
    return a.min() > nrm.max() or a.max() < nrm.min()


def test_c5d_threshold_consistency(criterion):
    models = 0
    bad = []
    for name in run_datasets():
        _, per_seed = academic(name)
        for seed, scores in per_seed:
            m = kmeans_fit(scores, seed=seed)
            models += 1
            mask = label_mask(m, scores)
            if not separated_by_one_cut(scores, mask) or not np.array_equal(mask, scores > m.boundary()) and not np.array_equal(
                mask, scores >= m.boundary()
            ):
                bad.append((name, seed))
    rng = np.random.default_rng(504)
    for _ in range(300):
        x = rng.beta(2, 5, int(rng.integers(3, 500)))
        m = kmeans_fit(x, seed=int(rng.integers(0, 99)))
        models += 1
        if not separated_by_one_cut(x, label_mask(m, x)):
            bad.append(("random", None))
    criterion("C5d", not bad, f"{models} fitted K-Means models, {len(bad)} not expressible as one score cut")


# -- 6 -------------------------------------------------------------------------

def test_c6_formula_checks(criterion):
    notes = []
    ok = avg_path_length_c(1) == 0.0 and avg_path_length_c(2) == 1.0
    notes.append(f"c(1)={avg_path_length_c(1)}, c(2)={avg_path_length_c(2)}")
    c = avg_path_length_c(256)
    ok &= 2.0 ** (-c / c) == 0.5
    ok &= 2.0 ** (-1e-12 / c) > 0.999999
    notes.append("s(E=c)=0.5, s(E->0)->1")

    rng = np.random.default_rng(6)
    m = fit(rng.normal(size=(2000, 4)), ForestParams(seed=6))
    s = m.score(rng.uniform(-50, 50, (100_000, 4)))
    in_range = bool(((s > 0) & (s <= 1)).all())
    ok &= in_range
    notes.append(f"1e5 points in (0,1]: {in_range} [{s.min():.3f}, {s.max():.3f}]")

    r = np.random.default_rng(7)
    X = np.vstack([r.normal(size=(500, 2)), [[8.0, 8.0]]])
    top = int(np.argmax(fit(X, ForestParams(seed=7)).score(X)))
    ok &= top == 500
    notes.append(f"planted outlier rank 1 at seed 7: {top == 500}")
    criterion("C6", bool(ok), "; ".join(notes))


# -- 7 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def log_bundle():
    train = generate_week(20_000, seed=101)
    rows = tuple(train.records())
    ds = Dataset(rows=rows, columns=tuple(rows[0]))
    return fit_pipeline(ds.unlabeled(), FeatureSchema.from_spec(SCHEMA_SPEC), ForestParams(seed=3))


def test_c7_streaming(log_bundle, criterion):
    replay = generate_week(10_000, seed=102).records()
    lines = [json.dumps(r) for r in replay]
    batch = score_records(log_bundle, replay)
    batch_labels = label_scores(log_bundle, batch)

    out = io.StringIO()
    stats = stream_score(lines, log_bundle, out)
    got = [json.loads(x) for x in out.getvalue().splitlines()]
    same = [o["score"] for o in got] == batch.tolist() and [o["label"] == "anomaly" for o in got] == batch_labels.tolist()

    # 1% malformed: broken JSON, bad IP, missing column in rotation
    rng = np.random.default_rng(7)
    bad_at = set(rng.choice(len(lines), 100, replace=False).tolist())
    dirty = []
    for i, line in enumerate(lines):
        if i not in bad_at:
            dirty.append(line)
            continue
        kind = len(dirty) % 3
        if kind == 0:
            dirty.append(line[: len(line) // 2])
        elif kind == 1:
            dirty.append(json.dumps({**replay[i], "src_ip": "999.1.1.1"}))
        else:
            dirty.append(json.dumps({k: v for k, v in replay[i].items() if k != "protocol"}))
    dead = DeadLetterSink(stream=io.StringIO())
    out2 = io.StringIO()
    s2 = stream_score(dirty, log_bundle, out2, dead_letter=dead)
    kept = [i for i in range(len(lines)) if i not in bad_at]
    scored = [json.loads(x)["score"] for x in out2.getvalue().splitlines()]
    conserved = (
        s2.records_seen == s2.records_scored + s2.records_dead_lettered == 10_000
        and s2.records_dead_lettered == dead.count == 100
        and scored == batch[kept].tolist()
    )
    mean_ms = stats.mean_latency_us / 1000
    criterion(
        "C7",
        same and conserved and mean_ms <= 5.0,
        f"1e4 replay identical: {same}; mean latency {mean_ms:.3f} ms (p99 {stats.percentile(0.99) / 1000:.3f} ms, "
        f"limit 5 ms, 256 trees); conservation with 100 malformed: {conserved}",
    )


# -- 8 -------------------------------------------------------------------------

def test_c8_persistence(log_bundle, tmp_path, criterion):
    path = tmp_path / "bundle.json"
    save(log_bundle, path)
    again = load(path)
    rows = generate_week(1_000, seed=103).records()
    pick = np.random.default_rng(8).choice(len(rows), 100, replace=False)
    sample = [rows[i] for i in pick]
    a, b = score_records(log_bundle, sample), score_records(again, sample)
    identical = np.array_equal(a, b) and np.array_equal(label_scores(log_bundle, a), label_scores(again, b))

    doc = json.loads(dumps(log_bundle))
    version_error = False
    try:
        loads(json.dumps({**doc, "format_version": 2}))
    except UnsupportedVersionError:
        version_error = True
    sections = []
    for section, breaker in [
        ("forest", lambda d: d["forest"]["trees"][0].update(left=[5, 5])),
        ("labeler", lambda d: d["labeler"].update(centroids="x")),
        ("feature_schema", lambda d: d["feature_schema"].update(columns=7)),
    ]:
        d = json.loads(dumps(log_bundle))
        breaker(d)
        try:
            loads(json.dumps(d))
        except ModelLoadError as exc:
            sections.append(exc.section == section)
        else:
            sections.append(False)
    criterion(
        "C8",
        identical and version_error and all(sections),
        f"100 rows identical scores+labels: {identical}; unsupported version: {version_error}; "
        f"corrupt sections named: {sections}",
    )


# -- synthetic week --------------------------------------------------------------

def test_synthetic_week(criterion):
    t0 = time.perf_counter()
    week = generate_week(1_000_000, seed=0)
    schema = FeatureSchema.from_spec(SCHEMA_SPEC).fit_columns(week.columns)
    X = transform_columns(week.columns, schema)
    scores = fit(X, ForestParams(seed=0)).score(X)
    flagged = label_mask(kmeans_fit(scores, seed=0), scores)
    took = time.perf_counter() - t0
    window = float(flagged[week.attack].mean())
    base = float(flagged[~week.attack].mean())
    criterion(
        "SYNTH",
        window >= 0.80 and base <= 0.15 and took < 120,
        f"1e6 rows seed 0: planted windows flagged {window:.1%} (>= 80%), "
        f"port spike {flagged[week.port_spike].mean():.1%}, IP burst {flagged[week.ip_burst].mean():.1%}; "
        f"baseline flagged {base:.1%} (<= 15%); {took:.1f}s end to end (< 120s)",
    )
