from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parent.parent
ACADEMIC = ROOT / "data" / "academic"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def breastw_path() -> Path:
    path = ACADEMIC / "breastw.csv"
    if not path.exists():
        pytest.skip("breastw fixture not built (run scripts/build_academic_fixtures.py)")
    return path


@pytest.fixture(scope="session")
def small_bundle():
    """A quick 32-tree bundle over three mixed-type columns."""
    from isoguard.dataio import Dataset
    from isoguard.features import FeatureSchema
    from isoguard.iforest import ForestParams
    from isoguard.pipeline import fit_pipeline

    r = np.random.default_rng(3)
    rows = tuple(
        {
            "ts": int(1547424000 + r.integers(0, 7 * 86400)),
            "ip": f"192.168.{r.integers(0, 4)}.{r.integers(1, 255)}",
            "proto": str(r.choice(["tcp", "tcp", "udp", "icmp"])),
            "bytes": float(r.lognormal(6, 1)),
        }
        for _ in range(400)
    )
    schema = FeatureSchema.from_spec(
        {
            "columns": [
                {"name": "ts", "kind": "timestamp"},
                {"name": "ip", "kind": "ip"},
                {"name": "proto", "kind": "categorical"},
                {"name": "bytes", "kind": "numeric_passthrough"},
            ]
        }
    )
    ds = Dataset(rows=rows, columns=("ts", "ip", "proto", "bytes"))
    return fit_pipeline(ds.unlabeled(), schema, ForestParams(num_trees=32, seed=11))


@pytest.fixture(scope="session")
def small_rows(small_bundle):
    r = np.random.default_rng(4)
    return [
        {
            "ts": int(1547424000 + r.integers(0, 7 * 86400)),
            "ip": f"10.{r.integers(0, 256)}.{r.integers(0, 256)}.{r.integers(1, 255)}",
            "proto": str(r.choice(["tcp", "udp", "sctp"])),
            "bytes": float(r.lognormal(6, 2)),
        }
        for _ in range(100)
    ]


# -- acceptance report ---------------------------------------------------------

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(tag, ok, detail)`` records a PASS/FAIL line and asserts ``ok``."""

    def check(tag: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {tag}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
