"""Rebuild the academic benchmark CSVs under data/academic/ from public copies.

Only PyPI is assumed reachable, so the sources are data files bundled in
PyPI wheels:

    breastw     KEEL "wisconsin" (imbalanced-databases)   683 x 9
    pima        KEEL "pima" (imbalanced-databases)        768 x 8
    ionosphere  UCI ionosphere (Orange3 test data)        351 x 33
    satellite   UCI Statlog Landsat sat.trn + sat.tst     6435 x 36
                (imbalanced-databases); classes 2, 4, 5 are the anomalies,
                following the ODDS convention.

Usage:
    python scripts/build_academic_fixtures.py [--out data/academic]
"""
from __future__ import annotations

import argparse
import csv
import glob
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

WHEELS = {
    "imbalanced-databases": "imbalanced_databases==0.1.1",
    "orange3": "orange3==3.39.0",
}


def _download(spec: str, dest: Path) -> zipfile.ZipFile:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", str(dest), spec],
        check=True,
    )
    name = spec.split("==")[0].replace("-", "_").lower()
    (whl,) = [p for p in glob.glob(str(dest / "*.whl")) if Path(p).name.lower().startswith(name)]
    return zipfile.ZipFile(whl)


def _keel(text: str) -> tuple[list[list[str]], list[int]]:
    rows, labels = [], []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("@"):
            continue
        parts = [p.strip() for p in line.split(",")]
        rows.append(parts[:-1])
        labels.append(1 if parts[-1] == "positive" else 0)
    return rows, labels


def _write(path: Path, rows: list[list[str]], labels: list[int]) -> None:
    dim = len(rows[0])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dim)] + ["label"])
        for r, y in zip(rows, labels):
            w.writerow(r + [y])
    rate = sum(labels) / len(labels)
    print(f"{path.name}: {len(rows)} rows x {dim} dims, anomaly rate {rate:.1%}")


def main(argv: list[str] | None = None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "academic"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        imb = _download(WHEELS["imbalanced-databases"], tmp)
        orange = _download(WHEELS["orange3"], tmp)

        base = "imbalanced_databases/data/"
        rows, labels = _keel(imb.read(base + "wisconsin/wisconsin.dat").decode())
        _write(out / "breastw.csv", rows, labels)

        rows, labels = _keel(imb.read(base + "pima/pima.dat").decode())
        _write(out / "pima.csv", rows, labels)

        rows, labels = [], []
        for name in ("sat.trn.txt", "sat.tst.txt"):
            for line in imb.read(base + "satimage/" + name).decode().splitlines():
                parts = line.split()
                if parts:
                    rows.append(parts[:-1])
                    labels.append(1 if parts[-1] in {"2", "4", "5"} else 0)
        _write(out / "satellite.csv", rows, labels)

        text = orange.read("Orange/tests/datasets/ionosphere.tab").decode()
        reader = csv.reader(io.StringIO(text), delimiter="\t")
        body = list(reader)[3:]
        # second attribute is constant zero in the UCI file; ODDS drops it
        rows = [[r[0]] + r[2:-1] for r in body if r]
        labels = [1 if r[-1] == "b" else 0 for r in body if r]
        _write(out / "ionosphere.csv", rows, labels)


if __name__ == "__main__":
    main()
