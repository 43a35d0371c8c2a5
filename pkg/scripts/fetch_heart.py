#!/usr/bin/env python3
"""Download the UCI Cleveland heart-disease data and write data/heart.csv
(303 rows). Needs network access to archive.ics.uci.edu.

Transform (documented so the fixture is reproducible):
  - columns: age, sex, cp, trestbps, chol, fbs, restecg, thalach, exang,
    oldpeak, slope, ca, thal, target
  - target = 1 if the severity field `num` > 0 else 0 (presence vs absence)
  - the six '?' cells in ca/thal are kept verbatim; the loader one-hot
    encodes those columns, so '?' becomes its own indicator (no imputation,
    no dropped rows)
"""

import sys
import urllib.request
from pathlib import Path

URL = ("https://archive.ics.uci.edu/ml/machine-learning-databases/"
       "heart-disease/processed.cleveland.data")
COLUMNS = ["age", "sex", "cp", "trestbps", "chol", "fbs", "restecg",
           "thalach", "exang", "oldpeak", "slope", "ca", "thal"]


def main():
    out = Path(__file__).resolve().parent.parent / "data" / "heart.csv"
    try:
        with urllib.request.urlopen(URL, timeout=60) as resp:
            raw = resp.read().decode("utf-8")
    except OSError as err:
        print(f"download failed ({err}); this sandbox has no data-host "
              "network access — run on a networked machine", file=sys.stderr)
        sys.exit(1)
    lines = [ln for ln in raw.strip().splitlines() if ln.strip()]
    rows = []
    for ln in lines:
        cells = ln.strip().split(",")
        if len(cells) != 14:
            raise SystemExit(f"unexpected row width: {ln!r}")
        target = "1" if float(cells[13]) > 0 else "0"
        rows.append(cells[:13] + [target])
    out.parent.mkdir(exist_ok=True)
    with open(out, "w") as fh:
        fh.write(",".join(COLUMNS + ["target"]) + "\n")
        for cells in rows:
            fh.write(",".join(cells) + "\n")
    print(f"wrote {out} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
