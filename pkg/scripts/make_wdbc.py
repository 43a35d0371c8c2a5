#!/usr/bin/env python3
"""Write data/wdbc.csv from scikit-learn's bundled copy of the UCI Wisconsin
Diagnostic Breast Cancer data (569 rows, 30 features).

Target convention: 1 = malignant, 0 = benign.
"""

from pathlib import Path

import pandas as pd
from sklearn.datasets import load_breast_cancer


def main():
    raw = load_breast_cancer()
    df = pd.DataFrame(raw.data, columns=[n.replace(" ", "_")
                                         for n in raw.feature_names])
    df["target"] = (raw.target == 0).astype(int)  # sklearn: 0 = malignant
    out = Path(__file__).resolve().parent.parent / "data" / "wdbc.csv"
    out.parent.mkdir(exist_ok=True)
    df.to_csv(out, index=False)
    print(f"wrote {out} ({len(df)} rows, {df.shape[1] - 1} features, "
          f"{int(df['target'].sum())} positive)")


if __name__ == "__main__":
    main()
