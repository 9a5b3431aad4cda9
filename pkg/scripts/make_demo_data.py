"""Regenerate the demo internal dataset and prediction CSV (seeded).

The columns mirror the high-grade prostate-cancer risk setting: six routinely
measured predictors shared with established calculators plus two newer
biomarkers only the internal study measured. Values are synthetic.
"""

import csv
from pathlib import Path

import numpy as np
from scipy.special import expit

OUT = Path(__file__).resolve().parent.parent / "demo"

N = 200
SEED = 20220500


def draw(n, rng):
    # scales chosen so both example calculators return moderate risks on
    # every row (degenerate synthetic blocks would make the demo fragile)
    log2psa = rng.normal(2.3, 1.0, n)
    dre = (rng.random(n) < 0.15).astype(float)
    age = np.round(rng.normal(62.0, 8.0, n))
    race = (rng.random(n) < 0.10).astype(float)
    biopsy = (rng.random(n) < 0.25).astype(float)
    log2tpv = rng.normal(0.5, 0.4, n)
    log2pca3 = rng.normal(4.8, 1.2, n) + 0.25 * (log2psa - 2.3)
    log2t2erg = rng.normal(3.0, 1.8, n) + 0.2 * (log2pca3 - 4.8)
    eta = (
        -3.4 + 0.7 * log2psa + 0.9 * dre + 0.025 * age + 0.5 * race
        - 0.8 * biopsy - 1.1 * (log2tpv - 0.5) + 0.45 * (log2pca3 - 4.8)
        + 0.1 * (log2t2erg - 3.0) - 0.025 * 62
    )
    y = (rng.random(n) < expit(eta)).astype(float)
    return {
        "hggc": y, "log2psa": log2psa, "dre": dre, "age": age, "race": race,
        "biopsy": biopsy, "log2tpv": log2tpv, "log2pca3": log2pca3,
        "log2t2erg": log2t2erg,
    }


def write_csv(path, cols, names):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        n = len(next(iter(cols.values())))
        for i in range(n):
            writer.writerow([repr(float(cols[name][i])) for name in names])


def main():
    OUT.mkdir(exist_ok=True)
    rng = np.random.default_rng(SEED)
    cols = draw(N, rng)
    names = ["hggc", "log2psa", "dre", "age", "race", "biopsy", "log2tpv",
             "log2pca3", "log2t2erg"]
    write_csv(OUT / "internal.csv", cols, names)
    new = draw(25, np.random.default_rng(SEED + 1))
    write_csv(OUT / "newdata.csv", new, names[1:])
    print(f"wrote {OUT/'internal.csv'} and {OUT/'newdata.csv'}")


if __name__ == "__main__":
    main()
