"""Regenerate the bundled 50-row synthetic wine fixtures (same schema as the UCI files)."""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from entroherd.data import WINE_COLUMNS, WINE_RANGES  # noqa: E402

# rough per-colour location/scale; log-normal for the skewed columns
PROFILES = {
    "red": [(8.3, 1.7), (0.53, 0.18), (0.27, 0.19), (2.5, 0.35), (0.085, 0.3), (15, 0.6), (45, 0.6),
            (0.9967, 0.0019), (3.31, 0.15), (0.66, 0.17), (10.4, 1.0)],
    "white": [(6.85, 0.84), (0.28, 0.10), (0.33, 0.12), (6.0, 0.8), (0.045, 0.3), (34, 0.45), (135, 0.3),
              (0.994, 0.003), (3.19, 0.15), (0.49, 0.11), (10.5, 1.2)],
}
LOGNORMAL = {3, 4, 5, 6}
DECIMALS = [1, 3, 2, 1, 3, 0, 0, 5, 2, 2, 1]


def make(color, n=50, seed=7):
    rng = np.random.default_rng([seed, len(color)])
    cols = []
    for k, (loc, scale) in enumerate(PROFILES[color]):
        v = loc * np.exp(scale * rng.standard_normal(n)) if k in LOGNORMAL else loc + scale * rng.standard_normal(n)
        lo, hi = WINE_RANGES[k]
        cols.append(np.round(np.clip(v, lo, hi), DECIMALS[k]))
    cols[2][:3] = 0.0  # a few zero citric-acid entries exercise the log substitution
    quality = rng.integers(3, 9, size=n)
    header = ";".join(f'"{c}"' for c in WINE_COLUMNS + ("quality",))
    lines = [header]
    for r in range(n):
        lines.append(";".join(f"{cols[k][r]:.{DECIMALS[k]}f}" for k in range(11)) + f";{quality[r]}")
    return "\n".join(lines) + "\n"


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "entroherd" / "fixtures"
    out.mkdir(exist_ok=True)
    for color in ("red", "white"):
        (out / f"winequality-{color}.csv").write_text(make(color))
