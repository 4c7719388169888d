"""Regenerate ``rounding_fixture.csv``: 12 sites, one standardized and one binary covariate.

Run from this directory: ``python3 make_rounding_fixture.py``.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

SEED = 4242


def build(seed: int = SEED) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    frames = []
    for h in range(12):
        n = int(rng.integers(80, 250))
        x1 = rng.normal(size=n)
        x2 = rng.binomial(1, 0.45, size=n).astype(float)
        x3 = rng.normal(loc=0.5, scale=1.5, size=n)
        u0, u1 = rng.normal(scale=[0.4, 0.15])
        y = 1.2 + u0 + (0.6 + u1) * x1 - 0.35 * x2 + 0.25 * x3 + rng.normal(scale=0.8, size=n)
        frames.append(pd.DataFrame({"site": f"site{h:02d}", "y": y, "x1": x1, "x2": x2, "x3": x3}))
    return pd.concat(frames, ignore_index=True)


if __name__ == "__main__":
    build().to_csv("rounding_fixture.csv", index=False, float_format="%.17g")
