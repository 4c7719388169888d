"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 7] [--no-fit]

Kernel timings call both implementations in-process (the first numba call is
a warm-up and excluded).  The end-to-end row fits one random-slope model in a
fresh interpreter per backend, selected with ``FEDLMM_NUMBA``.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedlmm.kernels import numba_impl, numpy_impl

FIT_SNIPPET = """
import time
import numpy as np
from fedlmm.lmm import ModelSpec, ProviderData, fit
rng = np.random.default_rng(0)
providers = []
for h in range(70):
    n = int(rng.integers(20, 400))
    x = np.column_stack([np.ones(n), rng.normal(size=(n, 4))])
    y = x @ [1.0, 0.5, -0.2, 0.1, 0.0] + rng.normal(0, 0.3) + rng.normal(0, 0.1) * x[:, 1] + rng.normal(size=n)
    providers.append(ProviderData(str(h), x, y))
spec = ModelSpec("y", ("a", "b", "c", "d"), ("intercept", "a"))
fit(spec, providers[:3], restarts=0)
t0 = time.perf_counter()
f = fit(spec, providers)
print(time.perf_counter() - t0, f.n_evaluations)
"""


def _cases(rng):
    spd8 = rng.normal(size=(8, 8))
    spd8 = spd8 @ spd8.T + 8 * np.eye(8)
    spd40 = rng.normal(size=(40, 40))
    spd40 = spd40 @ spd40.T + 40 * np.eye(40)
    d = rng.normal(size=(2000, 5))
    d -= d.mean(axis=0)
    cross = []
    for _ in range(70):
        w = np.column_stack([np.ones(200), rng.normal(size=(200, 6))])
        cross.append(w.T @ w)
    cross = np.ascontiguousarray(np.stack(cross))
    z_idx = np.array([0, 1], dtype=np.int64)
    factor = np.array([[0.5, 0.0], [0.1, 0.3]])
    return [
        ("cholesky_lower p=8", "cholesky_lower", (spd8, 1e-12)),
        ("cholesky_lower p=40", "cholesky_lower", (spd40, 1e-12)),
        ("central_moment3 n=2000 p=5", "central_moment3", (d,)),
        ("central_moment4 n=2000 p=5", "central_moment4", (d,)),
        ("lmm_terms m=70 k=7 q=2", "lmm_terms", (cross, z_idx, factor)),
    ]


def _best(func, args, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(lambda: func(*args), number=1), 1e-7)))
    return min(timeit.repeat(lambda: func(*args), number=number, repeat=repeat)) / number


def _fit_time(flag):
    env = dict(os.environ, FEDLMM_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", FIT_SNIPPET], env=env, capture_output=True, text=True, check=True)
    seconds, evals = out.stdout.split()
    return float(seconds), int(evals)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    parser.add_argument("--no-fit", action="store_true", help="skip the end-to-end fit comparison")
    args = parser.parse_args(argv)
    if numba_impl is None:
        sys.exit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(1)
    print(f"{'kernel':<30}{'numba':>12}{'numpy':>12}{'speed-up':>10}")
    for label, name, call_args in _cases(rng):
        fast, slow = getattr(numba_impl, name), getattr(numpy_impl, name)
        fast(*call_args)  # compile
        t_fast = _best(fast, call_args, args.repeat)
        t_slow = _best(slow, call_args, args.repeat)
        print(f"{label:<30}{t_fast * 1e6:>10.1f}us{t_slow * 1e6:>10.1f}us{t_slow / t_fast:>9.1f}x")

    if not args.no_fit:
        t_fast, evals = _fit_time("1")
        t_slow, _ = _fit_time("0")
        label = f"fit m=70 q=2 ({evals} evals)"
        print(f"{label:<30}{t_fast * 1e3:>10.1f}ms{t_slow * 1e3:>10.1f}ms{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
