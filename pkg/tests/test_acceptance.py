"""Acceptance gate: one pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
summary) or ``python3 tests/test_acceptance.py``.  Criterion 8 needs the
public COVID-19 testing table as a CSV named by ``FEDLMM_CHOP_CSV``.
"""

from __future__ import annotations

import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _sim import federated_tables, hc0_raw, random_spd, spec_for, to_providers  # noqa: E402

from fedlmm.cli import main as cli_main  # noqa: E402
from fedlmm.lmm import LmmParams, ModelSpec, deviance, fit, providers_from_pseudo, reml_criterion  # noqa: E402
from fedlmm.pseudogen import GeneratorConfig, generate, generate_all  # noqa: E402
from fedlmm.regression import cross_products_from_summary, fit_ols, robust_sandwich  # noqa: E402
from fedlmm.summaries import ProviderSummary, summarize_matrix  # noqa: E402

DATA = Path(__file__).parent / "data"
_RESULTS: dict[int, str] = {}

pytestmark = pytest.mark.acceptance


def record(number: int, ok: bool, detail: str) -> None:
    _RESULTS[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(_RESULTS[number])


def summary_lines() -> list[str]:
    lines = [_RESULTS[k] for k in sorted(_RESULTS)]
    if lines and 8 not in _RESULTS:
        lines.append("criterion 8: SKIPPED  external data not supplied (set FEDLMM_CHOP_CSV)")
    return lines


def _pseudo_providers(spec, tables, seed):
    cols = [spec.response, *spec.fixed]
    sums = [summarize_matrix(pid, t[cols].to_numpy(), cols) for pid, t in tables.items()]
    return providers_from_pseudo(spec, generate_all(sums, GeneratorConfig(seed=seed)))


# ---------------------------------------------------------------------------

def test_criterion_1_moment_exactness():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(200):
        p = int(rng.integers(1, 9))
        n = int(rng.integers(p + 1, 501))
        cov = random_spd(rng, p, float(rng.lognormal(0, 1.5)))
        mean = rng.normal(scale=float(rng.lognormal(0, 2)), size=p)
        target = ProviderSummary("t", n, [f"v{j}" for j in range(p)], mean, cov)
        bound_c = 1e-10 * (1 + np.abs(cov).sum(axis=1).max())
        for method in ("cholesky", "eigen_svd"):
            out = generate(n, target, GeneratorConfig(seed=i, method=method))
            got = summarize_matrix("t", out.data, target.names)
            err_m = np.max(np.abs(got.mean - mean) / (1e-10 * (1 + np.abs(mean))))
            err_c = np.max(np.abs(got.cov - cov)) / bound_c
            worst = max(worst, err_m, err_c)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.0 and elapsed < 10
    record(1, ok, f"400 generations, worst error {worst:.3g} of tolerance, {elapsed:.2f}s")
    assert ok


def test_criterion_2_regression_sufficiency():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 6))  # predictors; p = k + 1 <= 6
        n = int(rng.integers(k + 3, 201))
        x = rng.normal(size=(n, k)) * rng.lognormal(size=k) + rng.normal(scale=3, size=k)
        y = rng.normal() + x @ rng.normal(size=k) + rng.lognormal() * rng.normal(size=n)
        s = summarize_matrix("p", np.column_stack([y, x]), ["y", *[f"x{j}" for j in range(k)]])
        f = fit_ols(cross_products_from_summary(s, "y"))
        design = np.column_stack([np.ones(n), x])
        beta = np.linalg.solve(design.T @ design, design.T @ y)
        rss = float(np.sum((y - design @ beta) ** 2))
        errs = [
            np.max(np.abs(f.beta - beta)) / np.max(np.abs(beta)),
            abs(f.sigma2_mle - rss / n) / (rss / n),
            abs(f.sigma2_ols - rss / (n - k - 1)) / (rss / (n - k - 1)),
        ]
        worst = max(worst, *errs)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5
    record(2, ok, f"100 datasets, worst relative error {worst:.3g}, {elapsed:.2f}s")
    assert ok


def test_criterion_3_robust_variance():
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    worst = worst_entry = 0.0
    for _ in range(50):
        k = int(rng.integers(1, 5))
        n = int(rng.integers(20, 300))
        x = rng.normal(size=(n, k)) * rng.lognormal(size=k) + rng.normal(size=k)
        y = 1.0 + x @ rng.normal(size=k) + (0.2 + np.abs(x[:, 0])) * rng.normal(size=n)
        names = ["y", *[f"x{j}" for j in range(k)]]
        s = summarize_matrix("p", np.column_stack([y, x]), names, with_higher_moments=True)
        f = fit_ols(cross_products_from_summary(s, "y"))
        got = robust_sandwich(s, f, "y")
        oracle = hc0_raw(np.column_stack([np.ones(n), x]), y)
        # each entry measured on its natural scale sqrt(V_ii V_jj)
        scale = np.sqrt(np.outer(np.diag(oracle), np.diag(oracle)))
        worst = max(worst, float(np.max(np.abs(got - oracle) / scale)))
        worst_entry = max(worst_entry, float(np.max(np.abs(got - oracle) / np.abs(oracle))))
    elapsed = time.perf_counter() - t0
    ok = worst_entry <= 1e-8 and elapsed < 5
    record(3, ok, f"50 datasets, worst entrywise relative error {worst_entry:.3g} "
                  f"(on sqrt(Vii Vjj) scale {worst:.3g}), {elapsed:.2f}s")
    assert ok


def test_criterion_4_pointwise_likelihood():
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    worst = 0.0
    for layout in range(10):
        q = 1 + layout % 2
        k = int(rng.integers(q, 5))  # p = k + 1 <= 5
        m = int(rng.integers(2, 13))
        spec = spec_for(k, q)
        tables = federated_tables(rng, m=m, n_range=(10, 300), k=k, q=q, sd_u=(0.7, 0.3))
        raw = to_providers(spec, tables)
        pseudo = _pseudo_providers(spec, tables, seed=layout)
        for _ in range(50):
            g = random_spd(rng, q, float(rng.uniform(0.01, 1.0)))
            prm = LmmParams(rng.normal(scale=0.5, size=spec.p) + np.linspace(0.8, -0.6, k + 1),
                            float(rng.uniform(0.3, 3.0)), g)
            d = abs(deviance(spec, raw, prm) - deviance(spec, pseudo, prm))
            r = abs(reml_criterion(spec, raw, prm) - reml_criterion(spec, pseudo, prm))
            worst = max(worst, d, r)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 30
    record(4, ok, f"10 layouts x 50 points, worst absolute gap {worst:.3g}, {elapsed:.2f}s")
    assert ok


def test_criterion_5_end_to_end_equivalence():
    rng = np.random.default_rng(505)
    t0 = time.perf_counter()
    worst = {"beta": 0.0, "var": 0.0, "crit": 0.0, "blup": 0.0}
    for rep in range(20):
        q = 1 + rep % 2
        k = int(rng.integers(q, 4))
        spec = spec_for(k, q, "REML" if rep % 4 < 2 else "ML")
        tables = federated_tables(rng, m=int(rng.integers(4, 11)), n_range=(15, 150), k=k, q=q, sd_u=(0.6, 0.3))
        f_raw = fit(spec, to_providers(spec, tables))
        f_ps = fit(spec, _pseudo_providers(spec, tables, seed=rep))
        worst["beta"] = max(worst["beta"], float(np.max(np.abs(f_raw.beta - f_ps.beta) / (1 + np.abs(f_raw.beta)))))
        worst["var"] = max(worst["var"], abs(f_raw.params.sigma2 - f_ps.params.sigma2),
                           float(np.max(np.abs(f_raw.params.g - f_ps.params.g))))
        worst["crit"] = max(worst["crit"], abs(f_raw.criterion - f_ps.criterion))
        worst["blup"] = max(worst["blup"], max(float(np.max(np.abs(f_raw.blups[h] - f_ps.blups[h])))
                                               for h in f_raw.provider_ids))
    elapsed = time.perf_counter() - t0
    ok = (worst["beta"] <= 1e-6 and worst["var"] <= 1e-4 and worst["crit"] <= 1e-6
          and worst["blup"] <= 1e-6 and elapsed < 120)
    detail = ", ".join(f"{k} {v:.3g}" for k, v in worst.items())
    record(5, ok, f"20 datasets, worst gaps: {detail}, {elapsed:.2f}s")
    assert ok


def test_criterion_6_regression_cross_check():
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(20):
        k = int(rng.integers(1, 4))
        tables = federated_tables(rng, m=int(rng.integers(2, 8)), k=k, q=0)
        x = np.vstack([t[[f"x{j + 1}" for j in range(k)]].to_numpy() for t in tables.values()])
        y = np.concatenate([t["y"].to_numpy() for t in tables.values()])
        s = summarize_matrix("all", np.column_stack([y, x]), ["y", *[f"x{j + 1}" for j in range(k)]])
        ols = fit_ols(cross_products_from_summary(s, "y"))
        for method, target in (("REML", ols.sigma2_ols), ("ML", ols.sigma2_mle)):
            spec = ModelSpec("y", tuple(f"x{j + 1}" for j in range(k)), (), method)
            f = fit(spec, to_providers(spec, tables))
            worst = max(worst, abs(f.params.sigma2 - target) / target)
    ok = worst <= 1e-10
    record(6, ok, f"20 datasets, worst relative sigma^2 gap {worst:.3g}")
    assert ok


def test_criterion_7_rounding_sensitivity(tmp_path, capsys):
    fixture = DATA / "rounding_fixture.csv"
    betas = {}
    for label, extra in (("full", []), ("round2", ["--round", "2"])):
        sfile = tmp_path / f"{label}.json"
        rfile = tmp_path / f"{label}_fit.json"
        assert cli_main(["summarize", "--input", str(fixture), "--provider-col", "site", "--vars", "y,x1,x2,x3",
                         "--out", str(sfile), *extra]) == 0
        assert cli_main(["fit", "--summaries", str(sfile), "--response", "y", "--random", "intercept,x1",
                         "--out", str(rfile)]) == 0
        betas[label] = np.array([c["estimate"] for c in json.loads(rfile.read_text())["coefficients"]])
    capsys.readouterr()
    delta = np.abs(betas["full"] - betas["round2"])
    same_sign = bool(np.all(np.sign(betas["full"]) == np.sign(betas["round2"])))
    ok = bool(np.all(delta < 5e-3)) and same_sign
    record(7, ok, f"max |delta beta| {delta.max():.3g}, signs preserved: {same_sign}")
    assert ok


# ---------------------------------------------------------------------------
# criterion 8: needs the public COVID-19 testing table

CHOP_CSV = os.environ.get("FEDLMM_CHOP_CSV")


@pytest.mark.external
@pytest.mark.skipif(not CHOP_CSV, reason="set FEDLMM_CHOP_CSV to the COVID-19 testing CSV")
def test_criterion_8_chop_reproduction(tmp_path, capsys):
    sfile = tmp_path / "chop.json"
    code = cli_main([
        "summarize", "--input", CHOP_CSV, "--provider-col", "clinic_name",
        "--vars", "age,drive_thru_ind,gendermale=gender!female,ct_result",
        "--transforms", "log_ct=log(ct_result),std_age=std(age),gm_std_age=gendermale*std_age",
        "--keep", "log_ct,gendermale,std_age,drive_thru_ind,gm_std_age",
        "--out", str(sfile),
    ])
    assert code == 0
    from fedlmm.interchange import parse_summaries

    sums = parse_summaries(sfile)
    reports = {}
    for label, random in (("int", "intercept"), ("slope", "intercept,std_age")):
        out = tmp_path / f"{label}.json"
        assert cli_main(["fit", "--summaries", str(sfile), "--response", "log_ct", "--random", random,
                         "--out", str(out)]) in (0, 3)
        reports[label] = json.loads(out.read_text())
    capsys.readouterr()
    ri, rs = reports["int"], reports["slope"]
    est = [c["estimate"] for c in ri["coefficients"]]
    se = [c["se"] for c in ri["coefficients"]]
    checks = {
        "providers": (len(sums), 70, 0),
        "rows": (sum(s.n for s in sums), 15068, 0),
        "intercept": (est[0], 3.7871, 5e-4),
        "intercept se": (se[0], 0.0039, 5e-4),
        "gendermale": (est[1], 0.0021, 5e-4),
        "std age": (est[2], -0.0046, 5e-4),
        "drive thru": (est[3], -0.0043, 5e-4),
        "interaction": (est[4], -0.0061, 5e-4),
        "sigma int": (ri["variance_components"]["sd"][0], 0.0216, 5e-4),
        "sigma": (ri["variance_components"]["sigma"], 0.1222, 5e-4),
        "slope sigma age": (rs["variance_components"]["sd"][1], 0.0128, 5e-4),
        "slope corr": (rs["variance_components"]["corr"][0][1], -0.10, 5e-3),
        "slope sigma": (rs["variance_components"]["sigma"], 0.1219, 5e-4),
        "slope AIC": (rs["fit"]["aic"], -20495.15, 0.5),
    }
    failed = {k: v for k, v in checks.items() if not abs(v[0] - v[1]) <= v[2]}
    ok = not failed
    detail = "all Table values matched" if ok else "; ".join(f"{k} got {v[0]:.6g} want {v[1]}" for k, v in failed.items())
    record(8, ok, detail)
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
