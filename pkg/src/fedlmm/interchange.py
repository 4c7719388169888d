"""File formats: summary files, pseudo-data CSVs, fit reports, raw CSV ingestion.

Summary files and fit reports are JSON documents.  Floats are written with
Python's shortest round-trip representation, so a parse of a written file
restores every double bit for bit and a second write is byte-identical.
Pseudo-data CSVs carry 17 significant digits.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import ParseError, SchemaViolation, UnknownColumn, VersionMismatch
from .summaries import DERIVATIONS, ProviderSummary, VariableSpec, expand_transforms

FORMAT_VERSION = "1"
MISSING_MARKERS = ["", "NA"]
_SPEC_FIELDS = ("name", "kind", "reference_level", "derivation", "source", "other", "center", "scale", "description")


# ---------------------------------------------------------------------------
# summary files
# ---------------------------------------------------------------------------

def _spec_to_dict(v: VariableSpec) -> dict:
    return {k: getattr(v, k) for k in _SPEC_FIELDS if getattr(v, k) is not None or k == "name"}


def _spec_from_dict(d: Any, path: str) -> VariableSpec:
    if not isinstance(d, dict) or not isinstance(d.get("name"), str):
        raise SchemaViolation("variable entry needs a string 'name'", path)
    unknown = set(d) - set(_SPEC_FIELDS)
    if unknown:
        raise SchemaViolation(f"unknown fields {sorted(unknown)}", path)
    if d.get("derivation", "raw") not in DERIVATIONS:
        raise SchemaViolation(f"unknown derivation {d.get('derivation')!r}", f"{path}.derivation")
    try:
        return VariableSpec(**d)
    except (TypeError, ValueError) as exc:
        raise SchemaViolation(str(exc), path) from exc


def _check_float(x: float) -> float:
    if not math.isfinite(x):
        raise SchemaViolation("non-finite value cannot be serialized")
    return x


def summaries_to_dict(summaries: Sequence[ProviderSummary], decimals: int | None = None) -> dict:
    if summaries:
        variables = summaries[0].variables
        for s in summaries[1:]:
            if s.variables != variables:
                raise SchemaViolation(f"variables of {s.provider_id!r} differ from the shared schema", "providers")
    else:
        variables = ()
    providers = []
    for s in summaries:
        if decimals is not None:
            s = s.rounded(decimals)
        entry = {
            "provider_id": s.provider_id,
            "n": s.n,
            "mean": [_check_float(float(v)) for v in s.mean],
            "cov": [[_check_float(float(v)) for v in row] for row in s.cov],
        }
        if s.moment3 is not None:
            entry["moment3"] = [_check_float(float(v)) for v in s.moment3.ravel()]
        if s.moment4 is not None:
            entry["moment4"] = [_check_float(float(v)) for v in s.moment4.ravel()]
        providers.append(entry)
    return {
        "format_version": FORMAT_VERSION,
        "variables": [_spec_to_dict(v) for v in variables],
        "providers": providers,
    }


def dumps_summaries(summaries: Sequence[ProviderSummary], decimals: int | None = None) -> str:
    return json.dumps(summaries_to_dict(summaries, decimals), indent=1, allow_nan=False) + "\n"


def write_summaries(summaries: Sequence[ProviderSummary], path, decimals: int | None = None) -> None:
    Path(path).write_text(dumps_summaries(summaries, decimals), encoding="utf-8")


def _float_list(value, length: int, path: str) -> np.ndarray:
    if not isinstance(value, list) or len(value) != length:
        raise SchemaViolation(f"expected a list of {length} numbers", path)
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise SchemaViolation("non-numeric entry", path)
    return np.array(value, dtype=float)


def summaries_from_dict(doc: Any) -> list[ProviderSummary]:
    if not isinstance(doc, dict):
        raise SchemaViolation("top level must be an object")
    version = doc.get("format_version")
    if version is None:
        raise SchemaViolation("missing", "format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format_version {version!r} is not supported (expected {FORMAT_VERSION!r})")
    variables = doc.get("variables")
    providers = doc.get("providers")
    if not isinstance(variables, list):
        raise SchemaViolation("must be a list", "variables")
    if not isinstance(providers, list):
        raise SchemaViolation("must be a list", "providers")
    specs = tuple(_spec_from_dict(v, f"variables[{i}]") for i, v in enumerate(variables))
    p = len(specs)
    out = []
    seen = set()
    for i, entry in enumerate(providers):
        path = f"providers[{i}]"
        if not isinstance(entry, dict):
            raise SchemaViolation("must be an object", path)
        pid = entry.get("provider_id")
        if not isinstance(pid, str):
            raise SchemaViolation("must be a string", f"{path}.provider_id")
        if pid in seen:
            raise SchemaViolation(f"duplicate provider id {pid!r}", f"{path}.provider_id")
        seen.add(pid)
        n = entry.get("n")
        if not isinstance(n, int) or isinstance(n, bool):
            raise SchemaViolation("must be an integer", f"{path}.n")
        mean = _float_list(entry.get("mean"), p, f"{path}.mean")
        rows = entry.get("cov")
        if not isinstance(rows, list) or len(rows) != p:
            raise SchemaViolation(f"expected {p} rows", f"{path}.cov")
        cov = np.stack([_float_list(r, p, f"{path}.cov[{j}]") for j, r in enumerate(rows)]) if p else np.zeros((0, 0))
        m3 = m4 = None
        if "moment3" in entry:
            m3 = _float_list(entry["moment3"], p ** 3, f"{path}.moment3").reshape((p,) * 3)
        if "moment4" in entry:
            m4 = _float_list(entry["moment4"], p ** 4, f"{path}.moment4").reshape((p,) * 4)
        unknown = set(entry) - {"provider_id", "n", "mean", "cov", "moment3", "moment4"}
        if unknown:
            raise SchemaViolation(f"unknown fields {sorted(unknown)}", path)
        try:
            s = ProviderSummary(pid, n, specs, mean, cov, m3, m4)
        except SchemaViolation as exc:
            raise SchemaViolation(str(exc).split(": ", 1)[-1], f"{path}") from exc
        out.append(s)
    return out


def loads_summaries(text: str) -> list[ProviderSummary]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"not valid JSON ({exc})") from exc
    return summaries_from_dict(doc)


def parse_summaries(path) -> list[ProviderSummary]:
    return loads_summaries(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def ingest_csv(path, specs: Sequence[VariableSpec] = (), provider_col: str | None = None,
               numeric: Iterable[str] = ()) -> pd.DataFrame:
    """Read a provider CSV.

    ``""`` and ``"NA"`` are missing.  Columns named in ``numeric`` (and the
    sources of numeric raw specs) must parse as numbers; a bad cell raises
    :class:`ParseError` with its 1-based data row.  Binary specs are recoded
    into new 0/1 columns named after the spec.
    """
    try:
        table = pd.read_csv(path, na_values=MISSING_MARKERS, keep_default_na=False, dtype=str)
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise ParseError(str(exc)) from exc
    except pd.errors.EmptyDataError as exc:
        raise ParseError("file is empty or has no header") from exc
    needed = set(numeric)
    if provider_col is not None and provider_col not in table.columns:
        raise UnknownColumn(f"provider column {provider_col!r} not in {list(table.columns)}")
    for spec in specs:
        if spec.kind == "binary" or spec.derivation != "raw":
            continue
        needed.add(spec.base)
    for spec in specs:
        if spec.kind == "binary" and spec.base not in table.columns:
            raise UnknownColumn(f"{spec.name}: column {spec.base!r} not in file")
    for col in table.columns:
        if col == provider_col:
            continue
        converted = pd.to_numeric(table[col], errors="coerce")
        bad = converted.isna() & table[col].notna()
        if bad.any():
            if col in needed:
                row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
                raise ParseError(f"not a number: {table[col].iloc[row - 1]!r}", row=row, column=col)
            continue
        table[col] = converted.astype(float)
    missing = [c for c in needed if c not in table.columns]
    if missing:
        raise UnknownColumn(f"columns not in file: {sorted(missing)}")
    binaries = [s for s in specs if s.kind == "binary"]
    if binaries:
        table = expand_transforms(table, binaries)
    return table


_UNSAFE = re.compile(r"[\\/\x00]")


def pseudo_filename(provider_id: str) -> str:
    return _UNSAFE.sub("_", provider_id) + ".csv"


def _fmt_array(data: np.ndarray, decimals: int | None) -> list[list[str]]:
    if decimals is not None:
        return [[f"{v:.{decimals}f}" for v in row] for row in data]
    return [[f"{v:.17g}" for v in row] for row in data]


def export_pseudo(datasets, out_dir, combined: bool = False, decimals: int | None = None,
                  provider_col: str = "provider") -> list[Path]:
    """Write pseudo-data as ``<provider_id>.csv`` per provider, or one ``pseudo.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if combined:
        if not datasets:
            return []
        path = out_dir / "pseudo.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            fh.write(",".join([provider_col, *datasets[0].columns]) + "\n")
            for d in datasets:
                for row in _fmt_array(d.data, decimals):
                    fh.write(",".join([_quote(d.provider_id), *row]) + "\n")
        return [path]
    for d in datasets:
        path = out_dir / pseudo_filename(d.provider_id)
        with path.open("w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(d.columns) + "\n")
            for row in _fmt_array(d.data, decimals):
                fh.write(",".join(row) + "\n")
        written.append(path)
    return written


def _quote(s: str) -> str:
    return '"' + s.replace('"', '""') + '"' if any(c in s for c in ',"\n') else s


def read_provider_dir(directory, manifest_name: str = "manifest.json") -> dict[str, pd.DataFrame]:
    """Per-provider CSVs from a directory; ids come from the manifest when present."""
    directory = Path(directory)
    manifest = directory / manifest_name
    if manifest.exists():
        doc = json.loads(manifest.read_text(encoding="utf-8"))
        entries = [(e["provider_id"], directory / e["file"]) for e in doc.get("providers", []) if e.get("file")]
    else:
        entries = [(p.stem, p) for p in sorted(directory.glob("*.csv"))]
    return {pid: ingest_csv(path) for pid, path in entries}


# ---------------------------------------------------------------------------
# fit reports
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _num(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def lmm_report(fit, provenance: dict | None = None) -> dict:
    spec = fit.spec
    coefs = []
    for j, name in enumerate(spec.design_names):
        coefs.append({
            "term": name,
            "estimate": _num(fit.beta[j]),
            "se": _num(fit.se_beta[j]),
            "z": _num(fit.z_beta[j]),
            "ci_low": _num(fit.wald_ci[j, 0]),
            "ci_high": _num(fit.wald_ci[j, 1]),
        })
    sd = fit.random_sd
    corr = fit.random_corr
    rnames = spec.random_names
    vc = {
        "terms": rnames,
        "G": [[_num(v) for v in row] for row in fit.params.g],
        "sd": [_num(v) for v in sd],
        "corr": [[_num(v) for v in row] for row in corr],
        "sigma2": _num(fit.params.sigma2),
        "sigma": _num(fit.sigma),
    }
    return {
        "format_version": FORMAT_VERSION,
        "kind": "lmm",
        "model": {
            "response": spec.response,
            "fixed": list(spec.fixed),
            "random": list(spec.random),
            "method": spec.method,
        },
        "coefficients": coefs,
        "variance_components": vc,
        "fit": {
            "criterion": _num(fit.criterion),
            "criterion_kind": f"-2 {'restricted ' if spec.method == 'REML' else ''}log-likelihood",
            "aic": _num(fit.aic),
            "bic": _num(fit.bic),
            "n_params": fit.n_params,
            "n_total": fit.n_total,
            "n_providers": fit.n_providers,
            "converged": bool(fit.converged),
            "iterations": int(fit.iterations),
            "theta": [_num(v) for v in fit.params.theta],
        },
        "blups": {pid: [_num(v) for v in u] for pid, u in fit.blups.items()},
        "provenance": provenance or {},
    }


def ols_report(fit, response: str, provenance: dict | None = None) -> dict:
    coefs = []
    se = fit.se
    rse = fit.robust_se
    for j, name in enumerate(fit.names):
        entry = {
            "term": name,
            "estimate": _num(fit.beta[j]),
            "se": _num(se[j]),
            "z": _num(fit.beta[j] / se[j]) if se[j] > 0 else None,
            "ci_low": _num(fit.beta[j] - 1.959963984540054 * se[j]),
            "ci_high": _num(fit.beta[j] + 1.959963984540054 * se[j]),
        }
        if rse is not None:
            entry["robust_se"] = _num(rse[j])
        coefs.append(entry)
    k = fit.p + 1
    if fit.sigma2_mle > 0:
        crit = fit.n * (math.log(2 * math.pi * fit.sigma2_mle) + 1.0)
    else:
        crit = float("nan")
    return {
        "format_version": FORMAT_VERSION,
        "kind": "ols",
        "model": {"response": response, "fixed": list(fit.names[1:]), "random": [], "method": "ML"},
        "coefficients": coefs,
        "variance_components": {"sigma2_mle": _num(fit.sigma2_mle), "sigma2_ols": _num(fit.sigma2_ols)},
        "fit": {
            "criterion": _num(crit),
            "criterion_kind": "-2 log-likelihood",
            "aic": _num(crit + 2 * k),
            "bic": _num(crit + k * math.log(fit.n)),
            "n_params": k,
            "n_total": fit.n,
            "n_providers": None,
            "converged": True,
            "flags": list(fit.flags),
        },
        "robust_cov": None if fit.robust_cov is None else [[_num(v) for v in row] for row in fit.robust_cov],
        "provenance": provenance or {},
    }


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, allow_nan=False) + "\n", encoding="utf-8")


@dataclass
class ReportRecord:
    """The comparison-relevant part of a fit report."""

    label: str
    response: str
    aic: float
    bic: float
    n_params: int
    n_total: int
    criterion: float
    model: dict


def read_report(path) -> ReportRecord:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"not valid JSON ({exc})", str(path)) from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: unsupported report version {doc.get('format_version')!r}")
    try:
        f = doc["fit"]
        return ReportRecord(
            label=str(path),
            response=doc["model"]["response"],
            aic=float(f["aic"]),
            bic=float(f["bic"]),
            n_params=int(f["n_params"]),
            n_total=int(f["n_total"]),
            criterion=float(f["criterion"]),
            model=doc["model"],
        )
    except (KeyError, TypeError) as exc:
        raise SchemaViolation(f"missing field {exc}", str(path)) from exc
