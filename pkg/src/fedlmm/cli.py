"""Command-line pipeline: summarize -> pseudo -> fit -> compare.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import re
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import __version__
from .errors import DataError, FedLmmError, NumericalError, RankDeficiencyWarning, UnknownColumn
from .interchange import (
    export_pseudo,
    file_digest,
    ingest_csv,
    lmm_report,
    ols_report,
    parse_summaries,
    pseudo_filename,
    read_provider_dir,
    read_report,
    write_report,
    write_summaries,
)
from .lmm import ModelSpec, compare_models, fit as fit_lmm, providers_from_pseudo, providers_from_tables
from .pseudogen import DEFAULT_SEED, GeneratorConfig, generate_all, generate_dataset
from .regression import cross_products_from_rows, cross_products_from_summary, fit_ols, pool_cross_products, robust_sandwich
from .summaries import (
    VariableSpec,
    expand_transforms,
    filter_complete,
    metadata_report,
    pool_summaries,
    standardize_params,
    summarize_table,
)

log = logging.getLogger("fedlmm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DIST_NAMES = {"normal": "standard_normal", "uniform": "uniform_unit"}
METHOD_NAMES = {"auto": "auto", "cholesky": "cholesky", "eigen": "eigen_svd"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_seed() -> int:
    env = os.environ.get("FEDLMM_SEED")
    if env is None or env.strip() == "":
        return DEFAULT_SEED
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"FEDLMM_SEED must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# variable mini-language
# ---------------------------------------------------------------------------

_SPLIT = re.compile(r",(?![^()]*\))")
_CALL = re.compile(r"^(\w+)\((.*)\)$")


def _items(text: str | None) -> list[str]:
    if not text:
        return []
    return [t.strip() for t in _SPLIT.split(text) if t.strip()]


def parse_vars(text: str | None) -> list[VariableSpec]:
    """``age,gendermale=gender!female`` -> raw and binary specs."""
    out = []
    for item in _items(text):
        if "=" in item:
            name, rhs = (s.strip() for s in item.split("=", 1))
            if "!" not in rhs:
                raise UsageError(f"binary variable needs 'source!reference': {item!r}")
            src, ref = (s.strip() for s in rhs.split("!", 1))
            out.append(VariableSpec.binary(name, src, ref))
        else:
            out.append(VariableSpec(item))
    return out


def parse_transforms(text: str | None) -> list[VariableSpec]:
    """``logct=log(ct),age2=sq(age),zage=std(age),gm_z=gendermale*zage``.

    ``std(x)`` gets pooled center/scale at summarize time; ``std(x;c;s)``
    pins them.
    """
    out = []
    for item in _items(text):
        if "=" not in item:
            raise UsageError(f"transform needs 'name=expr': {item!r}")
        name, expr = (s.strip() for s in item.split("=", 1))
        if "*" in expr and not _CALL.match(expr):
            a, b = (s.strip() for s in expr.split("*", 1))
            out.append(VariableSpec.interaction(name, a, b))
            continue
        m = _CALL.match(expr)
        if not m:
            raise UsageError(f"cannot parse transform {item!r}")
        fn, args = m.group(1), [s.strip() for s in m.group(2).split(";")]
        if fn == "log":
            out.append(VariableSpec.log(name, args[0]))
        elif fn in ("sq", "square"):
            out.append(VariableSpec.square(name, args[0]))
        elif fn in ("std", "standardize"):
            if len(args) == 3:
                out.append(VariableSpec.standardized(name, args[0], float(args[1]), float(args[2])))
            else:
                out.append(VariableSpec(name, derivation="standardized", source=args[0]))
        else:
            raise UsageError(f"unknown transform function {fn!r}")
    return out


def _split_names(text: str | None) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()] if text else []


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_summarize(args) -> int:
    base = parse_vars(args.vars)
    transforms = parse_transforms(args.transforms)
    table = ingest_csv(args.input, base, provider_col=args.provider_col,
                       numeric=[v.name for v in base if v.kind == "numeric"])
    report = metadata_report(table)
    print(report.to_string(float_format=lambda v: f"{v:.2f}"))
    n_providers_in = table[args.provider_col].nunique()
    needed = [v.name for v in base]
    derived_names = {t.name for t in transforms}
    for t in transforms:
        for b in (t.base, t.other):
            if b is not None and b not in derived_names and b not in needed:
                needed.append(b)
    for col in needed:
        if col not in table.columns:
            raise UnknownColumn(f"column {col!r} not in {args.input}")
    table = filter_complete(table, needed, args.provider_col)
    resolved = []
    for t in transforms:
        if t.derivation == "standardized" and (t.center is None or t.scale is None):
            interim = expand_transforms(table, resolved)
            pooled = pool_summaries(summarize_table(interim, args.provider_col, [t.base]))
            c, s = standardize_params(pooled, t.base)
            t = replace(t, center=c, scale=s)
            log.info("standardizing %s with pooled center %.17g, scale %.17g", t.base, c, s)
        resolved.append(t)
    table = expand_transforms(table, resolved)
    specs = {v.name: v for v in [*base, *resolved]}
    keep = _split_names(args.keep) or list(specs)
    missing = [k for k in keep if k not in specs]
    if missing:
        raise UnknownColumn(f"--keep names not defined by --vars/--transforms: {missing}")
    summaries = summarize_table(table, args.provider_col, [specs[k] for k in keep], args.moments == 4)
    write_summaries(summaries, args.out, decimals=args.round)
    print(
        f"{len(summaries)} providers ({n_providers_in} before filtering), "
        f"{sum(s.n for s in summaries)} rows -> {args.out}",
        file=sys.stderr,
    )
    return EXIT_OK


def _generator_config(args) -> GeneratorConfig:
    seed = args.seed if args.seed is not None else default_seed()
    return GeneratorConfig(seed=seed, source_distribution=DIST_NAMES[args.dist], method=METHOD_NAMES[args.gen_method])


def cmd_pseudo(args) -> int:
    summaries = parse_summaries(args.summaries)
    config = _generator_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    status = EXIT_OK
    for s in summaries:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RankDeficiencyWarning)
            try:
                ds = generate_dataset(s, config)
            except FedLmmError as exc:
                print(f"error: {exc}", file=sys.stderr)
                entries.append({"provider_id": s.provider_id, "file": None, "error": str(exc)})
                status = max(status, EXIT_NUMERIC if isinstance(exc, NumericalError) else EXIT_DATA)
                continue
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        export_pseudo([ds], out)
        entries.append({
            "provider_id": s.provider_id,
            "file": pseudo_filename(s.provider_id),
            "n": ds.n,
            "method": ds.method,
            "warnings": ds.warnings,
        })
    manifest = {
        "generator": {"seed": config.seed, "source_distribution": config.source_distribution, "method": config.method},
        "summaries": {"path": str(args.summaries), "sha256": file_digest(args.summaries)},
        "providers": entries,
        "created": _now(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    print(f"{sum(e['file'] is not None for e in entries)}/{len(entries)} providers written to {out}", file=sys.stderr)
    return status


def _load_data(args):
    """Per-provider tables from a directory or a long CSV."""
    path = Path(args.data)
    if path.is_dir():
        return read_provider_dir(path)
    if not args.provider_col:
        raise UnknownColumn("--provider-col is required when --data is a CSV file")
    table = ingest_csv(path, provider_col=args.provider_col)
    return {str(pid): grp.drop(columns=[args.provider_col]) for pid, grp in table.groupby(args.provider_col, sort=True)}


def cmd_fit(args) -> int:
    config = _generator_config(args)
    provenance = {"created": _now(), "inputs": {}}
    if args.summaries:
        summaries = parse_summaries(args.summaries)
        if args.round is not None:
            summaries = [s.rounded(args.round) for s in summaries]
        provenance["inputs"]["summaries"] = {"path": str(args.summaries), "sha256": file_digest(args.summaries)}
        names = summaries[0].names if summaries else []
    else:
        tables = _load_data(args)
        provenance["inputs"]["data"] = {"path": str(args.data)}
        names = list(next(iter(tables.values())).columns) if tables else []
    if args.response not in names:
        raise UnknownColumn(f"response {args.response!r} not among {names}")
    fixed = _split_names(args.fixed) or [nm for nm in names if nm != args.response]
    unknown = [nm for nm in fixed if nm not in names]
    if unknown:
        raise UnknownColumn(f"predictors not found: {unknown}")

    if args.model == "ols":
        if args.summaries:
            cps = [cross_products_from_summary(s, args.response, fixed) for s in summaries]
            result = fit_ols(pool_cross_products(cps))
            if summaries and all(s.has_higher_moments for s in summaries):
                pooled = pool_summaries(summaries)
                result.robust_cov = robust_sandwich(pooled, result, args.response, fixed, hc1=args.hc1)
        else:
            cps = [
                cross_products_from_rows(t[fixed].to_numpy(dtype=float), t[args.response].to_numpy(dtype=float),
                                         fixed, args.response)
                for t in tables.values()
            ]
            result = fit_ols(pool_cross_products(cps))
        report = ols_report(result, args.response, provenance)
        write_report(report, args.out)
        _print_coefficients(report)
        return EXIT_OK

    random = tuple(_split_names(args.random)) if args.random is not None else ("intercept",)
    if random == ("none",):
        random = ()
    spec = ModelSpec(args.response, tuple(fixed), random, args.method.upper())
    if args.summaries:
        provenance["generator"] = {"seed": config.seed, "source_distribution": config.source_distribution,
                                   "method": config.method}
        providers = providers_from_pseudo(spec, generate_all(summaries, config))
    else:
        providers = providers_from_tables(spec, tables)
    result = fit_lmm(spec, providers)
    report = lmm_report(result, provenance)
    write_report(report, args.out)
    _print_coefficients(report)
    if not result.converged:
        print("error: optimizer did not converge; best point written", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _print_coefficients(report: dict) -> None:
    f = report["fit"]
    print(f"{'term':<28}{'estimate':>12}{'se':>12}{'z':>10}")
    for c in report["coefficients"]:
        z = c["z"] if c["z"] is not None else float("nan")
        print(f"{c['term']:<28}{c['estimate']:>12.6g}{c['se']:>12.4g}{z:>10.3f}")
    print(f"criterion {f['criterion']:.6f}  AIC {f['aic']:.4f}  BIC {f['bic']:.4f}  n {f['n_total']}")


def cmd_compare(args) -> int:
    records = [read_report(p) for p in args.reports]
    ranked = compare_models(records)
    print(f"{'rank':<6}{'AIC':>14}{'BIC':>14}{'k':>5}  report")
    for i, r in enumerate(ranked, 1):
        print(f"{i:<6}{r.aic:>14.2f}{r.bic:>14.2f}{r.n_params:>5}  {r.label}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedlmm", description="One-shot federated linear (mixed) models from shared summaries.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("summarize", help="provider side: CSV -> summary file")
    p.add_argument("--input", required=True)
    p.add_argument("--provider-col", required=True)
    p.add_argument("--vars", required=True, help="e.g. 'age,drive,gendermale=gender!female'")
    p.add_argument("--transforms", default=None, help="e.g. 'logct=log(ct),zage=std(age),gz=gendermale*zage'")
    p.add_argument("--keep", default=None, help="variables to summarize, in order (default: all)")
    p.add_argument("--moments", type=int, choices=(2, 4), default=2)
    p.add_argument("--round", type=int, default=None, help="round shared statistics to this many decimals")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_summarize)

    def generator_flags(q):
        q.add_argument("--seed", type=int, default=None, help="default: $FEDLMM_SEED or a fixed constant")
        q.add_argument("--dist", choices=sorted(DIST_NAMES), default="normal")
        q.add_argument("--gen-method", choices=sorted(METHOD_NAMES), default="auto")

    p = sub.add_parser("pseudo", help="analyst side: summary file -> per-provider pseudo-data")
    p.add_argument("--summaries", required=True)
    generator_flags(p)
    # `--method` is the spelling used by the pseudo command
    p.add_argument("--method", dest="gen_method", choices=sorted(METHOD_NAMES), default="auto")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo)

    p = sub.add_parser("fit", help="fit OLS or an LMM")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory of per-provider CSVs, or one CSV with --provider-col")
    src.add_argument("--summaries", help="summary file")
    p.add_argument("--provider-col", default=None)
    p.add_argument("--model", choices=("ols", "lmm"), default="lmm")
    p.add_argument("--response", required=True)
    p.add_argument("--fixed", default=None, help="comma-separated predictors (default: all other variables)")
    p.add_argument("--random", default=None, help="'intercept[,<var>]' or 'none' (default: intercept)")
    p.add_argument("--method", choices=("reml", "ml", "REML", "ML"), default="reml")
    p.add_argument("--round", type=int, default=None, help="round summaries before fitting (sensitivity runs)")
    p.add_argument("--hc1", action="store_true", help="n/(n-p) rescaling of robust covariance")
    generator_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="rank fit reports by AIC, then BIC")
    p.add_argument("--reports", nargs="+", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
