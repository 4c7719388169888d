"""Provider-side statistics and analyst-side pooling.

A provider turns its raw table into one :class:`ProviderSummary` per site:
sample size, mean vector, covariance matrix (``n - 1`` denominator) and,
optionally, third and fourth central joint moments (``n`` denominator).
Those are the only numbers that leave the provider.

Higher-order bookkeeping goes through *augmented sums*: prepend a constant
column of ones to the variables and form the raw product-sum tensor
``T[a, b, ...] = sum_i w_ia * w_ib * ...``.  Every cross product needed
downstream (``X'X``, ``X'y``, ``sum e_i^2 x_i x_i'``) is a contraction of
that tensor, and it is obtained from the central moments by an affine change
of basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from . import kernels
from .errors import (
    EmptyTable,
    MissingHigherMoments,
    NonPositiveForLog,
    NoRowsRemain,
    SchemaMismatch,
    SchemaViolation,
    TooFewRows,
    UnknownBaseVariable,
    ZeroVariance,
)

POOLED_ID = "__pooled__"

DERIVATIONS = ("raw", "log", "square", "standardized", "interaction")


@dataclass(frozen=True)
class VariableSpec:
    """One shareable column and how it is derived from the raw table.

    ``source`` names the raw column (defaults to ``name``).  Binary variables
    are coded 1 for every level other than ``reference_level``, and their name
    should say which level that is (``gendermale``).
    """

    name: str
    kind: str = "numeric"
    reference_level: str | None = None
    derivation: str = "raw"
    source: str | None = None
    other: str | None = None
    center: float | None = None
    scale: float | None = None
    description: str | None = None

    def __post_init__(self):
        if self.kind not in ("numeric", "binary"):
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if self.derivation not in DERIVATIONS:
            raise ValueError(f"unknown derivation {self.derivation!r}")
        if self.derivation == "interaction" and (self.source is None or self.other is None):
            raise ValueError("an interaction needs two base variables")

    @property
    def base(self) -> str:
        return self.source if self.source is not None else self.name

    @classmethod
    def binary(cls, name: str, source: str, reference_level: str, **kw) -> "VariableSpec":
        return cls(name, kind="binary", reference_level=reference_level, source=source, **kw)

    @classmethod
    def log(cls, name: str, source: str, **kw) -> "VariableSpec":
        return cls(name, derivation="log", source=source, **kw)

    @classmethod
    def square(cls, name: str, source: str, **kw) -> "VariableSpec":
        return cls(name, derivation="square", source=source, **kw)

    @classmethod
    def standardized(cls, name: str, source: str, center: float, scale: float, **kw) -> "VariableSpec":
        return cls(name, derivation="standardized", source=source, center=center, scale=scale, **kw)

    @classmethod
    def interaction(cls, name: str, a: str, b: str, **kw) -> "VariableSpec":
        return cls(name, derivation="interaction", source=a, other=b, **kw)


def _as_specs(variables: Iterable[VariableSpec | str]) -> tuple[VariableSpec, ...]:
    return tuple(v if isinstance(v, VariableSpec) else VariableSpec(str(v)) for v in variables)


@dataclass
class ProviderSummary:
    """Everything one provider shares: ``n``, means, covariance, optional moments."""

    provider_id: str
    n: int
    variables: tuple[VariableSpec, ...]
    mean: np.ndarray
    cov: np.ndarray
    moment3: np.ndarray | None = None
    moment4: np.ndarray | None = None

    def __post_init__(self):
        self.variables = _as_specs(self.variables)
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.moment3 is not None:
            self.moment3 = np.asarray(self.moment3, dtype=float)
        if self.moment4 is not None:
            self.moment4 = np.asarray(self.moment4, dtype=float)
        self.validate()

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def p(self) -> int:
        return len(self.variables)

    @property
    def has_higher_moments(self) -> bool:
        return self.moment3 is not None and self.moment4 is not None

    def index(self, name: str) -> int:
        return self.names.index(name)

    def validate(self) -> None:
        p = self.p
        where = f"providers[{self.provider_id}]"
        if isinstance(self.n, bool) or int(self.n) != self.n:
            raise SchemaViolation("n must be an integer", f"{where}.n")
        self.n = int(self.n)
        if self.n < 2:
            raise SchemaViolation(f"n = {self.n}; providers need at least 2 rows", f"{where}.n")
        if p < 1:
            raise SchemaViolation("no variables", f"{where}.variables")
        if len(set(self.names)) != p:
            raise SchemaViolation("duplicate variable names", f"{where}.variables")
        if self.mean.shape != (p,):
            raise SchemaViolation(f"mean has shape {self.mean.shape}, expected ({p},)", f"{where}.mean")
        if self.cov.shape != (p, p):
            raise SchemaViolation(f"cov has shape {self.cov.shape}, expected ({p}, {p})", f"{where}.cov")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise SchemaViolation("non-finite entries", where)
        if not np.array_equal(self.cov, self.cov.T):
            raise SchemaViolation("covariance is not symmetric", f"{where}.cov")
        if np.any(np.diag(self.cov) < 0):
            raise SchemaViolation("negative variance", f"{where}.cov")
        for label, tensor, order in (("moment3", self.moment3, 3), ("moment4", self.moment4, 4)):
            if tensor is None:
                continue
            if tensor.shape != (p,) * order:
                raise SchemaViolation(f"shape {tensor.shape}, expected {(p,) * order}", f"{where}.{label}")
            if not np.all(np.isfinite(tensor)):
                raise SchemaViolation("non-finite entries", f"{where}.{label}")
        if self.moment4 is not None:
            diag4 = self.moment4[(np.arange(p),) * 4]
            if np.any(diag4 < 0):
                raise SchemaViolation("negative fourth moment", f"{where}.moment4")

    def select(self, names: Sequence[str]) -> "ProviderSummary":
        """Sub-summary restricted to ``names`` (in that order)."""
        idx = [self.index(nm) for nm in names]
        ix = np.ix_(idx, idx)
        m3 = self.moment3[np.ix_(idx, idx, idx)] if self.moment3 is not None else None
        m4 = self.moment4[np.ix_(idx, idx, idx, idx)] if self.moment4 is not None else None
        return replace(
            self,
            variables=tuple(self.variables[i] for i in idx),
            mean=self.mean[idx].copy(),
            cov=self.cov[ix].copy(),
            moment3=m3,
            moment4=m4,
        )

    def rounded(self, decimals: int) -> "ProviderSummary":
        """Copy with every shared statistic rounded to ``decimals`` places."""
        r = lambda a: None if a is None else np.round(a, decimals)  # noqa: E731
        return replace(self, mean=r(self.mean), cov=r(self.cov), moment3=r(self.moment3), moment4=r(self.moment4))


PooledSummary = ProviderSummary


# ---------------------------------------------------------------------------
# raw tables
# ---------------------------------------------------------------------------

def metadata_report(table: pd.DataFrame) -> pd.DataFrame:
    """Per-column overview: type, missing count, complete rate, empty cells, unique values.

    Empty-cell and unique-value counts are reported for character columns
    only (``NaN`` elsewhere).
    """
    if table.shape[0] == 0 or table.shape[1] == 0:
        raise EmptyTable("table has no rows or no columns")
    total = table.shape[0]
    rows = []
    for col in table.columns:
        s = table[col]
        missing = int(s.isna().sum())
        is_num = pd.api.types.is_numeric_dtype(s) or pd.api.types.is_bool_dtype(s)
        if is_num:
            empty = unique = np.nan
        else:
            present = s.dropna().astype(str)
            empty = int((present.str.strip() == "").sum())
            unique = int(present.nunique())
        rows.append(
            {
                "variable": col,
                "type": "num" if is_num else "char",
                "n_missing": missing,
                "complete_rate": 1.0 - missing / total,
                "n_empty": empty,
                "n_unique": unique,
            }
        )
    return pd.DataFrame(rows).set_index("variable")


def filter_complete(
    table: pd.DataFrame,
    model_variables: Sequence[str],
    provider_col: str,
    min_rows: int = 2,
) -> pd.DataFrame:
    """Keep complete cases on ``model_variables``, then drop providers with < ``min_rows`` rows.

    Non-finite numbers count as missing.
    """
    missing_cols = [c for c in [*model_variables, provider_col] if c not in table.columns]
    if missing_cols:
        raise UnknownBaseVariable(f"columns not in table: {missing_cols}")
    keep = table[provider_col].notna().to_numpy()
    for col in model_variables:
        s = table[col]
        ok = s.notna().to_numpy()
        if pd.api.types.is_numeric_dtype(s):
            ok &= np.isfinite(s.to_numpy(dtype=float, na_value=np.nan))
        keep &= ok
    out = table.loc[keep]
    sizes = out.groupby(provider_col, sort=False)[provider_col].transform("size")
    out = out.loc[sizes >= min_rows]
    if out.shape[0] == 0:
        raise NoRowsRemain("no complete rows remain after filtering")
    return out


def recode_binary(table: pd.DataFrame, spec: VariableSpec) -> pd.Series:
    if spec.base not in table.columns:
        raise UnknownBaseVariable(f"{spec.name}: no column {spec.base!r}")
    s = table[spec.base]
    ref = spec.reference_level
    coded = (s.astype(str) != str(ref)).astype(float)
    return coded.where(s.notna(), np.nan).rename(spec.name)


def expand_transforms(table: pd.DataFrame, specs: Sequence[VariableSpec]) -> pd.DataFrame:
    """Append derived columns in the order of ``specs``.

    Raw numeric specs whose column already exists are left untouched; binary
    specs recode their source column.  A derived spec may refer to a column
    created earlier in the same list.
    """
    out = table.copy()
    for spec in specs:
        if spec.kind == "binary":
            if spec.name not in out.columns or spec.base != spec.name:
                out[spec.name] = recode_binary(out, spec)
            continue
        if spec.derivation == "raw":
            if spec.base not in out.columns:
                raise UnknownBaseVariable(f"{spec.name}: no column {spec.base!r}")
            if spec.name != spec.base:
                out[spec.name] = out[spec.base].astype(float)
            continue
        bases = [spec.base] + ([spec.other] if spec.derivation == "interaction" else [])
        for b in bases:
            if b not in out.columns:
                raise UnknownBaseVariable(f"{spec.name}: no column {b!r}")
        x = out[spec.base].astype(float)
        if spec.derivation == "log":
            bad = (x <= 0) & x.notna()
            if bad.any():
                raise NonPositiveForLog(f"{spec.name}: {int(bad.sum())} non-positive values in {spec.base!r}")
            out[spec.name] = np.log(x)
        elif spec.derivation == "square":
            out[spec.name] = x * x
        elif spec.derivation == "standardized":
            if spec.center is None or spec.scale is None:
                raise ValueError(f"{spec.name}: standardization needs center and scale")
            out[spec.name] = (x - spec.center) / spec.scale
        else:
            out[spec.name] = x * out[spec.other].astype(float)
    return out


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------

def summarize_matrix(
    provider_id: str,
    data,
    variables: Sequence[VariableSpec | str],
    with_higher_moments: bool = False,
) -> ProviderSummary:
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValueError("data must be a matrix")
    n, p = x.shape
    specs = _as_specs(variables)
    if len(specs) != p:
        raise SchemaMismatch(f"{len(specs)} variable specs for {p} columns")
    if n < 2:
        raise TooFewRows(f"provider {provider_id!r} has {n} row(s); need at least 2")
    mean = x.mean(axis=0)
    d = x - mean
    cov = d.T @ d / (n - 1)
    cov = 0.5 * (cov + cov.T)
    m3 = m4 = None
    if with_higher_moments:
        d = np.ascontiguousarray(d)
        m3 = kernels.central_moment3(d)
        m4 = kernels.central_moment4(d)
    return ProviderSummary(str(provider_id), n, specs, mean, cov, m3, m4)


def summarize_table(
    table: pd.DataFrame,
    provider_col: str,
    variables: Sequence[VariableSpec | str],
    with_higher_moments: bool = False,
) -> list[ProviderSummary]:
    """One summary per provider, ordered by provider id."""
    specs = _as_specs(variables)
    cols = [s.name for s in specs]
    out = []
    for pid, grp in table.groupby(provider_col, sort=True):
        out.append(summarize_matrix(str(pid), grp[cols].to_numpy(dtype=float), specs, with_higher_moments))
    return out


def _central_augmented(s: ProviderSummary, order: int) -> np.ndarray:
    """Central product sums of ``(1, x - mean)`` up to ``order``."""
    p = s.p
    grids = np.indices((p + 1,) * order)
    nz = (grids > 0).sum(axis=0)
    out = np.zeros((p + 1,) * order)
    out[nz == 0] = s.n
    blocks = {2: (s.n - 1) * s.cov}
    if order >= 3:
        blocks[3] = s.n * s.moment3
    if order >= 4:
        blocks[4] = s.n * s.moment4
    for k, tensor in blocks.items():
        mask = nz == k
        idx = grids[:, mask]
        sel = np.sort(idx, axis=0)[order - k:] - 1
        out[mask] = tensor[tuple(sel)]
    return out


def _affine(mean: np.ndarray) -> np.ndarray:
    p = mean.shape[0]
    a = np.eye(p + 1)
    a[1:, 0] = mean
    return a


def _transform(tensor: np.ndarray, a: np.ndarray) -> np.ndarray:
    out = tensor
    for axis in range(tensor.ndim):
        out = np.moveaxis(np.tensordot(a, out, axes=([1], [axis])), 0, axis)
    return out


def augmented_sums(s: ProviderSummary, order: int = 2) -> np.ndarray:
    """Raw product sums of ``(1, x)`` up to ``order`` (2, 3 or 4).

    For ``order=2`` this is ``[[n, sum x'], [sum x, sum x x']]``, reconstructed
    with ``sum x_j x_k = (n - 1) s_jk + n xbar_j xbar_k``.
    """
    if order not in (2, 3, 4):
        raise ValueError("order must be 2, 3 or 4")
    if order >= 3 and not s.has_higher_moments:
        raise MissingHigherMoments(f"provider {s.provider_id!r} shipped no third/fourth moments")
    return _transform(_central_augmented(s, order), _affine(s.mean))


def _from_augmented(provider_id, variables, sums4_or_2: np.ndarray) -> ProviderSummary:
    order = sums4_or_2.ndim
    n = sums4_or_2[(0,) * order]
    mean = sums4_or_2[(0,) * (order - 1)][1:] / n
    central = _transform(sums4_or_2, np.linalg.inv(_affine(mean)))
    head = (0,) * (order - 2)
    cov = central[head][1:, 1:] / (n - 1)
    cov = 0.5 * (cov + cov.T)
    m3 = m4 = None
    if order == 4:
        m3 = central[0][1:, 1:, 1:] / n
        m4 = central[1:, 1:, 1:, 1:] / n
    n_int = int(round(n))
    return ProviderSummary(provider_id, n_int, variables, mean, cov, m3, m4)


def pool_summaries(summaries: Sequence[ProviderSummary]) -> ProviderSummary:
    """Combine provider summaries into the summary of the concatenated data.

    Means and covariances pool through the within + between decomposition.
    Third and fourth moments are pooled too when every provider shipped them.
    """
    if not summaries:
        raise SchemaMismatch("nothing to pool")
    first = summaries[0]
    for s in summaries[1:]:
        if s.names != first.names:
            raise SchemaMismatch(f"provider {s.provider_id!r} variables {s.names} != {first.names}")
    if len(summaries) == 1:
        return replace(first, provider_id=POOLED_ID)
    if all(s.has_higher_moments for s in summaries):
        total = sum(augmented_sums(s, 4) for s in summaries)
        return _from_augmented(POOLED_ID, first.variables, total)
    ns = np.array([s.n for s in summaries], dtype=float)
    n = ns.sum()
    means = np.stack([s.mean for s in summaries])
    mean = ns @ means / n
    scatter = np.zeros_like(first.cov)
    for s, nh in zip(summaries, ns):
        dev = s.mean - mean
        scatter += (nh - 1) * s.cov + nh * np.outer(dev, dev)
    cov = scatter / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return ProviderSummary(POOLED_ID, int(n), first.variables, mean, cov)


def standardize_params(pooled: ProviderSummary, variable: str) -> tuple[float, float]:
    """``(center, scale)`` = pooled mean and pooled standard deviation of ``variable``."""
    j = pooled.index(variable)
    var = float(pooled.cov[j, j])
    if not var > 0:
        raise ZeroVariance(f"{variable!r} has zero pooled variance")
    return float(pooled.mean[j]), math.sqrt(var)
