"""Linear regression from shared summaries.

``X'X``, ``X'y`` and ``y'y`` are rebuilt from ``(n, mean, cov)``; the
residual sum of squares is formed algebraically because residuals never
exist on the analyst side.  With third and fourth joint moments the HC0
sandwich is rebuilt the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import MissingHigherMoments, NotPositiveDefinite, ResponseNotFound, SchemaMismatch, SingularDesign
from .numerics import inv_spd, solve_spd, symmetrize
from .summaries import ProviderSummary, _affine, _central_augmented, augmented_sums

INTERCEPT = "(Intercept)"


@dataclass
class CrossProducts:
    """Aggregates of one provider (or pooled); ``names[0]`` is the intercept."""

    n: int
    names: list[str]
    xtx: np.ndarray
    xty: np.ndarray
    yty: float
    response: str = "y"

    @property
    def p(self) -> int:
        return len(self.names)


@dataclass
class LinRegFit:
    names: list[str]
    n: int
    beta: np.ndarray
    sigma2_mle: float
    sigma2_ols: float
    classical_cov: np.ndarray
    rss: float
    robust_cov: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)

    @property
    def p(self) -> int:
        return len(self.names)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.classical_cov))

    @property
    def robust_se(self) -> np.ndarray | None:
        return None if self.robust_cov is None else np.sqrt(np.diag(self.robust_cov))


def _model_columns(summary: ProviderSummary, response: str, predictors: Sequence[str] | None) -> list[str]:
    if response not in summary.names:
        raise ResponseNotFound(f"{response!r} not among {summary.names}")
    if predictors is None:
        predictors = [nm for nm in summary.names if nm != response]
    missing = [nm for nm in predictors if nm not in summary.names]
    if missing:
        raise ResponseNotFound(f"predictors not in summary: {missing}")
    return [response, *predictors]


def cross_products_from_summary(summary: ProviderSummary, response: str,
                                predictors: Sequence[str] | None = None) -> CrossProducts:
    """Rebuild ``X'X``, ``X'y``, ``y'y`` with an intercept column prepended.

    ``predictors`` defaults to every other variable in summary order.
    """
    cols = _model_columns(summary, response, predictors)
    sums = augmented_sums(summary.select(cols), 2)
    design = [0, *range(2, len(cols) + 1)]
    xtx = symmetrize(sums[np.ix_(design, design)])
    xtx[0, 0] = summary.n
    return CrossProducts(
        n=summary.n,
        names=[INTERCEPT, *cols[1:]],
        xtx=xtx,
        xty=sums[design, 1].copy(),
        yty=float(sums[1, 1]),
        response=response,
    )


def cross_products_from_rows(x, y, names: Sequence[str], response: str = "y") -> CrossProducts:
    """Direct aggregates from rows; ``x`` excludes the intercept column."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    design = np.column_stack([np.ones(x.shape[0]), x])
    return CrossProducts(
        n=x.shape[0],
        names=[INTERCEPT, *names],
        xtx=symmetrize(design.T @ design),
        xty=design.T @ y,
        yty=float(y @ y),
        response=response,
    )


def pool_cross_products(cps: Sequence[CrossProducts]) -> CrossProducts:
    if not cps:
        raise SchemaMismatch("nothing to pool")
    first = cps[0]
    for cp in cps[1:]:
        if cp.names != first.names or cp.response != first.response:
            raise SchemaMismatch(f"column layout {cp.names} differs from {first.names}")
    return CrossProducts(
        n=sum(cp.n for cp in cps),
        names=list(first.names),
        xtx=sum(cp.xtx for cp in cps),
        xty=sum(cp.xty for cp in cps),
        yty=float(sum(cp.yty for cp in cps)),
        response=first.response,
    )


def fit_ols(cp: CrossProducts) -> LinRegFit:
    """Normal-equation fit.  ``n <= p`` leaves ``sigma2_ols`` NaN and flags it."""
    try:
        beta = solve_spd(cp.xtx, cp.xty)
        xtx_inv = inv_spd(cp.xtx)
    except NotPositiveDefinite as exc:
        raise SingularDesign(f"X'X is singular: {exc}") from exc
    rss = cp.yty - 2.0 * beta @ cp.xty + beta @ cp.xtx @ beta
    rss = max(float(rss), 0.0)
    n, p = cp.n, cp.p
    flags = []
    if n > p:
        sigma2_ols = rss / (n - p)
    else:
        sigma2_ols = float("nan")
        flags.append("TooFewObservations")
    return LinRegFit(
        names=list(cp.names),
        n=n,
        beta=beta,
        sigma2_mle=rss / n,
        sigma2_ols=sigma2_ols,
        classical_cov=sigma2_ols * xtx_inv,
        rss=rss,
        flags=flags,
    )


def robust_sandwich(summary: ProviderSummary, fit: LinRegFit, response: str,
                    predictors: Sequence[str] | None = None, hc1: bool = False) -> np.ndarray:
    """HC0 covariance ``(X'X)^-1 (sum e_i^2 x_i x_i') (X'X)^-1`` from joint moments.

    The meat is contracted in the centred basis, where the residual is a
    linear form in ``(1, d)`` with ``d`` the centred variables, and only the
    two design axes are shifted back to raw coordinates.  ``hc1`` applies
    the ``n / (n - p)`` factor.
    """
    cols = _model_columns(summary, response, predictors)
    if [INTERCEPT, *cols[1:]] != list(fit.names):
        raise SchemaMismatch(f"fit columns {fit.names} do not match {cols}")
    sub = summary.select(cols)
    if not sub.has_higher_moments:
        raise MissingHigherMoments(f"provider {summary.provider_id!r} shipped no third/fourth moments")
    central = _central_augmented(sub, 4)
    shift = _affine(sub.mean)
    design = [0, *range(2, len(cols) + 1)]
    beta = fit.beta
    coef = np.zeros(len(cols) + 1)
    coef[0] = -beta[0]
    coef[1] = 1.0
    coef[2:] = -beta[1:]
    coef_c = shift.T @ coef
    inner = np.einsum("a,b,abjk->jk", coef_c, coef_c, central)
    a_d = shift[design]
    meat = a_d @ inner @ a_d.T
    bread = inv_spd(cross_products_from_summary(summary, response, cols[1:]).xtx)
    out = symmetrize(bread @ meat @ bread)
    if hc1:
        out *= fit.n / (fit.n - fit.p)
    return out
