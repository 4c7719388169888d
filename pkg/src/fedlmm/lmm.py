"""Linear mixed models with provider-level random effects.

Model: ``y_h = X_h beta + Z_h u_h + e_h`` with ``u_h ~ N(0, G)`` and
``e_h ~ N(0, sigma^2 I)``, so ``Sigma_h = Z_h G Z_h' + sigma^2 I``.

Every likelihood evaluation goes through the per-provider cross products
``W_h' W_h`` with ``W_h = [X_h | y_h]``.  Writing ``G / sigma^2 = F F'`` and
``M_h = I + F' Z_h' Z_h F`` (q x q),

* ``log|Sigma_h| = n_h log sigma^2 + log|M_h|``
* ``W_h' V_h^{-1} W_h = W_h' W_h - (L_h^{-1} F' Z_h' W_h)' (L_h^{-1} F' Z_h' W_h)``

where ``V_h = Sigma_h / sigma^2`` and ``L_h`` is the Cholesky factor of
``M_h``.  Cost is linear in the number of rows and cubic only in ``q``.
The per-provider loop lives in :func:`fedlmm.kernels.lmm_terms`.

The optimiser searches over the lower-triangular factor of ``G / sigma^2``
with ``beta`` and ``sigma^2`` profiled out.  The REML criterion uses the
``(N - p)(1 + log(2 pi r / (N - p)))`` constant convention, so AIC and BIC
computed from it line up with mainstream mixed-model software.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from . import kernels
from .errors import (
    DataError,
    MismatchedData,
    NonConvergence,
    NonFiniteLikelihood,
    NotPositiveDefinite,
    SingularFixedDesign,
    UnknownColumn,
)
from .numerics import cholesky_lower, inv_spd, logdet_spd, solve_spd, sym_eigen

INTERCEPT = "(Intercept)"
LOG_2PI = math.log(2.0 * math.pi)
WALD_Z = 1.959963984540054


@dataclass(frozen=True)
class ModelSpec:
    """``fixed`` excludes the intercept, which is always the first design column.

    ``random`` lists random-effect terms: ``"intercept"`` and/or names of
    fixed-effect columns that get a random slope.
    """

    response: str
    fixed: tuple[str, ...]
    random: tuple[str, ...] = ("intercept",)
    method: str = "REML"

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", tuple(self.random))
        object.__setattr__(self, "method", self.method.upper())
        if self.method not in ("REML", "ML"):
            raise ValueError(f"method must be REML or ML, not {self.method!r}")
        bad = [r for r in self.random if r != "intercept" and r not in self.fixed]
        if bad:
            raise ValueError(f"random slopes {bad} are not fixed-effect columns")
        if len(set(self.random)) != len(self.random):
            raise ValueError("duplicate random-effect terms")

    @property
    def design_names(self) -> list[str]:
        return [INTERCEPT, *self.fixed]

    @property
    def random_names(self) -> list[str]:
        return [INTERCEPT if r == "intercept" else r for r in self.random]

    @property
    def z_index(self) -> np.ndarray:
        names = self.design_names
        return np.array([names.index(r) for r in self.random_names], dtype=np.int64)

    @property
    def p(self) -> int:
        return len(self.fixed) + 1

    @property
    def q(self) -> int:
        return len(self.random)

    @property
    def n_params(self) -> int:
        return self.p + self.q * (self.q + 1) // 2 + 1

    def with_method(self, method: str) -> "ModelSpec":
        return ModelSpec(self.response, self.fixed, self.random, method)


@dataclass
class ProviderData:
    """One provider's design (intercept included) and response."""

    provider_id: str
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise MismatchedData(f"provider {self.provider_id!r}: design and response disagree in length")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def cross(self) -> np.ndarray:
        w = np.column_stack([self.x, self.y])
        c = w.T @ w
        return 0.5 * (c + c.T)


def providers_from_frame(spec: ModelSpec, frame: pd.DataFrame, provider_col: str) -> list[ProviderData]:
    """Split a long table by provider (sorted by id)."""
    missing = [c for c in [spec.response, *spec.fixed, provider_col] if c not in frame.columns]
    if missing:
        raise UnknownColumn(f"columns not found: {missing}")
    out = []
    for pid, grp in frame.groupby(provider_col, sort=True):
        x = np.column_stack([np.ones(len(grp)), grp[list(spec.fixed)].to_numpy(dtype=float)])
        out.append(ProviderData(str(pid), x, grp[spec.response].to_numpy(dtype=float)))
    return out


def providers_from_tables(spec: ModelSpec, tables: dict[str, pd.DataFrame]) -> list[ProviderData]:
    """One table per provider, keyed by provider id; order follows the mapping."""
    out = []
    for pid, tab in tables.items():
        missing = [c for c in [spec.response, *spec.fixed] if c not in tab.columns]
        if missing:
            raise UnknownColumn(f"provider {pid!r}: columns not found: {missing}")
        x = np.column_stack([np.ones(len(tab)), tab[list(spec.fixed)].to_numpy(dtype=float)])
        out.append(ProviderData(str(pid), x, tab[spec.response].to_numpy(dtype=float)))
    return out


def providers_from_pseudo(spec: ModelSpec, datasets) -> list[ProviderData]:
    return providers_from_tables(spec, {d.provider_id: d.to_frame() for d in datasets})


def _coerce(providers) -> list[ProviderData]:
    out = []
    for i, pr in enumerate(providers):
        if isinstance(pr, ProviderData):
            out.append(pr)
        else:
            x, y = pr
            out.append(ProviderData(str(i), x, y))
    return out


class _Stack:
    """Per-provider cross products stacked for the kernel."""

    def __init__(self, spec: ModelSpec, providers):
        providers = _coerce(providers)
        if not providers:
            raise DataError("no providers")
        p = spec.p
        for pr in providers:
            if pr.x.shape[1] != p:
                raise MismatchedData(
                    f"provider {pr.provider_id!r}: design has {pr.x.shape[1]} columns, model needs {p}"
                )
        self.spec = spec
        self.ids = [pr.provider_id for pr in providers]
        self.n_h = np.array([pr.n for pr in providers], dtype=np.int64)
        self.cross = np.ascontiguousarray(np.stack([pr.cross() for pr in providers]))
        self.z_idx = spec.z_index
        self.N = int(self.n_h.sum())
        self.p = p
        self.q = spec.q

    def terms(self, factor: np.ndarray):
        logdet, total = kernels.lmm_terms(self.cross, self.z_idx, np.ascontiguousarray(factor, dtype=float))
        if not np.isfinite(logdet) or not np.all(np.isfinite(total)):
            raise NonFiniteLikelihood("non-finite likelihood terms")
        return logdet, total


@dataclass
class LmmParams:
    beta: np.ndarray
    sigma2: float
    g: np.ndarray
    theta: np.ndarray = field(default=None)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.g = np.atleast_2d(np.asarray(self.g, dtype=float)) if np.size(self.g) else np.zeros((0, 0))
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.theta is None:
            self.theta = theta_from_relative(self.g / self.sigma2)
        else:
            self.theta = np.asarray(self.theta, dtype=float)


def tril_from_theta(theta, q: int) -> np.ndarray:
    lower = np.zeros((q, q))
    lower[np.tril_indices(q)] = theta
    return lower


def theta_from_relative(rel: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L L' = rel`` (PSD allowed), flattened row-wise."""
    q = rel.shape[0]
    if q == 0:
        return np.zeros(0)
    try:
        lower = cholesky_lower(rel)
    except NotPositiveDefinite:
        eig = sym_eigen(rel)
        f = eig.vectors * np.sqrt(eig.values)
        r = np.linalg.qr(f.T, mode="r")
        lower = r.T
        lower = lower * np.where(np.diag(lower) < 0, -1.0, 1.0)
    return lower[np.tril_indices(q)]


def _factor(params: LmmParams) -> np.ndarray:
    q = params.g.shape[0]
    return tril_from_theta(params.theta, q)


def _solve_fixed(stack: _Stack, total: np.ndarray):
    p = stack.p
    a = total[:p, :p]
    b = total[:p, p]
    try:
        beta = solve_spd(a, b)
        logdet_a = logdet_spd(a)
    except NotPositiveDefinite as exc:
        raise SingularFixedDesign(f"X' V^-1 X is singular: {exc}") from exc
    r = float(total[p, p] - b @ beta)
    return a, beta, logdet_a, r


def deviance(spec: ModelSpec, providers, params: LmmParams) -> float:
    """``-2`` times the marginal log-likelihood at ``(beta, sigma2, G)``."""
    stack = providers if isinstance(providers, _Stack) else _Stack(spec, providers)
    logdet, total = stack.terms(_factor(params))
    v = np.append(-params.beta, 1.0)
    quad = float(v @ total @ v)
    out = stack.N * (LOG_2PI + math.log(params.sigma2)) + logdet + quad / params.sigma2
    if not math.isfinite(out):
        raise NonFiniteLikelihood("deviance is not finite")
    return out


def reml_criterion(spec: ModelSpec, providers, params: LmmParams) -> float:
    """``-2`` times the restricted log-likelihood at ``(sigma2, G)``; ``beta`` is profiled."""
    stack = providers if isinstance(providers, _Stack) else _Stack(spec, providers)
    logdet, total = stack.terms(_factor(params))
    _, _, logdet_a, r = _solve_fixed(stack, total)
    s2 = params.sigma2
    n_p = stack.N - stack.p
    out = stack.N * math.log(s2) + logdet + logdet_a - stack.p * math.log(s2) + r / s2 + n_p * LOG_2PI
    if not math.isfinite(out):
        raise NonFiniteLikelihood("REML criterion is not finite")
    return out


def _profiled(stack: _Stack, theta: np.ndarray, method: str):
    """Criterion with beta and sigma^2 profiled out, plus the pieces used to build a fit."""
    factor = tril_from_theta(theta, stack.q)
    logdet, total = stack.terms(factor)
    a, beta, logdet_a, r = _solve_fixed(stack, total)
    if not r > 0:
        raise NonFiniteLikelihood("zero residual sum of squares")
    if method == "ML":
        dof = stack.N
        crit = logdet + dof * (1.0 + LOG_2PI + math.log(r / dof))
    else:
        dof = stack.N - stack.p
        crit = logdet + logdet_a + dof * (1.0 + LOG_2PI + math.log(r / dof))
    return crit, factor, a, beta, r / dof


def profiled_criterion(spec: ModelSpec, providers, theta) -> float:
    stack = providers if isinstance(providers, _Stack) else _Stack(spec, providers)
    return _profiled(stack, np.asarray(theta, dtype=float), spec.method)[0]


@dataclass
class LmmFit:
    spec: ModelSpec
    params: LmmParams
    criterion: float
    aic: float
    bic: float
    se_beta: np.ndarray
    cov_beta: np.ndarray
    wald_ci: np.ndarray
    blups: dict[str, np.ndarray]
    n_total: int
    n_providers: int
    converged: bool
    iterations: int
    n_evaluations: int = 0
    provider_ids: list[str] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return self.spec.design_names

    @property
    def response(self) -> str:
        return self.spec.response

    @property
    def beta(self) -> np.ndarray:
        return self.params.beta

    @property
    def sigma(self) -> float:
        return math.sqrt(self.params.sigma2)

    @property
    def z_beta(self) -> np.ndarray:
        return self.params.beta / self.se_beta

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    @property
    def random_sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.params.g))

    @property
    def random_corr(self) -> np.ndarray:
        sd = self.random_sd
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.params.g / np.outer(sd, sd)


def information_criteria(criterion: float, k: int, n_total: int) -> tuple[float, float]:
    return criterion + 2.0 * k, criterion + k * math.log(n_total)


def _blups_from_stack(stack: _Stack, factor: np.ndarray, beta: np.ndarray) -> dict[str, np.ndarray]:
    q = stack.q
    out = {}
    v = np.append(-beta, 1.0)
    z = stack.z_idx
    for h, pid in enumerate(stack.ids):
        if q == 0:
            out[pid] = np.zeros(0)
            continue
        c = stack.cross[h]
        zte = c[z, :] @ v
        ztz = c[np.ix_(z, z)]
        m = np.eye(q) + factor.T @ ztz @ factor
        out[pid] = factor @ np.linalg.solve(m, factor.T @ zte)
    return out


def blups(fit: LmmFit, providers) -> dict[str, np.ndarray]:
    """``u_h = G Z_h' Sigma_h^{-1} (y_h - X_h beta)`` for each provider."""
    stack = providers if isinstance(providers, _Stack) else _Stack(fit.spec, providers)
    return _blups_from_stack(stack, _factor(fit.params), fit.params.beta)


def _start_theta(q: int) -> np.ndarray:
    return np.eye(q)[np.tril_indices(q)] if q else np.zeros(0)


def _canonical(theta: np.ndarray, q: int) -> np.ndarray:
    lower = tril_from_theta(theta, q)
    lower = lower * np.where(np.diag(lower) < 0, -1.0, 1.0)
    return lower[np.tril_indices(q)]


def fit(
    spec: ModelSpec,
    providers,
    start=None,
    restarts: int = 3,
    seed: int = 0,
    fatol: float = 1e-10,
    xatol: float = 1e-8,
    maxiter: int = 20000,
    strict: bool = False,
) -> LmmFit:
    """Fit by Nelder-Mead over the relative covariance factor, with jittered restarts.

    Restarts begin from the incumbent best point perturbed by a fixed-seed
    jitter, so two fits on data with identical cross products follow the same
    path.  Non-convergence sets ``converged=False`` (or raises with
    ``strict=True``); the best point is always returned.
    """
    stack = providers if isinstance(providers, _Stack) else _Stack(spec, providers)
    if len(stack.ids) < 2 and spec.q > 0:
        raise DataError("a mixed model needs at least two providers")
    method = spec.method
    q = stack.q
    evaluations = 0

    def objective(theta):
        nonlocal evaluations
        evaluations += 1
        try:
            return _profiled(stack, theta, method)[0]
        except (NonFiniteLikelihood, SingularFixedDesign):
            return np.inf

    converged = True
    iterations = 0
    if q == 0:
        best = np.zeros(0)
        best_val = objective(best)
    else:
        best = _canonical(np.asarray(start, dtype=float), q) if start is not None else _start_theta(q)
        best_val = objective(best)
        if not np.isfinite(best_val):
            _profiled(stack, best, method)  # surface the real error
        rng = np.random.default_rng(seed)
        options = {"xatol": xatol, "fatol": fatol, "maxiter": maxiter, "maxfev": 2 * maxiter}
        for attempt in range(restarts + 1):
            x0 = best if attempt == 0 else best + rng.normal(scale=0.1, size=best.shape) * (np.abs(best) + 0.1)
            res = minimize(objective, x0, method="Nelder-Mead", options=options)
            iterations += int(res.nit)
            improved = res.fun <= best_val if attempt == 0 else res.fun < best_val
            if improved:
                best, best_val = _canonical(np.asarray(res.x), q), float(res.fun)
                converged = bool(res.success)

    crit, factor, a, beta, sigma2 = _profiled(stack, best, method)
    g = sigma2 * factor @ factor.T
    cov_beta = sigma2 * inv_spd(a)
    se = np.sqrt(np.diag(cov_beta))
    k = spec.n_params
    aic, bic = information_criteria(crit, k, stack.N)
    params = LmmParams(beta=beta, sigma2=sigma2, g=g, theta=best.copy())
    result = LmmFit(
        spec=spec,
        params=params,
        criterion=crit,
        aic=aic,
        bic=bic,
        se_beta=se,
        cov_beta=cov_beta,
        wald_ci=np.column_stack([beta - WALD_Z * se, beta + WALD_Z * se]),
        blups=_blups_from_stack(stack, factor, beta),
        n_total=stack.N,
        n_providers=len(stack.ids),
        converged=converged,
        iterations=iterations,
        n_evaluations=evaluations,
        provider_ids=list(stack.ids),
    )
    if strict and not converged:
        raise NonConvergence("Nelder-Mead did not converge within the restart budget", best=result)
    return result


def compare_models(fits: Sequence[LmmFit]) -> list[LmmFit]:
    """Order by AIC, then BIC, then fewer parameters.

    Works on anything exposing ``aic``, ``bic``, ``n_params``, ``response``
    and ``n_total`` (fits or loaded reports).
    """
    if not fits:
        return []
    first = fits[0]
    for f in fits[1:]:
        if f.response != first.response or f.n_total != first.n_total:
            raise MismatchedData("models were fitted to different responses or data")
    return sorted(fits, key=lambda f: (f.aic, f.bic, f.n_params))
