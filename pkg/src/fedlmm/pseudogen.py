"""Pseudo-data whose sample mean and covariance equal a target summary.

Random source rows are drawn from any convenient distribution and then mapped
affinely so that their first two sample moments hit the targets exactly.  Two
multivariate maps are provided:

* Cholesky: ``x_i = mu + L_target L_source^{-1} (r_i - rbar)``; needs both
  covariances positive definite.
* eigen/SVD: whiten the centred source rows with the right singular vectors
  of a *full* SVD, rescale each column to unit sample variance, then colour
  with ``U Lambda^{1/2}`` from the target's eigendecomposition.  Works for
  semidefinite targets and does not break when ``n <= p``.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateSource, FedLmmError, NotPositiveDefinite, RankDeficiencyWarning
from .numerics import cholesky_lower, full_svd, sym_eigen
from .summaries import ProviderSummary

DEFAULT_SEED = 20240229
MAX_REDRAWS = 8
SOURCES = ("standard_normal", "uniform_unit")
METHODS = ("auto", "cholesky", "eigen_svd")


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = DEFAULT_SEED
    source_distribution: str = "standard_normal"
    method: str = "auto"

    def __post_init__(self):
        if self.source_distribution not in SOURCES:
            raise ValueError(f"source_distribution must be one of {SOURCES}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(int(self.seed) & 0xFFFFFFFFFFFFFFFF)


@dataclass
class PseudoDataset:
    provider_id: str
    columns: list[str]
    data: np.ndarray
    method: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(self.data, columns=self.columns)


def provider_seed(seed: int, provider_id: str) -> int:
    """``seed XOR h(provider_id)`` with a stable 64-bit hash."""
    digest = hashlib.blake2b(str(provider_id).encode("utf-8"), digest_size=8).digest()
    return (int(seed) ^ int.from_bytes(digest, "little")) & 0xFFFFFFFFFFFFFFFF


def _draw(rng: np.random.Generator, shape, source: str) -> np.ndarray:
    if source == "standard_normal":
        return rng.standard_normal(shape)
    return rng.random(shape)


def generate_univariate(n: int, target_mean: float, target_sd: float, config: GeneratorConfig | None = None,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """``n`` values with sample mean ``target_mean`` and sample sd ``target_sd``."""
    config = config or GeneratorConfig()
    if n < 2:
        raise ValueError("need n >= 2")
    if target_sd < 0:
        raise ValueError("target_sd must be nonnegative")
    if target_sd == 0:
        return np.full(n, float(target_mean))
    rng = rng if rng is not None else config.rng()
    for _ in range(MAX_REDRAWS):
        x = _draw(rng, n, config.source_distribution)
        s = x.std(ddof=1)
        if s > 0:
            return target_mean + target_sd * (x - x.mean()) / s
    raise DegenerateSource(f"{MAX_REDRAWS} source draws all had zero spread")


def generate_multivariate_cholesky(n: int, summary: ProviderSummary, config: GeneratorConfig | None = None,
                                   rng: np.random.Generator | None = None) -> PseudoDataset:
    config = config or GeneratorConfig()
    rng = rng if rng is not None else config.rng()
    p = summary.p
    if n - 1 < p:
        raise NotPositiveDefinite(f"n - 1 = {n - 1} < p = {p}: source covariance is singular")
    lower_t = cholesky_lower(summary.cov)
    r = _draw(rng, (n, p), config.source_distribution)
    centred = r - r.mean(axis=0)
    s_r = centred.T @ centred / (n - 1)
    lower_r = cholesky_lower(0.5 * (s_r + s_r.T))
    white = solve_triangular(lower_r, centred.T, lower=True, check_finite=False)
    data = summary.mean + (lower_t @ white).T
    return PseudoDataset(summary.provider_id, summary.names, data, method="cholesky")


def generate_multivariate_eigen(n: int, summary: ProviderSummary, config: GeneratorConfig | None = None,
                                rng: np.random.Generator | None = None) -> PseudoDataset:
    config = config or GeneratorConfig()
    rng = rng if rng is not None else config.rng()
    if n < 2:
        raise ValueError("need n >= 2")
    p = summary.p
    eig = sym_eigen(summary.cov)
    src_rank = min(n - 1, p)
    target_rank = int(np.sum(eig.values > 1e-12 * max(eig.values[0], 0.0))) if eig.values[0] > 0 else 0
    for _ in range(MAX_REDRAWS):
        r = _draw(rng, (n, p), config.source_distribution)
        centred = r - r.mean(axis=0)
        svd = full_svd(centred)
        rv = centred @ svd.right
        s = svd.singular_values
        if src_rank and s[src_rank - 1] > 1e-10 * s[0]:
            break
    else:
        raise DegenerateSource(f"{MAX_REDRAWS} source draws had rank < {src_rank}")
    rv[:, src_rank:] = 0.0
    rms = np.sqrt((rv[:, :src_rank] ** 2).sum(axis=0) / (n - 1))
    rv[:, :src_rank] /= rms
    data = summary.mean + rv @ (eig.vectors * np.sqrt(eig.values)).T
    out = PseudoDataset(summary.provider_id, summary.names, data, method="eigen_svd")
    if target_rank > n - 1:
        msg = (
            f"provider {summary.provider_id!r}: n = {n} rows cannot carry a rank-{target_rank} "
            f"covariance; pseudo-data covariance has rank {n - 1}"
        )
        out.warnings.append(msg)
        warnings.warn(msg, RankDeficiencyWarning, stacklevel=2)
    return out


def generate(n: int, summary: ProviderSummary, config: GeneratorConfig | None = None) -> PseudoDataset:
    """Dispatch on ``config.method``; ``auto`` falls back to eigen/SVD on a non-PD covariance."""
    config = config or GeneratorConfig()
    if config.method == "cholesky":
        return generate_multivariate_cholesky(n, summary, config)
    if config.method == "eigen_svd":
        return generate_multivariate_eigen(n, summary, config)
    try:
        return generate_multivariate_cholesky(n, summary, config)
    except NotPositiveDefinite:
        return generate_multivariate_eigen(n, summary, config)


def generate_dataset(summary: ProviderSummary, config: GeneratorConfig | None = None) -> PseudoDataset:
    """Pseudo-data for one provider, ``summary.n`` rows, provider-specific seed."""
    config = config or GeneratorConfig()
    cfg = replace(config, seed=provider_seed(config.seed, summary.provider_id))
    try:
        return generate(summary.n, summary, cfg)
    except FedLmmError as exc:
        exc.provider_id = summary.provider_id
        exc.args = (f"provider {summary.provider_id!r}: {exc}",)
        raise


def generate_all(summaries: Sequence[ProviderSummary], config: GeneratorConfig | None = None) -> list[PseudoDataset]:
    return [generate_dataset(s, config) for s in summaries]
