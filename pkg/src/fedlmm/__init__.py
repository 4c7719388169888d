"""One-shot federated linear and linear mixed models.

Providers share ``n``, a mean vector and a covariance matrix (optionally
third and fourth joint moments) once.  The analyst rebuilds cross products
or generates pseudo-data with exactly those moments, and fits models whose
estimates equal those from the pooled raw data.
"""

__version__ = "0.1.0"

from .errors import FedLmmError, RankDeficiencyWarning
from .interchange import parse_summaries, write_summaries
from .lmm import (
    LmmFit,
    LmmParams,
    ModelSpec,
    ProviderData,
    compare_models,
    deviance,
    fit,
    providers_from_frame,
    providers_from_pseudo,
    reml_criterion,
)
from .pseudogen import GeneratorConfig, PseudoDataset, generate_all, generate_dataset
from .regression import CrossProducts, LinRegFit, cross_products_from_summary, fit_ols, robust_sandwich
from .summaries import ProviderSummary, VariableSpec, pool_summaries, summarize_matrix

__all__ = [
    "CrossProducts",
    "FedLmmError",
    "GeneratorConfig",
    "LinRegFit",
    "LmmFit",
    "LmmParams",
    "ModelSpec",
    "ProviderData",
    "ProviderSummary",
    "PseudoDataset",
    "RankDeficiencyWarning",
    "VariableSpec",
    "compare_models",
    "cross_products_from_summary",
    "deviance",
    "fit",
    "fit_ols",
    "generate_all",
    "generate_dataset",
    "parse_summaries",
    "pool_summaries",
    "providers_from_frame",
    "providers_from_pseudo",
    "reml_criterion",
    "robust_sandwich",
    "summarize_matrix",
    "write_summaries",
]
