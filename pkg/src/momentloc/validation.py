"""Input-validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError
from .geometry import DatasetProfile, get_profile
from .synthdata import SyntheticCorpus


def as_sentence_matrix(X, sent_dim: int | None = None) -> np.ndarray:
    """Coerce query input to a finite float matrix [n, sent_dim]."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] < 1:
        raise ContractError(f"sentence features must be [n, dim], got shape {X.shape}")
    if sent_dim is not None and X.shape[1] != sent_dim:
        raise ConfigError(f"sentence features have dim {X.shape[1]}, model expects {sent_dim}")
    if not np.all(np.isfinite(X)):
        raise ContractError("sentence features contain non-finite values")
    return X


def resolve_profile(profile) -> DatasetProfile:
    if isinstance(profile, DatasetProfile):
        return profile
    if isinstance(profile, str):
        return get_profile(profile)
    raise ConfigError(f"profile must be a name or DatasetProfile, got {type(profile).__name__}")


def check_corpus(corpus, profile: DatasetProfile) -> SyntheticCorpus:
    if not isinstance(corpus, SyntheticCorpus):
        raise ConfigError(f"expected a corpus, got {type(corpus).__name__}")
    if not corpus.videos:
        raise ContractError("corpus has no videos")
    if corpus.unit_seconds != profile.unit_seconds:
        raise ConfigError(
            f"corpus unit is {corpus.unit_seconds}s but profile "
            f"{profile.name!r} uses {profile.unit_seconds}s"
        )
    return corpus
