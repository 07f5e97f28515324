"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .corpus import Utterance


def check_feat_matrix(x, feat_dim: int | None = None, name: str = "features") -> np.ndarray:
    """Return ``x`` as a finite float64 (T, D) matrix."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty (frames, dims) matrix, got shape {arr.shape}")
    if feat_dim is not None and arr.shape[1] != feat_dim:
        raise ValueError(f"{name} have {arr.shape[1]} dims, expected {feat_dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contain non-finite values")
    return arr


def check_utterances(X, feat_dim: int | None = None, spk_dim: int | None = None
                     ) -> list[Utterance]:
    """Validate a non-empty collection of utterances with consistent dimensions."""
    if isinstance(X, Utterance):
        X = [X]
    utts: Sequence[Utterance] = list(X)
    if not utts:
        raise ValueError("expected at least one utterance")
    for u in utts:
        if not isinstance(u, Utterance):
            raise TypeError(f"expected Utterance objects, got {type(u).__name__}")
        u.validate()
    feat_dim = feat_dim if feat_dim is not None else utts[0].clean.shape[1]
    spk_dim = spk_dim if spk_dim is not None else utts[0].spk_embed.shape[0]
    for u in utts:
        check_feat_matrix(u.noisy, feat_dim, f"utterance {u.id} features")
        if u.spk_embed.shape != (spk_dim,):
            raise ValueError(f"utterance {u.id} speaker embedding has shape {u.spk_embed.shape}, "
                             f"expected ({spk_dim},)")
    return list(utts)
