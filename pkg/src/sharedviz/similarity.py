"""Neuron-specific image similarity and reference selection."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .errors import DegenerateError, ShapeError


class SimilarityScore(NamedTuple):
    value: float
    pair: tuple[str | None, str | None] = (None, None)


class Ranking(NamedTuple):
    ids: list
    truncated: bool


def _weighted(a, w):
    a, w = T.as_tensor(a), T.as_tensor(w)
    if a.shape != w.shape or a.ndim != 1:
        raise ShapeError(f"activation shape {a.shape} does not match weight shape {w.shape}")
    return a * w


def neuron_similarity(a1, a2, w, pair=(None, None)) -> SimilarityScore:
    """Cosine similarity of ``a1 * w`` and ``a2 * w``."""
    p, q = _weighted(a1, w), _weighted(a2, w)
    np_, nq = np.linalg.norm(p), np.linalg.norm(q)
    if np_ == 0 or nq == 0:
        which = "first" if np_ == 0 else "second"
        raise DegenerateError(f"{which} activation vector has zero weighted norm")
    return SimilarityScore(float(p @ q / (np_ * nq)), tuple(pair))


def select_reference(x_out_features, candidates: Sequence[tuple[str, np.ndarray]], w) -> str:
    """Id of the candidate most similar to ``x_out_features``; first index wins ties."""
    best_id, best = None, -np.inf
    for sid, feats in candidates:
        try:
            s = neuron_similarity(x_out_features, feats, w).value
        except DegenerateError as exc:
            if np.linalg.norm(_weighted(x_out_features, w)) == 0:
                raise DegenerateError("driver image has zero weighted norm") from exc
            continue
        if s > best:
            best_id, best = sid, s
    if best_id is None:
        raise DegenerateError("no candidate has a nonzero weighted activation")
    return best_id


def top_k_activators(model, features_by_id: Sequence[tuple[str, np.ndarray]], k: int) -> Ranking:
    """Ids of the ``k`` highest predicted responses, descending, ties by input order."""
    from .readout import predict

    if k < 1:
        raise ValueError("k must be at least 1")
    preds = np.array([predict(model, f) for _, f in features_by_id])
    order = np.argsort(-preds, kind="stable")
    truncated = k > len(order)
    return Ranking([features_by_id[i][0] for i in order[:k]], truncated)
