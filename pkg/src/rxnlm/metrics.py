"""Generation and regression/classification metrics."""
from __future__ import annotations

from typing import Literal, Optional, Sequence

import numpy as np

from .smiles import canonical_set, is_valid_smiles

Match = Literal["canonical", "exact"]


def match_key(smiles: str, match: Match = "canonical") -> Optional[tuple[str, ...]]:
    """Order-insensitive key of a dot-separated molecule set, ``None`` if unparseable."""
    if match == "exact":
        return (smiles,)
    return canonical_set(smiles)


def top_k_accuracy(
    predictions: Sequence[Sequence[str]],
    references: Sequence[str],
    k: int,
    match: Match = "canonical",
) -> float:
    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    if not references:
        return 0.0
    hits = 0
    for preds, ref in zip(predictions, references):
        ref_key = match_key(ref, match)
        if ref_key is None:
            continue
        if any(match_key(p, match) == ref_key for p in preds[:k]):
            hits += 1
    return hits / len(references)


def syntax_error_rate(predictions: Sequence[Sequence[str]], k: int) -> float:
    pooled = [p for preds in predictions for p in preds[:k]]
    if not pooled:
        return 0.0
    return sum(not is_valid_smiles(p) for p in pooled) / len(pooled)


def _pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    r = np.asarray(ref, dtype=np.float64).ravel()
    if p.size == 0 or p.shape != r.shape:
        raise ValueError("predictions and references must be non-empty and equal length")
    return p, r


def rmse(pred, ref) -> float:
    p, r = _pair(pred, ref)
    return float(np.sqrt(np.mean((p - r) ** 2)))


def mae(pred, ref) -> float:
    p, r = _pair(pred, ref)
    return float(np.mean(np.abs(p - r)))


def r_squared(pred, ref) -> float:
    p, r = _pair(pred, ref)
    ss_res = float(np.sum((r - p) ** 2))
    ss_tot = float(np.sum((r - r.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else float("-inf")
    return 1.0 - ss_res / ss_tot


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count half)."""
    s, y = _pair(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    if len(pos) + len(neg) != len(y):
        raise ValueError("labels must be 0/1")
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC is undefined with a single class")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y == 1].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))
