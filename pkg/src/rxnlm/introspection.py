"""Looking inside a trained model: embedding geometry and attention maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import AttentionRecord, Seq2SeqTransformer
from .vocab import END_ID, Vocabulary, default_vocabulary, encode, tokenize


def _network(model) -> Seq2SeqTransformer:
    if isinstance(model, Seq2SeqTransformer):
        return model
    net = getattr(model, "model_", None)
    if isinstance(net, Seq2SeqTransformer):
        return net
    raise TypeError("expected a Seq2SeqTransformer or a fitted ReactionLM")


def _token_id(tok: Union[str, int], vocab: Vocabulary) -> int:
    return int(tok) if isinstance(tok, (int, np.integer)) else vocab.index(tok)


def embedding_matrix(model) -> np.ndarray:
    return _network(model).lexical.weight.detach().cpu().double().numpy()


def token_distance(a: Union[str, int], b: Union[str, int], model, vocab: Optional[Vocabulary] = None) -> float:
    """Euclidean distance between two rows of the token embedding table."""
    vocab = vocab or default_vocabulary()
    w = embedding_matrix(model)
    return float(np.linalg.norm(w[_token_id(a, vocab)] - w[_token_id(b, vocab)]))


@dataclass
class ProjectionResult:
    coords: np.ndarray
    components: np.ndarray  # (dims, features)
    explained_variance_ratio: np.ndarray
    mean: np.ndarray


def pca_project(vectors, dims: int = 2) -> ProjectionResult:
    """Principal-component projection with a fixed sign per axis.

    Each axis is flipped so that its largest-magnitude loading is positive,
    which makes the output reproducible across runs and platforms.
    """
    x = check_array(vectors, dtype=np.float64, ensure_min_samples=2)
    if not 1 <= dims <= x.shape[1]:
        raise ValueError(f"dims must be in [1, {x.shape[1]}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:dims]
    comps = evecs[:, order].T
    for i, c in enumerate(comps):
        if c[np.argmax(np.abs(c))] < 0:
            comps[i] = -c
    total = float(np.clip(evals, 0, None).sum())
    ratio = np.clip(evals[order], 0, None) / total if total > 0 else np.zeros(dims)
    return ProjectionResult(xc @ comps.T, comps, ratio, mean)


class EmbeddingPCA(BaseEstimator, TransformerMixin):
    """Fit principal axes on vectors (e.g. token embeddings) and project new ones."""

    def __init__(self, n_components: int = 2):
        self.n_components = n_components

    def fit(self, X, y=None):
        res = pca_project(X, self.n_components)
        self.components_ = res.components
        self.mean_ = res.mean
        self.explained_variance_ratio_ = res.explained_variance_ratio
        self.n_features_in_ = res.components.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        x = check_array(X, dtype=np.float64)
        return (x - self.mean_) @ self.components_.T


def _ids(text: str, vocab: Vocabulary, max_length: int) -> tuple[list[int], list[str]]:
    toks = tokenize(text, vocab)
    return encode(toks, vocab, max_length), ["<cls>"] + toks + ["<end>"]


def sentence_vector(text: str, model, pooling: str = "end", vocab: Optional[Vocabulary] = None) -> np.ndarray:
    """Encoder state at the ``<end>`` token, or the mean over all positions."""
    vocab = vocab or default_vocabulary()
    net = _network(model)
    ids, _ = _ids(text, vocab, net.config.max_length)
    with torch.no_grad():
        memory, _ = net.encode(torch.tensor([ids]))
    m = memory[0].double().numpy()
    if pooling == "end":
        return m[ids.index(END_ID)]
    if pooling == "mean":
        return m.mean(axis=0)
    raise ValueError("pooling must be 'end' or 'mean'")


@dataclass
class AttentionMap:
    rows: list[str]
    cols: list[str]
    matrix: np.ndarray

    def to_tsv(self) -> str:
        lines = ["\t".join(["query"] + self.cols)]
        for label, row in zip(self.rows, self.matrix):
            lines.append("\t".join([label] + [f"{v:.6g}" for v in row]))
        return "\n".join(lines) + "\n"


def export_attention(reaction: str, model, layer: int = -1, kind: str = "encoder",
                     head: Union[int, str] = "mean", vocab: Optional[Vocabulary] = None) -> AttentionMap:
    """Labeled attention matrix for one reaction.

    The reaction feeds the encoder and, teacher-forced, the decoder. ``kind``
    picks encoder self-attention, decoder self-attention or cross-attention.
    ``head`` is a head index or ``"mean"``.
    """
    vocab = vocab or default_vocabulary()
    net = _network(model)
    ids, labels = _ids(reaction, vocab, net.config.max_length)
    record = AttentionRecord()
    with torch.no_grad():
        net.eval()
        src = torch.tensor([ids])
        memory, padding = net.encode(src, record)
        net.decode_hidden(torch.tensor([ids[:-1]]), memory, padding, record)
    mats = record.kind(kind)
    a = mats[layer][0].double().numpy()  # (heads, q, k)
    mat = a.mean(axis=0) if head == "mean" else a[int(head)]
    dec_labels = labels[:-1]
    rows = labels if kind == "encoder" else dec_labels
    cols = dec_labels if kind == "decoder" else labels
    return AttentionMap(rows, cols, mat)


def nearest_tokens(token: Union[str, int], model, k: int = 5, vocab: Optional[Vocabulary] = None,
                   candidates: Optional[Sequence[str]] = None) -> list[tuple[str, float]]:
    vocab = vocab or default_vocabulary()
    w = embedding_matrix(model)
    q = _token_id(token, vocab)
    pool = [vocab.index(c) for c in candidates] if candidates else range(len(w))
    dists = [(vocab.token(i), float(np.linalg.norm(w[i] - w[q]))) for i in pool if i != q]
    return sorted(dists, key=lambda t: (t[1], t[0]))[:k]


__all__ = [
    "AttentionMap", "EmbeddingPCA", "ProjectionResult", "embedding_matrix", "export_attention",
    "nearest_tokens", "pca_project", "sentence_vector", "token_distance",
]
