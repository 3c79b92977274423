"""Beam search and top-k / top-p sampling over next-token distributions.

Decoders talk to a *step model*: anything with ``vocab_size`` and
``next_log_probs(prefixes) -> (n, vocab)`` array. Prefixes start with the
``<cls>`` token. :class:`TransformerStepper` adapts a trained
:class:`~rxnlm.model.Seq2SeqTransformer` to that interface, and
:class:`StubModel` wraps a hand-written table for tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np
import torch

from .vocab import CLS_ID, END_ID, Vocabulary, decode, default_vocabulary


class StepModel(Protocol):
    vocab_size: int

    def next_log_probs(self, prefixes: Sequence[tuple[int, ...]]) -> np.ndarray: ...


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # generated tokens, without the leading <cls>
    log_prob: float
    complete: bool = True

    def text(self, vocab: Vocabulary | None = None) -> str:
        return decode(self.tokens, vocab)


@dataclass
class GenerationResult:
    sequences: list[Hypothesis] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i: int) -> Hypothesis:
        return self.sequences[i]

    def texts(self, vocab: Vocabulary | None = None) -> list[str]:
        return [h.text(vocab) for h in self.sequences]


def _rank_key(h: Hypothesis, length_penalty: float = 0.0):
    score = h.log_prob
    if length_penalty:
        score = score / (len(h.tokens) ** length_penalty)
    return (-score, not h.complete, h.tokens)


class StubModel:
    """Step model backed by ``fn(prefix) -> probability vector``."""

    def __init__(self, fn: Callable[[tuple[int, ...]], Sequence[float]], vocab_size: int):
        self.fn = fn
        self.vocab_size = vocab_size

    def next_log_probs(self, prefixes):
        with np.errstate(divide="ignore"):
            return np.log(np.array([np.asarray(self.fn(tuple(p)), dtype=np.float64) for p in prefixes]))

    def sequence_log_prob(self, tokens: Sequence[int], start: int = CLS_ID) -> float:
        prefix = (start,)
        total = 0.0
        for t in tokens:
            total += float(self.next_log_probs([prefix])[0, t])
            prefix = prefix + (t,)
        return total


class TransformerStepper:
    """Step model for one encoder input; the memory is computed once."""

    def __init__(self, model, source: Sequence[int]):
        self.model = model
        self.vocab_size = model.config.vocab_size
        self.max_length = model.config.max_length
        src = torch.as_tensor(list(source), dtype=torch.long).unsqueeze(0)
        with torch.no_grad():
            self.memory, self.padding = model.encode(src)

    def next_log_probs(self, prefixes):
        if not prefixes:
            return np.zeros((0, self.vocab_size))
        if len({len(p) for p in prefixes}) > 1:
            out = np.empty((len(prefixes), self.vocab_size))
            for n in {len(p) for p in prefixes}:
                rows = [i for i, p in enumerate(prefixes) if len(p) == n]
                out[rows] = self.next_log_probs([prefixes[i] for i in rows])
            return out
        tgt = torch.as_tensor([list(p) for p in prefixes], dtype=torch.long)
        n = tgt.shape[0]
        with torch.no_grad():
            logits = self.model.decode(tgt, self.memory.expand(n, -1, -1), self.padding.expand(n, -1))
            return torch.log_softmax(logits[:, -1].double(), dim=-1).numpy()


def beam_search(
    model: StepModel,
    k: int,
    max_length: int,
    start: int = CLS_ID,
    end: int = END_ID,
    length_penalty: float = 0.0,
) -> GenerationResult:
    """Length-synchronous beam search ranked by cumulative log-probability.

    Finished hypotheses stay in the pool and compete with live ones for the
    ``k`` slots. Hypotheses that reach ``max_length`` generated tokens
    without ``<end>`` are returned flagged incomplete.
    """
    if k < 1:
        raise ValueError("beam width must be >= 1")
    live: list[Hypothesis] = [Hypothesis((), 0.0, complete=False)]
    finished: list[Hypothesis] = []
    for _ in range(max_length):
        if not live:
            break
        logp = model.next_log_probs([(start,) + h.tokens for h in live])
        pool = list(finished)
        for h, row in zip(live, logp):
            for tok in range(model.vocab_size):
                if np.isneginf(row[tok]):
                    continue
                pool.append(Hypothesis(h.tokens + (tok,), h.log_prob + float(row[tok]), tok == end))
        pool.sort(key=lambda h: _rank_key(h, length_penalty))
        kept = pool[:k]
        finished = [h for h in kept if h.complete]
        live = [h for h in kept if not h.complete]
    out = finished + live
    out.sort(key=lambda h: _rank_key(h, length_penalty))
    return GenerationResult(out[:k])


def greedy_decode(model: StepModel, max_length: int, start: int = CLS_ID, end: int = END_ID) -> Hypothesis:
    return beam_search(model, 1, max_length, start, end)[0]


def exhaustive_search(model: StepModel, k: int, max_length: int, start: int = CLS_ID,
                      end: int = END_ID) -> GenerationResult:
    """Every sequence up to ``max_length`` tokens, ranked; the oracle for beam search."""
    out: list[Hypothesis] = []
    frontier = [Hypothesis((), 0.0, complete=False)]
    for _ in range(max_length):
        nxt = []
        logp = model.next_log_probs([(start,) + h.tokens for h in frontier]) if frontier else []
        for h, row in zip(frontier, logp):
            for tok in range(model.vocab_size):
                if np.isneginf(row[tok]):
                    continue
                cand = Hypothesis(h.tokens + (tok,), h.log_prob + float(row[tok]), tok == end)
                (out if cand.complete else nxt).append(cand)
        frontier = nxt
    out.extend(frontier)
    out.sort(key=_rank_key)
    return GenerationResult(out[:k])


def _draw(probs: np.ndarray, support: np.ndarray, rng: np.random.Generator) -> int:
    p = np.where(support, probs, 0.0)
    p = p / p.sum()
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    idx = min(idx, len(p) - 1)
    while not support[idx] or p[idx] == 0.0:  # guard against round-off at the top end
        idx -= 1
    return idx


def top_k_support(probs: np.ndarray, k: int) -> np.ndarray:
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    mask = np.zeros(len(probs), dtype=bool)
    mask[order[:k]] = True
    return mask & (probs > 0)


def top_p_support(probs: np.ndarray, p: float) -> np.ndarray:
    """Smallest probability-sorted prefix whose mass reaches ``p``."""
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    mask = np.zeros(len(probs), dtype=bool)
    total = 0.0
    for i in order:
        if probs[i] <= 0:
            break
        mask[i] = True
        total += probs[i]
        if total >= p - 1e-12:
            break
    return mask


def _sample(model: StepModel, support_fn, n: int, seed: int, max_length: int,
            start: int, end: int) -> GenerationResult:
    rng = np.random.default_rng(seed)
    found: dict[tuple[int, ...], Hypothesis] = {}
    for _ in range(n):
        tokens: tuple[int, ...] = ()
        logp = 0.0
        complete = False
        for _ in range(max_length):
            row = model.next_log_probs([(start,) + tokens])[0]
            probs = np.exp(row)
            tok = _draw(probs, support_fn(probs), rng)
            tokens += (tok,)
            logp += float(row[tok])
            if tok == end:
                complete = True
                break
        found.setdefault(tokens, Hypothesis(tokens, logp, complete))
    return GenerationResult(sorted(found.values(), key=_rank_key))


def top_k_sample(model: StepModel, k: int, seed: int, max_length: int, n: int = 1,
                 start: int = CLS_ID, end: int = END_ID) -> GenerationResult:
    """``n`` seeded draws from the renormalised top-``k`` distribution; unique, ranked."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return _sample(model, lambda p: top_k_support(p, k), n, seed, max_length, start, end)


def top_p_sample(model: StepModel, p: float, seed: int, max_length: int, n: int = 1,
                 start: int = CLS_ID, end: int = END_ID) -> GenerationResult:
    """``n`` seeded nucleus-sampling draws; unique, ranked."""
    if not 0 < p <= 1:
        raise ValueError("p must be in (0, 1]")
    return _sample(model, lambda probs: top_p_support(probs, p), n, seed, max_length, start, end)


def full_sample(model: StepModel, seed: int, max_length: int, n: int = 1,
                start: int = CLS_ID, end: int = END_ID) -> GenerationResult:
    return _sample(model, lambda probs: probs > 0, n, seed, max_length, start, end)


def generate(model: StepModel, strategy: str, n: int, max_length: int, seed: int = 0,
             top_k: int = 10, top_p: float = 0.9) -> GenerationResult:
    if strategy == "beam":
        return beam_search(model, n, max_length)
    if strategy == "topk":
        return top_k_sample(model, top_k, seed, max_length, n=n)
    if strategy == "topp":
        return top_p_sample(model, top_p, seed, max_length, n=n)
    raise ValueError(f"unknown strategy {strategy!r}")


def sentence_field(text: str, role: str) -> Optional[str]:
    """Pull one component out of a generated ``reactants>reagents>products`` sentence."""
    parts = text.split(">")
    if len(parts) != 3:
        return None
    return parts[{"reactant": 0, "precursor": 0, "reagent": 1, "product": 2}[role]]


def texts(results: Iterable[GenerationResult], vocab: Vocabulary | None = None) -> list[list[str]]:
    vocab = vocab or default_vocabulary()
    return [r.texts(vocab) for r in results]
