"""Mask-filling pretraining, gradient checking and the ``ReactionLM`` estimator."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from .corpus import MaskedExample, ReactionRecord, masked_examples, parse_reaction
from .decoding import GenerationResult, TransformerStepper, generate
from .model import ModelConfig, Seq2SeqTransformer, pad_batch, parameter_checksum, sequence_loss
from .vocab import CLS_ID, END_ID, PAD_ID, Vocabulary, decode, default_vocabulary, encode, tokenize

logger = logging.getLogger(__name__)


@dataclass
class Batch:
    src: torch.Tensor
    tgt_in: torch.Tensor
    labels: torch.Tensor


def collate(examples: Sequence[MaskedExample]) -> Batch:
    src = pad_batch([ex.input for ex in examples])
    tgt = pad_batch([ex.target for ex in examples])
    return Batch(src, tgt[:, :-1], tgt[:, 1:])


def batch_loss(model: Seq2SeqTransformer, batch: Batch) -> torch.Tensor:
    return sequence_loss(model(batch.src, batch.tgt_in), batch.labels)


def make_optimizer(model: torch.nn.Module, lr: float = 1e-5, weight_decay: float = 1e-4) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def train_step(model: Seq2SeqTransformer, optimizer: torch.optim.Optimizer, batch: Batch) -> float:
    """One AdamW update on ``batch``; raises ``FloatingPointError`` on a non-finite loss."""
    model.train()
    optimizer.zero_grad(set_to_none=False)
    loss = batch_loss(model, batch)
    if not torch.isfinite(loss):
        bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
        raise FloatingPointError(f"non-finite loss {loss.item()}; non-finite parameters: {bad or 'none'}")
    loss.backward()
    optimizer.step()
    return float(loss.item())


@torch.no_grad()
def greedy_batch(model: Seq2SeqTransformer, sources: Sequence[Sequence[int]], max_new: int) -> list[list[int]]:
    """Batched argmax decoding; each output starts with ``<cls>`` and stops after ``<end>``."""
    model.eval()
    src = pad_batch(sources)
    memory, padding = model.encode(src)
    out = torch.full((len(sources), 1), CLS_ID, dtype=torch.long)
    done = torch.zeros(len(sources), dtype=torch.bool)
    limit = min(max_new, model.config.max_length - 1)
    for _ in range(limit):
        logits = model.decode(out, memory, padding)[:, -1]
        nxt = logits.argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
        out = torch.cat([out, nxt[:, None]], dim=1)
        done |= nxt == END_ID
        if bool(done.all()):
            break
    seqs = []
    for row in out.tolist():
        if END_ID in row:
            row = row[: row.index(END_ID) + 1]
        seqs.append([t for t in row if t != PAD_ID])
    return seqs


def reconstruction_accuracy(model: Seq2SeqTransformer, examples: Sequence[MaskedExample],
                            batch_size: int = 128) -> float:
    """Fraction of examples whose greedy output equals the full target exactly."""
    if not examples:
        return 0.0
    hits = 0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        max_new = max(len(ex.target) for ex in chunk) + 2
        for ex, out in zip(chunk, greedy_batch(model, [ex.input for ex in chunk], max_new)):
            hits += tuple(out) == ex.target
    return hits / len(examples)


@dataclass
class TrainHistory:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    accuracy: list[tuple[int, float]] = field(default_factory=list)


def pretrain(
    model: Seq2SeqTransformer,
    examples: Sequence[MaskedExample],
    n_steps: int,
    lr: float = 1e-5,
    weight_decay: float = 1e-4,
    batch_size: int = 256,
    seed: int = 0,
    eval_every: int = 0,
    stop_at_accuracy: Optional[float] = None,
) -> TrainHistory:
    """Mask-filling training with reshuffled minibatches each epoch."""
    if not examples:
        raise ValueError("no training examples")
    opt = make_optimizer(model, lr, weight_decay)
    rng = np.random.default_rng(seed)
    hist = TrainHistory()
    order: list[int] = []
    for step in range(1, n_steps + 1):
        if len(order) < min(batch_size, len(examples)):
            order.extend(rng.permutation(len(examples)).tolist())
        idx, order = order[:batch_size], order[batch_size:]
        loss = train_step(model, opt, collate([examples[i] for i in idx]))
        hist.steps.append(step)
        hist.losses.append(loss)
        if eval_every and step % eval_every == 0:
            acc = reconstruction_accuracy(model, examples)
            hist.accuracy.append((step, acc))
            logger.info("step %d loss %.4f accuracy %.3f", step, loss, acc)
            if stop_at_accuracy is not None and acc >= stop_at_accuracy:
                break
    return hist


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckResult:
    max_relative_error: float
    n_checked: int
    worst: tuple[str, int]
    errors: list[float]

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_relative_error < tol


def gradient_check(
    model: torch.nn.Module,
    loss_fn,
    epsilon: float = 1e-3,
    n_samples: int = 200,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
    widen: bool = True,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare autograd gradients with central differences on sampled entries.

    ``loss_fn(model) -> scalar tensor``. With ``widen`` the check runs on a
    float64 copy. The relative error is ``|a - n| / max(|a|, |n|, floor)``.
    Entries are drawn round-robin across parameter tensors so that every
    tensor is covered.
    """
    if widen:
        model = copy.deepcopy(model).double()
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    loss.backward()
    params = [(n, p) for n, p in model.named_parameters()
              if p.requires_grad and (names is None or n in names)]
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params}
    rng = np.random.default_rng(seed)
    picks = []
    while len(picks) < n_samples:
        for n, p in params:
            picks.append((n, p, int(rng.integers(p.numel()))))
            if len(picks) >= n_samples:
                break
    errors, worst, worst_err = [], ("", -1), -1.0
    with torch.no_grad():
        for n, p, i in picks:
            flat = p.view(-1)
            orig = flat[i].item()
            flat[i] = orig + epsilon
            up = float(loss_fn(model))
            flat[i] = orig - epsilon
            down = float(loss_fn(model))
            flat[i] = orig
            num = (up - down) / (2 * epsilon)
            ana = float(analytic[n].view(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            errors.append(err)
            if err > worst_err:
                worst_err, worst = err, (n, i)
    return GradCheckResult(max(errors), len(errors), worst, errors)


# ---------------------------------------------------------------- estimator


def _as_records(X: Iterable[Union[str, ReactionRecord]]) -> list[ReactionRecord]:
    return [x if isinstance(x, ReactionRecord) else parse_reaction(x) for x in X]


class ReactionLM(BaseEstimator):
    """Mask-filling encoder-decoder over reaction sentences.

    ``fit`` takes reaction strings (or records), masks each component in
    turn (``mask_mode="all"``) or one sampled component, and trains the
    model to reconstruct the full sentence. ``predict`` maps masked
    sentences to their greedy reconstruction.
    """

    def __init__(
        self,
        d_model: int = 128,
        n_heads: int = 4,
        n_encoder_layers: int = 3,
        n_decoder_layers: int = 3,
        d_ff: Optional[int] = None,
        max_length: int = 256,
        scale_mode: str = "sqrt_head_dim",
        lr: float = 1e-5,
        weight_decay: float = 1e-4,
        batch_size: int = 256,
        n_steps: int = 1000,
        mask_mode: str = "all",
        eval_every: int = 0,
        stop_at_accuracy: Optional[float] = None,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_encoder_layers = n_encoder_layers
        self.n_decoder_layers = n_decoder_layers
        self.d_ff = d_ff
        self.max_length = max_length
        self.scale_mode = scale_mode
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.mask_mode = mask_mode
        self.eval_every = eval_every
        self.stop_at_accuracy = stop_at_accuracy
        self.seed = seed

    def _config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, n_encoder_layers=self.n_encoder_layers,
            n_decoder_layers=self.n_decoder_layers, d_ff=self.d_ff, max_length=self.max_length,
            scale_mode=self.scale_mode, seed=self.seed,
        )

    def fit(self, X, y=None):
        torch.manual_seed(self.seed)
        self.vocab_ = default_vocabulary()
        self.config_ = self._config()
        self.model_ = Seq2SeqTransformer(self.config_)
        records = _as_records(X)
        self.examples_ = masked_examples(records, self.mask_mode, self.seed, self.vocab_, self.max_length)
        self.history_ = pretrain(
            self.model_, self.examples_, self.n_steps, self.lr, self.weight_decay, self.batch_size,
            self.seed, self.eval_every, self.stop_at_accuracy,
        )
        return self

    def encode_input(self, text: str) -> list[int]:
        return encode(tokenize(text, self.vocab_), self.vocab_, self.config_.max_length)

    def predict(self, X: Iterable[str]) -> list[str]:
        check_is_fitted(self, "model_")
        sources = [self.encode_input(x) for x in X]
        outs = greedy_batch(self.model_, sources, self.config_.max_length - 1)
        return [decode(o, self.vocab_) for o in outs]

    def generate(self, text: str, strategy: str = "beam", n: int = 10, seed: int = 0,
                 top_k: int = 10, top_p: float = 0.9, max_new: Optional[int] = None) -> GenerationResult:
        check_is_fitted(self, "model_")
        self.model_.eval()
        stepper = TransformerStepper(self.model_, self.encode_input(text))
        limit = max_new or self.config_.max_length - 1
        return generate(stepper, strategy, n, limit, seed=seed, top_k=top_k, top_p=top_p)

    def score(self, X, y=None) -> float:
        """Exact greedy reconstruction rate over all masked variants of ``X``."""
        check_is_fitted(self, "model_")
        exs = masked_examples(_as_records(X), "all", self.seed, self.vocab_, self.max_length)
        return reconstruction_accuracy(self.model_, exs)

    def checksum(self) -> str:
        check_is_fitted(self, "model_")
        return parameter_checksum(self.model_)

    def save(self, path: Union[str, Path], extra: Optional[dict] = None) -> str:
        check_is_fitted(self, "model_")
        meta = {"estimator": self.get_params(), **(extra or {})}
        return checkpoint.save_checkpoint(path, self.config_.to_dict(), self.model_.state_dict(), meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ReactionLM":
        config, tensors, extra = checkpoint.load_checkpoint(path)
        est = cls(**extra.get("estimator", {}))
        est.vocab_ = default_vocabulary()
        est.config_ = ModelConfig(**config)
        est.model_ = Seq2SeqTransformer(est.config_)
        base_keys = set(est.model_.state_dict())
        est.model_.load_state_dict({k: v for k, v in tensors.items() if k in base_keys})
        est.extra_tensors_ = {k: v for k, v in tensors.items() if k not in base_keys}
        est.extra_ = extra
        return est


def seq_loss_from_examples(examples: Sequence[MaskedExample]):
    """Loss closure over a fixed batch, for :func:`gradient_check`."""
    batch = collate(examples)
    return lambda m: batch_loss(m, batch)


def uniform_loss_value(vocab_size: int = 202) -> float:
    return math.log(vocab_size)
