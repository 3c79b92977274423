"""Task-token heads, LoRA adapters, and the value/policy scorers for planning.

A task head owns one of the reserved ``<n00>``..``<n04>`` tokens. By
default (``append-decoder``) the tokens are appended after ``<end>`` and the
full sequence goes through encoder and decoder; each head reads the
decoder state at its token. ``prepend-encoder`` puts the tokens first and
reads encoder states instead. Several heads share one forward pass.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Literal, Optional, Sequence, Union

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted
from torch import Tensor, nn
from torch.nn import functional as F

from . import checkpoint
from .corpus import split_dataset
from .metrics import auc, rmse
from .model import ModelConfig, Seq2SeqTransformer, pad_batch, parameter_checksum
from .smiles import is_valid_smiles
from .vocab import PAD_ID, USER_TOKENS, Vocabulary, default_vocabulary, encode, tokenize

logger = logging.getLogger(__name__)

Placement = Literal["append-decoder", "prepend-encoder"]
Squash = Literal["none", "sigmoid"]


# ---------------------------------------------------------------- LoRA


def lora_forward(w: Tensor, a: Tensor, b: Tensor, alpha: float, x: Tensor,
                 materialize: bool = False) -> Tensor:
    """``x (W + alpha B A)^T``; the factored path never forms ``W + alpha B A``."""
    if a.shape[0] == 0:
        raise ValueError("LoRA rank must be >= 1")
    if materialize:
        return x @ (w + alpha * (b @ a)).T
    return x @ w.T + alpha * ((x @ a.T) @ b.T)


class LoraLinear(nn.Module):
    """Frozen ``nn.Linear`` plus a trainable low-rank update ``alpha * B A``."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, generator: Optional[torch.Generator] = None):
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = float(alpha)
        w = base.weight
        self.lora_a = nn.Parameter(torch.empty(rank, w.shape[1], dtype=w.dtype))
        self.lora_b = nn.Parameter(torch.zeros(w.shape[0], rank, dtype=w.dtype))
        with torch.no_grad():
            self.lora_a.normal_(0.0, rank ** -0.5, generator=generator)  # variance 1/r

    def forward(self, x: Tensor) -> Tensor:
        out = F.linear(x, self.base.weight, self.base.bias)
        return out + self.alpha * F.linear(F.linear(x, self.lora_a), self.lora_b)

    def merged_weight(self) -> Tensor:
        return self.base.weight + self.alpha * self.lora_b @ self.lora_a


def apply_lora(model: Seq2SeqTransformer, rank: int = 8, alpha: float = 8.0,
               targets: Sequence[str] = ("query", "value"), seed: int = 0) -> list[str]:
    """Freeze ``model`` and wrap every attention projection named in ``targets``."""
    gen = torch.Generator().manual_seed(seed)
    for p in model.parameters():
        p.requires_grad_(False)
    wrapped = []
    for name, module in list(model.named_modules()):
        for attr in targets:
            child = getattr(module, attr, None)
            if isinstance(child, nn.Linear) and not isinstance(module, LoraLinear):
                setattr(module, attr, LoraLinear(child, rank, alpha, gen))
                wrapped.append(f"{name}.{attr}" if name else attr)
    return wrapped


def base_state(model: nn.Module) -> dict[str, Tensor]:
    """Parameters of the underlying model with LoRA wrappers looked through."""
    out = {}
    for k, v in model.state_dict().items():
        if ".lora_" in k:
            continue
        out[k.replace(".base.", ".")] = v
    return out


def base_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(base_state(model).items()):
        h.update(name.encode())
        h.update(p.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- task heads


@dataclass
class TaskHeadSpec:
    name: str
    token: str
    out_dim: int = 1
    squash: Squash = "none"


class TaskModel(nn.Module):
    """A base transformer plus linear heads read at task-token positions."""

    def __init__(self, base: Seq2SeqTransformer, specs: Sequence[TaskHeadSpec],
                 placement: Placement = "append-decoder", vocab: Optional[Vocabulary] = None):
        super().__init__()
        tokens = [s.token for s in specs]
        if len(set(tokens)) != len(tokens):
            raise ValueError("task tokens must be distinct across heads")
        for t in tokens:
            if t not in USER_TOKENS:
                raise ValueError(f"task token {t!r} is not one of {USER_TOKENS}")
        if placement not in ("append-decoder", "prepend-encoder"):
            raise ValueError(f"unknown placement {placement!r}")
        self.base = base
        self.specs = list(specs)
        self.placement = placement
        self.vocab = vocab or default_vocabulary()
        d = base.config.d_model
        self.heads = nn.ModuleDict({s.name: nn.Linear(d, s.out_dim) for s in specs})
        dtype = base.lexical.weight.dtype
        with torch.no_grad():
            for h in self.heads.values():
                h.to(dtype)
                h.weight.normal_(0.0, 0.02)
                h.bias.zero_()

    def build_input(self, text: str) -> tuple[list[int], list[int]]:
        """Token ids with task tokens attached and the position of each task token."""
        body = encode(tokenize(text, self.vocab), self.vocab, self.base.config.max_length)
        task_ids = [self.vocab.index(s.token) for s in self.specs]
        if len(body) + len(task_ids) > self.base.config.max_length:
            raise ValueError(f"input of {len(body) + len(task_ids)} tokens exceeds max_length")
        if self.placement == "append-decoder":
            return body + task_ids, list(range(len(body), len(body) + len(task_ids)))
        return task_ids + body, list(range(len(task_ids)))

    def hidden_at_tasks(self, texts: Sequence[str]) -> Tensor:
        """(batch, n_heads, d_model) states at the task-token positions."""
        built = [self.build_input(t) for t in texts]
        ids = pad_batch([b[0] for b in built])
        pos = torch.as_tensor([b[1] for b in built], dtype=torch.long)
        memory, padding = self.base.encode(ids)
        if self.placement == "append-decoder":
            states = self.base.decode_hidden(ids, memory, padding)
        else:
            states = memory
        return torch.gather(states, 1, pos[:, :, None].expand(-1, -1, states.shape[-1]))

    def forward(self, texts: Sequence[str]) -> dict[str, Tensor]:
        h = self.hidden_at_tasks(texts)
        out = {}
        for j, spec in enumerate(self.specs):
            y = self.heads[spec.name](h[:, j])
            out[spec.name] = torch.sigmoid(y) if spec.squash == "sigmoid" else y
        return out


def predict_scalar(texts: Union[str, Sequence[str]], model: TaskModel) -> dict[str, np.ndarray]:
    """Head outputs (in head units, before any target de-scaling) for one or more inputs."""
    single = isinstance(texts, str)
    batch = [texts] if single else list(texts)
    model.eval()
    with torch.no_grad():
        out = {k: v.double().numpy() for k, v in model(batch).items()}
    if single:
        return {k: v[0] for k, v in out.items()}
    return out


# ---------------------------------------------------------------- estimators


def _resolve_base(base, d_model: int, n_layers: int, seed: int) -> Seq2SeqTransformer:
    if base is None:
        cfg = ModelConfig(d_model=d_model, n_heads=4, n_encoder_layers=n_layers, n_decoder_layers=n_layers,
                          max_length=256, seed=seed)
        return Seq2SeqTransformer(cfg)
    if isinstance(base, (str, Path)):
        from .training import ReactionLM

        return ReactionLM.load(base).model_
    if isinstance(base, Seq2SeqTransformer):
        return copy.deepcopy(base)
    if hasattr(base, "model_"):
        return copy.deepcopy(base.model_)
    raise TypeError(f"cannot use {type(base).__name__} as a base model")


class _TaskHeadBase(BaseEstimator):
    _squash_default: Squash = "none"

    def __init__(
        self,
        base=None,
        squash: Optional[Squash] = None,
        placement: Placement = "append-decoder",
        finetune: Literal["lora", "full", "head"] = "lora",
        lora_rank: int = 8,
        lora_alpha: float = 8.0,
        label_range: Optional[tuple[float, float]] = None,
        lr: float = 1e-3,
        weight_decay: float = 1e-4,
        n_steps: int = 300,
        batch_size: int = 32,
        eval_every: int = 25,
        split: Optional[tuple[float, ...]] = (8, 1, 1),
        d_model: int = 64,
        n_layers: int = 2,
        seed: int = 0,
    ):
        self.base = base
        self.squash = squash
        self.placement = placement
        self.finetune = finetune
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.label_range = label_range
        self.lr = lr
        self.weight_decay = weight_decay
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.eval_every = eval_every
        self.split = split
        self.d_model = d_model
        self.n_layers = n_layers
        self.seed = seed

    # subclasses: _encode_y, _decode_y, _loss, _val_score (higher is better)

    def _build(self, n_out: int) -> None:
        torch.manual_seed(self.seed)
        base = _resolve_base(self.base, self.d_model, self.n_layers, self.seed)
        squash = self.squash or self._squash_default
        specs = [TaskHeadSpec(f"task{j}", USER_TOKENS[j], 1, squash) for j in range(n_out)]
        self.model_ = TaskModel(base, specs, self.placement)
        self.base_checksum_ = base_checksum(self.model_.base)
        if self.finetune == "lora":
            self.adapted_ = apply_lora(self.model_.base, self.lora_rank, self.lora_alpha, seed=self.seed)
        elif self.finetune == "head":
            for p in self.model_.base.parameters():
                p.requires_grad_(False)
        elif self.finetune != "full":
            raise ValueError(f"unknown finetune mode {self.finetune!r}")

    def _raw(self, X: Sequence[str]) -> Tensor:
        out = self.model_(list(X))
        return torch.cat([out[s.name] for s in self.model_.specs], dim=1)

    def _predict_head_units(self, X: Sequence[str], batch_size: int = 64) -> np.ndarray:
        self.model_.eval()
        chunks = []
        with torch.no_grad():
            for i in range(0, len(X), batch_size):
                chunks.append(self._raw(X[i : i + batch_size]).double().numpy())
        return np.concatenate(chunks, axis=0)

    def fit(self, X, y):
        X = [str(x) for x in X]
        Y = np.asarray(y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if len(X) != len(Y) or not X:
            raise ValueError("X and y must be non-empty and of equal length")
        self._check_labels(Y)
        idx = list(range(len(X)))
        if self.split and len(X) >= 10:
            train_idx, val_idx, test_idx = (split_dataset(idx, self.split, self.seed) + [[], []])[:3]
        else:
            train_idx, val_idx, test_idx = idx, idx, []
        self._fit_target(Y[train_idx])
        T = self._encode_y(Y)
        self._build(Y.shape[1])
        params = [p for p in self.model_.parameters() if p.requires_grad]
        opt = torch.optim.AdamW(params, lr=self.lr, weight_decay=self.weight_decay)
        rng = np.random.default_rng(self.seed)
        self.history_ = []
        best_score, best_state = -np.inf, None
        order: list[int] = []
        target = torch.as_tensor(T, dtype=self.model_.base.lexical.weight.dtype)
        for step in range(1, self.n_steps + 1):
            if len(order) < min(self.batch_size, len(train_idx)):
                order.extend(rng.permutation(train_idx).tolist())
            batch, order = order[: self.batch_size], order[self.batch_size :]
            self.model_.train()
            opt.zero_grad()
            loss = self._loss(self._raw([X[i] for i in batch]), target[batch])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            loss.backward()
            opt.step()
            if step % self.eval_every == 0 or step == self.n_steps:
                train_score = self._metrics(X, Y, train_idx)
                val_score = self._metrics(X, Y, val_idx)
                self.history_.append({"step": step, "loss": loss.item(), "train": train_score, "val": val_score})
                if self._val_score(val_score) > best_score:
                    best_score = self._val_score(val_score)
                    best_state = {k: v.detach().clone() for k, v in self.model_.state_dict().items()}
                    self.best_step_ = step
        if best_state is not None:
            self.model_.load_state_dict(best_state)
        self.test_metrics_ = self._metrics(X, Y, test_idx) if test_idx else None
        self.split_indices_ = (train_idx, val_idx, test_idx)
        return self

    def _metrics(self, X, Y, idx) -> float:
        if not idx:
            return float("nan")
        pred = self._decode_y(self._predict_head_units([X[i] for i in idx]))
        return self._metric(pred, Y[idx])

    def trainable_parameter_names(self) -> list[str]:
        check_is_fitted(self, "model_")
        return [n for n, p in self.model_.named_parameters() if p.requires_grad]

    def save(self, path: Union[str, Path]) -> str:
        check_is_fitted(self, "model_")
        params = {k: v for k, v in self.get_params().items() if k != "base"}
        params["label_range"] = list(params["label_range"]) if params["label_range"] else None
        params["split"] = list(params["split"]) if params["split"] else None
        extra = {
            "estimator": type(self).__name__,
            "params": params,
            "task_heads": [s.__dict__ for s in self.model_.specs],
            "target": self._target_state(),
        }
        return checkpoint.save_checkpoint(path, self.model_.base.config.to_dict(),
                                          self.model_.state_dict(), extra)

    @classmethod
    def load(cls, path: Union[str, Path]):
        config, tensors, extra = checkpoint.load_checkpoint(path)
        if extra.get("estimator") != cls.__name__:
            raise checkpoint.CheckpointError(f"{path} holds a {extra.get('estimator')}, not a {cls.__name__}")
        params = dict(extra["params"])
        for key in ("label_range", "split"):
            if params.get(key) is not None:
                params[key] = tuple(params[key])
        est = cls(**params)
        base = Seq2SeqTransformer(ModelConfig(**config))
        specs = [TaskHeadSpec(**s) for s in extra["task_heads"]]
        est.model_ = TaskModel(base, specs, est.placement)
        if est.finetune == "lora":
            est.adapted_ = apply_lora(base, est.lora_rank, est.lora_alpha, seed=est.seed)
        est.model_.load_state_dict(tensors)
        est.base_checksum_ = base_checksum(base)
        target = extra.get("target", {})
        if target:
            est.target_offset_ = np.asarray(target["offset"])
            est.target_scale_ = np.asarray(target["scale"])
        if isinstance(est, ClassifierMixin):
            est.classes_ = np.array([0, 1])
        return est


class TaskHeadRegressor(RegressorMixin, _TaskHeadBase):
    """Task-token regression. Unbounded heads train on z-scored targets;
    sigmoid heads map targets into [0, 1] through ``label_range``."""

    def _check_labels(self, Y: np.ndarray) -> None:
        if not np.all(np.isfinite(Y)):
            raise ValueError("labels must be finite")
        if self._effective_squash() == "sigmoid":
            lo, hi = self.label_range or (0.0, 1.0)
            if Y.min() < lo or Y.max() > hi:
                raise ValueError(f"label outside declared range [{lo}, {hi}]")

    def _effective_squash(self) -> Squash:
        return self.squash or self._squash_default

    def _fit_target(self, Y: np.ndarray) -> None:
        if self._effective_squash() == "sigmoid":
            lo, hi = self.label_range or (0.0, 1.0)
            self.target_offset_, self.target_scale_ = np.full(Y.shape[1], lo), np.full(Y.shape[1], hi - lo)
        else:
            std = Y.std(axis=0)
            self.target_offset_, self.target_scale_ = Y.mean(axis=0), np.where(std > 0, std, 1.0)

    def _target_state(self) -> dict:
        return {"offset": self.target_offset_.tolist(), "scale": self.target_scale_.tolist()}

    def _encode_y(self, Y):
        return (Y - self.target_offset_) / self.target_scale_

    def _decode_y(self, T):
        return T * self.target_scale_ + self.target_offset_

    def _loss(self, out, target):
        return F.mse_loss(out, target)

    def _metric(self, pred, Y) -> float:
        return rmse(pred, Y)

    def _val_score(self, val: float) -> float:
        return -val

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        pred = self._decode_y(self._predict_head_units([str(x) for x in X]))
        return pred[:, 0] if pred.shape[1] == 1 else pred


class TaskHeadClassifier(ClassifierMixin, _TaskHeadBase):
    """Binary task-token classifier with a sigmoid head; selection by validation AUC."""

    _squash_default: Squash = "sigmoid"

    def _check_labels(self, Y: np.ndarray) -> None:
        if not np.isin(Y, (0.0, 1.0)).all():
            raise ValueError("classification labels must be 0 or 1")

    def _fit_target(self, Y):
        self.classes_ = np.array([0, 1])

    def _target_state(self) -> dict:
        return {}

    def _encode_y(self, Y):
        return Y

    def _decode_y(self, T):
        return T

    def _loss(self, out, target):
        return F.binary_cross_entropy(out.clamp(1e-7, 1 - 1e-7), target)

    def _metric(self, pred, Y) -> float:
        try:
            return auc(pred[:, 0], Y[:, 0])
        except ValueError:
            return float("nan")

    def _val_score(self, val: float) -> float:
        return -np.inf if np.isnan(val) else val

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        p = self._predict_head_units([str(x) for x in X])[:, 0]
        return np.stack([1 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)


# ---------------------------------------------------------------- planner scorers

Scorer = Union[TaskHeadRegressor, Callable[[Sequence[str]], Sequence[float]]]


def _scores(model: Scorer, texts: Sequence[str]) -> np.ndarray:
    if hasattr(model, "predict"):
        return np.asarray(model.predict(list(texts)), dtype=np.float64).reshape(-1)
    return np.asarray(model(list(texts)), dtype=np.float64).reshape(-1)


def value_of(smiles: str, model: Scorer) -> float:
    """Value estimate in [0, 1] for one molecule."""
    if not is_valid_smiles(smiles) or ">" in smiles:
        raise ValueError(f"invalid molecule SMILES {smiles!r}")
    return float(np.clip(_scores(model, [smiles])[0], 0.0, 1.0))


def normalize(p: Iterable[float]) -> np.ndarray:
    """Scale a non-negative vector to sum 1; an all-zero vector becomes uniform."""
    arr = np.clip(np.asarray(list(p), dtype=np.float64), 0.0, None)
    if arr.size == 0:
        raise ValueError("cannot normalise an empty vector")
    total = arr.sum()
    if not np.isfinite(total) or total <= 0:
        return np.full(arr.size, 1.0 / arr.size)
    return arr / total


def policy_of(reactions: Sequence[str], model: Scorer) -> np.ndarray:
    """Normalised policy over candidate retro reactions."""
    if not reactions:
        raise ValueError("policy needs at least one candidate reaction")
    return normalize(_scores(model, reactions))
