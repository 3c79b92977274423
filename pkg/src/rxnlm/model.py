"""Encoder-decoder transformer over reaction token sequences.

Attention follows K = X M1, Q = X M2, A = softmax(Q K^T / s), X' = A V with
V = X M3. The scale s is either the square root of the head width or of the
number of (unpadded) key positions. Layers are pre-norm. Embeddings are the
sum of a lexical table and a learned positional table.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional, Sequence

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .vocab import PAD_ID

ScaleMode = Literal["sqrt_head_dim", "sqrt_seq_len"]


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    n_encoder_layers: int = 3
    n_decoder_layers: int = 3
    d_ff: Optional[int] = None
    max_length: int = 256
    vocab_size: int = 202
    scale_mode: ScaleMode = "sqrt_head_dim"
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("d_model", "n_heads", "n_encoder_layers", "n_decoder_layers", "max_length", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.scale_mode not in ("sqrt_head_dim", "sqrt_seq_len"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def large_preset(cls, **overrides) -> "ModelConfig":
        base = dict(d_model=1024, n_heads=16, n_encoder_layers=12, n_decoder_layers=12, max_length=1024)
        base.update(overrides)
        return cls(**base)


@dataclass
class AttentionRecord:
    """Attention matrices per layer, each shaped (batch, heads, queries, keys)."""

    encoder: list[Tensor] = field(default_factory=list)
    decoder: list[Tensor] = field(default_factory=list)
    cross: list[Tensor] = field(default_factory=list)

    def kind(self, name: str) -> list[Tensor]:
        return {"encoder": self.encoder, "decoder": self.decoder, "cross": self.cross}[name]


def attention(
    x: Tensor,
    m_key: Tensor,
    m_query: Tensor,
    m_value: Tensor,
    mask: Optional[Tensor] = None,
    scale_mode: ScaleMode = "sqrt_head_dim",
    memory: Optional[Tensor] = None,
) -> tuple[Tensor, Tensor]:
    """Single-head attention in right-multiplication form.

    ``x`` is (n, d); the projection matrices are (d, d_head). ``memory``, when
    given, supplies keys and values (cross-attention). ``mask`` is additive,
    with ``-inf`` on forbidden positions.
    """
    src = x if memory is None else memory
    if x.shape[-1] != m_query.shape[0] or src.shape[-1] != m_key.shape[0]:
        raise ValueError("projection matrices do not match the hidden width")
    k = src @ m_key
    q = x @ m_query
    v = src @ m_value
    if scale_mode == "sqrt_head_dim":
        scale = math.sqrt(k.shape[-1])
    else:
        scale = math.sqrt(k.shape[-2])
    scores = q @ k.transpose(-1, -2) / scale
    if mask is not None:
        scores = scores + mask
    a = torch.softmax(scores, dim=-1)
    return a @ v, a


def causal_mask(n: int, dtype=torch.float32) -> Tensor:
    return torch.triu(torch.full((n, n), float("-inf"), dtype=dtype), diagonal=1)


class MultiHeadAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.scale_mode = config.scale_mode
        self.key = nn.Linear(d, d, bias=False)    # M1
        self.query = nn.Linear(d, d, bias=False)  # M2
        self.value = nn.Linear(d, d, bias=False)  # M3
        self.out = nn.Linear(d, d)

    def _split(self, t: Tensor) -> Tensor:
        b, n, d = t.shape
        return t.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(
        self,
        x: Tensor,
        memory: Optional[Tensor] = None,
        key_padding: Optional[Tensor] = None,
        causal: bool = False,
    ) -> tuple[Tensor, Tensor]:
        src = x if memory is None else memory
        q = self._split(self.query(x))
        k = self._split(self.key(src))
        v = self._split(self.value(src))
        n_q, n_k = q.shape[2], k.shape[2]
        scores = q @ k.transpose(-1, -2)
        if self.scale_mode == "sqrt_head_dim":
            scores = scores / math.sqrt(q.shape[-1])
        else:
            if key_padding is None:
                n_valid = torch.full((x.shape[0],), float(n_k), dtype=scores.dtype)
            else:
                n_valid = (~key_padding).sum(-1).to(scores.dtype)
            scores = scores / n_valid.sqrt().view(-1, 1, 1, 1)
        if key_padding is not None:
            scores = scores.masked_fill(key_padding[:, None, None, :], float("-inf"))
        if causal:
            scores = scores + causal_mask(n_q, scores.dtype)
        a = torch.softmax(scores, dim=-1)
        h = (a @ v).transpose(1, 2).reshape(x.shape[0], n_q, -1)
        return self.out(h), a


class FeedForward(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.inner = nn.Linear(config.d_model, config.d_ff)
        self.outer = nn.Linear(config.d_ff, config.d_model)

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(F.gelu(self.inner(x)))


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm_attn = nn.LayerNorm(config.d_model)
        self.attn = MultiHeadAttention(config)
        self.norm_ff = nn.LayerNorm(config.d_model)
        self.ff = FeedForward(config)
        self.drop = nn.Dropout(config.dropout)

    def forward(self, x: Tensor, padding: Optional[Tensor]) -> tuple[Tensor, Tensor]:
        h, a = self.attn(self.norm_attn(x), key_padding=padding)
        x = x + self.drop(h)
        x = x + self.drop(self.ff(self.norm_ff(x)))
        return x, a


class DecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm_self = nn.LayerNorm(config.d_model)
        self.self_attn = MultiHeadAttention(config)
        self.norm_cross = nn.LayerNorm(config.d_model)
        self.cross_attn = MultiHeadAttention(config)
        self.norm_ff = nn.LayerNorm(config.d_model)
        self.ff = FeedForward(config)
        self.drop = nn.Dropout(config.dropout)

    def forward(
        self, x: Tensor, memory: Tensor, self_padding: Optional[Tensor], memory_padding: Optional[Tensor]
    ) -> tuple[Tensor, Tensor, Tensor]:
        h, a_self = self.self_attn(self.norm_self(x), key_padding=self_padding, causal=True)
        x = x + self.drop(h)
        h, a_cross = self.cross_attn(self.norm_cross(x), memory=memory, key_padding=memory_padding)
        x = x + self.drop(h)
        x = x + self.drop(self.ff(self.norm_ff(x)))
        return x, a_self, a_cross


class Seq2SeqTransformer(nn.Module):
    """Encoder-decoder with learned positions and an untied output projection."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.lexical = nn.Embedding(config.vocab_size, d)
        self.positional = nn.Parameter(torch.zeros(config.max_length, d))
        self.encoder_layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_encoder_layers))
        self.encoder_norm = nn.LayerNorm(d)
        self.decoder_layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.n_decoder_layers))
        self.decoder_norm = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, config.vocab_size)
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif "norm" in name:
                    p.fill_(1.0)
                elif p.dim() >= 2:
                    p.normal_(0.0, 0.02, generator=gen)

    # ---- pieces exposed for inspection and tests

    def embed(self, ids: Tensor) -> Tensor:
        n = ids.shape[-1]
        if n > self.config.max_length:
            raise ValueError(f"sequence length {n} exceeds max_length {self.config.max_length}")
        return self.lexical(ids) + self.positional[:n]

    def encode(self, src: Tensor, record: Optional[AttentionRecord] = None) -> tuple[Tensor, Tensor]:
        """Memory states and the source padding mask for a (batch, n) id tensor."""
        padding = src == PAD_ID
        x = self.embed(src)
        for layer in self.encoder_layers:
            x, a = layer(x, padding)
            if record is not None:
                record.encoder.append(a)
        return self.encoder_norm(x), padding

    def decode_hidden(
        self,
        tgt: Tensor,
        memory: Tensor,
        memory_padding: Optional[Tensor],
        record: Optional[AttentionRecord] = None,
    ) -> Tensor:
        padding = tgt == PAD_ID
        # a decoder prefix starting with <cls> never has pads before real tokens
        self_padding = padding if bool(padding.any()) else None
        x = self.embed(tgt)
        for layer in self.decoder_layers:
            x, a_self, a_cross = layer(x, memory, self_padding, memory_padding)
            if record is not None:
                record.decoder.append(a_self)
                record.cross.append(a_cross)
        return self.decoder_norm(x)

    def decode(self, tgt: Tensor, memory: Tensor, memory_padding: Optional[Tensor],
               record: Optional[AttentionRecord] = None) -> Tensor:
        return self.lm_head(self.decode_hidden(tgt, memory, memory_padding, record))

    def forward(self, src: Tensor, tgt_in: Tensor) -> Tensor:
        memory, padding = self.encode(src)
        return self.decode(tgt_in, memory, padding)


def _as_batch(indices) -> Tensor:
    t = torch.as_tensor(indices, dtype=torch.long)
    return t.unsqueeze(0) if t.dim() == 1 else t


def embed(indices, model: Seq2SeqTransformer) -> Tensor:
    return model.embed(torch.as_tensor(indices, dtype=torch.long))


def encode_forward(indices, model: Seq2SeqTransformer) -> tuple[Tensor, AttentionRecord]:
    record = AttentionRecord()
    memory, _ = model.encode(_as_batch(indices), record)
    return memory, record


def decode_forward(target, memory: Tensor, model: Seq2SeqTransformer,
                   source=None) -> tuple[Tensor, AttentionRecord]:
    record = AttentionRecord()
    padding = None if source is None else _as_batch(source) == PAD_ID
    logits = model.decode(_as_batch(target), memory, padding, record)
    return logits, record


def sequence_loss(logits: Tensor, target: Tensor, pad_id: int = PAD_ID) -> Tensor:
    """Mean token cross-entropy over positions where ``target`` is not padding."""
    flat_t = target.reshape(-1)
    keep = flat_t != pad_id
    if not bool(keep.any()):
        raise ValueError("target contains only padding")
    flat_l = logits.reshape(-1, logits.shape[-1])
    return F.cross_entropy(flat_l[keep], flat_t[keep])


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> Tensor:
    n = max(len(s) for s in seqs)
    out = torch.full((len(seqs), n), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def parameter_checksum(module: nn.Module, names: Optional[Sequence[str]] = None) -> str:
    """SHA-256 over parameter names and float32 little-endian bytes."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        if names is not None and name not in names:
            continue
        h.update(name.encode())
        h.update(p.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()
