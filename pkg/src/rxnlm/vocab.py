"""Atom-level reaction-SMILES vocabulary and tokenizer.

The default vocabulary has 202 entries with fixed indices for the special
tokens. Tokenization uses longest-match over element symbols, and digit
handling depends on context: inside square brackets or right after ``%``
a run of digits becomes one number token (split if it is above 83), while
anywhere else each digit is its own ring-closure token.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

from sklearn.base import BaseEstimator, TransformerMixin

PAD, CLS, SEP, END, MSK = "<pad>", "<cls>", ">", "<end>", "<msk>"
UNK = "?"
PAD_ID, CLS_ID, SEP_ID, END_ID, MSK_ID, UNK_ID = 0, 1, 2, 3, 4, 102
USER_TOKENS = ("<n00>", "<n01>", "<n02>", "<n03>", "<n04>")
MAX_NUMBER = 83
DEFAULT_MAX_LENGTH = 1024

SPECIAL_IDS = {PAD: PAD_ID, CLS: CLS_ID, SEP: SEP_ID, END: END_ID, MSK: MSK_ID, UNK: UNK_ID}
# dropped by decode()
FRAME_IDS = frozenset({PAD_ID, CLS_ID, END_ID, MSK_ID})


class VocabularyError(ValueError):
    """Malformed vocabulary source."""


class SequenceLengthError(ValueError):
    """Encoded sequence is longer than the configured maximum."""


class DecodeError(ValueError):
    """Index outside the vocabulary."""


@dataclass(frozen=True)
class Vocabulary:
    """Immutable bijection between token strings and integer indices."""

    entries: tuple[tuple[str, int], ...]
    _index: Mapping[str, int] = field(init=False, repr=False, compare=False)
    _tokens: tuple[str, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index: dict[str, int] = {}
        seen: set[int] = set()
        for tok, idx in self.entries:
            if tok in index:
                raise VocabularyError(f"duplicate token {tok!r}")
            if idx in seen:
                raise VocabularyError(f"duplicate index {idx}")
            index[tok] = idx
            seen.add(idx)
        if seen != set(range(len(self.entries))):
            raise VocabularyError("indices must be contiguous from 0")
        for tok, idx in SPECIAL_IDS.items():
            if index.get(tok) != idx:
                raise VocabularyError(f"special token {tok!r} must have index {idx}")
        tokens = [""] * len(self.entries)
        for tok, idx in self.entries:
            tokens[idx] = tok
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_tokens", tuple(tokens))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: object) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index[token]

    def token(self, index: int) -> str:
        if not 0 <= index < len(self._tokens):
            raise DecodeError(f"index {index} out of range 0..{len(self._tokens) - 1}")
        return self._tokens[index]

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def to_tsv(self) -> str:
        return "".join(f"{tok}\t{idx}\n" for tok, idx in sorted(self.entries, key=lambda e: e[1]))


def _parse_source(text: str) -> list[tuple[str, int]]:
    stripped = text.strip()
    if stripped.startswith("{"):
        import json

        try:
            data = json.loads(stripped, object_pairs_hook=list)
        except json.JSONDecodeError as exc:
            raise VocabularyError(f"bad JSON vocabulary: {exc}") from exc
        return [(str(k), int(v)) for k, v in data]
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        tok, sep, idx = line.rpartition("\t")
        if not sep or not tok:
            raise VocabularyError(f"line {lineno}: expected 'token<TAB>index'")
        try:
            pairs.append((tok, int(idx)))
        except ValueError as exc:
            raise VocabularyError(f"line {lineno}: bad index {idx!r}") from exc
    return pairs


def load_vocabulary(source: Union[str, Path, None] = None) -> Vocabulary:
    """Load a vocabulary from a TSV/JSON file, a literal string, or the bundled default.

    ``source`` may be a path, the text itself, or ``None`` for the default
    202-token table.
    """
    if source is None:
        text = resources.files("rxnlm.data").joinpath("vocab.tsv").read_text("utf-8")
    elif isinstance(source, Path) or ("\t" not in source and "{" not in source):
        text = Path(source).read_text("utf-8")
    else:
        text = source
    return Vocabulary(tuple(_parse_source(text)))


_DEFAULT: Vocabulary | None = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_vocabulary()
    return _DEFAULT


_ANGLE = re.compile(r"<[a-z0-9]+>")


def _split_number(run: str, vocab: Vocabulary) -> list[str]:
    out = []
    i = 0
    while i < len(run):
        # longest prefix that is itself a number token (value <= 83, no leading zero)
        for j in range(len(run), i, -1):
            piece = run[i:j]
            if piece in vocab and int(piece) <= MAX_NUMBER:
                out.append(piece)
                i = j
                break
        else:  # unreachable with the default table: every single digit is a token
            out.append(UNK)
            i += 1
    return out


def tokenize(text: str, vocab: Vocabulary | None = None) -> list[str]:
    """Split a SMILES or reaction-SMILES string into vocabulary tokens.

    Characters that match nothing become ``?``. Angle-bracket tokens
    (``<msk>``, ``<n00>`` ...) are recognised when they appear literally.
    """
    vocab = vocab or default_vocabulary()
    tokens: list[str] = []
    i, n = 0, len(text)
    in_bracket = False
    while i < n:
        ch = text[i]
        if ch.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            if in_bracket or (i > 0 and text[i - 1] == "%"):
                tokens.extend(_split_number(text[i:j], vocab))
                i = j
            else:
                tokens.append(ch)
                i += 1
            continue
        if ch == "<":
            m = _ANGLE.match(text, i)
            if m and m.group() in vocab:
                tokens.append(m.group())
                i = m.end()
                continue
        two = text[i : i + 2]
        if len(two) == 2 and two in vocab:
            tokens.append(two)
            i += 2
            continue
        if ch in vocab:
            tokens.append(ch)
            if ch == "[":
                in_bracket = True
            elif ch == "]":
                in_bracket = False
        else:
            tokens.append(UNK)
        i += 1
    return tokens


def unknown_spans(text: str, vocab: Vocabulary | None = None) -> int:
    """Number of ``?`` tokens produced by material the vocabulary cannot represent."""
    return sum(1 for t in tokenize(text, vocab) if t == UNK) - text.count(UNK)


def encode(
    tokens: Sequence[str],
    vocab: Vocabulary | None = None,
    max_length: int = DEFAULT_MAX_LENGTH,
) -> list[int]:
    vocab = vocab or default_vocabulary()
    ids = [CLS_ID]
    ids.extend(vocab.index(t) if t in vocab else UNK_ID for t in tokens)
    ids.append(END_ID)
    if len(ids) > max_length:
        raise SequenceLengthError(f"sequence of {len(ids)} tokens exceeds maximum {max_length}")
    return ids


def decode(indices: Iterable[int], vocab: Vocabulary | None = None) -> str:
    vocab = vocab or default_vocabulary()
    parts = []
    for idx in indices:
        idx = int(idx)
        tok = vocab.token(idx)
        if idx not in FRAME_IDS:
            parts.append(tok)
    return "".join(parts)


def encode_text(text: str, vocab: Vocabulary | None = None, max_length: int = DEFAULT_MAX_LENGTH) -> list[int]:
    return encode(tokenize(text, vocab), vocab, max_length)


class SmilesTokenizer(BaseEstimator, TransformerMixin):
    """Stateless transformer from SMILES strings to framed index sequences."""

    def __init__(self, vocab_path: str | None = None, max_length: int = DEFAULT_MAX_LENGTH):
        self.vocab_path = vocab_path
        self.max_length = max_length

    def fit(self, X=None, y=None):
        self.vocab_ = load_vocabulary(self.vocab_path) if self.vocab_path else default_vocabulary()
        return self

    def transform(self, X: Iterable[str]) -> list[list[int]]:
        vocab = getattr(self, "vocab_", None) or self.fit().vocab_
        return [encode(tokenize(s, vocab), vocab, self.max_length) for s in X]

    def inverse_transform(self, X: Iterable[Sequence[int]]) -> list[str]:
        vocab = getattr(self, "vocab_", None) or self.fit().vocab_
        return [decode(ids, vocab) for ids in X]
