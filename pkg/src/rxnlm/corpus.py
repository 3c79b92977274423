"""Reaction records, masked training examples and deterministic splits."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Literal, Sequence, TypeVar, Union

import numpy as np

from .smiles import is_valid_smiles
from .vocab import (DEFAULT_MAX_LENGTH, MSK_ID, SEP, Vocabulary, default_vocabulary, encode,
                    tokenize)

logger = logging.getLogger(__name__)

Role = Literal["reactant", "reagent", "product"]
ROLES: tuple[Role, ...] = ("reactant", "reagent", "product")
T = TypeVar("T")


class ReactionFormatError(ValueError):
    """Line is not ``reactants>reagents>products``."""


class ReactionValidityError(ValueError):
    """A member molecule is not valid SMILES."""


@dataclass(frozen=True)
class ReactionRecord:
    reactants: tuple[str, ...]
    reagents: tuple[str, ...]
    products: tuple[str, ...]

    def component(self, role: Role) -> tuple[str, ...]:
        return {"reactant": self.reactants, "reagent": self.reagents, "product": self.products}[role]

    def to_string(self) -> str:
        return SEP.join(".".join(part) for part in (self.reactants, self.reagents, self.products))

    def __str__(self) -> str:
        return self.to_string()

    def available_roles(self) -> tuple[Role, ...]:
        return tuple(r for r in ROLES if self.component(r))


@dataclass(frozen=True)
class MaskedExample:
    input: tuple[int, ...]
    target: tuple[int, ...]
    role: Role


def parse_reaction(line: str) -> ReactionRecord:
    fields = line.strip().split(">")
    if len(fields) != 3:
        raise ReactionFormatError(f"expected two '>' separators, got {len(fields) - 1}: {line!r}")
    parts = [tuple(m for m in f.split(".")) if f else () for f in fields]
    reactants, reagents, products = parts
    if not reactants or not products:
        raise ReactionFormatError(f"reactants and products must be non-empty: {line!r}")
    for mol in reactants + reagents + products:
        if not is_valid_smiles(mol):
            raise ReactionValidityError(f"invalid SMILES {mol!r} in {line!r}")
    return ReactionRecord(reactants, reagents, products)


def make_masked_example(
    record: ReactionRecord,
    role: Role,
    vocab: Vocabulary | None = None,
    max_length: int = DEFAULT_MAX_LENGTH,
) -> MaskedExample | None:
    """Replace one whole component by a single ``<msk>``; ``None`` when that component is empty."""
    vocab = vocab or default_vocabulary()
    if not record.component(role):
        return None
    target = encode(tokenize(record.to_string(), vocab), vocab, max_length)
    parts = [".".join(record.component(r)) for r in ROLES]
    pieces: list[int] = [1]
    for k, r in enumerate(ROLES):
        if k:
            pieces.append(vocab.index(SEP))
        if r == role:
            pieces.append(MSK_ID)
        else:
            pieces.extend(vocab.index(t) for t in tokenize(parts[k], vocab))
    pieces.append(3)
    return MaskedExample(tuple(pieces), tuple(target), role)


def masked_examples(
    records: Sequence[ReactionRecord],
    mode: Literal["all", "sample"] = "all",
    seed: int = 0,
    vocab: Vocabulary | None = None,
    max_length: int = DEFAULT_MAX_LENGTH,
) -> list[MaskedExample]:
    """Masked examples for ``records``.

    ``mode="all"`` emits one example per non-empty role (up to three per
    reaction); ``mode="sample"`` draws one role per reaction uniformly from
    the non-empty ones.
    """
    rng = np.random.default_rng(seed)
    out = []
    for rec in records:
        roles = rec.available_roles()
        if mode == "sample":
            roles = (roles[int(rng.integers(len(roles)))],)
        for role in roles:
            ex = make_masked_example(rec, role, vocab, max_length)
            if ex is not None:
                out.append(ex)
    return out


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of ``n`` items to ``ratios``."""
    if any(r <= 0 for r in ratios):
        raise ValueError("split ratios must be positive")
    total = float(sum(ratios))
    exact = [n * r / total for r in ratios]
    sizes = [int(np.floor(x)) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(items: Sequence[T], ratios: Sequence[float], seed: int = 0) -> list[list[T]]:
    sizes = split_sizes(len(items), ratios)
    perm = np.random.default_rng(seed).permutation(len(items))
    out, start = [], 0
    for size in sizes:
        out.append([items[i] for i in perm[start : start + size]])
        start += size
    return out


@dataclass
class CorpusLoad:
    records: list[ReactionRecord]
    skipped: int

    def __iter__(self) -> Iterator[ReactionRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


def load_corpus(path: Union[str, Path]) -> CorpusLoad:
    records, skipped = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(parse_reaction(line))
            except (ReactionFormatError, ReactionValidityError) as exc:
                skipped += 1
                logger.debug("line %d skipped: %s", lineno, exc)
    if skipped:
        logger.info("%s: %d records loaded, %d lines skipped", path, len(records), skipped)
    return CorpusLoad(records, skipped)


def bundled_corpus_path() -> Path:
    from importlib import resources

    return Path(str(resources.files("rxnlm.data").joinpath("reactions.txt")))
