"""SMILES parsing into a molecular graph and canonical SMILES output.

Covers organic-subset and bracket atoms, branches, ring closures (including
``%nn``), the bond symbols ``- = # : / \\``, charges, isotopes, explicit
hydrogens, atom-map classes and dot-separated fragments. Stereo marks are
kept as opaque strings and play no part in canonical ranking.

The canonical form comes from iterative partition refinement on atom
invariants. Atoms that are still tied after refinement are split by
individualization with search, which keeps the lexicographically smallest
output string. Automorphisms found along the way prune the search.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import lru_cache
from typing import Iterable, Optional, Sequence

PERIODIC_TABLE = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
ELEMENTS = frozenset(PERIODIC_TABLE)
AROMATIC = frozenset({"c", "o", "n", "s", "se", "p", "te"})
ORGANIC = frozenset({"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"})
ORGANIC_AROMATIC = frozenset({"c", "n", "o", "s", "p"})

if sys.getrecursionlimit() < 10000:
    sys.setrecursionlimit(10000)


class SmilesSyntaxError(ValueError):
    """The string is outside the supported SMILES grammar."""


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4


_BOND_SYMBOL = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE,
                ":": BondOrder.AROMATIC, "/": BondOrder.SINGLE, "\\": BondOrder.SINGLE}
_FLIP = {"/": "\\", "\\": "/"}


@dataclass(frozen=True)
class Atom:
    symbol: str
    aromatic: bool = False
    charge: int = 0
    isotope: Optional[int] = None
    hcount: Optional[int] = None  # None: organic-subset atom written without brackets
    chirality: Optional[str] = None
    atom_map: Optional[int] = None

    @property
    def element(self) -> str:
        return self.symbol.capitalize() if self.aromatic else self.symbol

    def rank_key(self) -> tuple:
        return (
            self.element, self.aromatic, self.charge,
            -1 if self.isotope is None else self.isotope,
            -1 if self.hcount is None else self.hcount,
            -1 if self.atom_map is None else self.atom_map,
        )


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: BondOrder = BondOrder.SINGLE
    stereo: Optional[str] = None  # "/" or "\\" as written going from a to b


@dataclass(frozen=True)
class MolecularGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    _adj: tuple[tuple[tuple[int, int], ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = len(self.atoms)
        adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        seen = set()
        for k, bond in enumerate(self.bonds):
            if not (0 <= bond.a < n and 0 <= bond.b < n):
                raise SmilesSyntaxError(f"bond {bond} references a missing atom")
            if bond.a == bond.b:
                raise SmilesSyntaxError("atom bonded to itself")
            pair = frozenset((bond.a, bond.b))
            if pair in seen:
                raise SmilesSyntaxError(f"duplicate bond between atoms {bond.a} and {bond.b}")
            seen.add(pair)
            adj[bond.a].append((bond.b, k))
            adj[bond.b].append((bond.a, k))
        for atom in self.atoms:
            if atom.aromatic and atom.symbol not in AROMATIC:
                raise SmilesSyntaxError(f"{atom.symbol!r} cannot be aromatic")
        object.__setattr__(self, "_adj", tuple(tuple(x) for x in adj))

    def neighbors(self, i: int) -> tuple[tuple[int, int], ...]:
        """(neighbor atom, bond index) pairs of atom ``i``."""
        return self._adj[i]

    def degree(self, i: int) -> int:
        return len(self._adj[i])

    @property
    def has_stereo(self) -> bool:
        return any(a.chirality for a in self.atoms) or any(b.stereo for b in self.bonds)

    def components(self) -> list[list[int]]:
        seen = [False] * len(self.atoms)
        comps = []
        for start in range(len(self.atoms)):
            if seen[start]:
                continue
            stack, comp = [start], []
            seen[start] = True
            while stack:
                u = stack.pop()
                comp.append(u)
                for v, _ in self._adj[u]:
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
            comps.append(sorted(comp))
        return comps

    def permute(self, order: Sequence[int]) -> "MolecularGraph":
        """Graph with atoms reordered so new atom ``i`` is old atom ``order[i]``."""
        where = {old: new for new, old in enumerate(order)}
        atoms = tuple(self.atoms[old] for old in order)
        bonds = tuple(replace(b, a=where[b.a], b=where[b.b]) for b in self.bonds)
        return MolecularGraph(atoms, bonds)


# ---------------------------------------------------------------- parsing


def _parse_bracket(s: str, i: int) -> tuple[Atom, int]:
    end = s.find("]", i)
    if end < 0:
        raise SmilesSyntaxError(f"unclosed bracket atom at {i}")
    body = s[i + 1 : end]
    j = 0
    iso = ""
    while j < len(body) and body[j].isdigit():
        iso += body[j]
        j += 1
    isotope = int(iso) if iso else None
    rest = body[j:]
    if rest[:2] in ("se", "te"):
        symbol, aromatic = rest[:2], True
    elif rest[:1] in ("c", "n", "o", "s", "p"):
        symbol, aromatic = rest[:1], True
    elif rest[:2] in ELEMENTS and len(rest) >= 2 and rest[1].islower():
        symbol, aromatic = rest[:2], False
    elif rest[:1] in ELEMENTS:
        symbol, aromatic = rest[:1], False
    else:
        raise SmilesSyntaxError(f"unknown element in bracket atom [{body}]")
    j += len(symbol)
    chirality = None
    if j < len(body) and body[j] == "@":
        k = j + 1
        if k < len(body) and body[k] == "@":
            k += 1
        else:
            for cls in ("TH", "AL", "SP", "TB", "OH"):
                if body.startswith(cls, k):
                    k += 2
                    while k < len(body) and body[k].isdigit():
                        k += 1
                    break
        chirality = body[j:k]
        j = k
    hcount = 0
    if j < len(body) and body[j] == "H":
        j += 1
        digits = ""
        while j < len(body) and body[j].isdigit():
            digits += body[j]
            j += 1
        hcount = int(digits) if digits else 1
    charge = 0
    if j < len(body) and body[j] in "+-":
        sign = 1 if body[j] == "+" else -1
        k = j + 1
        digits = ""
        while k < len(body) and body[k].isdigit():
            digits += body[k]
            k += 1
        if digits:
            charge = sign * int(digits)
        else:
            while k < len(body) and body[k] == body[j]:
                k += 1
            charge = sign * (k - j)
        j = k
    atom_map = None
    if j < len(body) and body[j] == ":":
        digits = body[j + 1 :]
        if not digits.isdigit():
            raise SmilesSyntaxError(f"malformed atom class in [{body}]")
        atom_map = int(digits)
        j = len(body)
    if j != len(body):
        raise SmilesSyntaxError(f"malformed bracket atom [{body}]")
    atom = Atom(symbol, aromatic, charge, isotope, hcount, chirality, atom_map)
    return atom, end + 1


def parse_smiles(s: str) -> MolecularGraph:
    """Parse ``s`` into a :class:`MolecularGraph` or raise :class:`SmilesSyntaxError`."""
    if not s:
        raise SmilesSyntaxError("empty SMILES")
    atoms: list[Atom] = []
    bonds: list[tuple[int, int, Optional[str]]] = []
    prev: Optional[int] = None
    pending: Optional[str] = None
    branches: list[tuple[int, int]] = []  # (atom before '(', atom count at '(')
    rings: dict[int, tuple[int, Optional[str]]] = {}
    i, n = 0, len(s)

    def add_atom(atom: Atom) -> None:
        nonlocal prev, pending
        idx = len(atoms)
        atoms.append(atom)
        if prev is not None:
            bonds.append((prev, idx, pending))
        elif pending is not None:
            raise SmilesSyntaxError(f"bond symbol without a preceding atom at {i}")
        prev, pending = idx, None

    while i < n:
        ch = s[i]
        if ch == "[":
            atom, i = _parse_bracket(s, i)
            add_atom(atom)
            continue
        if s[i : i + 2] in ("Cl", "Br"):
            add_atom(Atom(s[i : i + 2]))
            i += 2
            continue
        if ch in ORGANIC:
            add_atom(Atom(ch))
        elif ch in ORGANIC_AROMATIC:
            add_atom(Atom(ch, aromatic=True))
        elif ch in _BOND_SYMBOL:
            if prev is None or pending is not None:
                raise SmilesSyntaxError(f"misplaced bond symbol {ch!r} at {i}")
            pending = ch
        elif ch == "(":
            if prev is None or pending is not None:
                raise SmilesSyntaxError(f"misplaced '(' at {i}")
            branches.append((prev, len(atoms)))
        elif ch == ")":
            if not branches:
                raise SmilesSyntaxError(f"unbalanced ')' at {i}")
            if pending is not None:
                raise SmilesSyntaxError(f"dangling bond before ')' at {i}")
            prev, count = branches.pop()
            if count == len(atoms):
                raise SmilesSyntaxError(f"empty branch at {i}")
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                label_txt = s[i + 1 : i + 3]
                if len(label_txt) != 2 or not label_txt.isdigit():
                    raise SmilesSyntaxError(f"malformed %nn ring label at {i}")
                label = int(label_txt)
                i += 2
            else:
                label = int(ch)
            if prev is None:
                raise SmilesSyntaxError(f"ring label without an atom at {i}")
            if label in rings:
                other, sym = rings.pop(label)
                if sym is not None and pending is not None and sym != pending:
                    if not (sym in _FLIP and pending in _FLIP):
                        raise SmilesSyntaxError(f"conflicting ring bond symbols for label {label}")
                # symbol read as going from the opening atom to this one
                if pending is not None:
                    sym = _FLIP.get(pending, pending) if sym is None else sym
                bonds.append((other, prev, sym))
            else:
                rings[label] = (prev, pending)
            pending = None
        elif ch == ".":
            if prev is None or pending is not None or branches:
                raise SmilesSyntaxError(f"misplaced '.' at {i}")
            prev = None
        else:
            raise SmilesSyntaxError(f"unexpected character {ch!r} at {i}")
        i += 1

    if branches:
        raise SmilesSyntaxError("unbalanced '('")
    if rings:
        raise SmilesSyntaxError(f"unclosed ring label(s) {sorted(rings)}")
    if pending is not None:
        raise SmilesSyntaxError("dangling bond at end of string")
    if prev is None:
        raise SmilesSyntaxError("string ends with '.'")

    out = []
    for a, b, sym in bonds:
        if sym is None:
            both_aromatic = atoms[a].aromatic and atoms[b].aromatic
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
            out.append(Bond(a, b, order))
        else:
            out.append(Bond(a, b, _BOND_SYMBOL[sym], sym if sym in _FLIP else None))
    return MolecularGraph(tuple(atoms), tuple(out))


def is_valid_smiles(s: str) -> bool:
    """True if ``s`` parses; reaction strings need exactly two ``>`` and parseable parts."""
    if ">" in s:
        parts = s.split(">")
        if len(parts) != 3:
            return False
        return all(_parses(p) for p in parts if p)
    return _parses(s)


@lru_cache(maxsize=65536)
def _parses(s: str) -> bool:
    try:
        parse_smiles(s)
    except SmilesSyntaxError:
        return False
    return True


# ---------------------------------------------------------------- writing


def _atom_text(atom: Atom) -> str:
    if (atom.hcount is None and atom.charge == 0 and atom.isotope is None
            and atom.chirality is None and atom.atom_map is None):
        return atom.symbol
    parts = ["["]
    if atom.isotope is not None:
        parts.append(str(atom.isotope))
    parts.append(atom.symbol)
    if atom.chirality:
        parts.append(atom.chirality)
    if atom.hcount:
        parts.append("H" if atom.hcount == 1 else f"H{atom.hcount}")
    if atom.charge:
        sign = "+" if atom.charge > 0 else "-"
        parts.append(sign if abs(atom.charge) == 1 else f"{sign}{abs(atom.charge)}")
    if atom.atom_map is not None:
        parts.append(f":{atom.atom_map}")
    parts.append("]")
    return "".join(parts)


def _bond_text(g: MolecularGraph, bond: Bond, frm: int) -> str:
    if bond.stereo:
        return bond.stereo if bond.a == frm else _FLIP[bond.stereo]
    both_aromatic = g.atoms[bond.a].aromatic and g.atoms[bond.b].aromatic
    if bond.order == BondOrder.SINGLE:
        return "-" if both_aromatic else ""
    if bond.order == BondOrder.AROMATIC:
        return "" if both_aromatic else ":"
    return "=" if bond.order == BondOrder.DOUBLE else "#"


def _ring_label(k: int) -> str:
    return str(k) if k < 10 else f"%{k:02d}"


def _emit_component(g: MolecularGraph, start: int, rank: Sequence[int]) -> str:
    """Depth-first SMILES for the component containing ``start``; neighbours by ascending rank."""
    order = {}
    parent = {start: None}
    children: dict[int, list[tuple[int, int]]] = {}
    openings: dict[int, list[tuple[int, int]]] = {}  # atom -> [(partner, bond)]
    closings: dict[int, list[tuple[int, int]]] = {}
    used_bonds = set()

    def visit(u: int) -> None:
        order[u] = len(order)
        children[u] = []
        for v, k in sorted(g.neighbors(u), key=lambda vk: rank[vk[0]]):
            if k in used_bonds:
                continue
            used_bonds.add(k)
            if v in order:
                openings.setdefault(v, []).append((u, k))
                closings.setdefault(u, []).append((v, k))
            else:
                parent[v] = u
                children[u].append((v, k))
                visit(v)

    visit(start)
    out: list[str] = []
    labels: dict[int, int] = {}  # bond index -> ring label
    free: list[int] = []
    next_label = [1]

    def take_label(busy: set[int]) -> int:
        for lab in sorted(free):
            if lab not in busy:
                free.remove(lab)
                return lab
        lab = next_label[0]
        next_label[0] += 1
        return lab

    def write(u: int) -> None:
        out.append(_atom_text(g.atoms[u]))
        closing = sorted(closings.get(u, ()), key=lambda vk: order[vk[0]])
        busy = {labels[k] for _, k in closing}
        for v, k in closing:
            out.append(_bond_text(g, g.bonds[k], u) + _ring_label(labels[k]))
        for v, k in sorted(openings.get(u, ()), key=lambda vk: order[vk[0]]):
            labels[k] = take_label(busy)
            out.append(_ring_label(labels[k]))
        for _, k in closing:
            free.append(labels.pop(k))
        kids = children[u]
        for idx, (v, k) in enumerate(kids):
            last = idx == len(kids) - 1
            if not last:
                out.append("(")
            out.append(_bond_text(g, g.bonds[k], u))
            write(v)
            if not last:
                out.append(")")

    write(start)
    return "".join(out)


def to_smiles(g: MolecularGraph) -> str:
    """Non-canonical SMILES following the graph's own atom order."""
    rank = list(range(len(g.atoms)))
    return ".".join(_emit_component(g, comp[0], rank) for comp in g.components())


# ---------------------------------------------------------------- canonical form


def _dense(keys: Sequence) -> list[int]:
    table = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [table[k] for k in keys]


def _refine(nbrs: Sequence[Sequence[tuple[int, int]]], ranks: list[int]) -> list[int]:
    n_classes = len(set(ranks))
    while True:
        keys = [(ranks[a], tuple(sorted((ranks[v], code) for v, code in nbrs[a]))) for a in range(len(ranks))]
        new = _dense(keys)
        m = len(set(new))
        if m == n_classes:
            return new
        ranks, n_classes = new, m


class _Orbits:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _canonical_component(g: MolecularGraph) -> str:
    n = len(g.atoms)
    if n == 1:
        return _atom_text(g.atoms[0])
    nbrs = [[(v, int(g.bonds[k].order)) for v, k in g.neighbors(a)] for a in range(n)]
    init = _dense([(g.degree(a),) + g.atoms[a].rank_key() for a in range(n)])
    start_ranks = _refine(nbrs, init)
    prune = not g.has_stereo
    edge_list = [(b.a, b.b, int(b.order)) for b in g.bonds]
    atom_keys = [g.atoms[a].rank_key() for a in range(n)]

    best: list[Optional[str]] = [None]
    certs: dict[tuple, list[int]] = {}
    automorphisms: list[list[int]] = []

    def leaf(ranks: list[int]) -> None:
        cert = None
        if prune:
            cert = (tuple(atom_keys[a] for a in sorted(range(n), key=ranks.__getitem__)),
                    tuple(sorted((min(ranks[a], ranks[b]), max(ranks[a], ranks[b]), o) for a, b, o in edge_list)))
            if cert in certs:
                first = certs[cert]
                inv = [0] * n
                for a, r in enumerate(ranks):
                    inv[r] = a
                automorphisms.append([inv[first[a]] for a in range(n)])
                return
            certs[cert] = ranks
        start = ranks.index(0)
        text = _emit_component(g, start, ranks)
        if best[0] is None or text < best[0]:
            best[0] = text

    def search(ranks: list[int], path: tuple[int, ...]) -> None:
        counts: dict[int, int] = {}
        for r in ranks:
            counts[r] = counts.get(r, 0) + 1
        tied = [r for r, c in counts.items() if c > 1]
        if not tied:
            leaf(ranks)
            return
        cell_rank = min(tied)
        cell = [a for a in range(n) if ranks[a] == cell_rank]
        explored: list[int] = []
        for v in cell:
            if prune and explored:
                orbits = _Orbits(n)
                for gamma in automorphisms:
                    if all(gamma[p] == p for p in path):
                        for a in range(n):
                            orbits.union(a, gamma[a])
                if any(orbits.find(u) == orbits.find(v) for u in explored):
                    continue
            explored.append(v)
            split = _dense([(ranks[a], 0 if a == v else 1) for a in range(n)])
            search(_refine(nbrs, split), path + (v,))

    search(start_ranks, ())
    assert best[0] is not None
    return best[0]


def canonical_smiles(g: MolecularGraph) -> str:
    """Deterministic SMILES for ``g``; invariant to atom order for stereo-free graphs."""
    parts = []
    for comp in g.components():
        where = {old: new for new, old in enumerate(comp)}
        sub_atoms = tuple(g.atoms[a] for a in comp)
        sub_bonds = tuple(replace(b, a=where[b.a], b=where[b.b]) for b in g.bonds if b.a in where)
        parts.append(_canonical_component(MolecularGraph(sub_atoms, sub_bonds)))
    return ".".join(sorted(parts))


@lru_cache(maxsize=65536)
def canonicalize(s: str) -> Optional[str]:
    """Canonical SMILES of ``s``, or ``None`` when it does not parse."""
    try:
        return canonical_smiles(parse_smiles(s))
    except SmilesSyntaxError:
        return None


def canonical_set(s: str) -> Optional[tuple[str, ...]]:
    """Sorted canonical molecules of a dot-separated string; ``None`` if any part fails."""
    if not s:
        return ()
    out = []
    for part in s.split("."):
        c = canonicalize(part)
        if c is None:
            return None
        out.extend(c.split("."))
    return tuple(sorted(out))


def graph_summary(g: MolecularGraph) -> tuple:
    """Order-free multiset signature (atoms, bonds) used for preservation checks."""
    atoms = sorted(a.rank_key() for a in g.atoms)
    bonds = sorted(tuple(sorted((g.atoms[b.a].rank_key(), g.atoms[b.b].rank_key()))) + (int(b.order),)
                   for b in g.bonds)
    return tuple(atoms), tuple(bonds)


def iter_valid(smiles: Iterable[str]) -> Iterable[str]:
    return (s for s in smiles if is_valid_smiles(s))
