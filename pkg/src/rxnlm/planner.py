"""Monte Carlo tree search for multi-step retrosynthesis.

Nodes hold the multiset of molecules that are still open (not in stock). One
expansion picks the open molecule with the lowest value estimate and runs
the candidate pipeline on it. The pipeline generates precursor sets,
canonicalizes and deduplicates them (probabilities are summed), predicts
reagents, forward-predicts the product and keeps a candidate only if the
product round-trips to the focus molecule. The fused prior is the
renormalised elementwise product of the generation probabilities and the
policy scores. Selection is prior-weighted UCT, and leaves are valued by
the product of per-molecule values.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .checkpoint import config_hash
from .heads import normalize, policy_of
from .smiles import canonicalize

logger = logging.getLogger(__name__)

ROUTE_FORMAT_VERSION = 1


@dataclass
class RetroModels:
    """Callables the planner needs.

    ``generate(product, n)`` returns ``[(precursors, probability), ...]`` with
    precursors dot-joined; ``predict_reagents(precursors, product)`` and
    ``predict_product(precursors, reagents)`` return strings; ``value(mol)``
    is in [0, 1]; ``policy(reactions)`` returns one non-negative score per
    reaction; ``canonicalize(mol)`` returns ``None`` on failure.
    """

    generate: Callable[[str, int], Sequence[tuple[str, float]]]
    predict_reagents: Callable[[str, str], str]
    predict_product: Callable[[str, str], str]
    value: Callable[[str], float]
    policy: Callable[[Sequence[str]], Sequence[float]]
    canonicalize: Callable[[str], Optional[str]] = canonicalize


@dataclass
class PlannerConfig:
    num_sample: int = 50
    budget: int = 500
    max_depth: int = 20
    c: float = 1.5
    tau: float = 1.0
    routes: int = 1
    stop_when_solved: bool = False
    check_every: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.num_sample < 1:
            raise ValueError("num_sample must be >= 1")


@dataclass(eq=False)
class RetroEdge:
    focus: str
    precursors: tuple[str, ...]
    reagents: str
    forward_product: str
    p_generation: float
    p_policy: float
    prior: float
    child: "SearchNode"

    @property
    def reaction(self) -> str:
        return f"{'.'.join(self.precursors)}>{self.reagents}>{self.focus}"


@dataclass(eq=False)
class SearchNode:
    open: tuple[str, ...]
    depth: int = 0
    N: int = 0
    W: float = 0.0
    children: list[RetroEdge] = field(default_factory=list)
    expanded: bool = False
    dead_end: bool = False
    focus: Optional[str] = None

    @property
    def solved(self) -> bool:
        return not self.open

    @property
    def Q(self) -> float:
        return self.W / self.N if self.N else 0.0


class SearchTree:
    def __init__(self, target: str, models: RetroModels, stock: Iterable[str], config: PlannerConfig):
        self.models = models
        self.config = config
        self.stock = frozenset(stock)
        self.target = target
        self.root = SearchNode(() if target in self.stock else (target,))
        self._values: dict[str, float] = {}
        self.simulations = 0

    def value(self, mol: str) -> float:
        if mol not in self._values:
            self._values[mol] = float(np.clip(self.models.value(mol), 0.0, 1.0))
        return self._values[mol]

    def leaf_value(self, node: SearchNode) -> float:
        return float(np.prod([self.value(m) for m in node.open])) if node.open else 1.0

    def choose_focus(self, node: SearchNode) -> str:
        return min(node.open, key=lambda m: (self.value(m), m))

    def iter_nodes(self) -> Iterable[SearchNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(e.child for e in node.children)


def _canonical_members(models: RetroModels, precursors: str) -> Optional[tuple[str, ...]]:
    if not precursors:
        return None
    out = []
    for part in precursors.split("."):
        c = models.canonicalize(part)
        if c is None:
            return None
        out.extend(c.split("."))
    return tuple(out)


def expand(node: SearchNode, focus: str, models: RetroModels, config: PlannerConfig,
           stock: frozenset = frozenset()) -> list[RetroEdge]:
    """Run the candidate pipeline for ``focus`` and attach the surviving edges to ``node``."""
    if node.expanded:
        raise ValueError("node already expanded")
    node.expanded = True
    node.focus = focus
    focus_key = _canonical_members(models, focus)
    merged: dict[tuple[str, ...], list] = {}
    for precursors, prob in models.generate(focus, config.num_sample):
        members = _canonical_members(models, precursors)
        if members is None or (focus_key is not None and focus_key[0] in members and len(focus_key) == 1):
            continue
        key = tuple(sorted(members))
        if key in merged:
            merged[key][1] += float(prob)
        else:
            merged[key] = [members, float(prob)]
    survivors = []
    for members, prob in merged.values():
        pre = ".".join(members)
        reagents = models.predict_reagents(pre, focus)
        product = models.predict_product(pre, reagents)
        product_key = _canonical_members(models, product)
        if product_key is None or focus_key is None or sorted(product_key) != sorted(focus_key):
            continue
        survivors.append((members, reagents, product, prob))
    if not survivors:
        node.dead_end = True
        return []
    p1 = normalize([s[3] for s in survivors])
    reactions = [f"{'.'.join(m)}>{r}>{focus}" for m, r, _, _ in survivors]
    p2 = policy_of(reactions, models.policy)
    prior = normalize(p1 * p2)
    rest = list(node.open)
    rest.remove(focus)
    for k, (members, reagents, product, _) in enumerate(survivors):
        open_set = tuple(sorted(rest + [m for m in members if m not in stock]))
        child = SearchNode(open_set, depth=node.depth + 1)
        node.children.append(RetroEdge(focus, members, reagents, product, float(p1[k]), float(p2[k]),
                                       float(prior[k]), child))
    return node.children


def select_edge(node: SearchNode, c: float) -> RetroEdge:
    sqrt_n = math.sqrt(node.N)
    best, best_key = None, None
    for i, e in enumerate(node.children):
        score = e.child.Q + c * e.prior * sqrt_n / (1 + e.child.N)
        key = (score, e.prior, -i)
        if best_key is None or key > best_key:
            best, best_key = e, key
    assert best is not None
    return best


@dataclass
class Simulation:
    value: float
    path: list[SearchNode]


def select_and_simulate(tree: SearchTree) -> Simulation:
    """One selection / expansion / evaluation / backup pass."""
    root = tree.root
    if root.solved:
        return Simulation(1.0, [])
    cfg = tree.config
    node, path = root, [root]
    while True:
        if node.solved:
            value = 1.0
            break
        if node.dead_end or node.depth >= cfg.max_depth:
            value = 0.0
            break
        if not node.expanded:
            expand(node, tree.choose_focus(node), tree.models, cfg, tree.stock)
            value = 0.0 if node.dead_end else tree.leaf_value(node)
            break
        node = select_edge(node, cfg.c).child
        path.append(node)
    for n in path:
        n.N += 1
        n.W += value
    tree.simulations += 1
    return Simulation(value, path)


def visit_distribution(node: SearchNode, tau: float = 1.0) -> np.ndarray:
    """Children's visit counts raised to ``tau`` and normalised by their sum.

    Larger ``tau`` sharpens the distribution and ``tau -> 0`` flattens it.
    With no child visited yet the fused priors are returned.
    """
    if not node.expanded or not node.children:
        raise ValueError("visit distribution needs an expanded node with children")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    counts = np.array([e.child.N for e in node.children], dtype=np.float64)
    if counts.sum() == 0:
        return normalize([e.prior for e in node.children])
    powered = counts ** tau
    return powered / powered.sum()


# ---------------------------------------------------------------- routes


@dataclass
class RouteStep:
    product: str
    precursors: tuple[str, ...]
    reagents: str
    prior: float
    visit_probability: float
    temperature: Optional[float] = None
    yield_percent: Optional[float] = None

    @property
    def reaction(self) -> str:
        return f"{'.'.join(self.precursors)}>{self.reagents}>{self.product}"


@dataclass
class RouteReport:
    target: str
    steps: list[RouteStep]
    solved: bool
    score: float = 1.0
    config: dict = field(default_factory=dict)
    simulations: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        return {
            "format_version": ROUTE_FORMAT_VERSION,
            "config_hash": config_hash(self.config),
            "config": self.config,
            "target": self.target,
            "solved": self.solved,
            "n_steps": self.n_steps,
            "score": self.score,
            "simulations": self.simulations,
            "steps": [
                {**asdict(s), "precursors": list(s.precursors), "reaction": s.reaction}
                for s in self.steps
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RouteReport":
        steps = [RouteStep(s["product"], tuple(s["precursors"]), s["reagents"], s["prior"],
                           s["visit_probability"], s.get("temperature"), s.get("yield_percent"))
                 for s in data["steps"]]
        return cls(data["target"], steps, data["solved"], data.get("score", 1.0), data.get("config", {}),
                   data.get("simulations", 0))


def _ranked_children(node: SearchNode, tau: float) -> list[tuple[float, int, RetroEdge]]:
    pi = visit_distribution(node, tau)
    order = sorted(range(len(node.children)), key=lambda i: (-pi[i], -node.children[i].prior, i))
    return [(float(pi[i]), i, node.children[i]) for i in order]


def extract_routes(tree: SearchTree, k: int = 1) -> list[RouteReport]:
    """Top-``k`` routes by the product of per-step visit probabilities (``k=1`` is greedy)."""
    tau = tree.config.tau
    beams: list[tuple[float, SearchNode, list[RouteStep]]] = [(1.0, tree.root, [])]
    while any(node.children for _, node, _ in beams):
        pool = []
        for score, node, steps in beams:
            if not node.children:
                pool.append((score, node, steps))
                continue
            for pi, _, edge in _ranked_children(node, tau):
                step = RouteStep(edge.focus, edge.precursors, edge.reagents, edge.prior, pi)
                pool.append((score * pi, edge.child, steps + [step]))
        pool.sort(key=lambda b: -b[0])
        beams = pool[:k]
    cfg = asdict(tree.config)
    return [RouteReport(tree.target, steps, node.solved, score, cfg, tree.simulations)
            for score, node, steps in beams]


def plan(target: str, models: RetroModels, stock: Iterable[str], config: PlannerConfig,
         canonical: bool = True) -> list[RouteReport]:
    """Search from ``target`` and return up to ``config.routes`` routes, best first."""
    key = models.canonicalize(target) if canonical else target
    if key is None:
        raise ValueError(f"invalid target {target!r}")
    tree = SearchTree(key, models, stock, config)
    if tree.root.solved:
        return [RouteReport(key, [], True, 1.0, asdict(config), 0)]
    for i in range(config.budget):
        select_and_simulate(tree)
        if config.stop_when_solved and (i + 1) % config.check_every == 0:
            if extract_routes(tree, 1)[0].solved:
                break
    return extract_routes(tree, config.routes)


def annotate_route(report: RouteReport, temperature_model=None, yield_model=None) -> RouteReport:
    """Fill per-step temperature and yield predictions; topology is untouched.

    Models are fitted :class:`~rxnlm.heads.TaskHeadRegressor` instances (or
    callables on a list of reaction strings) that return raw units.
    """
    import warnings

    if temperature_model is None and yield_model is None:
        warnings.warn("no condition models given; route left unannotated", stacklevel=2)
        return report
    reactions = [s.reaction for s in report.steps]

    def run(model):
        if model is None or not reactions:
            return [None] * len(reactions)
        out = model.predict(reactions) if hasattr(model, "predict") else model(reactions)
        return [float(v) for v in np.asarray(out, dtype=np.float64).reshape(-1)]

    temps, yields = run(temperature_model), run(yield_model)
    steps = [replace(s, temperature=t if t is not None else s.temperature,
                     yield_percent=y if y is not None else s.yield_percent)
             for s, t, y in zip(report.steps, temps, yields)]
    return replace(report, steps=steps)


# ---------------------------------------------------------------- toy chemistry


def _unit_hash(*parts) -> float:
    digest = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2**64


@dataclass
class ToyChemistry:
    """String-rewriting world: a retro step splits a string, the forward step concatenates."""

    seed: int = 0
    alphabet: str = "abcd"

    def retro_candidates(self, product: str) -> list[tuple[str, str]]:
        return [(product[:i], product[i:]) for i in range(1, len(product))]

    def generate(self, product: str, n: int) -> list[tuple[str, float]]:
        cands = self.retro_candidates(product)
        if not cands:
            return []
        weights = [0.1 + _unit_hash(self.seed, "gen", product, i) for i in range(len(cands))]
        total = sum(weights)
        ranked = sorted(zip(cands, weights), key=lambda cw: -cw[1])[:n]
        return [(f"{l}.{r}", w / total) for (l, r), w in ranked]

    def forward(self, *precursors: str) -> str:
        return "".join(precursors)

    def predict_reagents(self, precursors: str, product: str) -> str:
        return ""

    def predict_product(self, precursors: str, reagents: str) -> str:
        return self.forward(*precursors.split("."))

    def value(self, mol: str) -> float:
        return 1.0 / len(mol)

    def policy(self, reactions: Sequence[str]) -> list[float]:
        return [0.1 + _unit_hash(self.seed, "pol", r) for r in reactions]

    @property
    def stock(self) -> frozenset:
        return frozenset(self.alphabet)

    def models(self) -> RetroModels:
        return RetroModels(self.generate, self.predict_reagents, self.predict_product, self.value,
                           self.policy, canonicalize=lambda s: s if s and set(s) <= set(self.alphabet) else None)


def toy_chemistry(seed: int = 0) -> tuple[RetroModels, frozenset]:
    toy = ToyChemistry(seed)
    return toy.models(), toy.stock


# ---------------------------------------------------------------- language-model oracles


def language_model_oracles(lm, value_model, policy_model, strategy: str = "beam",
                           max_new: Optional[int] = None, seed: int = 0) -> RetroModels:
    """Planner callables backed by a fitted :class:`~rxnlm.training.ReactionLM`."""
    from .decoding import sentence_field
    from .heads import value_of

    def generate(product: str, n: int):
        res = lm.generate(f"<msk>>>{product}", strategy=strategy, n=n, seed=seed, max_new=max_new)
        out = []
        for hyp in res:
            pre = sentence_field(hyp.text(lm.vocab_), "reactant")
            if pre:
                out.append((pre, math.exp(hyp.log_prob)))
        return out

    def predict_reagents(precursors: str, product: str) -> str:
        return sentence_field(lm.predict([f"{precursors}><msk>>{product}"])[0], "reagent") or ""

    def predict_product(precursors: str, reagents: str) -> str:
        return sentence_field(lm.predict([f"{precursors}>{reagents}><msk>"])[0], "product") or ""

    return RetroModels(
        generate, predict_reagents, predict_product,
        value=lambda m: value_of(m, value_model),
        policy=lambda rxns: np.asarray(policy_model.predict(list(rxns)) if hasattr(policy_model, "predict")
                                       else policy_model(list(rxns)), dtype=np.float64),
    )


def read_stock(path) -> frozenset:
    out = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            s = line.strip()
            if s:
                c = canonicalize(s)
                out.add(c if c is not None else s)
    return frozenset(out)
