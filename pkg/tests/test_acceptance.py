"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the summary lines
are also repeated at the end of any pytest run.
"""
from __future__ import annotations

import copy
import itertools
import math
import random
import time
from importlib import resources

import numpy as np
import pytest
import torch

from rxnlm.corpus import bundled_corpus_path, load_corpus, masked_examples
from rxnlm.decoding import StubModel, beam_search
from rxnlm.heads import TaskHeadRegressor, apply_lora, base_checksum
from rxnlm.metrics import auc, mae, r_squared, rmse, top_k_accuracy
from rxnlm.model import ModelConfig, Seq2SeqTransformer, parameter_checksum
from rxnlm.planner import (PlannerConfig, RetroModels, SearchNode, SearchTree, ToyChemistry, expand, plan,
                           select_and_simulate, visit_distribution)
from rxnlm.smiles import canonical_smiles, canonicalize, parse_smiles, to_smiles
from rxnlm.training import ReactionLM, collate, gradient_check, reconstruction_accuracy, seq_loss_from_examples
from rxnlm.vocab import decode, default_vocabulary, encode, tokenize

GOLDEN_REACTION = "c1ccccc1C(C)(C)C.ClCl>[Fe+3].[Cl-].[Cl-].[Cl-]>c1cc(Cl)ccc1C(C)(C)C"
GOLDEN_IDS = [
    1, 108, 19, 108, 108, 108, 108, 108, 19, 118, 12, 118, 13, 12, 118, 13, 118, 11, 129, 129, 2, 6, 138, 9,
    21, 7, 11, 6, 129, 10, 7, 11, 6, 129, 10, 7, 11, 6, 129, 10, 7, 2, 108, 19, 108, 108, 12, 129, 13, 108,
    108, 108, 19, 118, 12, 118, 13, 12, 118, 13, 118, 3,
]


@pytest.fixture(scope="module")
def corpus():
    return load_corpus(bundled_corpus_path()).records


def _raw_vocab_table() -> dict[str, int]:
    """Read the bundled table directly, bypassing the library loader."""
    text = resources.files("rxnlm.data").joinpath("vocab.tsv").read_text(encoding="utf-8")
    table = {}
    for line in text.splitlines():
        if line.strip():
            tok, idx = line.rsplit("\t", 1)
            table[tok] = int(idx)
    return table


# ---------------------------------------------------------------- 1


def test_tokenizer_golden_vector(report, corpus):
    t0 = time.perf_counter()
    table = _raw_vocab_table()
    hand_tokens = (
        "c 1 c c c c c 1 C ( C ) ( C ) C . Cl Cl > [ Fe + 3 ] . [ Cl - ] . [ Cl - ] . [ Cl - ] > "
        "c 1 c c ( Cl ) c c c 1 C ( C ) ( C ) C"
    ).split()
    oracle = [table["<cls>"]] + [table[t] for t in hand_tokens] + [table["<end>"]]
    vocab = default_vocabulary()
    ids = encode(tokenize(GOLDEN_REACTION, vocab), vocab)
    lines = [r.to_string() for r in corpus]
    round_trip_failures = sum(decode(encode(tokenize(s, vocab), vocab), vocab) != s for s in lines)
    elapsed = time.perf_counter() - t0
    ok = ids == GOLDEN_IDS == oracle and len(lines) >= 1000 and round_trip_failures == 0 and elapsed < 1.0
    report("1 tokenizer golden vector", ok,
           f"golden match={ids == GOLDEN_IDS}, oracle match={ids == oracle}, "
           f"round-trip {len(lines) - round_trip_failures}/{len(lines)}, {elapsed:.3f}s")


# ---------------------------------------------------------------- 2


def test_gradient_fidelity(report, corpus):
    t0 = time.perf_counter()
    cfg = ModelConfig(d_model=16, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, max_length=128, seed=3)
    model = Seq2SeqTransformer(cfg)
    examples = masked_examples(corpus[:4], "all", max_length=cfg.max_length)
    res = gradient_check(model, seq_loss_from_examples(examples), epsilon=1e-5, n_samples=240, seed=0)
    elapsed = time.perf_counter() - t0
    ok = res.n_checked >= 200 and res.max_relative_error < 1e-3 and elapsed < 120
    report("2 gradient fidelity", ok,
           f"max rel err {res.max_relative_error:.2e} over {res.n_checked} entries, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


@pytest.mark.slow
def test_memorization(report, corpus):
    t0 = time.perf_counter()
    reactions = corpus[:32]
    lm = ReactionLM(d_model=64, n_heads=4, n_encoder_layers=2, n_decoder_layers=2, max_length=160, lr=1e-3,
                    weight_decay=0.0, batch_size=32, n_steps=2000, mask_mode="all", eval_every=100,
                    stop_at_accuracy=1.0, seed=0)
    lm.fit(reactions)
    roles = {ex.role for ex in lm.examples_}
    acc = reconstruction_accuracy(lm.model_, lm.examples_)
    steps = lm.history_.steps[-1]
    elapsed = time.perf_counter() - t0
    ok = roles == {"reactant", "reagent", "product"} and acc == 1.0 and steps <= 2000 and elapsed < 600
    report("3 memorization", ok,
           f"exact greedy reconstruction {acc:.3f} on {len(lm.examples_)} masked examples "
           f"after {steps} steps, {elapsed:.0f}s")


# ---------------------------------------------------------------- 4

STUB_START, STUB_END = 99, 3
STUB_TABLE = {
    STUB_START: [0.55, 0.3, 0.1, 0.05],
    0: [0.2, 0.1, 0.1, 0.6],
    1: [0.5, 0.2, 0.1, 0.2],
    2: [0.4, 0.3, 0.2, 0.1],
}


def _enumerate_stub(max_length: int) -> list[tuple[float, bool, tuple[int, ...]]]:
    """All sequences of the stub: complete ones end at ``<end>``, the rest stop at the length cap."""
    out = []
    for n in range(1, max_length + 1):
        for seq in itertools.product(range(4), repeat=n):
            if STUB_END in seq[:-1]:
                continue
            complete = seq[-1] == STUB_END
            if not complete and n < max_length:
                continue
            prob, prev = 1.0, STUB_START
            for tok in seq:
                prob *= STUB_TABLE[prev][tok]
                prev = tok
            out.append((prob, complete, seq))
    out.sort(key=lambda t: (-t[0], not t[1], t[2]))
    return out


def test_beam_oracle(report):
    t0 = time.perf_counter()
    stub = StubModel(lambda prefix: STUB_TABLE[prefix[-1]], 4)
    truth = _enumerate_stub(3)
    assert abs(sum(p for p, _, _ in truth) - 1.0) < 1e-12
    details, ok = [], True
    for k in (1, 2, 4):
        got = beam_search(stub, k, 3, start=STUB_START, end=STUB_END)
        want = truth[:k]
        same = [h.tokens for h in got] == [w[2] for w in want] and all(
            abs(math.exp(h.log_prob) - w[0]) < 1e-12 and h.complete == w[1] for h, w in zip(got, want))
        ok &= same
        details.append(f"k={k}:{'ok' if same else 'mismatch'}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1.0
    report("4 beam equals exhaustive enumeration", ok, ", ".join(details) + f", {elapsed:.3f}s")


# ---------------------------------------------------------------- 5


def test_lora_identity(report, corpus):
    cfg = ModelConfig(d_model=32, n_heads=4, n_encoder_layers=2, n_decoder_layers=2, max_length=160, seed=5)
    base = Seq2SeqTransformer(cfg).double()
    ex = masked_examples(corpus[:8], "all", max_length=cfg.max_length)
    batch = collate(ex)
    with torch.no_grad():
        before = base(batch.src, batch.tgt_in)
    adapted = copy.deepcopy(base)
    apply_lora(adapted, rank=4, alpha=8.0, seed=1)
    with torch.no_grad():
        after = adapted(batch.src, batch.tgt_in)
    logit_gap = float((before - after).abs().max())

    base32 = Seq2SeqTransformer(cfg)
    original = parameter_checksum(base32)
    texts = [r.products[0] for r in corpus[:40]]
    labels = np.linspace(0.0, 1.0, len(texts))
    est = TaskHeadRegressor(base=base32, finetune="lora", lora_rank=4, n_steps=30, eval_every=10, seed=0)
    est.fit(texts, labels)
    moved = any(float(p.detach().abs().max()) > 0 for n, p in est.model_.named_parameters() if n.endswith("lora_b"))
    unchanged = base_checksum(est.model_.base) == est.base_checksum_ == original == parameter_checksum(base32)
    ok = logit_gap <= 1e-12 and unchanged and moved
    report("5 LoRA identity and frozen base", ok,
           f"max logit gap {logit_gap:.1e}, adapters trained={moved}, base checksum unchanged={unchanged}")


# ---------------------------------------------------------------- 6


def test_canonicalization_invariance(report, corpus):
    t0 = time.perf_counter()
    molecules = sorted({m for r in corpus for part in (r.reactants, r.reagents, r.products) for m in part})
    rng = random.Random(0)
    sample = rng.sample(molecules, 100)
    non_unique = 0
    for smi in sample:
        g = parse_smiles(smi)
        outs = set()
        for _ in range(100):
            order = list(range(len(g.atoms)))
            rng.shuffle(order)
            outs.add(canonical_smiles(g.permute(order)))
        non_unique += len(outs) != 1
    not_idempotent = 0
    for smi in molecules:
        c = canonicalize(smi)
        not_idempotent += c is None or canonicalize(c) != c
    elapsed = time.perf_counter() - t0
    ok = non_unique == 0 and not_idempotent == 0 and elapsed < 30
    report("6 canonicalization invariance", ok,
           f"{100 - non_unique}/100 molecules unique over 100 permutations, "
           f"idempotent on {len(molecules) - not_idempotent}/{len(molecules)}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 7


def _brute_force_min_steps(target: str, toy: ToyChemistry) -> int:
    """Breadth-first search over open-molecule multisets using every retro split."""
    start = (target,) if target not in toy.stock else ()
    frontier, seen, depth = {start}, {start}, 0
    while frontier:
        if () in frontier:
            return depth
        nxt = set()
        for state in frontier:
            for i, mol in enumerate(state):
                rest = state[:i] + state[i + 1:]
                for left, right in toy.retro_candidates(mol):
                    new = tuple(sorted(rest + tuple(m for m in (left, right) if m not in toy.stock)))
                    if new not in seen:
                        seen.add(new)
                        nxt.add(new)
        frontier, depth = nxt, depth + 1
    raise AssertionError("unreachable")


def test_planner_exactness_on_toy_chemistry(report):
    t0 = time.perf_counter()
    toy = ToyChemistry(seed=0)
    models = toy.models()
    cfg = PlannerConfig(budget=500, stop_when_solved=True, check_every=10)
    targets = ["".join(t) for n in range(1, 7) for t in itertools.product(toy.alphabet, repeat=n)]
    unsolved, wrong_length, sims = 0, 0, []
    for target in targets:
        route = plan(target, models, toy.stock, cfg, canonical=False)[0]
        sims.append(route.simulations)
        if not route.solved:
            unsolved += 1
            continue
        wrong_length += route.n_steps != _brute_force_min_steps(target, toy)
    elapsed = time.perf_counter() - t0
    ok = unsolved == 0 and wrong_length == 0 and max(sims) <= 500 and elapsed < 60
    report("7 planner exactness on toy chemistry", ok,
           f"{len(targets) - unsolved}/{len(targets)} solved, {wrong_length} longer than brute-force minimum, "
           f"max simulations {max(sims)}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 8


def _rigged_world(corpus, seed: int):
    """Random generator and a forward model that returns the right product only sometimes."""
    rng = random.Random(seed)
    molecules = sorted({m for r in corpus for m in r.reactants + r.products})
    products = sorted({m for r in corpus for m in r.products})

    def generate(product, n):
        out = []
        for _ in range(rng.randint(0, 6)):
            pre = ".".join(rng.sample(molecules, rng.randint(1, 3)))
            if rng.random() < 0.1:
                pre = pre + "(("  # unparseable, must be dropped
            out.append((pre, rng.random()))
        return out

    def predict_product(precursors, reagents):
        roll = rng.random()
        target = reagents  # the rigged reagent field carries the focus through
        if roll < 0.3:
            return target
        if roll < 0.45:
            g = parse_smiles(target)
            order = list(range(len(g.atoms)))
            rng.shuffle(order)
            return to_smiles(g.permute(order))  # same molecule, different spelling
        if roll < 0.55:
            return "C1CC"  # invalid
        return rng.choice(products)

    models = RetroModels(generate=generate, predict_reagents=lambda pre, prod: prod,
                         predict_product=predict_product, value=lambda m: rng.random(),
                         policy=lambda rxns: [rng.random() for _ in rxns])
    return models, products, rng


def test_round_trip_filter_soundness(report, corpus):
    models, products, rng = _rigged_world(corpus, seed=7)
    cfg = PlannerConfig(num_sample=50)
    mismatched, dead_end_errors, survivors = 0, 0, 0
    expansions = 10_000
    for _ in range(expansions):
        focus = canonicalize(rng.choice(products))
        node = SearchNode((focus,))
        trace = []
        inner = models.predict_product

        def recording(pre, reag, inner=inner, trace=trace):
            out = inner(pre, reag)
            c = canonicalize(out) if out else None
            trace.append(c == focus)
            return out

        models.predict_product = recording
        edges = expand(node, focus, models, cfg)
        models.predict_product = inner
        survivors += len(edges)
        mismatched += sum(canonicalize(e.forward_product) != focus for e in edges)
        all_failed = not any(trace)
        dead_end_errors += node.dead_end != all_failed
        dead_end_errors += len(edges) != sum(trace)
    ok = mismatched == 0 and dead_end_errors == 0
    report("8 round-trip filter soundness", ok,
           f"{expansions} expansions, {survivors} surviving edges, {mismatched} mismatches, "
           f"{dead_end_errors} dead-end marking errors")


# ---------------------------------------------------------------- 9


def _conserved(node: SearchNode) -> bool:
    return not node.children or node.N == 1 + sum(e.child.N for e in node.children)


def test_distribution_invariants(report):
    rng = random.Random(3)
    worst = 0.0
    for i in range(1000):
        toy = ToyChemistry(seed=i)
        models = toy.models()
        target = "".join(rng.choice(toy.alphabet) for _ in range(rng.randint(2, 12)))
        node = SearchNode((target,))
        edges = expand(node, target, models, PlannerConfig(num_sample=rng.randint(1, 50)))
        for vec in ([e.p_generation for e in edges], [e.p_policy for e in edges], [e.prior for e in edges]):
            worst = max(worst, abs(sum(vec) - 1.0))
        # visit a few times so that the visit distribution is defined
        tree = SearchTree(target, models, toy.stock, PlannerConfig(budget=20))
        for _ in range(rng.randint(2, 20)):
            select_and_simulate(tree)
        if tree.root.children:
            worst = max(worst, abs(float(visit_distribution(tree.root, rng.uniform(0.1, 3.0)).sum()) - 1.0))

    toy = ToyChemistry(seed=11)
    tree = SearchTree("abcdabcdabcdab", toy.models(), toy.stock, PlannerConfig(budget=10_000, max_depth=30))
    violations = 0
    for _ in range(10_000):
        sim = select_and_simulate(tree)
        violations += sum(not _conserved(n) for n in sim.path)
    violations += sum(not _conserved(n) for n in tree.iter_nodes())
    ok = worst <= 1e-9 and violations == 0
    report("9 distribution invariants", ok,
           f"max |sum-1| {worst:.1e} over 1000 expansions, {violations} conservation violations in 10000 simulations")


# ---------------------------------------------------------------- 10


def _auc_all_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_metrics(report):
    rng = np.random.default_rng(0)
    pool = ["CCO", "OCC", "CCN", "c1ccccc1", "CC(=O)O", "C1CC", "CCCl"]
    refs = [str(rng.choice(pool[:5])) for _ in range(50)]
    preds = [[str(rng.choice(pool)) for _ in range(5)] for _ in refs]
    accs = [top_k_accuracy(preds, refs, k) for k in range(1, 6)]
    monotone = all(a <= b for a, b in zip(accs, accs[1:]))

    s, y = (0.1, 0.4, 0.35, 0.8), (0, 0, 1, 1)
    auc_ok = auc(s, y) == 0.75 == _auc_all_pairs(s, y)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        lab = rng.integers(0, 2, n)
        if lab.min() == lab.max():
            continue
        sc = np.round(rng.random(n), 1)  # rounding forces ties
        auc_ok &= abs(auc(sc, lab) - _auc_all_pairs(sc, lab)) < 1e-12

    p, t = rng.normal(size=100), rng.normal(size=100)
    direct_rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / len(p))
    direct_mae = sum(abs(a - b) for a, b in zip(p, t)) / len(p)
    mean_t = sum(t) / len(t)
    direct_r2 = 1 - sum((b - a) ** 2 for a, b in zip(p, t)) / sum((b - mean_t) ** 2 for b in t)
    reg_ok = (abs(rmse(p, t) - direct_rmse) < 1e-9 and abs(mae(p, t) - direct_mae) < 1e-9
              and abs(r_squared(p, t) - direct_r2) < 1e-9)
    ok = monotone and auc_ok and reg_ok
    report("10 metrics", ok,
           f"top-k {['%.2f' % a for a in accs]} monotone={monotone}, AUC={auc(s, y)}, regression formulas={reg_ok}")
