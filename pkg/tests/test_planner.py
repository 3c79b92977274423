import itertools
import json
import random
import warnings

import numpy as np
import pytest

from rxnlm.planner import (PlannerConfig, RetroModels, RouteReport, SearchNode, SearchTree, ToyChemistry, expand,
                           extract_routes, plan, select_and_simulate, select_edge, visit_distribution)


def _models(candidates, forward=None, value=0.5):
    """A world where every product has the listed candidates and the forward model echoes the focus."""
    return RetroModels(
        generate=lambda product, n: candidates.get(product, [])[:n],
        predict_reagents=lambda pre, prod: "[Pd]",
        predict_product=forward or (lambda pre, reag: FOCUS[0]),
        value=lambda m: value,
        policy=lambda rxns: [1.0] * len(rxns),
    )


FOCUS = ["CCO"]


def test_dedup_sums_probabilities_and_drops_invalid_and_cycles():
    m = _models({"CCO": [("CC.O", 0.2), ("O.CC", 0.3), ("C1CC", 0.4), ("OCC", 0.1), ("C.CO", 0.1)]})
    node = SearchNode(("CCO",))
    edges = expand(node, "CCO", m, PlannerConfig())
    keys = sorted(tuple(sorted(e.precursors)) for e in edges)
    assert keys == [("C", "CO"), ("CC", "O")]
    p1 = {tuple(sorted(e.precursors)): e.p_generation for e in edges}
    assert p1[("CC", "O")] == pytest.approx(0.5 / 0.6)
    assert sum(e.prior for e in edges) == pytest.approx(1.0)


def test_children_open_sets_respect_stock():
    m = _models({"CCO": [("CC.O", 1.0)]})
    node = SearchNode(("CCO", "N"))
    edge = expand(node, "CCO", m, PlannerConfig(), stock=frozenset({"O"}))[0]
    assert edge.child.open == ("CC", "N") and edge.child.depth == 1


def test_dead_end_when_every_candidate_fails_round_trip():
    m = _models({"CCO": [("CC.O", 1.0)]}, forward=lambda pre, reag: "CCN")
    node = SearchNode(("CCO",))
    assert expand(node, "CCO", m, PlannerConfig()) == [] and node.dead_end
    tree = SearchTree("CCO", m, frozenset(), PlannerConfig())
    assert select_and_simulate(tree).value == 0.0 and tree.root.dead_end


def test_first_descent_follows_the_larger_prior():
    m = _models({})
    root = SearchNode(("X",), expanded=True, N=1)
    from rxnlm.planner import RetroEdge

    for prior in (0.1, 0.9):
        root.children.append(RetroEdge("X", ("Y",), "", "X", prior, 1.0, prior, SearchNode(("Y",), depth=1)))
    assert select_edge(root, 1.5).prior == 0.9


def test_solved_root_is_a_no_op():
    tree = SearchTree("a", ToyChemistry().models(), frozenset("abcd"), PlannerConfig())
    assert tree.root.solved
    sim = select_and_simulate(tree)
    assert sim.value == 1.0 and sim.path == [] and tree.root.N == 0
    route = plan("a", ToyChemistry().models(), frozenset("abcd"), PlannerConfig(), canonical=False)[0]
    assert route.solved and route.n_steps == 0


def test_depth_cap_scores_zero():
    toy = ToyChemistry()
    tree = SearchTree("abcdabcd", toy.models(), toy.stock, PlannerConfig(max_depth=1))
    values = [select_and_simulate(tree).value for _ in range(30)]
    assert tree.root.expanded and all(e.child.depth == 1 for e in tree.root.children)
    assert 0.0 in values[1:]


def test_visit_distribution_temperature():
    node = SearchNode(("X",), expanded=True)
    from rxnlm.planner import RetroEdge

    for n, prior in ((6, 0.2), (3, 0.3), (1, 0.5)):
        node.children.append(RetroEdge("X", ("Y",), "", "X", prior, 1.0, prior, SearchNode(("Y",), N=n)))
    assert np.allclose(visit_distribution(node, 1.0), [0.6, 0.3, 0.1])
    sharp = visit_distribution(node, 4.0)
    assert sharp[0] > 0.6 and sharp.sum() == pytest.approx(1.0)
    assert np.allclose(visit_distribution(node, 1e-12), [1 / 3] * 3)
    with pytest.raises(ValueError):
        visit_distribution(SearchNode(("X",)), 1.0)
    for e in node.children:
        e.child.N = 0
    assert np.allclose(visit_distribution(node), [0.2, 0.3, 0.5])


def test_full_budget_toy_routes_are_minimal():
    toy = ToyChemistry(seed=2)
    rng = random.Random(0)
    targets = ["".join(t) for t in itertools.product("abcd", repeat=5)]
    for target in rng.sample(targets, 25) + ["abcdab", "aaaaaa"]:
        route = plan(target, toy.models(), toy.stock, PlannerConfig(budget=500), canonical=False)[0]
        assert route.solved and route.n_steps == len(target) - 1 and route.simulations == 500


def test_top_k_routes_are_ranked_by_visit_probability_product():
    toy = ToyChemistry()
    tree = SearchTree("abcab", toy.models(), toy.stock, PlannerConfig(budget=200))
    for _ in range(200):
        select_and_simulate(tree)
    greedy = extract_routes(tree, 1)[0]
    routes = extract_routes(tree, 4)
    assert len(routes) == 4 and [r.score for r in routes] == sorted((r.score for r in routes), reverse=True)
    assert routes[0].score >= greedy.score
    for r in routes:
        assert r.score == pytest.approx(np.prod([s.visit_probability for s in r.steps]))
    assert extract_routes(tree, 1)[0].steps == greedy.steps


def test_route_report_json_round_trip():
    toy = ToyChemistry()
    rep = plan("abca", toy.models(), toy.stock, PlannerConfig(budget=50), canonical=False)[0]
    data = json.loads(rep.to_json())
    assert data["format_version"] == 1 and len(data["config_hash"]) == 16
    back = RouteReport.from_dict(data)
    assert back.steps == rep.steps and back.solved == rep.solved


def test_annotation_matches_direct_predictions_and_keeps_topology():
    from rxnlm.planner import annotate_route

    toy = ToyChemistry()
    rep = plan("abcab", toy.models(), toy.stock, PlannerConfig(budget=100), canonical=False)[0]
    temp = lambda rxns: [10.0 * len(r) for r in rxns]
    yld = lambda rxns: [100 / (1 + np.exp(-len(r) / 10)) for r in rxns]
    out = annotate_route(rep, temp, yld)
    assert [s.reaction for s in out.steps] == [s.reaction for s in rep.steps]
    assert [s.temperature for s in out.steps] == temp([s.reaction for s in rep.steps])
    assert all(0 < s.yield_percent < 100 for s in out.steps)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert annotate_route(rep) is rep
    assert caught


def test_invalid_target_is_rejected():
    with pytest.raises(ValueError):
        plan("C1CC", _models({}), frozenset(), PlannerConfig())


def test_language_model_oracles_wire_up():
    from rxnlm.planner import language_model_oracles
    from rxnlm.training import ReactionLM

    lm = ReactionLM(d_model=16, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, max_length=48, n_steps=1,
                    batch_size=2).fit(["CC.O>>CCO", "CBr.O>>CO"])
    models = language_model_oracles(lm, lambda xs: [0.5] * len(xs), lambda xs: [1.0] * len(xs), max_new=8)
    cands = models.generate("CCO", 3)
    assert len(cands) <= 3 and all(isinstance(p, float) for _, p in cands)
    reports = plan("OCC", models, frozenset({"O"}), PlannerConfig(budget=3, num_sample=3))
    assert reports[0].target == "CCO"
