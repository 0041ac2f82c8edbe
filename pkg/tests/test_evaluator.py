from fractions import Fraction

import numpy as np
import pytest

from helpers import EXPECTED, metric_fixture, one_triple_graph, question, random_graph
from sgwalk.corpus import Corpus, SyntheticConfig, generate_synthetic_corpus
from sgwalk.evaluator import (
    EvaluationError,
    SearchOverflow,
    chance_level,
    count_walks,
    evaluate,
    monte_carlo_chance,
    oracle_rate,
    oracle_search,
    random_walk_success,
    reachable,
)
from sgwalk.scenegraph import HUB_EDGE, NO_OP, TO_ANSWER, YES_ID, SceneGraph
from sgwalk.walkenv import EpisodeConfig, State, WalkEnv, answers_match

def test_metric_fixture_by_hand():
    qs, preds = metric_fixture()
    report = evaluate(preds, qs)
    for col, want in EXPECTED.items():
        assert round(getattr(report, col), 1) == want, col
    assert report.count == 10


def test_table_and_json():
    qs, preds = metric_fixture()
    report = evaluate(preds, qs)
    lines = report.table().splitlines()
    assert lines[0].split() == ["Binary", "Open", "Consistency", "Validity", "Plausibility", "Accuracy"]
    assert lines[1].split() == ["75.00", "50.00", "25.00", "87.50", "57.14", "60.00"]
    assert '"accuracy": 60.0' in report.to_json()


def test_absent_question_types_are_na():
    report = evaluate({"q": "red"}, [question("q", "g", "red")])
    assert report.binary is None and report.consistency is None
    assert "N/A" in report.table()


def test_prediction_id_mismatch():
    qs, preds = metric_fixture()
    del preds["q3"]
    with pytest.raises(EvaluationError, match="q3"):
        evaluate(preds, qs)


def test_group_without_anchor_flag_uses_smallest_id():
    qs = [question("b", "g", "x", group="G"), question("a", "g", "y", group="G")]
    assert evaluate({"a": "y", "b": "x"}, qs).consistency == 100.0
    assert evaluate({"a": "n", "b": "x"}, qs).consistency is None


# --- oracles against brute force ------------------------------------------------------


def brute(g, q, steps, binary_injection=True):
    """All walks with their exact uniform-walker probability."""
    env = WalkEnv(g, EpisodeConfig(steps, binary_injection))
    out = []

    def rec(s, path, p):
        if s.t == steps:
            out.append((path, s.entity, p))
            return
        acts = env.admissible_actions(s)
        for a in acts:
            rec(env.step(s, a), path + [a], p / len(acts))

    rec(env.reset(q), [], Fraction(1))
    return out


def test_counts_and_chance_on_tiny_graph():
    g = one_triple_graph().augment()
    q = question("q", "tiny", "cup")
    walks = brute(g, q, 2)
    # every node of the tiny graph has three actions, so 3 * 3 walks
    assert count_walks(g, q, 2) == len(walks) == 9
    # cup is reached by a->NO_OP, b->on^-1 and hub->HUB_EDGE, each with probability 1/9
    exact = sum(p for _, end, p in walks if g.label(end) == "cup")
    assert exact == Fraction(3, 9)
    assert random_walk_success(g, q, 2) == pytest.approx(float(exact), abs=1e-15)


def test_oracles_match_brute_force_on_random_graphs():
    rng = np.random.default_rng(0)
    for i in range(60):
        g = random_graph(rng, max_entities=6, max_triples=8).augment()
        binary = bool(rng.random() < 0.4)
        labels = sorted({e.label for e in g.entities.values()})
        ans = ("yes" if rng.random() < 0.5 else "no") if binary else labels[int(rng.integers(len(labels)))]
        q = question("q", g.id, ans, binary)
        steps = int(rng.integers(1, 4))
        walks = brute(g, q, steps)
        hits = [(path, p) for path, end, p in walks if answers_match(g, end, q)]
        assert count_walks(g, q, steps) == len(walks)
        assert random_walk_success(g, q, steps) == pytest.approx(float(sum(p for _, p in hits)), abs=1e-12)
        res = oracle_search(g, q, steps)
        assert res.reachable == bool(hits) == reachable(g, q, steps)
        if hits:
            fewest = min(sum(a.relation.base != NO_OP for a in path) for path, _ in hits)
            assert sum(a.relation.base != NO_OP for a in res.path) == fewest
            assert any(path == res.path for path, _ in hits)


def test_oracle_paths_from_hub():
    g = SceneGraph.from_triples("s", [("b", "ball"), ("r", "red")], [("b", "is", "r")]).augment()
    res = oracle_search(g, question("q", "s", "red"), 3)
    assert [(a.relation.name, a.target) for a in res.path] == [(HUB_EDGE, "r"), (NO_OP, "r"), (NO_OP, "r")]
    res = oracle_search(g, question("q", "s", "yes", True, text="is there a ball"), 2)
    assert [(a.relation.name, a.target) for a in res.path] == [(NO_OP, "hub"), (TO_ANSWER, YES_ID)]


def test_binary_unreachable_without_injection():
    g = one_triple_graph().augment()
    q = question("q", "tiny", "yes", True)
    assert reachable(g, q, 3)
    assert not reachable(g, q, 3, EpisodeConfig(3, binary_injection=False))


def test_search_overflow():
    g = one_triple_graph().augment()
    q = question("q", "tiny", "cup")
    with pytest.raises(SearchOverflow):
        oracle_search(g, q, 6, limit=100)


def test_corpus_level_chance_and_oracle_rate():
    c = generate_synthetic_corpus(SyntheticConfig(num_graphs=6, seed=1))
    qs = c.split("train")
    assert oracle_rate(c, qs, 4) == 100.0
    ch = chance_level(c, qs, 4)
    assert 0.0 < ch < 100.0
    assert monte_carlo_chance(c, qs, 4, 20000, seed=3) == pytest.approx(ch, abs=2.0)
    with pytest.raises(EvaluationError):
        chance_level(c, [], 4)


def test_monte_carlo_of_single_question_is_binomial():
    g = one_triple_graph()
    c = Corpus({"tiny": g}, [question("q", "tiny", "cup")], {"q": "train"})
    assert monte_carlo_chance(c, c.questions, 2, 30000, seed=1) == pytest.approx(100 / 3, abs=1.0)


def test_walk_state_helper_consistent():
    g = one_triple_graph().augment()
    env = WalkEnv(g, EpisodeConfig(2))
    q = question("q", "tiny", "cup")
    assert len(env.admissible_actions(State("hub", q, 0))) == 3
