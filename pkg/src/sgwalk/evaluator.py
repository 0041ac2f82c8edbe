"""GQA-style metric suite plus exhaustive oracles for small graphs.

Consistency, validity and plausibility follow the GQA-style glosses: they are
computed from per-question metadata (entailment groups, valid and plausible
answer sets) rather than re-derived from the GQA data.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import BINARY, OPEN, Corpus, QuestionRecord
from .scenegraph import HUB_ID, NO_OP, SceneGraph
from .walkenv import Action, EpisodeConfig, State, WalkEnv, answers_match

MAX_PATHS = 1_000_000
COLUMNS = ("binary", "open", "consistency", "validity", "plausibility", "accuracy")


class EvaluationError(ValueError):
    pass


class SearchOverflow(EvaluationError):
    pass


@dataclass
class MetricsReport:
    binary: float | None
    open: float | None
    consistency: float | None
    validity: float | None
    plausibility: float | None
    accuracy: float | None
    count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def table(self) -> str:
        heads = [c.capitalize() for c in COLUMNS]
        cells = ["N/A" if getattr(self, c) is None else f"{getattr(self, c):.2f}" for c in COLUMNS]
        widths = [max(len(h), len(v)) for h, v in zip(heads, cells)]
        return "\n".join([
            "  ".join(h.rjust(w) for h, w in zip(heads, widths)),
            "  ".join(v.rjust(w) for v, w in zip(cells, widths)),
        ])


def _pct(hits: Iterable[bool]) -> float | None:
    hits = list(hits)
    return 100.0 * sum(hits) / len(hits) if hits else None


def evaluate(preds: Mapping[str, str], questions: Sequence[QuestionRecord]) -> MetricsReport:
    """Score predicted answer strings against question metadata (exact, lowercased match)."""
    qids = {q.qid for q in questions}
    missing = qids - set(preds)
    extra = set(preds) - qids
    if missing or extra:
        raise EvaluationError(f"prediction/question id mismatch: missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]}")
    pred = {k: str(v).lower() for k, v in preds.items()}
    correct = {q.qid: pred[q.qid] == q.answer for q in questions}
    groups: dict[str, list[QuestionRecord]] = {}
    for q in questions:
        if q.group is not None:
            groups.setdefault(q.group, []).append(q)
    per_group = []
    for members in groups.values():
        anchors = [q for q in members if q.anchor] or [min(members, key=lambda q: q.qid)]
        anchor = anchors[0]
        entailed = [q for q in members if q is not anchor]
        if entailed and correct[anchor.qid]:
            per_group.append(sum(correct[q.qid] for q in entailed) / len(entailed))
    return MetricsReport(
        binary=_pct(correct[q.qid] for q in questions if q.type == BINARY),
        open=_pct(correct[q.qid] for q in questions if q.type == OPEN),
        consistency=100.0 * float(np.mean(per_group)) if per_group else None,
        validity=_pct(pred[q.qid] in q.valid for q in questions if q.valid is not None),
        plausibility=_pct(pred[q.qid] in q.plausible for q in questions if q.plausible is not None),
        accuracy=_pct(correct.values()),
        count=len(questions),
    )


# --- oracles -------------------------------------------------------------------------


def count_walks(g: SceneGraph, q: QuestionRecord, steps: int, env: EpisodeConfig | None = None) -> int:
    """Exact number of length-``steps`` walks from the hub, by dynamic programming."""
    env = env or EpisodeConfig(steps)
    walker = WalkEnv(g, EpisodeConfig(steps, env.binary_injection))
    counts = {HUB_ID: 1}
    for t in range(steps):
        nxt: dict[str, int] = {}
        for e, c in counts.items():
            for a in walker.admissible_actions(State(e, q, t)):
                nxt[a.target] = nxt.get(a.target, 0) + c
        counts = nxt
    return sum(counts.values())


@dataclass
class OracleResult:
    reachable: bool
    path: list[Action] | None
    walks: int


def oracle_search(g: SceneGraph, q: QuestionRecord, steps: int, env: EpisodeConfig | None = None,
                  limit: int = MAX_PATHS) -> OracleResult:
    """Enumerate every walk of ``steps`` transitions from the hub.

    Returns whether any walk ends at a correct node, and the first such walk
    (in action order) with the fewest non-NO_OP transitions.
    """
    total = count_walks(g, q, steps, env)
    if total > limit:
        raise SearchOverflow(f"{total} walks of length {steps} exceed the enumeration limit {limit}")
    binj = True if env is None else env.binary_injection
    walker = WalkEnv(g, EpisodeConfig(steps, binj))
    best: list[Action] | None = None
    best_hops = steps + 1

    def visit(state: State, path: list[Action]):
        nonlocal best, best_hops
        if state.t == steps:
            if answers_match(g, state.entity, q):
                hops = sum(a.relation.base != NO_OP for a in path)
                if hops < best_hops:
                    best, best_hops = list(path), hops
            return
        for a in walker.admissible_actions(state):
            path.append(a)
            visit(State(a.target, q, state.t + 1), path)
            path.pop()

    visit(State(HUB_ID, q, 0), [])
    return OracleResult(best is not None, best, total)


def reachable(g: SceneGraph, q: QuestionRecord, steps: int, env: EpisodeConfig | None = None) -> bool:
    """Set-based reachability of a correct terminal node (no enumeration)."""
    binj = True if env is None else env.binary_injection
    walker = WalkEnv(g, EpisodeConfig(steps, binj))
    frontier = {HUB_ID}
    for t in range(steps):
        frontier = {a.target for e in frontier for a in walker.admissible_actions(State(e, q, t))}
    return any(answers_match(g, e, q) for e in frontier)


def random_walk_success(g: SceneGraph, q: QuestionRecord, steps: int, env: EpisodeConfig | None = None) -> float:
    """Probability that a uniform-random walker ends on a correct node."""
    binj = True if env is None else env.binary_injection
    walker = WalkEnv(g, EpisodeConfig(steps, binj))
    dist = {HUB_ID: 1.0}
    for t in range(steps):
        nxt: dict[str, float] = {}
        for e, p in dist.items():
            acts = walker.admissible_actions(State(e, q, t))
            share = p / len(acts)
            for a in acts:
                nxt[a.target] = nxt.get(a.target, 0.0) + share
        dist = nxt
    return sum(p for e, p in dist.items() if answers_match(g, e, q))


def chance_level(corpus: Corpus, questions: Sequence[QuestionRecord], steps: int,
                 env: EpisodeConfig | None = None) -> float:
    """Expected accuracy (percent) of a uniform-random walker, averaged over ``questions``."""
    if not questions:
        raise EvaluationError("no questions")
    for q in questions:
        n = count_walks(corpus.augmented(q.graph), q, steps, env)
        if n > MAX_PATHS:
            raise SearchOverflow(f"question {q.qid}: {n} walks exceed the limit {MAX_PATHS}")
    return 100.0 * float(np.mean([random_walk_success(corpus.augmented(q.graph), q, steps, env) for q in questions]))


def monte_carlo_chance(corpus: Corpus, questions: Sequence[QuestionRecord], steps: int, episodes: int,
                       seed: int = 0, env: EpisodeConfig | None = None) -> float:
    """Simulated accuracy (percent) of the uniform-random walker over ``episodes`` sampled questions."""
    rng = np.random.default_rng(seed)
    binj = True if env is None else env.binary_injection
    picks = rng.integers(len(questions), size=episodes)
    hits = 0
    cache: dict[tuple[str, str, int, bool], list[Action]] = {}
    for qi in picks:
        q = questions[qi]
        g = corpus.augmented(q.graph)
        walker = WalkEnv(g, EpisodeConfig(steps, binj))
        e = HUB_ID
        for t in range(steps):
            key = (g.id, e, t == steps - 1, q.type == BINARY)
            acts = cache.get(key)
            if acts is None:
                acts = cache[key] = walker.admissible_actions(State(e, q, t))
            e = acts[int(rng.integers(len(acts)))].target
        hits += answers_match(g, e, q)
    return 100.0 * hits / episodes


def oracle_rate(corpus: Corpus, questions: Sequence[QuestionRecord], steps: int,
                env: EpisodeConfig | None = None) -> float:
    """Percentage of questions with a reachable correct terminal node."""
    return 100.0 * float(np.mean([reachable(corpus.augmented(q.graph), q, steps, env) for q in questions]))
