"""Walk environment over an augmented scene graph.

Episodes start at the hub and last exactly ``T`` transitions.  Binary
questions get two extra actions, ``(TO_ANSWER, yes)`` and ``(TO_ANSWER, no)``,
on the last transition only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import BINARY, QuestionRecord
from .scenegraph import HUB_ID, NO_ID, TO_ANSWER, YES_ID, RelationLabel, SceneGraph


class EnvError(RuntimeError):
    pass


@dataclass
class EpisodeConfig:
    steps: int = 4
    binary_injection: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("episode length T must be >= 1")


@dataclass(frozen=True)
class Action:
    relation: RelationLabel
    target: str

    def __str__(self) -> str:
        return f"{self.relation.name}->{self.target}"


@dataclass(frozen=True)
class State:
    entity: str
    question: QuestionRecord
    t: int = 0


@dataclass
class EpisodeTrace:
    qid: str
    actions: list[Action] = field(default_factory=list)
    entities: list[str] = field(default_factory=lambda: [HUB_ID])
    dists: list[list[tuple[str, float]]] = field(default_factory=list)
    reward: int = 0
    log_prob: float = 0.0
    answer: str = ""

    def to_dict(self) -> dict:
        steps = []
        for i, a in enumerate(self.actions):
            step = {"from": self.entities[i], "relation": a.relation.name, "to": a.target}
            step["dist"] = [[name, p] for name, p in self.dists[i]] if i < len(self.dists) else []
            steps.append(step)
        return {"qid": self.qid, "steps": steps, "reward": self.reward}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def answers_match(g: SceneGraph, entity: str, q: QuestionRecord) -> bool:
    if q.type == BINARY:
        return entity == (YES_ID if q.answer == "yes" else NO_ID)
    return g.label(entity).lower() == q.answer


class WalkEnv:
    """Single-episode environment; ``graph`` must be augmented."""

    def __init__(self, graph: SceneGraph, cfg: EpisodeConfig | None = None):
        if not graph.augmented:
            raise EnvError(f"graph {graph.id!r} is not augmented")
        self.graph = graph
        self.cfg = cfg or EpisodeConfig()

    def reset(self, q: QuestionRecord) -> State:
        if q.graph != self.graph.id:
            raise EnvError(f"question {q.qid} refers to graph {q.graph!r}, environment holds {self.graph.id!r}")
        return State(HUB_ID, q, 0)

    def admissible_actions(self, s: State) -> list[Action]:
        acts = [Action(r, o) for r, o in self.graph.outgoing(s.entity)]
        if self.cfg.binary_injection and s.question.type == BINARY and s.t == self.cfg.steps - 1:
            to_answer = RelationLabel(TO_ANSWER)
            acts += [Action(to_answer, YES_ID), Action(to_answer, NO_ID)]
        return acts

    def step(self, s: State, a: Action) -> State:
        if s.t >= self.cfg.steps:
            raise EnvError(f"episode already has {self.cfg.steps} transitions")
        if a not in self.admissible_actions(s):
            raise EnvError(f"action {a} not admissible at {s.entity!r}, t={s.t}")
        return State(a.target, s.question, s.t + 1)

    def terminal_reward(self, trace: EpisodeTrace, q: QuestionRecord) -> int:
        if len(trace.actions) != self.cfg.steps:
            raise EnvError(f"trace has {len(trace.actions)} transitions, expected {self.cfg.steps}")
        return int(answers_match(self.graph, trace.entities[-1], q))


def terminal_reward(g: SceneGraph, trace: EpisodeTrace, q: QuestionRecord, cfg: EpisodeConfig | None = None) -> int:
    return WalkEnv(g, cfg).terminal_reward(trace, q)


class GraphBatch:
    """Several augmented graphs laid out as one disjoint union.

    Node, relation and action indices are global to the batch.  Relation index
    ``len(relations) - 1`` is TO_ANSWER.
    """

    def __init__(self, graphs: Sequence[SceneGraph]):
        self.graphs = list(graphs)
        self.graph_index = {g.id: i for i, g in enumerate(self.graphs)}
        arrs = [g.arrays() for g in self.graphs]
        labels: list[str] = []
        label_idx: dict[str, int] = {}
        rel_names = sorted({r for a in arrs for r in a.relations})
        rel_idx = {r: i for i, r in enumerate(rel_names)}
        self.relations = rel_names + [TO_ANSWER]
        self.to_answer = len(rel_names)
        offsets = np.cumsum([0] + [a.num_nodes for a in arrs])
        self.offsets = offsets
        node_label, ptr, act_rel, act_tgt, src, dst = [], [np.zeros(1, dtype=np.int64)], [], [], [], []
        self.node_ids: list[tuple[str, str]] = []
        n_acts = 0
        for off, g, a in zip(offsets, self.graphs, arrs):
            for e, lab in zip(a.ids, a.labels):
                if lab not in label_idx:
                    label_idx[lab] = len(labels)
                    labels.append(lab)
                node_label.append(label_idx[lab])
                self.node_ids.append((g.id, e))
            ptr.append(a.ptr[1:] + n_acts)
            n_acts += len(a.act_rel)
            remap = np.array([rel_idx[r] for r in a.relations], dtype=np.int64)
            act_rel.append(remap[a.act_rel] if len(a.act_rel) else a.act_rel)
            act_tgt.append(a.act_target + off)
            src.append(a.src + off)
            dst.append(a.dst + off)
        self.labels = labels
        self.node_label = np.array(node_label, dtype=np.int64)
        self.ptr = np.concatenate(ptr)
        self.act_rel = np.concatenate(act_rel)
        self.act_target = np.concatenate(act_tgt)
        self.src = np.concatenate(src)
        self.dst = np.concatenate(dst)
        self.hub = np.array([a.hub for a in arrs]) + offsets[:-1]
        self.yes = np.array([a.yes for a in arrs]) + offsets[:-1]
        self.no = np.array([a.no for a in arrs]) + offsets[:-1]
        self.num_nodes = int(offsets[-1])

    def entity(self, node: int) -> str:
        return self.node_ids[node][1]

    def node_label_text(self, node: int) -> str:
        return self.labels[self.node_label[node]]

    def actions(self, cur: np.ndarray, inject: np.ndarray, graph_of: np.ndarray):
        """Flattened admissible actions for episodes at nodes ``cur``.

        Returns ``(owner, rel, target)`` arrays grouped by owner episode in the
        same order as :meth:`WalkEnv.admissible_actions`.
        """
        start, stop = self.ptr[cur], self.ptr[cur + 1]
        counts = stop - start
        owner = np.repeat(np.arange(len(cur)), counts)
        first = np.repeat(np.cumsum(counts) - counts, counts)
        flat = np.arange(counts.sum()) - first + np.repeat(start, counts)
        rel, tgt = self.act_rel[flat], self.act_target[flat]
        inj = np.flatnonzero(inject)
        if len(inj):
            owner = np.concatenate([owner, inj, inj])
            rel = np.concatenate([rel, np.full(2 * len(inj), self.to_answer)])
            tgt = np.concatenate([tgt, self.yes[graph_of[inj]], self.no[graph_of[inj]]])
            kind = np.concatenate([np.zeros(len(flat)), np.ones(len(inj)), np.full(len(inj), 2)])
            order = np.lexsort((kind, owner))
            owner, rel, tgt = owner[order], rel[order], tgt[order]
        return owner, rel, tgt
