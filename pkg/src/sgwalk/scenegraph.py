"""Typed directed multigraph of scene entities, plus traversal augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

OBJECT = "object"
ATTRIBUTE = "attribute"
HUB = "artificial-hub"
YES = "artificial-yes"
NO = "artificial-no"
ENTITY_KINDS = (OBJECT, ATTRIBUTE, HUB, YES, NO)
ARTIFICIAL_KINDS = (HUB, YES, NO)

HUB_ID, YES_ID, NO_ID = "hub", "yes", "no"
RESERVED_IDS = {HUB_ID, YES_ID, NO_ID}

NO_OP = "NO_OP"
HUB_EDGE = "HUB_EDGE"
TO_ANSWER = "TO_ANSWER"
RESERVED_RELATIONS = {NO_OP, HUB_EDGE, TO_ANSWER}
INVERSE_MARK = "^-1"


class GraphError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class RelationLabel:
    base: str
    is_inverse: bool = False

    @property
    def name(self) -> str:
        return self.base + INVERSE_MARK if self.is_inverse else self.base

    def inverse(self) -> "RelationLabel":
        return RelationLabel(self.base, not self.is_inverse)

    @classmethod
    def parse(cls, name: str) -> "RelationLabel":
        if name.endswith(INVERSE_MARK):
            return cls(name[: -len(INVERSE_MARK)], True)
        return cls(name)

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class SceneEntity:
    id: str
    label: str
    kind: str = OBJECT
    bbox: Optional[tuple[float, float, float, float]] = None


@dataclass(frozen=True)
class Triple:
    subject: str
    predicate: RelationLabel
    object: str


@dataclass
class SceneGraph:
    """Scene entities and (subject, predicate, object) triples.

    ``outgoing`` lists are sorted by (relation name, target id), which fixes
    action indices for the walk environment.
    """

    id: str = "graph"
    entities: dict[str, SceneEntity] = field(default_factory=dict)
    triples: set[Triple] = field(default_factory=set)
    augmented: bool = False
    _adj: dict[str, list[tuple[RelationLabel, str]]] = field(default_factory=dict, repr=False)
    _dirty: set[str] = field(default_factory=set, repr=False)

    def add_entity(self, entity_id: str, label: str, kind: str = OBJECT, bbox=None) -> SceneEntity:
        if self.augmented:
            raise GraphError("cannot add entities after augmentation")
        if kind not in ENTITY_KINDS:
            raise GraphError(f"unknown entity kind {kind!r}")
        if entity_id in self.entities:
            raise GraphError(f"duplicate entity id {entity_id!r}")
        if kind in (OBJECT, ATTRIBUTE) and entity_id in RESERVED_IDS:
            raise GraphError(f"entity id {entity_id!r} is reserved")
        ent = SceneEntity(entity_id, label, kind, tuple(bbox) if bbox is not None else None)
        self.entities[entity_id] = ent
        self._adj[entity_id] = []
        return ent

    def add_triple(self, subject: str, predicate, obj: str) -> "SceneGraph":
        if self.augmented:
            raise GraphError("cannot add triples after augmentation")
        rel = predicate if isinstance(predicate, RelationLabel) else RelationLabel.parse(predicate)
        if rel.base in RESERVED_RELATIONS or rel.is_inverse:
            raise GraphError(f"relation {rel.name!r} is reserved")
        self._insert(Triple(subject, rel, obj))
        return self

    def _insert(self, t: Triple) -> None:
        for end in (t.subject, t.object):
            if end not in self.entities:
                raise GraphError(f"unknown entity {end!r} in triple ({t.subject}, {t.predicate}, {t.object})")
        if t in self.triples:
            return
        self.triples.add(t)
        self._adj[t.subject].append((t.predicate, t.object))
        self._dirty.add(t.subject)

    def outgoing(self, entity_id: str) -> list[tuple[RelationLabel, str]]:
        if entity_id not in self.entities:
            raise GraphError(f"unknown entity {entity_id!r}")
        if entity_id in self._dirty:
            self._adj[entity_id].sort(key=lambda a: (a[0].name, a[1]))
            self._dirty.discard(entity_id)
        return list(self._adj[entity_id])

    def entity_ids(self) -> list[str]:
        return list(self.entities)

    def label(self, entity_id: str) -> str:
        return self.entities[entity_id].label

    def relation_names(self) -> set[str]:
        return {t.predicate.name for t in self.triples}

    def augment(self) -> "SceneGraph":
        """Return a new graph closed under inverses, with hub, yes/no nodes and NO_OP loops."""
        if self.augmented:
            raise GraphError(f"graph {self.id!r} is already augmented")
        g = SceneGraph(self.id)
        for e in self.entities.values():
            g.entities[e.id] = e
            g._adj[e.id] = []
        for e_id, lab, kind in ((HUB_ID, "hub", HUB), (YES_ID, "yes", YES), (NO_ID, "no", NO)):
            if e_id in g.entities:
                raise GraphError(f"graph already has an entity with reserved id {e_id!r}")
            g.entities[e_id] = SceneEntity(e_id, lab, kind)
            g._adj[e_id] = []
        for t in self.triples:
            g._insert(t)
            g._insert(Triple(t.object, t.predicate.inverse(), t.subject))
        hub_edge = RelationLabel(HUB_EDGE)
        for e in self.entities.values():
            if e.kind in ARTIFICIAL_KINDS:
                continue
            g._insert(Triple(HUB_ID, hub_edge, e.id))
            g._insert(Triple(e.id, hub_edge.inverse(), HUB_ID))
        no_op = RelationLabel(NO_OP)
        for e_id in g.entities:
            g._insert(Triple(e_id, no_op, e_id))
        g.augmented = True
        return g

    def base_triples(self) -> set[Triple]:
        """Scene triples with every artificial or inverse-marked triple removed."""
        return {
            t for t in self.triples
            if not t.predicate.is_inverse and t.predicate.base not in RESERVED_RELATIONS
        }

    def validate(self) -> list[str]:
        problems: list[str] = []
        kinds = [e.kind for e in self.entities.values()]
        for kind in ARTIFICIAL_KINDS:
            n = kinds.count(kind)
            if n > 1:
                problems.append(f"uniqueness: {n} entities of kind {kind}")
            elif self.augmented and n == 0:
                problems.append(f"artificial-nodes: augmented graph lacks a {kind} entity")
        for t in sorted(self.triples, key=_triple_key):
            for end in (t.subject, t.object):
                if end not in self.entities:
                    problems.append(f"dangling-endpoint: {end!r} in {_fmt(t)}")
            if not self.augmented and (t.predicate.is_inverse or t.predicate.base in RESERVED_RELATIONS):
                problems.append(f"reserved-relation: {_fmt(t)} in un-augmented graph")
            if self.augmented:
                inv = Triple(t.object, t.predicate.inverse(), t.subject)
                if t.predicate.base != NO_OP and inv not in self.triples:
                    problems.append(f"inverse-completeness: {_fmt(t)} has no inverse")
        if self.augmented:
            hubs = [e.id for e in self.entities.values() if e.kind == HUB]
            hub_targets = {o for s, o in ((t.subject, t.object) for t in self.triples
                                          if t.predicate == RelationLabel(HUB_EDGE))
                           if s in hubs}
            for e in self.entities.values():
                if e.kind not in ARTIFICIAL_KINDS and e.id not in hub_targets:
                    problems.append(f"hub-connectivity: no HUB_EDGE to {e.id!r}")
                if Triple(e.id, RelationLabel(NO_OP), e.id) not in self.triples:
                    problems.append(f"no-op-loop: {e.id!r} lacks its NO_OP self-loop")
            for t in self.triples:
                if self.entities.get(t.object) is not None and self.entities[t.object].kind in (YES, NO) \
                        and t.predicate.base != NO_OP:
                    problems.append(f"yes-no-edges: static edge {_fmt(t)} into answer node")
        return problems

    def arrays(self) -> "GraphArrays":
        """Integer-indexed adjacency of an augmented graph (cached)."""
        if not self.augmented:
            raise GraphError("arrays() requires an augmented graph")
        cached = self.__dict__.get("_arrays")
        if cached is None:
            cached = self.__dict__["_arrays"] = GraphArrays.build(self)
        return cached

    def copy(self) -> "SceneGraph":
        g = SceneGraph(self.id, dict(self.entities), set(self.triples), self.augmented)
        g._adj = {k: list(v) for k, v in self._adj.items()}
        g._dirty = set(self.entities)
        return g

    @classmethod
    def from_triples(cls, graph_id: str, entities: Iterable[tuple[str, str]] | Iterable[SceneEntity],
                     triples: Iterable[tuple[str, str, str]] = ()) -> "SceneGraph":
        g = cls(graph_id)
        for ent in entities:
            if isinstance(ent, SceneEntity):
                g.add_entity(ent.id, ent.label, ent.kind, ent.bbox)
            else:
                g.add_entity(*ent)
        for s, p, o in triples:
            g.add_triple(s, p, o)
        return g


def _triple_key(t: Triple):
    return (t.subject, t.predicate.name, t.object)


def _fmt(t: Triple) -> str:
    return f"({t.subject}, {t.predicate.name}, {t.object})"


@dataclass
class GraphArrays:
    """Node/relation indices and CSR outgoing actions for one augmented graph."""

    ids: list[str]
    labels: list[str]
    relations: list[str]
    ptr: np.ndarray
    act_rel: np.ndarray
    act_target: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    hub: int
    yes: int
    no: int

    @property
    def num_nodes(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, g: SceneGraph) -> "GraphArrays":
        ids = list(g.entities)
        index = {e: i for i, e in enumerate(ids)}
        relations = sorted(g.relation_names())
        rel_index = {r: i for i, r in enumerate(relations)}
        ptr, rel, tgt = [0], [], []
        for e in ids:
            for r, o in g.outgoing(e):
                rel.append(rel_index[r.name])
                tgt.append(index[o])
            ptr.append(len(rel))
        pairs = sorted({(index[t.subject], index[t.object]) for t in g.triples})
        src = np.array([p[0] for p in pairs], dtype=np.int64)
        dst = np.array([p[1] for p in pairs], dtype=np.int64)
        return cls(ids, [g.entities[e].label for e in ids], relations,
                   np.array(ptr, dtype=np.int64), np.array(rel, dtype=np.int64), np.array(tgt, dtype=np.int64),
                   src, dst, index[HUB_ID], index[YES_ID], index[NO_ID])
