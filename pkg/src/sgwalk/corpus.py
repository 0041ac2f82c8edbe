"""Scene-graph, question and word-vector files; GQA import; synthetic corpora."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .scenegraph import (
    ATTRIBUTE,
    HUB_EDGE,
    HUB_ID,
    NO_ID,
    NO_OP,
    OBJECT,
    TO_ANSWER,
    YES_ID,
    GraphError,
    RelationLabel,
    SceneGraph,
)

BINARY, OPEN = "binary", "open"
SPLITS = ("train", "validation", "test")
UNK = "<unk>"

_TOKEN = re.compile(r"[a-z0-9]+")


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN.findall(text.lower())


# --- questions ----------------------------------------------------------------


@dataclass
class QuestionRecord:
    qid: str
    graph: str
    tokens: list[str]
    answer: str
    type: str = OPEN
    valid: Optional[list[str]] = None
    plausible: Optional[list[str]] = None
    group: Optional[str] = None
    anchor: bool = False

    def __post_init__(self):
        self.answer = self.answer.lower()
        if self.type not in (BINARY, OPEN):
            raise CorpusError(f"question {self.qid}: unknown type {self.type!r}")
        if self.type == BINARY and self.answer not in ("yes", "no"):
            raise CorpusError(f"question {self.qid}: binary question with answer {self.answer!r}")
        if self.valid is not None and self.answer not in self.valid:
            raise CorpusError(f"question {self.qid}: answer {self.answer!r} not in its valid set")
        if not self.tokens:
            raise CorpusError(f"question {self.qid}: no tokens")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_json(self) -> str:
        d = {"qid": self.qid, "graph": self.graph, "tokens": self.tokens, "answer": self.answer, "type": self.type}
        for key in ("valid", "plausible", "group"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        if self.anchor:
            d["anchor"] = True
        return json.dumps(d)

    @classmethod
    def from_dict(cls, d: dict) -> "QuestionRecord":
        unknown = set(d) - {"qid", "graph", "tokens", "answer", "type", "valid", "plausible", "group", "anchor"}
        if unknown:
            raise CorpusError(f"unknown question fields {sorted(unknown)}")
        try:
            return cls(str(d["qid"]), str(d["graph"]), [str(t) for t in d["tokens"]], str(d["answer"]),
                       d.get("type", OPEN), d.get("valid"), d.get("plausible"), d.get("group"),
                       bool(d.get("anchor", False)))
        except KeyError as exc:
            raise CorpusError(f"question record missing field {exc.args[0]!r}") from None


def load_questions(path) -> list[QuestionRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc.msg}") from None
            try:
                out.append(QuestionRecord.from_dict(d))
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return out


def save_questions(questions: Iterable[QuestionRecord], path) -> None:
    Path(path).write_text("".join(q.to_json() + "\n" for q in questions))


# --- scene graph files ----------------------------------------------------------


def graph_to_dict(g: SceneGraph) -> dict:
    if g.augmented:
        raise GraphError("only un-augmented graphs are serialized")
    ents = []
    for e in g.entities.values():
        d = {"id": e.id, "label": e.label, "kind": e.kind}
        if e.bbox is not None:
            d["bbox"] = list(e.bbox)
        ents.append(d)
    triples = sorted([t.subject, t.predicate.name, t.object] for t in g.triples)
    return {"id": g.id, "entities": ents, "triples": triples}


def graph_from_dict(d: dict, source: str = "<graph>", check: bool = True) -> SceneGraph:
    for key in ("id", "entities", "triples"):
        if key not in d:
            raise CorpusError(f"{source}: missing field {key!r}")
    g = SceneGraph(str(d["id"]))
    for i, e in enumerate(d["entities"]):
        try:
            kind = e.get("kind", OBJECT)
            if kind not in (OBJECT, ATTRIBUTE):
                raise CorpusError(f"{source}: entities[{i}].kind must be object or attribute, got {kind!r}")
            g.add_entity(str(e["id"]), str(e["label"]), kind, e.get("bbox"))
        except KeyError as exc:
            raise CorpusError(f"{source}: entities[{i}] missing field {exc.args[0]!r}") from None
        except GraphError as exc:
            raise CorpusError(f"{source}: entities[{i}]: {exc}") from None
    for i, t in enumerate(d["triples"]):
        if len(t) != 3:
            raise CorpusError(f"{source}: triples[{i}] must have 3 elements")
        try:
            g.add_triple(str(t[0]), str(t[1]), str(t[2]))
        except GraphError as exc:
            raise CorpusError(f"{source}: triples[{i}]: {exc}") from None
    problems = g.validate() if check else []
    if problems:
        raise CorpusError(f"{source}: " + "; ".join(problems))
    return g


def dump_graph(g: SceneGraph) -> str:
    return json.dumps(graph_to_dict(g), indent=1) + "\n"


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def load_scene_graph(path, check: bool = True) -> SceneGraph:
    return graph_from_dict(read_json(path), str(path), check)


def save_scene_graph(g: SceneGraph, path) -> None:
    Path(path).write_text(dump_graph(g))


def import_gqa(scene: dict, graph_id: str = "gqa") -> SceneGraph:
    """Convert one GQA scene record (``objects`` keyed by id) to a native graph.

    Objects become ``<name>-<id>`` entities, each attribute an ``<attr>-<id>``
    entity joined by an ``is`` triple, and each relation a triple.
    """
    objects = scene.get("objects")
    if not isinstance(objects, dict):
        raise CorpusError(f"GQA scene {graph_id}: missing 'objects' mapping")
    g = SceneGraph(str(graph_id))
    ids = {}
    for oid, obj in objects.items():
        name = str(obj["name"]).lower()
        bbox = None
        if all(k in obj for k in ("x", "y", "w", "h")):
            bbox = (obj["x"], obj["y"], obj["w"], obj["h"])
        ids[oid] = f"{name}-{oid}"
        g.add_entity(ids[oid], name, OBJECT, bbox)
    for oid, obj in objects.items():
        for attr in obj.get("attributes", []):
            attr = str(attr).lower()
            aid = f"{attr}-{oid}"
            if aid not in g.entities:
                g.add_entity(aid, attr, ATTRIBUTE)
            g.add_triple(ids[oid], "is", aid)
        for rel in obj.get("relations", []):
            target = str(rel["object"])
            if target not in ids:
                raise CorpusError(f"GQA scene {graph_id}: object {oid} relates to missing object {target}")
            g.add_triple(ids[oid], str(rel["name"]).lower(), ids[target])
    return g


def is_gqa(data) -> bool:
    """True for one GQA scene record or a mapping of scene id to records."""
    if not isinstance(data, dict):
        return False
    if "objects" in data:
        return True
    return bool(data) and all(isinstance(v, dict) and "objects" in v for v in data.values())


def load_gqa_scenes(path) -> dict[str, SceneGraph]:
    data = read_json(path)
    if "objects" in data:
        data = {Path(path).stem: data}
    return {str(k): import_gqa(v, str(k)) for k, v in data.items()}


# --- word vectors -----------------------------------------------------------------


class EmbeddingTable:
    """Word vectors with an unknown-token fallback; row 0 is the unknown token."""

    def __init__(self, words: list[str], vectors: np.ndarray, unk: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        self.dim = int(unk.shape[0])
        if vectors.shape != (len(words), self.dim):
            raise CorpusError(f"embedding table: {vectors.shape} vectors for {len(words)} words of dim {self.dim}")
        self.words = [UNK] + [w for w in words if w != UNK]
        self.matrix = np.vstack([unk[None, :], vectors[[i for i, w in enumerate(words) if w != UNK]]])
        self._index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def index(self, word: str) -> int:
        return self._index.get(word, 0)

    def lookup(self, word: str) -> np.ndarray:
        return self.matrix[self.index(word)]

    @property
    def unk(self) -> np.ndarray:
        return self.matrix[0]

    def vocab_hash(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode()).hexdigest()[:16]

    @classmethod
    def for_vocabulary(cls, vocab: Iterable[str], dim: int, seed: int = 0,
                       pretrained: "EmbeddingTable | None" = None) -> "EmbeddingTable":
        """Table over ``vocab`` (sorted); rows come from ``pretrained`` when it knows the word."""
        words = sorted(set(vocab) - {UNK})
        rng = np.random.default_rng([seed, 7])
        bound = 1.0 / math.sqrt(dim)
        vecs = rng.uniform(-bound, bound, (len(words) + 1, dim))
        if pretrained is not None:
            if pretrained.dim != dim:
                raise CorpusError(f"pretrained vectors have dim {pretrained.dim}, model uses {dim}")
            for i, w in enumerate(words):
                if w in pretrained:
                    vecs[i + 1] = pretrained.lookup(w)
        return cls(words, vecs[1:], vecs[0])


def load_embeddings(path, d: int = 300, seed: int = 0) -> EmbeddingTable:
    words, vecs = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != d + 1:
                raise CorpusError(f"{path}:{lineno}: expected a word and {d} values, got {len(parts) - 1} values")
            try:
                vecs.append([float(v) for v in parts[1:]])
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: non-numeric vector entry") from None
            words.append(parts[0])
    rng = np.random.default_rng([seed, 11])
    bound = 1.0 / math.sqrt(d)
    return EmbeddingTable(words, np.array(vecs).reshape(len(words), d), rng.uniform(-bound, bound, d))


# --- corpora ------------------------------------------------------------------------


@dataclass
class CorpusManifest:
    entries: list[dict]  # {"graph": path, "questions": path, "split": tag}
    seed: int = 0
    config: dict = field(default_factory=dict)
    root: Optional[Path] = None

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "config": self.config, "entries": self.entries}, indent=1) + "\n"

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        for e in d["entries"]:
            if e.get("split") not in SPLITS:
                raise CorpusError(f"{path}: bad split tag {e.get('split')!r}")
        return cls(d["entries"], d.get("seed", 0), d.get("config", {}), path.parent)


@dataclass
class Corpus:
    graphs: dict[str, SceneGraph]
    questions: list[QuestionRecord]
    split_of: dict[str, str]
    seed: int = 0
    oracle_paths: dict[str, list] = field(default_factory=dict, repr=False)
    _augmented: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for q in self.questions:
            if q.graph not in self.graphs:
                raise CorpusError(f"question {q.qid} refers to unknown graph {q.graph!r}")
        qids = [q.qid for q in self.questions]
        if len(set(qids)) != len(qids):
            raise CorpusError("duplicate question ids")

    def split(self, name: str) -> list[QuestionRecord]:
        return [q for q in self.questions if self.split_of.get(q.qid) == name]

    def question(self, qid: str) -> QuestionRecord:
        for q in self.questions:
            if q.qid == qid:
                return q
        raise KeyError(qid)

    def augmented(self, graph_id: str) -> SceneGraph:
        g = self._augmented.get(graph_id)
        if g is None:
            g = self._augmented[graph_id] = self.graphs[graph_id].augment()
        return g

    def vocabulary(self) -> set[str]:
        words = {"hub", "yes", "no"}
        for g in self.graphs.values():
            for e in g.entities.values():
                words.update(tokenize(e.label))
            for t in g.triples:
                words.update(tokenize(t.predicate.base))
        for q in self.questions:
            words.update(q.tokens)
        return words


def load_corpus(path) -> Corpus:
    manifest = CorpusManifest.load(path)
    graphs, questions, split_of = {}, [], {}
    for e in manifest.entries:
        g = load_scene_graph(manifest.root / e["graph"])
        graphs[g.id] = g
        for q in load_questions(manifest.root / e["questions"]):
            questions.append(q)
            split_of[q.qid] = e["split"]
    paths_file = manifest.root / "oracle_paths.json"
    paths = json.loads(paths_file.read_text()) if paths_file.exists() else {}
    return Corpus(graphs, questions, split_of, manifest.seed, paths)


# --- synthetic generator --------------------------------------------------------------

OBJECTS = ["ball", "cup", "table", "chair", "lamp", "book", "car", "dog", "cat", "bottle",
           "plate", "box", "vase", "phone", "bag", "shoe", "hat", "clock", "tree", "bench"]
ATTRIBUTE_CLASSES = {
    "color": ["red", "blue", "green", "yellow", "white", "black", "brown", "gray"],
    "material": ["wood", "metal", "plastic", "glass", "leather"],
    "size": ["small", "large", "tiny", "huge"],
}
RELATIONS = ["on", "under", "behind", "in front of", "to the left of", "to the right of", "next to", "near"]
TEMPLATES = ("attribute", "relation", "existence", "attribute_yesno")


@dataclass
class SyntheticConfig:
    num_graphs: int = 200
    min_entities: int = 8
    max_entities: int = 15
    questions_per_graph: int = 10
    objects: list[str] = field(default_factory=lambda: list(OBJECTS))
    attribute_classes: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in ATTRIBUTE_CLASSES.items()})
    relations: list[str] = field(default_factory=lambda: list(RELATIONS))
    templates: list[str] = field(default_factory=lambda: list(TEMPLATES))
    max_steps: int = 4
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if not self.objects or not self.relations or not self.attribute_classes:
            raise CorpusError("synthetic vocabularies must be nonempty")
        bad = set(self.templates) - set(TEMPLATES)
        if bad or not self.templates:
            raise CorpusError(f"unknown templates {sorted(bad)}")
        if not 1 <= self.min_entities <= self.max_entities:
            raise CorpusError("entity range must satisfy 1 <= min <= max")


class _Unsatisfiable(Exception):
    pass


def _plausible_map(cfg: SyntheticConfig) -> dict[tuple[str, str], list[str]]:
    rng = np.random.default_rng([cfg.seed, 3])
    out = {}
    for obj in cfg.objects:
        for cls_name, values in cfg.attribute_classes.items():
            k = max(1, math.ceil(0.6 * len(values)))
            out[obj, cls_name] = sorted(rng.choice(values, size=k, replace=False).tolist())
    return out


def _sample_graph(rng, gid: str, cfg: SyntheticConfig, plausible) -> tuple[SceneGraph, dict]:
    n_total = int(rng.integers(cfg.min_entities, cfg.max_entities + 1))
    n_classes = len(cfg.attribute_classes)
    lo = max(1, math.ceil(n_total / (1 + n_classes)))
    hi = min(len(cfg.objects), n_total, max(lo, n_total // 2))
    if lo > hi:
        raise CorpusError("entity range cannot be met with the given vocabularies")
    n_obj = int(rng.integers(lo, hi + 1))
    labels = rng.choice(cfg.objects, size=n_obj, replace=False).tolist()
    counts = [0] * n_obj
    for _ in range(n_total - n_obj):
        free = [i for i in range(n_obj) if counts[i] < n_classes]
        counts[free[int(rng.integers(len(free)))]] += 1
    g = SceneGraph(gid)
    facts = {"objects": {}, "attrs": {}}
    k = 0
    obj_ids = []
    for lab in labels:
        eid = f"{lab}-{k}"
        k += 1
        g.add_entity(eid, lab, OBJECT)
        obj_ids.append(eid)
        facts["objects"][lab] = eid
    class_names = list(cfg.attribute_classes)
    for i, eid in enumerate(obj_ids):
        chosen = sorted(rng.choice(len(class_names), size=counts[i], replace=False).tolist())
        for c in chosen:
            cls_name = class_names[c]
            options = plausible[labels[i], cls_name]
            val = options[int(rng.integers(len(options)))]
            aid = f"{val}-{k}"
            k += 1
            g.add_entity(aid, val, ATTRIBUTE)
            g.add_triple(eid, "is", aid)
            facts["attrs"][eid, cls_name] = aid
    if n_obj > 1:
        n_rel = int(rng.integers(n_obj - 1, n_obj + 2))
        for _ in range(n_rel):
            s, o = rng.choice(n_obj, size=2, replace=False)
            rel = cfg.relations[int(rng.integers(len(cfg.relations)))]
            g.add_triple(obj_ids[s], rel, obj_ids[o])
    return g, facts


def _question(rng, g: SceneGraph, facts, template: str, cfg: SyntheticConfig, plausible):
    """Return (tokens, answer, type, valid, plausible, path, extra) or raise _Unsatisfiable."""
    objs = facts["objects"]
    yes_no = ["yes", "no"]
    if template == "attribute":
        keys = sorted(facts["attrs"])
        if not keys:
            raise _Unsatisfiable
        eid, cls_name = keys[int(rng.integers(len(keys)))]
        aid = facts["attrs"][eid, cls_name]
        obj = g.label(eid)
        text = f"what is the {cls_name} of the {obj}"
        path = [(HUB_EDGE, eid), ("is", aid)]
        return (text, g.label(aid), OPEN, list(cfg.attribute_classes[cls_name]),
                plausible[obj, cls_name], path)
    if template == "relation":
        by_target: dict[tuple[str, str], list[str]] = {}
        for t in g.base_triples():
            if t.predicate.base != "is":
                by_target.setdefault((t.predicate.base, t.object), []).append(t.subject)
        keys = sorted(k for k, subs in by_target.items() if len(subs) == 1)
        if not keys:
            raise _Unsatisfiable
        rel, target = keys[int(rng.integers(len(keys)))]
        subject = by_target[rel, target][0]
        text = f"what is {rel} the {g.label(target)}"
        path = [(HUB_EDGE, target), (RelationLabel(rel, True).name, subject)]
        return text, g.label(subject), OPEN, list(cfg.objects), list(cfg.objects), path
    if template == "existence":
        if rng.random() < 0.5:
            lab = sorted(objs)[int(rng.integers(len(objs)))]
            return (f"is there a {lab}", "yes", BINARY, yes_no, yes_no,
                    [(HUB_EDGE, objs[lab]), (TO_ANSWER, YES_ID)])
        absent = sorted(set(cfg.objects) - set(objs))
        if not absent:
            raise _Unsatisfiable
        lab = absent[int(rng.integers(len(absent)))]
        return f"is there a {lab}", "no", BINARY, yes_no, yes_no, [(TO_ANSWER, NO_ID)]
    if template == "attribute_yesno":
        keys = sorted(facts["attrs"])
        if not keys:
            raise _Unsatisfiable
        eid, cls_name = keys[int(rng.integers(len(keys)))]
        aid = facts["attrs"][eid, cls_name]
        obj = g.label(eid)
        if rng.random() < 0.5:
            return (f"is the {obj} {g.label(aid)}", "yes", BINARY, yes_no, yes_no,
                    [(HUB_EDGE, eid), ("is", aid), (TO_ANSWER, YES_ID)], (eid, cls_name))
        others = [v for v in cfg.attribute_classes[cls_name] if v != g.label(aid)]
        if not others:
            raise _Unsatisfiable
        val = others[int(rng.integers(len(others)))]
        return (f"is the {obj} {val}", "no", BINARY, yes_no, yes_no,
                [(HUB_EDGE, eid), (TO_ANSWER, NO_ID)])
    raise CorpusError(f"unknown template {template!r}")


def expand_path(path: list[tuple[str, str]], binary: bool, steps: int) -> list[tuple[str, str]]:
    """Pad a hop sequence with NO_OPs to exactly ``steps`` transitions.

    Binary paths keep their answer transition last; open paths pad at the end.
    """
    hops = list(path)
    if binary:
        body, last = hops[:-1], hops[-1]
        pad_node = body[-1][1] if body else HUB_ID
        return body + [(NO_OP, pad_node)] * (steps - len(hops)) + [last]
    pad_node = hops[-1][1] if hops else HUB_ID
    return hops + [(NO_OP, pad_node)] * (steps - len(hops))


def check_path(g: SceneGraph, path: list[tuple[str, str]], answer: str, binary: bool, steps: int) -> bool:
    """True when the padded path is a legal walk from hub ending at the answer."""
    if len(path) > steps:
        return False
    walk = expand_path(path, binary, steps)
    cur = HUB_ID
    for t, (rel, target) in enumerate(walk):
        if rel == TO_ANSWER:
            if not (binary and t == steps - 1 and target in (YES_ID, NO_ID)):
                return False
        elif (RelationLabel.parse(rel), target) not in g.outgoing(cur):
            return False
        cur = target
    return g.label(cur) == answer


def generate_synthetic_corpus(config: SyntheticConfig, out_dir=None) -> Corpus:
    """Sample graphs and templated questions with stored oracle paths.

    When ``out_dir`` is given the corpus is written there with a manifest.
    """
    cfg = config
    plausible = _plausible_map(cfg)
    graphs: dict[str, SceneGraph] = {}
    questions: list[QuestionRecord] = []
    paths: dict[str, list] = {}
    for gi in range(cfg.num_graphs):
        rng = np.random.default_rng([cfg.seed, 101, gi])
        gid = f"g{gi:04d}"
        g, facts = _sample_graph(rng, gid, cfg, plausible)
        aug = g.augment()
        graphs[gid] = g
        seen = set()
        made = 0
        attempts = 0
        while made < cfg.questions_per_graph:
            template = cfg.templates[int(rng.integers(len(cfg.templates)))]
            try:
                res = _question(rng, aug, facts, template, cfg, plausible)
            except _Unsatisfiable:
                res = None
            if res is None or res[0] in seen:
                attempts += 1
                if attempts >= 100:
                    raise CorpusError(f"graph {gid}: could not satisfy templates after 100 attempts")
                continue
            attempts = 0
            text, answer, qtype, valid, plaus, path = res[:6]
            seen.add(text)
            qid = f"{gid}-q{made:02d}"
            rec = QuestionRecord(qid, gid, tokenize(text), answer, qtype, valid, plaus)
            group = []
            follow_text = None
            if len(res) > 6:
                eid, cls_name = res[6]
                follow_text = f"what is the {cls_name} of the {aug.label(eid)}"
            if follow_text is not None and follow_text not in seen and made + 1 < cfg.questions_per_graph:
                aid = facts["attrs"][eid, cls_name]
                obj = aug.label(eid)
                rec.group, rec.anchor = f"{gid}-c{made:02d}", True
                follow = QuestionRecord(f"{gid}-q{made + 1:02d}", gid, tokenize(follow_text),
                                        aug.label(aid), OPEN, list(cfg.attribute_classes[cls_name]),
                                        plausible[obj, cls_name], rec.group)
                group = [(follow, [(HUB_EDGE, eid), ("is", aid)])]
                seen.add(follow.text)
            for r, p in [(rec, path)] + group:
                if not check_path(aug, p, r.answer, r.type == BINARY, cfg.max_steps):
                    raise CorpusError(f"generator produced an unsound path for {r.qid}")
                questions.append(r)
                paths[r.qid] = [list(step) for step in p]
                made += 1
    order = np.random.default_rng([cfg.seed, 202]).permutation(cfg.num_graphs)
    n_train = int(round(cfg.split_fractions[0] * cfg.num_graphs))
    n_val = int(round(cfg.split_fractions[1] * cfg.num_graphs))
    graph_split = {}
    for rank, gi in enumerate(order):
        graph_split[f"g{gi:04d}"] = "train" if rank < n_train else "validation" if rank < n_train + n_val else "test"
    split_of = {q.qid: graph_split[q.graph] for q in questions}
    corpus = Corpus(graphs, questions, split_of, cfg.seed, paths)
    if out_dir is not None:
        write_corpus(corpus, out_dir, config=_config_dict(cfg), paths=paths)
    return corpus


def _config_dict(cfg: SyntheticConfig) -> dict:
    d = asdict(cfg)
    d["split_fractions"] = list(cfg.split_fractions)
    return d


def write_corpus(corpus: Corpus, out_dir, config: dict | None = None, paths: dict | None = None) -> CorpusManifest:
    out = Path(out_dir)
    (out / "graphs").mkdir(parents=True, exist_ok=True)
    (out / "questions").mkdir(parents=True, exist_ok=True)
    entries = []
    by_graph: dict[str, list[QuestionRecord]] = {gid: [] for gid in corpus.graphs}
    for q in corpus.questions:
        by_graph[q.graph].append(q)
    for gid, g in corpus.graphs.items():
        qs = by_graph[gid]
        splits = {corpus.split_of[q.qid] for q in qs} or {"train"}
        if len(splits) != 1:
            raise CorpusError(f"graph {gid} has questions in several splits")
        save_scene_graph(g, out / "graphs" / f"{gid}.json")
        save_questions(qs, out / "questions" / f"{gid}.jsonl")
        entries.append({"graph": f"graphs/{gid}.json", "questions": f"questions/{gid}.jsonl", "split": splits.pop()})
    manifest = CorpusManifest(entries, corpus.seed, config or {}, out)
    (out / "manifest.json").write_text(manifest.to_json())
    if paths is not None:
        (out / "oracle_paths.json").write_text(json.dumps(paths, indent=1, sort_keys=True) + "\n")
    return manifest
