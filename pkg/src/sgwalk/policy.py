"""Stochastic walking policy: history LSTM, action scoring, rollouts, decoding."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffmath as dm
from .corpus import BINARY, EmbeddingTable, QuestionRecord
from .diffmath import Tape, Tensor
from .encoders import (
    GATConfig,
    NodeEmbeddings,
    QuestionEncoderConfig,
    encode_questions,
    gat_forward,
    init_gat,
    init_question_encoder,
    label_embeddings,
    relation_embeddings,
)
from .scenegraph import RelationLabel, SceneGraph
from .walkenv import Action, EpisodeConfig, EpisodeTrace, GraphBatch, answers_match

CHECKPOINT_VERSION = 1


class PolicyError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    dim: int = 64
    history_layers: int = 2
    ff_dim: int | None = None
    gat: GATConfig = field(default_factory=GATConfig)
    question: QuestionEncoderConfig = field(default_factory=QuestionEncoderConfig)
    freeze_words: bool = False

    @property
    def hidden(self) -> int:
        return self.ff_dim or 2 * self.dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        gat = GATConfig(**d.pop("gat", {}))
        question = QuestionEncoderConfig(**d.pop("question", {}))
        return cls(gat=gat, question=question, **d)


def init_params(cfg: ModelConfig, table: EmbeddingTable, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded parameters; weights uniform in +-1/sqrt(fan_in), LSTM forget bias 1."""
    d = cfg.dim
    if table.dim != d:
        raise PolicyError(f"embedding table dimension {table.dim} != model dimension {d}")
    rng = np.random.default_rng([seed, 1])
    bound = 1.0 / math.sqrt(d)
    p = {
        "embed.words": table.matrix.copy(),
        "embed.special": rng.uniform(-bound, bound, (4, d)),
    }
    p.update(init_gat(cfg.gat, d, rng))
    p.update(init_question_encoder(cfg.question, d, rng))
    for layer in range(cfg.history_layers):
        n_in = 2 * d if layer == 0 else d
        bias = np.zeros(4 * d)
        bias[d:2 * d] = 1.0
        p[f"lstm.{layer}.weight"] = rng.uniform(-1, 1, (n_in + d, 4 * d)) / math.sqrt(n_in + d)
        p[f"lstm.{layer}.bias"] = bias
    p["policy.w1"] = rng.uniform(-1, 1, (2 * d, cfg.hidden)) / math.sqrt(2 * d)
    p["policy.w2"] = rng.uniform(-1, 1, (cfg.hidden, d)) / math.sqrt(cfg.hidden)
    p["policy.start"] = rng.uniform(-1, 1, 2 * d) / math.sqrt(2 * d)
    return p


def as_tensors(params: Mapping[str, np.ndarray], tape: Tape | None = None) -> dict[str, Tensor]:
    if tape is None:
        return {k: Tensor(v) for k, v in params.items()}
    return {k: tape.watch(v, k) for k, v in params.items()}


# --- per-step policy pieces -------------------------------------------------------


@dataclass
class HistoryState:
    h: list[Tensor]
    c: list[Tensor]

    @classmethod
    def zeros(cls, layers: int, batch: int, dim: int) -> "HistoryState":
        return cls([Tensor(np.zeros((batch, dim))) for _ in range(layers)],
                   [Tensor(np.zeros((batch, dim))) for _ in range(layers)])

    def select(self, rows: np.ndarray) -> "HistoryState":
        return HistoryState([Tensor(h.value[rows]) for h in self.h], [Tensor(c.value[rows]) for c in self.c])


def encode_history(state: HistoryState, prev_action: Tensor, params) -> tuple[Tensor, HistoryState]:
    """Feed the previous action embedding ``[r, e]`` through the stacked LSTM."""
    x = dm.constant(prev_action)
    layers = len(state.h)
    if x.value.ndim == 1:
        x = dm.reshape(x, (1, -1))
    hs, cs = [], []
    for layer in range(layers):
        w = params[f"lstm.{layer}.weight"]
        if x.shape[-1] + state.h[layer].shape[-1] != w.shape[0]:
            raise dm.ShapeError(f"encode_history: input {x.shape} does not fit layer {layer} weight {w.shape}")
        out = dm.lstm_cell(x, state.h[layer], state.c[layer], w, params[f"lstm.{layer}.bias"])
        d = state.h[layer].shape[-1]
        h, c = dm.slice_(out, 0, d), dm.slice_(out, d, 2 * d)
        hs.append(h)
        cs.append(c)
        x = h
    return x, HistoryState(hs, cs)


def action_query(h: Tensor, q: Tensor, params) -> Tensor:
    """``W2 relu(W1 [h, Q])``, the vector every admissible action row is scored against."""
    return dm.matmul(dm.relu(dm.matmul(dm.concat([h, q], axis=-1), params["policy.w1"])), params["policy.w2"])


def action_rows(actions: Sequence[Action], embeddings: NodeEmbeddings) -> np.ndarray:
    return np.stack([embeddings.relations[a.relation.name] + embeddings.entities[a.target] for a in actions])


def action_distribution(h, q, actions: Sequence[Action], embeddings: NodeEmbeddings, params) -> np.ndarray:
    """Probability over ``actions`` (in order) given history ``h`` and question vector ``q``."""
    if not actions:
        raise PolicyError("no admissible actions")
    params = {k: dm.constant(v) for k, v in params.items()}
    u = action_query(dm.reshape(dm.constant(h), (1, -1)), dm.reshape(dm.constant(q), (1, -1)), params)
    scores = dm.matmul(action_rows(actions, embeddings), dm.reshape(u, (-1, 1)))
    return dm.softmax(dm.reshape(scores, (-1,))).value


def sample_action(dist: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a probability vector."""
    return _inverse_cdf(np.asarray(dist, dtype=np.float64), rng.random())


def _inverse_cdf(p: np.ndarray, r: float) -> int:
    return int(min(np.count_nonzero(np.cumsum(p) <= r), len(p) - 1))


# --- the agent -------------------------------------------------------------------------


@dataclass
class Encoded:
    batch: GraphBatch
    nodes: Tensor
    relations: Tensor
    questions: Tensor


@dataclass
class Rollout:
    """Batched episodes; ``log_prob`` and ``entropy`` are per-episode tensors."""

    questions: list[QuestionRecord]
    graph_of: np.ndarray
    question_of: np.ndarray
    nodes: np.ndarray            # (E, T+1) global node indices
    rels: np.ndarray             # (E, T) global relation indices
    log_prob: Tensor
    entropy: Tensor
    rewards: np.ndarray
    dists: list | None = None    # per step: (owner, rel, target, prob)

    def trace(self, encoded: Encoded, e: int) -> EpisodeTrace:
        b = encoded.batch
        q = self.questions[self.question_of[e]]
        rel_names = b.relations
        tr = EpisodeTrace(q.qid)
        tr.entities = [b.entity(n) for n in self.nodes[e]]
        tr.actions = [Action(RelationLabel.parse(rel_names[r]), b.entity(n))
                      for r, n in zip(self.rels[e], self.nodes[e, 1:])]
        if self.dists is not None:
            for owner, rel, tgt, prob in self.dists:
                sel = owner == e
                tr.dists.append([(f"{rel_names[r]}->{b.entity(n)}", float(p))
                                 for r, n, p in zip(rel[sel], tgt[sel], prob[sel])])
        tr.reward = int(self.rewards[e])
        tr.log_prob = float(self.log_prob.value[e])
        tr.answer = b.node_label_text(self.nodes[e, -1])
        return tr


class Agent:
    """Parameters plus vocabulary; encodes graph batches and runs walks."""

    def __init__(self, table: EmbeddingTable, cfg: ModelConfig | None = None, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.table = table
        self.cfg = cfg or ModelConfig()
        self.seed = seed
        self.params = params if params is not None else init_params(self.cfg, table, seed)

    def trainable(self) -> list[str]:
        return [k for k in self.params if not (self.cfg.freeze_words and k == "embed.words")]

    def encode(self, p: Mapping[str, Tensor], graphs: Sequence[SceneGraph],
               questions: Sequence[QuestionRecord]) -> Encoded:
        batch = GraphBatch(graphs)
        labels = label_embeddings(batch.labels, self.table, p)
        x = dm.gather_rows(labels, batch.node_label)
        nodes = gat_forward(x, batch.src, batch.dst, p, self.cfg.gat)
        rels = relation_embeddings(batch.relations, self.table, p)
        qv = encode_questions([q.tokens for q in questions], self.table, self.cfg.question, p)
        return Encoded(batch, nodes, rels, qv)

    def rollout(self, p: Mapping[str, Tensor], enc: Encoded, questions: Sequence[QuestionRecord],
                n: int, env: EpisodeConfig, mode: str = "sample", rng: np.random.Generator | None = None,
                keep_dists: bool = False, forced: np.ndarray | None = None) -> Rollout:
        """Run ``n`` episodes per question in lock-step.

        ``mode`` is ``sample`` (needs ``rng``), ``greedy`` (argmax, lowest index
        wins ties) or ``forced`` (``forced[e, t]`` gives the within-state action index).
        """
        b = enc.batch
        d = self.cfg.dim
        question_of = np.repeat(np.arange(len(questions)), n)
        graph_of = np.array([b.graph_index[questions[i].graph] for i in question_of], dtype=np.int64)
        binary = np.array([questions[i].type == BINARY for i in question_of])
        E = len(question_of)
        cur = b.hub[graph_of]
        nodes = np.zeros((E, env.steps + 1), dtype=np.int64)
        rels = np.zeros((E, env.steps), dtype=np.int64)
        nodes[:, 0] = cur
        qrows = dm.gather_rows(enc.questions, question_of)
        state = HistoryState.zeros(self.cfg.history_layers, E, d)
        prev = dm.gather_rows(dm.reshape(p["policy.start"], (1, 2 * d)), np.zeros(E, dtype=np.int64))
        total_lp = None
        total_ent = None
        dists = [] if keep_dists else None
        for t in range(env.steps):
            h, state = encode_history(state, prev, p)
            u = action_query(h, qrows, p)
            inject = binary & env.binary_injection & (t == env.steps - 1)
            owner, rel, tgt = b.actions(cur, inject, graph_of)
            rows = dm.add(dm.gather_rows(enc.relations, rel), dm.gather_rows(enc.nodes, tgt))
            scores = dm.sum_(dm.mul(rows, dm.gather_rows(u, owner)), axis=1)
            logp = dm.log_softmax(scores, segments=owner)
            counts = np.bincount(owner, minlength=E)
            first = np.cumsum(counts) - counts
            probs = np.exp(logp.value)
            if mode == "sample":
                cum = np.cumsum(probs)
                base = np.where(first > 0, cum[first - 1], 0.0)
                local = cum - base[owner]
                r = rng.random(E)
                choice = np.minimum(np.bincount(owner, weights=local <= r[owner], minlength=E).astype(np.int64),
                                    counts - 1)
            elif mode == "greedy":
                seg_max = np.full(E, -np.inf)
                np.maximum.at(seg_max, owner, logp.value)
                pos = np.arange(len(owner)) - first[owner]
                choice = np.full(E, np.iinfo(np.int64).max)
                np.minimum.at(choice, owner, np.where(logp.value == seg_max[owner], pos, np.iinfo(np.int64).max))
            elif mode == "forced":
                choice = np.asarray(forced[:, t], dtype=np.int64)
                if (choice >= counts).any() or (choice < 0).any():
                    raise PolicyError("forced action index outside the admissible set")
            else:
                raise PolicyError(f"unknown rollout mode {mode!r}")
            flat = first + choice
            step_lp = dm.gather_rows(logp, flat)
            ent = dm.mul(dm.segment_sum(dm.mul(dm.exp(logp), logp), owner, E), -1.0)
            total_lp = step_lp if total_lp is None else dm.add(total_lp, step_lp)
            total_ent = ent if total_ent is None else dm.add(total_ent, ent)
            if dists is not None:
                dists.append((owner, rel, tgt, probs))
            prev = dm.concat([dm.gather_rows(enc.relations, rel[flat]), dm.gather_rows(enc.nodes, tgt[flat])], axis=1)
            cur = tgt[flat]
            rels[:, t] = rel[flat]
            nodes[:, t + 1] = cur
        rewards = np.array([
            answers_match(b.graphs[graph_of[e]], b.entity(nodes[e, -1]), questions[question_of[e]])
            for e in range(E)
        ], dtype=np.float64)
        return Rollout(list(questions), graph_of, question_of, nodes, rels, total_lp,
                       dm.mul(total_ent, 1.0 / env.steps), rewards, dists)

    # --- inference ---------------------------------------------------------------

    def greedy(self, graphs: Sequence[SceneGraph], questions: Sequence[QuestionRecord], env: EpisodeConfig,
               keep_dists: bool = False) -> list[EpisodeTrace]:
        p = as_tensors(self.params)
        enc = self.encode(p, graphs, questions)
        ro = self.rollout(p, enc, questions, 1, env, mode="greedy", keep_dists=keep_dists)
        return [ro.trace(enc, e) for e in range(len(questions))]

    def beam(self, graph: SceneGraph, q: QuestionRecord, env: EpisodeConfig, width: int) -> EpisodeTrace:
        """Keep the ``width`` best partial walks by log-probability; return the best full walk."""
        p = as_tensors(self.params)
        enc = self.encode(p, [graph], [q])
        b = enc.batch
        d = self.cfg.dim
        binary = q.type == BINARY
        state = HistoryState.zeros(self.cfg.history_layers, 1, d)
        prev = Tensor(self.params["policy.start"][None, :])
        cur = b.hub[[0]]
        scores = np.zeros(1)
        paths: list[list[tuple[int, int]]] = [[]]
        for t in range(env.steps):
            k = len(cur)
            h, state = encode_history(state, prev, p)
            u = action_query(h, Tensor(np.repeat(enc.questions.value, k, axis=0)), p)
            inject = np.full(k, binary and env.binary_injection and t == env.steps - 1)
            owner, rel, tgt = b.actions(cur, inject, np.zeros(k, dtype=np.int64))
            rows = enc.relations.value[rel] + enc.nodes.value[tgt]
            logp = dm.log_softmax(Tensor((rows * u.value[owner]).sum(axis=1)), segments=owner).value
            cand = scores[owner] + logp
            order = sorted(range(len(cand)), key=lambda i: (-cand[i], owner[i], i))[:width]
            parent = owner[order]
            scores = cand[order]
            paths = [paths[owner[i]] + [(rel[i], tgt[i])] for i in order]
            state = state.select(parent)
            prev = Tensor(np.concatenate([enc.relations.value[rel[order]], enc.nodes.value[tgt[order]]], axis=1))
            cur = tgt[order]
        best = paths[0]
        tr = EpisodeTrace(q.qid)
        tr.actions = [Action(RelationLabel.parse(b.relations[r]), b.entity(n)) for r, n in best]
        tr.entities += [b.entity(n) for _, n in best]
        tr.log_prob = float(scores[0])
        tr.answer = b.node_label_text(best[-1][1])
        tr.reward = int(answers_match(graph, tr.entities[-1], q))
        return tr

    def path_log_prob(self, graph: SceneGraph, q: QuestionRecord, env: EpisodeConfig,
                      choices: Sequence[int]) -> float:
        p = as_tensors(self.params)
        enc = self.encode(p, [graph], [q])
        ro = self.rollout(p, enc, [q], 1, env, mode="forced", forced=np.array([list(choices)]))
        return float(ro.log_prob.value[0])

    def node_embeddings(self, graph: SceneGraph) -> NodeEmbeddings:
        from .encoders import encode_graph

        return encode_graph(graph, self.table, self.cfg.gat, self.params)

    # --- persistence ---------------------------------------------------------------

    def save(self, path, extra: dict | None = None, arrays: dict[str, np.ndarray] | None = None) -> None:
        """Write a versioned ``.npz``: parameter groups, config echo and vocabulary hash."""
        meta = {
            "version": CHECKPOINT_VERSION,
            "model": self.cfg.to_dict(),
            "vocab": self.table.words,
            "vocab_hash": self.table.vocab_hash(),
            "seed": self.seed,
            "groups": {k: list(v.shape) for k, v in self.params.items()},
            "extra": extra or {},
        }
        payload = {f"param/{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in self.params.items()}
        for k, v in (arrays or {}).items():
            payload[f"extra/{k}"] = np.ascontiguousarray(v, dtype=np.float64)
        payload["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        tmp = Path(str(path) + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        tmp.replace(path)

    @classmethod
    def load(cls, path, expect_model: ModelConfig | None = None,
             expect_vocab_hash: str | None = None) -> tuple["Agent", dict, dict[str, np.ndarray]]:
        path = Path(path)
        if path.is_dir():
            path = path / "best.npz"
        try:
            data = np.load(path)
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        with data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
            cfg = ModelConfig.from_dict(meta["model"])
            if expect_model is not None and expect_model.to_dict() != cfg.to_dict():
                raise CheckpointError(f"{path}: model config mismatch: {meta['model']} vs {expect_model.to_dict()}")
            words = meta["vocab"]
            params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
            extras = {k[len("extra/"):]: data[k] for k in data.files if k.startswith("extra/")}
        if set(params) != set(meta["groups"]) or any(list(params[k].shape) != s for k, s in meta["groups"].items()):
            raise CheckpointError(f"{path}: parameter groups do not match the recorded shapes")
        table = EmbeddingTable(words[1:], params["embed.words"][1:], params["embed.words"][0])
        if table.vocab_hash() != meta["vocab_hash"]:
            raise CheckpointError(f"{path}: vocabulary hash mismatch")
        if expect_vocab_hash is not None and expect_vocab_hash != meta["vocab_hash"]:
            raise CheckpointError(f"{path}: vocabulary hash {meta['vocab_hash']} != expected {expect_vocab_hash}")
        expected = init_params(cfg, table, meta["seed"])
        for k, v in expected.items():
            if k not in params or params[k].shape != v.shape:
                raise CheckpointError(f"{path}: parameter group {k} missing or misshapen for the recorded config")
        return cls(table, cfg, meta["seed"], params), meta["extra"], extras
