"""Graph attention node encoder and transformer question encoder.

Both encoders read label/word vectors from the shared ``embed.words``
parameter.  A label made of several words embeds as the mean of its word
vectors.  Relation vectors are label embeddings plus rows of
``embed.special`` for the artificial relations and the inverse marker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffmath as dm
from .corpus import EmbeddingTable, tokenize
from .diffmath import Tensor
from .scenegraph import HUB_EDGE, NO_OP, TO_ANSWER, RelationLabel, SceneGraph

SPECIAL_ROWS = {NO_OP: 0, HUB_EDGE: 1, TO_ANSWER: 2, "inverse": 3}


class EncoderError(ValueError):
    pass


@dataclass
class GATConfig:
    layers: int = 2
    heads: int = 4
    hidden: int | None = None
    slope: float = 0.2
    residual: bool = True

    def check(self, dim: int) -> None:
        hidden = self.hidden or dim
        if hidden % self.heads:
            raise EncoderError(f"GAT hidden dimension {hidden} not divisible by {self.heads} heads")
        if self.residual and hidden != dim:
            raise EncoderError(f"residual GAT needs hidden dimension {hidden} == embedding dimension {dim}")


@dataclass
class QuestionEncoderConfig:
    layers: int = 2
    heads: int = 4
    ff: int | None = None
    max_length: int = 30

    def check(self, dim: int) -> None:
        if dim % self.heads:
            raise EncoderError(f"question encoder: {self.heads} heads do not divide dimension {dim}")


@dataclass
class NodeEmbeddings:
    entities: dict[str, np.ndarray]
    relations: dict[str, np.ndarray]
    attention: list[np.ndarray] | None = None


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_gat(cfg: GATConfig, dim: int, rng) -> dict[str, np.ndarray]:
    cfg.check(dim)
    dh = (cfg.hidden or dim) // cfg.heads
    p = {}
    for layer in range(cfg.layers):
        p[f"gat.{layer}.weight"] = _uniform(rng, dim, (dim, cfg.heads * dh))
        p[f"gat.{layer}.att_src"] = _uniform(rng, dh, (cfg.heads, dh))
        p[f"gat.{layer}.att_dst"] = _uniform(rng, dh, (cfg.heads, dh))
    return p


def init_question_encoder(cfg: QuestionEncoderConfig, dim: int, rng) -> dict[str, np.ndarray]:
    cfg.check(dim)
    ff = cfg.ff or 4 * dim
    p = {}
    for layer in range(cfg.layers):
        pre = f"qenc.{layer}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = _uniform(rng, dim, (dim, dim))
        p[pre + "ff1"] = _uniform(rng, dim, (dim, ff))
        p[pre + "ff1_b"] = np.zeros(ff)
        p[pre + "ff2"] = _uniform(rng, ff, (ff, dim))
        p[pre + "ff2_b"] = np.zeros(dim)
        for ln in ("ln1", "ln2"):
            p[pre + ln + "_g"] = np.ones(dim)
            p[pre + ln + "_b"] = np.zeros(dim)
    p["qenc.out_g"] = np.ones(dim)
    p["qenc.out_b"] = np.zeros(dim)
    return p


def gat_forward(x: Tensor, src: np.ndarray, dst: np.ndarray, params: Mapping[str, Tensor],
                cfg: GATConfig, attention: list | None = None) -> Tensor:
    """Stack of GAT layers; node i attends over every j with an edge j -> i.

    When ``attention`` is a list, per-layer edge weights ``(edges, heads)``
    are appended to it.
    """
    n, dim = x.shape
    heads = cfg.heads
    dh = (cfg.hidden or dim) // heads
    for layer in range(cfg.layers):
        pre = f"gat.{layer}."
        z = dm.reshape(dm.matmul(x, params[pre + "weight"]), (n, heads, dh))
        s_src = dm.sum_(dm.mul(z, params[pre + "att_src"]), axis=-1)
        s_dst = dm.sum_(dm.mul(z, params[pre + "att_dst"]), axis=-1)
        logits = dm.leaky_relu(dm.add(dm.gather_rows(s_src, src), dm.gather_rows(s_dst, dst)), cfg.slope)
        alpha = dm.softmax(logits, segments=dst)
        if attention is not None:
            attention.append(alpha.value.copy())
        msg = dm.mul(dm.gather_rows(z, src), dm.reshape(alpha, (len(src), heads, 1)))
        agg = dm.reshape(dm.segment_sum(msg, dst, n), (n, heads * dh))
        x = dm.add(x, dm.relu(agg)) if cfg.residual else dm.relu(agg)
    return x


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def question_forward(x: Tensor, mask: np.ndarray, params: Mapping[str, Tensor],
                     cfg: QuestionEncoderConfig) -> Tensor:
    """Pre-norm transformer over ``(batch, length, dim)`` token vectors, then masked mean pooling."""
    b, length, dim = x.shape
    x = dm.add(dm.mul(x, math.sqrt(dim)), positional_encoding(length, dim))
    for layer in range(cfg.layers):
        pre = f"qenc.{layer}."
        y = dm.layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
        att = dm.scaled_dot_attention(dm.matmul(y, params[pre + "wq"]), dm.matmul(y, params[pre + "wk"]),
                                      dm.matmul(y, params[pre + "wv"]), cfg.heads, mask)
        x = dm.add(x, dm.matmul(att, params[pre + "wo"]))
        y = dm.layer_norm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
        hid = dm.relu(dm.add(dm.matmul(y, params[pre + "ff1"]), params[pre + "ff1_b"]))
        x = dm.add(x, dm.add(dm.matmul(hid, params[pre + "ff2"]), params[pre + "ff2_b"]))
    x = dm.layer_norm(x, params["qenc.out_g"], params["qenc.out_b"])
    pool = mask.astype(np.float64) / mask.sum(axis=1, keepdims=True)
    return dm.reshape(dm.matmul(pool[:, None, :], x), (b, dim))


# --- label lookups ------------------------------------------------------------------


def label_matrix(labels: Sequence[str], table: EmbeddingTable) -> np.ndarray:
    """Constant ``(len(labels), vocab)`` matrix whose rows average each label's word rows."""
    m = np.zeros((len(labels), len(table)))
    for i, lab in enumerate(labels):
        toks = tokenize(lab) or [lab]
        for t in toks:
            m[i, table.index(t)] += 1.0 / len(toks)
    return m


def relation_matrices(names: Sequence[str], table: EmbeddingTable) -> tuple[np.ndarray, np.ndarray]:
    """Word-averaging and special-row selector matrices for relation names."""
    words = np.zeros((len(names), len(table)))
    special = np.zeros((len(names), len(SPECIAL_ROWS)))
    for i, name in enumerate(names):
        rel = RelationLabel.parse(name)
        if rel.base in SPECIAL_ROWS:
            special[i, SPECIAL_ROWS[rel.base]] = 1.0
        else:
            words[i] = label_matrix([rel.base], table)[0]
        if rel.is_inverse:
            special[i, SPECIAL_ROWS["inverse"]] = 1.0
    return words, special


def label_embeddings(labels: Sequence[str], table: EmbeddingTable, params) -> Tensor:
    return dm.matmul(label_matrix(labels, table), params["embed.words"])


def relation_embeddings(names: Sequence[str], table: EmbeddingTable, params) -> Tensor:
    words, special = relation_matrices(names, table)
    return dm.add(dm.matmul(words, params["embed.words"]), dm.matmul(special, params["embed.special"]))


def token_batch(questions: Sequence[Sequence[str]], table: EmbeddingTable,
                cfg: QuestionEncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    for toks in questions:
        if not toks:
            raise EncoderError("empty question")
        if len(toks) > cfg.max_length:
            raise EncoderError(f"question of {len(toks)} tokens exceeds max length {cfg.max_length}")
    length = max(len(t) for t in questions)
    ids = np.zeros((len(questions), length), dtype=np.int64)
    mask = np.zeros((len(questions), length), dtype=bool)
    for i, toks in enumerate(questions):
        ids[i, :len(toks)] = [table.index(t) for t in toks]
        mask[i, :len(toks)] = True
    return ids, mask


def encode_questions(questions: Sequence[Sequence[str]], table: EmbeddingTable,
                     cfg: QuestionEncoderConfig, params) -> Tensor:
    ids, mask = token_batch(questions, table, cfg)
    b, length = ids.shape
    x = dm.reshape(dm.gather_rows(params["embed.words"], ids.reshape(-1)), (b, length, -1))
    return question_forward(x, mask, params, cfg)


def encode_question(tokens: Sequence[str], table: EmbeddingTable, cfg: QuestionEncoderConfig, params) -> np.ndarray:
    return encode_questions([list(tokens)], table, cfg, _as_tensors(params)).value[0]


def encode_graph(g: SceneGraph, table: EmbeddingTable, cfg: GATConfig, params,
                 with_attention: bool = False) -> NodeEmbeddings:
    """Context-aware vectors for every entity and relation of an augmented graph."""
    params = _as_tensors(params)
    dim = params["embed.words"].shape[1]
    if table.dim != dim:
        raise EncoderError(f"embedding table dimension {table.dim} != model dimension {dim}")
    cfg.check(dim)
    arr = g.arrays()
    x = label_embeddings(arr.labels, table, params)
    attention = [] if with_attention else None
    nodes = gat_forward(x, arr.src, arr.dst, params, cfg, attention)
    rels = relation_embeddings(arr.relations + [TO_ANSWER], table, params)
    return NodeEmbeddings(
        {e: nodes.value[i] for i, e in enumerate(arr.ids)},
        {r: rels.value[i] for i, r in enumerate(arr.relations + [TO_ANSWER])},
        attention,
    )


def _as_tensors(params) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
