"""Small builders shared by several test modules."""

import numpy as np

from sgwalk import diffmath as dm

from sgwalk.corpus import BINARY, OPEN, QuestionRecord
from sgwalk.scenegraph import ATTRIBUTE, OBJECT, SceneGraph


def random_graph(rng: np.random.Generator, max_entities: int = 12, max_triples: int = 20,
                 gid: str = "g") -> SceneGraph:
    """Random scene: objects and attributes with arbitrary typed edges, possibly with repeats."""
    n = int(rng.integers(0, max_entities + 1))
    g = SceneGraph(gid)
    for i in range(n):
        kind = OBJECT if rng.random() < 0.7 else ATTRIBUTE
        g.add_entity(f"e{i}", f"w{int(rng.integers(6))}", kind)
    if n:
        for _ in range(int(rng.integers(0, max_triples + 1))):
            s, o = rng.integers(n, size=2)
            g.add_triple(f"e{s}", f"r{int(rng.integers(4))}", f"e{o}")
    return g


def one_triple_graph() -> SceneGraph:
    return SceneGraph.from_triples("tiny", [("a", "cup"), ("b", "table")], [("a", "on", "b")])


def question(qid: str, graph: str, answer: str, binary: bool = False, text: str = "what is on the table",
             **kw) -> QuestionRecord:
    return QuestionRecord(qid=qid, graph=graph, tokens=text.split(), answer=answer,
                          type=BINARY if binary else OPEN, **kw)


def bandit(seed: int):
    """Single-step two-action environment: from the hub, HUB_EDGE to the answer pays 1, NO_OP pays 0.

    Returns (agent, corpus, question, episode config) with the default model.
    """
    from sgwalk.corpus import Corpus, EmbeddingTable
    from sgwalk.policy import Agent, ModelConfig
    from sgwalk.walkenv import EpisodeConfig

    g = SceneGraph.from_triples("bandit", [("a", "left")])
    q = question("q", "bandit", "left", text="which way")
    c = Corpus({"bandit": g}, [q], {"q": "train"})
    cfg = ModelConfig()
    agent = Agent(EmbeddingTable.for_vocabulary(c.vocabulary(), cfg.dim, seed), cfg, seed)
    return agent, c, q, EpisodeConfig(1)


def correct_prob(agent, corpus, q, env) -> float:
    """Probability of the paying action (index 0 at the hub)."""
    return float(np.exp(agent.path_log_prob(corpus.augmented(q.graph), q, env, [0])))


def run_bandit(seed: int, updates: int, stop_at: float | None = None):
    """Train on the bandit with default settings.

    Returns (updates used, per-episode rewards in sampling order, final probability of the paying action).
    """
    from sgwalk.trainer import Adam, BaselineState, TrainConfig, training_step

    agent, c, q, env = bandit(seed)
    cfg = TrainConfig(seed=seed)
    baseline, opt = BaselineState(), Adam(cfg.lr)
    rewards = []
    for u in range(1, updates + 1):
        st = training_step(agent, c, [q], env, cfg, baseline, opt, (seed, 0, u))
        rewards.append(st["rewards"])
        if stop_at is not None and correct_prob(agent, c, q, env) >= stop_at:
            break
    return u, np.concatenate(rewards), correct_prob(agent, c, q, env)


def probe(rng, shape):
    """Random linear functional, so every op output reduces to a scalar loss."""
    w = rng.normal(size=shape)
    return lambda y: dm.sum_(dm.mul(y, w))


def op_cases(rng):
    """name -> (inputs, op, output shape) for every differentiable op, inputs drawn from ``rng``."""
    a = rng.uniform(-2, 2, (3, 4))
    b = rng.uniform(-2, 2, (3, 4))
    m = rng.uniform(-2, 2, (4, 2))
    seg = np.array([0, 0, 1, 2, 2, 2])
    x6 = rng.uniform(-2, 2, 6)
    h, d = 2, 3
    cases = {
        "add": ((a, b), lambda x, y: dm.add(x, y), (3, 4)),
        "add_broadcast": ((a, b[0]), lambda x, y: dm.add(x, y), (3, 4)),
        "sub": ((a, b), lambda x, y: dm.sub(x, y), (3, 4)),
        "mul": ((a, b), lambda x, y: dm.mul(x, y), (3, 4)),
        "matmul": ((a, m), lambda x, y: dm.matmul(x, y), (3, 2)),
        "batched_matmul": ((rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (2, 4, 2))),
                           lambda x, y: dm.matmul(x, y), (2, 3, 2)),
        "concat": ((a, b), lambda x, y: dm.concat([x, y], axis=1), (3, 8)),
        "relu": ((a + 0.05,), dm.relu, (3, 4)),
        "leaky_relu": ((a + 0.05,), lambda x: dm.leaky_relu(x, 0.2), (3, 4)),
        "exp": ((a,), dm.exp, (3, 4)),
        "softmax": ((a,), lambda x: dm.softmax(x, axis=-1), (3, 4)),
        "softmax_axis0": ((a,), lambda x: dm.softmax(x, axis=0), (3, 4)),
        "segment_softmax": ((x6,), lambda x: dm.softmax(x, segments=seg), (6,)),
        "log_softmax": ((a,), dm.log_softmax, (3, 4)),
        "segment_log_softmax": ((x6,), lambda x: dm.log_softmax(x, segments=seg), (6,)),
        "mean": ((a,), lambda x: dm.mean(x, axis=0), (4,)),
        "sum": ((a,), lambda x: dm.sum_(x, axis=1), (3,)),
        "gather_rows": ((a,), lambda x: dm.gather_rows(x, np.array([2, 0, 2, 1])), (4, 4)),
        "segment_sum": ((a,), lambda x: dm.segment_sum(x, np.array([1, 0, 1]), 2), (2, 4)),
        "slice": ((a,), lambda x: dm.slice_(x, 1, 3, axis=1), (3, 2)),
        "reshape": ((a,), lambda x: dm.reshape(x, (2, 6)), (2, 6)),
        "layer_norm": ((a, rng.uniform(0.5, 2, 4), rng.uniform(-1, 1, 4)), dm.layer_norm, (3, 4)),
        "lstm_cell": ((rng.uniform(-2, 2, (2, 3)), rng.uniform(-1, 1, (2, d)), rng.uniform(-1, 1, (2, d)),
                       rng.uniform(-1, 1, (3 + d, 4 * d)), rng.uniform(-1, 1, 4 * d)),
                      dm.lstm_cell, (2, 2 * d)),
        "scaled_dot_attention": ((rng.uniform(-2, 2, (2, 3, 4)), rng.uniform(-2, 2, (2, 3, 4)),
                                  rng.uniform(-2, 2, (2, 3, 4))),
                                 lambda q, k, v: dm.scaled_dot_attention(
                                     q, k, v, h, np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)),
                                 (2, 3, 4)),
    }
    return cases


YN = ["yes", "no"]


def metric_fixture():
    """Ten questions and predictions; expected values are worked out in the comments below."""
    qs = [
        question("q1", "g", "yes", True, valid=YN, plausible=YN, group="G1", anchor=True),
        question("q2", "g", "red", valid=["red", "blue", "green"], plausible=["red", "blue"], group="G1"),
        question("q3", "g", "wood", valid=["wood", "metal"], plausible=["wood"], group="G1"),
        question("q4", "g", "no", True, valid=YN, plausible=YN, group="G2", anchor=True),
        question("q5", "g", "cup", group="G2"),
        question("q6", "g", "no", True, valid=YN, group="G3", anchor=True),
        question("q7", "g", "table", valid=["table", "chair", "dog"], plausible=["table", "chair"], group="G3"),
        question("q8", "g", "small", valid=["small", "large"], plausible=["small", "large"]),
        question("q9", "g", "yes", True),
        question("q10", "g", "lamp", valid=["lamp", "vase"], plausible=["lamp"], group="G4"),
    ]
    preds = {"q1": "yes", "q2": "red", "q3": "metal", "q4": "yes", "q5": "cup",
             "q6": "no", "q7": "dog", "q8": "purple", "q9": "yes", "q10": "Lamp"}
    return qs, preds


# binary: q1 q6 q9 right, q4 wrong -> 3/4
# open: q2 q5 q10 right of six -> 3/6
# accuracy: 6/10
# consistency: G1 anchor right, entailed 1/2; G2 anchor wrong (skipped); G3 anchor right, 0/1;
#   G4 has nothing entailed (skipped) -> mean(0.5, 0)
# validity: eight questions carry a set, only q8 ("purple") falls outside -> 7/8
# plausibility: seven carry a set; q3 metal, q7 dog, q8 purple fall outside -> 4/7
EXPECTED = {"binary": 75.0, "open": 50.0, "consistency": 25.0, "validity": 87.5,
            "plausibility": 57.1, "accuracy": 60.0}
