import json

import numpy as np
import pytest

from helpers import bandit, correct_prob, one_triple_graph, question, run_bandit
from sgwalk import diffmath as dm
from sgwalk.corpus import BINARY, Corpus, EmbeddingTable, SyntheticConfig, generate_synthetic_corpus
from sgwalk.diffmath import Tape
from sgwalk.encoders import GATConfig, QuestionEncoderConfig
from sgwalk.policy import Agent, ModelConfig, as_tensors
from sgwalk.trainer import (
    Adam,
    BaselineState,
    TrainConfig,
    TrainingError,
    clip_gradients,
    reinforce_update,
    rollout_batch,
    surrogate_loss,
    train,
    training_step,
)
from sgwalk.walkenv import EpisodeConfig

TINY = ModelConfig(dim=8, gat=GATConfig(heads=2), question=QuestionEncoderConfig(heads=2))


@pytest.fixture(scope="module")
def small_corpus():
    return generate_synthetic_corpus(SyntheticConfig(num_graphs=10, seed=4))


def small_agent(c: Corpus, seed: int = 0, cfg: ModelConfig = TINY) -> Agent:
    return Agent(EmbeddingTable.for_vocabulary(c.vocabulary(), cfg.dim, seed), cfg, seed)


def test_config_validation():
    for bad in ({"rollouts": 0}, {"lr": 0.0}, {"baseline_decay": 1.0}, {"entropy": -0.1}, {"epochs": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_baseline_moving_average():
    b = BaselineState()
    b.update(np.array([1.0, 0.0, 1.0, 1.0]), 0.9)
    assert b.value == pytest.approx(0.075, abs=1e-15)
    b.update(np.array([0.0]), 0.9)
    assert b.value == pytest.approx(0.0675, abs=1e-15)


def test_adam_against_hand_recursion():
    g1, g2 = np.array([0.3, -2.0]), np.array([-0.1, 0.5])
    params = {"w": np.array([1.0, 1.0])}
    opt = Adam(0.01)
    opt.step(params, {"w": g1})
    opt.step(params, {"w": g2})
    m = 0.1 * 0.9 * g1 + 0.1 * g2
    v = 0.001 * 0.999 * g1 ** 2 + 0.001 * g2 ** 2
    # the first step moves by lr * g1 / |g1| up to eps
    first = 1.0 - 0.01 * g1 / (np.abs(g1) + 1e-8)
    want = first - 0.01 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(params["w"], want, rtol=1e-12)
    assert opt.t == 2


def test_clipping_bounds_global_norm():
    rng = np.random.default_rng(0)
    for _ in range(200):
        grads = {k: rng.normal(scale=rng.uniform(0.01, 50), size=rng.integers(1, 6, size=2)) for k in "abc"}
        before = {k: v.copy() for k, v in grads.items()}
        clip = float(rng.uniform(0.1, 10))
        pre = clip_gradients(grads, clip)
        post = np.sqrt(sum(np.sum(g * g) for g in grads.values()))
        assert post <= clip + 1e-9
        assert pre == pytest.approx(np.sqrt(sum(np.sum(g * g) for g in before.values())))
        if pre <= clip:
            assert all(np.array_equal(before[k], grads[k]) for k in grads)
        else:
            # direction kept
            for k in grads:
                np.testing.assert_allclose(grads[k], before[k] * clip / pre)


def test_rewards_at_baseline_without_entropy_leave_params_unchanged():
    g = one_triple_graph()
    q = question("q", "tiny", "lamp")  # no lamp in the scene: every walk earns 0, the baseline starts at 0
    c = Corpus({"tiny": g}, [q], {"q": "train"})
    agent = small_agent(c)
    before = {k: v.copy() for k, v in agent.params.items()}
    cfg = TrainConfig(entropy=0.0)
    st = training_step(agent, c, [q], EpisodeConfig(3), cfg, BaselineState(), Adam(cfg.lr), (0, 0, 1))
    assert st["grad_norm"] == 0.0
    assert all(np.array_equal(before[k], agent.params[k]) for k in before)
    # the entropy bonus alone does move the parameters
    cfg = TrainConfig(entropy=0.01)
    training_step(agent, c, [q], EpisodeConfig(3), cfg, BaselineState(), Adam(cfg.lr), (0, 0, 1))
    assert any(not np.array_equal(before[k], agent.params[k]) for k in before)


def test_surrogate_gradient_matches_finite_differences():
    cfg = ModelConfig(dim=4, gat=GATConfig(heads=2), question=QuestionEncoderConfig(heads=2))
    c = generate_synthetic_corpus(SyntheticConfig(num_graphs=1, seed=2, min_entities=3, max_entities=4))
    qs = c.questions[:3]
    agent = small_agent(c, seed=5, cfg=cfg)
    env = EpisodeConfig(2)
    tcfg = TrainConfig(rollouts=2, entropy=0.05)
    ro, _ = rollout_batch(agent, c, qs, env, 2, np.random.default_rng(0))
    # freeze the sampled walks, then treat the surrogate as a function of the parameters
    sampled = _replay_choices(agent, c, qs, env, ro)
    names = sorted(agent.params)
    graph = [c.augmented(qs[0].graph)]

    def f(*arrays):
        p = dict(zip(names, arrays))
        enc = agent.encode(p, graph, qs)
        r = agent.rollout(p, enc, qs, 2, env, mode="forced", forced=sampled)
        return surrogate_loss(r, 0.3, tcfg, len(r.rewards))

    r = agent.rollout(as_tensors(agent.params), agent.encode(as_tensors(agent.params), graph, qs), qs, 2, env,
                      mode="forced", forced=sampled)
    np.testing.assert_array_equal(r.nodes, ro.nodes)
    assert dm.grad_check(f, [agent.params[k] for k in names], epsilon=1e-4) < 1e-3


def _replay_choices(agent, c, qs, env, ro):
    """Recover within-state action indices of sampled walks from their node and relation sequences."""
    p = as_tensors(agent.params)
    enc = agent.encode(p, [c.augmented(qs[0].graph)], qs)
    b = enc.batch
    out = np.zeros(ro.rels.shape, dtype=np.int64)
    for e in range(len(ro.nodes)):
        binary = qs[ro.question_of[e]].type == BINARY
        for t in range(env.steps):
            inject = np.array([binary and t == env.steps - 1])
            _, rel, tgt = b.actions(ro.nodes[e, t:t + 1], inject, ro.graph_of[e:e + 1])
            hit = np.flatnonzero((rel == ro.rels[e, t]) & (tgt == ro.nodes[e, t + 1]))
            out[e, t] = hit[0]
    return out


def test_non_finite_gradient_names_the_group():
    agent = Agent(EmbeddingTable.for_vocabulary(["x"], 2), TINY, params={"policy.w1": np.array([1.0, 1000.0])})
    with Tape() as tape, np.errstate(over="ignore"):
        watched = as_tensors(agent.params, tape)
        loss = dm.sum_(dm.exp(dm.mul(watched["policy.w1"], 1000.0)))
    with pytest.raises(TrainingError, match="policy.w1"), np.errstate(invalid="ignore", over="ignore"):
        reinforce_update(agent, [(tape, watched, loss)], BaselineState(), TrainConfig(), Adam(1e-3), np.zeros(1))


def test_uniform_bandit_sampling_frequencies():
    agent, c, q, env = bandit(0)
    agent.params = {k: np.zeros_like(v) for k, v in agent.params.items()}  # every score 0: uniform policy
    ro, _ = rollout_batch(agent, c, [q], env, 1000, np.random.default_rng(11))
    assert abs(ro.rewards.mean() - 0.5) <= 0.03


def test_rollout_batch_is_seeded(small_corpus):
    agent = small_agent(small_corpus)
    qs = small_corpus.split("train")[:5]
    a, _ = rollout_batch(agent, small_corpus, qs, EpisodeConfig(4), 3, np.random.default_rng(9))
    b, _ = rollout_batch(agent, small_corpus, qs, EpisodeConfig(4), 3, np.random.default_rng(9))
    np.testing.assert_array_equal(a.nodes, b.nodes)
    np.testing.assert_array_equal(a.rels, b.rels)


def test_bandit_converges():
    used, _, p = run_bandit(0, 500, stop_at=0.99)
    assert p >= 0.99 and used <= 500


def test_bandit_window_means_never_drop():
    """Mean reward over consecutive 100-episode windows is non-decreasing in at least 19 of 20 seeds."""
    good = 0
    for seed in range(20):
        _, rewards, _ = run_bandit(seed, 125)
        w = rewards.reshape(-1, 100).mean(axis=1)
        good += bool(np.all(np.diff(w) >= 0))
    assert good >= 19


def test_zero_epochs_returns_initial_params(tmp_path, small_corpus):
    agent = small_agent(small_corpus)
    init = {k: v.copy() for k, v in agent.params.items()}
    res = train(agent, small_corpus, TrainConfig(epochs=0), EpisodeConfig(4), tmp_path)
    assert res.metrics == []
    assert all(np.array_equal(init[k], res.best_params[k]) for k in init)
    back, extra, _ = Agent.load(tmp_path / "best.npz")
    assert all(np.array_equal(init[k], back.params[k]) for k in init)
    assert extra["epoch"] == 0


def _run(out, corpus, epochs, resume=False, **kw):
    agent = small_agent(corpus, seed=1)
    cfg = TrainConfig(epochs=epochs, seed=3, rollouts=2, batch_size=16, **kw)
    return agent, train(agent, corpus, cfg, EpisodeConfig(4), out, resume=resume)


def test_training_is_deterministic(tmp_path, small_corpus):
    _, r1 = _run(tmp_path / "a", small_corpus, 2)
    _, r2 = _run(tmp_path / "b", small_corpus, 2)
    text = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert text == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert [json.loads(line)["epoch"] for line in text.decode().splitlines()] == [1, 2]
    assert r1.metrics == r2.metrics


def test_parallel_shards_are_deterministic(tmp_path, small_corpus):
    _, r1 = _run(tmp_path / "a", small_corpus, 1, workers=3)
    _, r2 = _run(tmp_path / "b", small_corpus, 1, workers=3)
    assert r1.metrics == r2.metrics


def test_resume_matches_uninterrupted_run(tmp_path, small_corpus):
    full_agent, _ = _run(tmp_path / "full", small_corpus, 3)
    _run(tmp_path / "part", small_corpus, 1)
    part_agent, _ = _run(tmp_path / "part", small_corpus, 3, resume=True)
    assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == (tmp_path / "part" / "metrics.jsonl").read_bytes()
    for k in full_agent.params:
        np.testing.assert_array_equal(full_agent.params[k], part_agent.params[k])


def test_best_checkpoint_tracks_validation(tmp_path, small_corpus):
    _, res = _run(tmp_path, small_corpus, 3)
    best = max(m["val_accuracy"] for m in res.metrics)
    assert res.best_val == best
    _, extra, _ = Agent.load(tmp_path / "best.npz")
    assert extra["val_accuracy"] == best


def test_unwritable_checkpoint_dir(tmp_path, small_corpus):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(TrainingError, match="checkpoint"):
        _run(blocker / "sub", small_corpus, 1)


def test_policy_improves_on_bandit_question_after_training():
    agent, c, q, env = bandit(3)
    before = correct_prob(agent, c, q, env)
    _, _, after = run_bandit(3, 5)
    assert after > before
