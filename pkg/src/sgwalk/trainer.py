"""REINFORCE training of the walking agent."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .corpus import Corpus, QuestionRecord
from .diffmath import Tape
from .policy import Agent, Rollout, as_tensors
from .walkenv import EpisodeConfig

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    rollouts: int = 8
    lr: float = 1e-3
    baseline_decay: float = 0.99
    entropy: float = 0.01
    epochs: int = 30
    batch_size: int = 16
    clip_norm: float = 5.0
    seed: int = 0
    use_baseline: bool = True
    workers: int = 1
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.rollouts < 1 or self.batch_size < 1 or self.workers < 1 or self.epochs < 0:
            raise ValueError("rollouts, batch size and workers must be positive; epochs non-negative")
        if self.lr <= 0 or self.clip_norm <= 0 or self.entropy < 0:
            raise ValueError("learning rate and clip norm must be positive, entropy weight non-negative")
        if not 0 < self.baseline_decay < 1:
            raise ValueError("baseline decay must lie in (0, 1)")


@dataclass
class BaselineState:
    value: float = 0.0

    def update(self, rewards: np.ndarray, decay: float) -> None:
        self.value = decay * self.value + (1 - decay) * float(np.mean(rewards))


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Descent step; ``grads`` are gradients of a loss to minimize."""
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[len("adam_m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")}
        self.v = {k[len("adam_v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")}


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm <= ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def rollout_batch(agent: Agent, corpus: Corpus, questions: Sequence[QuestionRecord], env: EpisodeConfig,
                  n: int, rng: np.random.Generator, tape: Tape | None = None) -> tuple[Rollout, dict]:
    """Sample ``n`` walks per question; ``log_prob`` is recorded on ``tape`` when given."""
    p = as_tensors(agent.params, tape)
    graphs = []
    seen = set()
    for q in questions:
        if q.graph not in seen:
            seen.add(q.graph)
            graphs.append(corpus.augmented(q.graph))
    enc = agent.encode(p, graphs, questions)
    return agent.rollout(p, enc, questions, n, env, mode="sample", rng=rng), p


def surrogate_loss(ro: Rollout, baseline: float, cfg: TrainConfig, total_episodes: int) -> dm.Tensor:
    """Negated REINFORCE surrogate, summed over this shard and divided by the whole batch size."""
    adv = ro.rewards - baseline if cfg.use_baseline else ro.rewards
    obj = dm.sum_(dm.mul(ro.log_prob, adv))
    if cfg.entropy:
        obj = dm.add(obj, dm.mul(dm.sum_(ro.entropy), cfg.entropy))
    return dm.mul(obj, -1.0 / total_episodes)


def reinforce_update(agent: Agent, shards: list[tuple[Tape, dict, dm.Tensor]], baseline: BaselineState,
                     cfg: TrainConfig, optimizer: Adam, rewards: np.ndarray) -> dict:
    """Apply one clipped Adam step from per-shard losses; then move the baseline."""
    grads: dict[str, np.ndarray] = {}
    for tape, watched, loss in shards:
        g = tape.backward(loss)
        for name, t in watched.items():
            grads[name] = g[t.node] if name not in grads else grads[name] + g[t.node]
    grads = {k: grads[k] for k in agent.trainable()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter group {k}")
    norm = clip_gradients(grads, cfg.clip_norm)
    if norm > 0.0:
        optimizer.step(agent.params, grads)
    baseline.update(rewards, cfg.baseline_decay)
    return {"grad_norm": norm}


def training_step(agent: Agent, corpus: Corpus, questions: Sequence[QuestionRecord], env: EpisodeConfig,
                  cfg: TrainConfig, baseline: BaselineState, optimizer: Adam, rng_seed) -> dict:
    n_shards = min(cfg.workers, len(questions))
    bounds = np.linspace(0, len(questions), n_shards + 1).astype(int)
    parts = [questions[bounds[i]:bounds[i + 1]] for i in range(n_shards)]
    total = len(questions) * cfg.rollouts
    b = baseline.value

    def run(i):
        rng = np.random.default_rng(list(rng_seed) + [i])
        with Tape() as tape:
            ro, watched = rollout_batch(agent, corpus, parts[i], env, cfg.rollouts, rng, tape)
            loss = surrogate_loss(ro, b, cfg, total)
        return tape, watched, loss, ro

    if n_shards == 1:
        results = [run(0)]
    else:
        with ThreadPoolExecutor(n_shards) as pool:
            results = list(pool.map(run, range(n_shards)))
    rewards = np.concatenate([r[3].rewards for r in results])
    entropy = float(np.mean(np.concatenate([r[3].entropy.value for r in results])))
    stats = reinforce_update(agent, [r[:3] for r in results], baseline, cfg, optimizer, rewards)
    stats.update(mean_reward=float(rewards.mean()), entropy=entropy, rewards=rewards)
    return stats


def greedy_accuracy(agent: Agent, corpus: Corpus, questions: Sequence[QuestionRecord], env: EpisodeConfig,
                    chunk: int = 256) -> float:
    if not questions:
        return 0.0
    hits = 0
    for i in range(0, len(questions), chunk):
        qs = questions[i:i + chunk]
        graphs = list({q.graph: corpus.augmented(q.graph) for q in qs}.values())
        hits += sum(tr.reward for tr in agent.greedy(graphs, qs, env))
    return hits / len(questions)


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    best_val: float = -1.0
    best_params: dict | None = None


def _metrics_line(m: dict) -> str:
    return json.dumps({k: m[k] for k in ("epoch", "mean_reward", "val_accuracy", "entropy", "grad_norm")}) + "\n"


def train(agent: Agent, corpus: Corpus, cfg: TrainConfig, env: EpisodeConfig, out_dir=None,
          resume: bool = False) -> TrainResult:
    """Epoch loop: seeded shuffle, batched rollouts and updates, greedy validation.

    With ``out_dir`` the best-validation checkpoint goes to ``best.npz``, the
    resumable state to ``last.npz`` and one JSON line per epoch to ``metrics.jsonl``.
    """
    out = Path(out_dir) if out_dir is not None else None
    optimizer = Adam(cfg.lr)
    baseline = BaselineState()
    result = TrainResult()
    start_epoch = 0
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise TrainingError(f"cannot create checkpoint directory {out}: {exc}") from None
        if resume:
            loaded, extra, arrays = Agent.load(out / "last.npz", expect_model=agent.cfg,
                                               expect_vocab_hash=agent.table.vocab_hash())
            agent.params = loaded.params
            optimizer.load_arrays(arrays, extra["adam_t"])
            baseline.value = extra["baseline"]
            start_epoch = extra["epoch"]
            result.best_val = extra["best_val"]
            result.metrics = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        else:
            (out / "metrics.jsonl").write_text("")
    train_qs = corpus.split("train")
    val_qs = corpus.split("validation")
    if result.best_params is None:
        result.best_params = {k: v.copy() for k, v in agent.params.items()}
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(len(train_qs))
        stats = []
        for bi, s in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_qs[i] for i in order[s:s + cfg.batch_size]]
            stats.append(training_step(agent, corpus, batch, env, cfg, baseline, optimizer, (cfg.seed, epoch, bi + 1)))
        val = greedy_accuracy(agent, corpus, val_qs, env)
        m = {
            "epoch": epoch + 1,
            "mean_reward": float(np.mean([s["mean_reward"] for s in stats])) if stats else 0.0,
            "val_accuracy": val,
            "entropy": float(np.mean([s["entropy"] for s in stats])) if stats else 0.0,
            "grad_norm": float(np.mean([s["grad_norm"] for s in stats])) if stats else 0.0,
        }
        result.metrics.append(m)
        log.info("epoch %d reward %.3f val %.3f entropy %.3f", m["epoch"], m["mean_reward"], val, m["entropy"])
        improved = val > result.best_val
        if improved:
            result.best_val = val
            result.best_params = {k: v.copy() for k, v in agent.params.items()}
        if out is not None:
            try:
                if improved:
                    agent.save(out / "best.npz", extra={"epoch": epoch + 1, "val_accuracy": val, "episode": asdict(env)})
                extra = {"epoch": epoch + 1, "adam_t": optimizer.t, "baseline": baseline.value,
                         "best_val": result.best_val, "train_config": asdict(cfg), "episode": asdict(env)}
                agent.save(out / "last.npz", extra=extra, arrays=optimizer.state_arrays())
                with open(out / "metrics.jsonl", "a") as fh:
                    fh.write(_metrics_line(m))
            except OSError as exc:
                raise TrainingError(f"checkpoint write to {out} failed: {exc}") from None
        if cfg.target_accuracy is not None and val >= cfg.target_accuracy:
            break
    if out is not None and not (out / "best.npz").exists():
        agent.save(out / "best.npz", extra={"epoch": 0, "val_accuracy": None, "episode": asdict(env)})
    return result
