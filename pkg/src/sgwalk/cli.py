"""Command-line entry point: ``sgwalk <command> ...``.

Exit codes: 0 on success, 1 on validation or I/O failures, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from .corpus import (
    BINARY,
    OPEN,
    CorpusError,
    EmbeddingTable,
    QuestionRecord,
    SyntheticConfig,
    generate_synthetic_corpus,
    graph_from_dict,
    import_gqa,
    is_gqa,
    load_corpus,
    load_embeddings,
    read_json,
    tokenize,
)
from .encoders import EncoderError, GATConfig, QuestionEncoderConfig
from .evaluator import EvaluationError, evaluate
from .policy import Agent, CheckpointError, ModelConfig, PolicyError
from .scenegraph import GraphError, SceneGraph
from .trainer import TrainConfig, TrainingError, train
from .walkenv import EnvError, EpisodeConfig, EpisodeTrace

log = logging.getLogger("sgwalk")

BINARY_OPENERS = {"is", "are", "was", "were", "does", "do", "did", "can", "could", "has", "have", "will"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything ``train`` needs; built from defaults, then a config file, then flags."""

    corpus: str | None = None
    out: str | None = None
    seed: int = 0
    embeddings: str | None = None
    steps: int = 4
    binary_injection: bool = True
    dim: int = 64
    history_layers: int = 2
    ff_dim: int | None = None
    freeze_words: bool = False
    gat_layers: int = 2
    gat_heads: int = 4
    question_layers: int = 2
    question_heads: int = 4
    max_length: int = 30
    rollouts: int = 8
    lr: float = 1e-3
    baseline_decay: float = 0.99
    entropy: float = 0.01
    epochs: int = 30
    batch_size: int = 16
    clip_norm: float = 5.0
    use_baseline: bool = True
    workers: int = 1
    target_accuracy: float | None = None

    @classmethod
    def merge(cls, file_values: dict, flag_values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(file_values)
        values.update({k: v for k, v in flag_values.items() if v is not None})
        return cls(**values)

    def model(self) -> ModelConfig:
        return ModelConfig(self.dim, self.history_layers, self.ff_dim,
                           GATConfig(self.gat_layers, self.gat_heads),
                           QuestionEncoderConfig(self.question_layers, self.question_heads, None, self.max_length),
                           self.freeze_words)

    def episode(self) -> EpisodeConfig:
        return EpisodeConfig(self.steps, self.binary_injection)

    def trainer(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})


def read_config(path) -> dict:
    text = Path(path).read_text()
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    return data


# --- helpers ----------------------------------------------------------------------


def load_graph(path, scene: str | None = None, check: bool = True) -> SceneGraph:
    """Native graph JSON, or a GQA scene file (one record or an id-keyed mapping)."""
    data = read_json(path)
    if not is_gqa(data):
        return graph_from_dict(data, str(path), check)
    if "objects" in data:
        g = import_gqa(data, Path(path).stem)
    else:
        if scene is None:
            if len(data) != 1:
                raise UsageError(f"{path} holds {len(data)} scenes; pick one with --scene")
            scene = next(iter(data))
        if scene not in data:
            raise CorpusError(f"{path}: no scene {scene!r}")
        g = import_gqa(data[scene], scene)
    if check:
        problems = g.validate()
        if problems:
            raise CorpusError(f"{path}: " + "; ".join(problems))
    return g


def make_question(text: str, graph_id: str) -> QuestionRecord:
    """Question record for free text; binary when it opens with an auxiliary verb."""
    toks = tokenize(text)
    if not toks:
        raise UsageError("the question has no words")
    binary = toks[0] in BINARY_OPENERS
    return QuestionRecord("q", graph_id, toks, "yes" if binary else "?", BINARY if binary else OPEN)


def load_checkpoint(path) -> tuple[Agent, EpisodeConfig]:
    agent, extra, _ = Agent.load(path)
    ep = extra.get("episode") or {}
    return agent, EpisodeConfig(**ep) if ep else EpisodeConfig()


def trace_to_dot(tr: EpisodeTrace, question: str, top: int = 3) -> str:
    def q(s: str) -> str:
        return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'

    lines = ["digraph trace {", f"  label={q(question)};", "  rankdir=LR;"]
    nodes = list(dict.fromkeys(tr.entities))
    for n in nodes:
        lines.append(f"  {q(n)} [shape=box, style=bold];")
    alt_nodes = set()
    for i, a in enumerate(tr.actions):
        src = tr.entities[i]
        lines.append(f"  {q(src)} -> {q(a.target)} [label={q(f'{i + 1}: {a.relation.name}')}, style=bold];")
        dist = tr.dists[i] if i < len(tr.dists) else []
        chosen = str(a)
        others = sorted((d for d in dist if d[0] != chosen), key=lambda d: -d[1])[:top]
        for name, p in others:
            rel, _, tgt = name.partition("->")
            if tgt not in nodes and tgt not in alt_nodes:
                alt_nodes.add(tgt)
                lines.append(f"  {q(tgt)} [shape=ellipse, style=dashed];")
            lines.append(f"  {q(src)} -> {q(tgt)} [label={q(f'{i + 1}: {rel} ({p:.3f})')}, style=dashed];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _predict(agent: Agent, corpus, questions, env: EpisodeConfig, chunk: int = 256) -> dict[str, str]:
    preds = {}
    for i in range(0, len(questions), chunk):
        qs = questions[i:i + chunk]
        graphs = list({x.graph: corpus.augmented(x.graph) for x in qs}.values())
        for x, tr in zip(qs, agent.greedy(graphs, qs, env)):
            preds[x.qid] = tr.answer
    return preds


# --- commands -----------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = SyntheticConfig(num_graphs=args.graphs, min_entities=args.min_entities, max_entities=args.max_entities,
                          questions_per_graph=args.questions_per_graph, max_steps=args.steps, seed=args.seed)
    corpus = generate_synthetic_corpus(cfg, args.out)
    counts = {s: len(corpus.split(s)) for s in ("train", "validation", "test")}
    print(f"wrote {len(corpus.graphs)} graphs and {len(corpus.questions)} questions to {args.out} {counts}")
    return 0


TRAIN_FLAGS = ("corpus", "out", "seed", "embeddings", "steps", "dim", "history_layers", "rollouts", "lr",
               "baseline_decay", "entropy", "epochs", "batch_size", "clip_norm", "workers", "target_accuracy")


def cmd_train(args) -> int:
    file_values = read_config(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in TRAIN_FLAGS}
    if args.no_baseline:
        flags["use_baseline"] = False
    if args.freeze_words:
        flags["freeze_words"] = True
    run = RunConfig.merge(file_values, flags)
    if run.corpus is None or run.out is None:
        raise UsageError("train needs --corpus and --out (flag or config key)")
    log.info("resolved config: %s", json.dumps(asdict(run), sort_keys=True))
    corpus = load_corpus(run.corpus)
    pretrained = load_embeddings(run.embeddings, run.dim, run.seed) if run.embeddings else None
    table = EmbeddingTable.for_vocabulary(corpus.vocabulary(), run.dim, run.seed, pretrained)
    agent = Agent(table, run.model(), run.seed)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(run), indent=1, sort_keys=True) + "\n")
    result = train(agent, corpus, run.trainer(), run.episode(), out, resume=args.resume)
    print(f"best validation accuracy {result.best_val:.4f}; checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    agent, env = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    questions = corpus.split(args.split)
    if not questions:
        raise UsageError(f"split {args.split!r} is empty")
    report = evaluate(_predict(agent, corpus, questions, env), questions)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    else:
        print(report.to_json())
    return 0


def cmd_answer(args) -> int:
    agent, env = load_checkpoint(args.ckpt)
    g = load_graph(args.graph, args.scene).augment()
    question = make_question(args.question, g.id)
    if args.beam > 1:
        tr = agent.beam(g, question, env, args.beam)
    else:
        tr = agent.greedy([g], [question], env)[0]
    print(tr.answer)
    for i, a in enumerate(tr.actions):
        print(f"  {i + 1}. {tr.entities[i]} --{a.relation.name}--> {a.target}")
    return 0


def cmd_trace(args) -> int:
    agent, env = load_checkpoint(args.ckpt)
    corpus = load_corpus(args.corpus)
    try:
        question = corpus.question(args.qid)
    except KeyError:
        raise CorpusError(f"no question {args.qid!r} in {args.corpus}") from None
    tr = agent.greedy([corpus.augmented(question.graph)], [question], env, keep_dists=True)[0]
    sys.stdout.write(trace_to_dot(tr, question.text) if args.format == "dot" else tr.to_json() + "\n")
    return 0


def cmd_validate(args) -> int:
    data = read_json(args.graph)
    problems = []
    if not is_gqa(data) and isinstance(data, dict) and isinstance(data.get("triples"), list):
        # triples that cannot be loaded at all are reported here, the rest go through validate()
        g = graph_from_dict(dict(data, triples=[]), str(args.graph), check=False)
        for i, t in enumerate(data["triples"]):
            if not (isinstance(t, list) and len(t) == 3):
                problems.append(f"malformed: triples[{i}] must have 3 elements")
                continue
            missing = [str(e) for e in (t[0], t[2]) if str(e) not in g.entities]
            if missing:
                problems.append(f"dangling-endpoint: {missing[0]!r} in ({', '.join(map(str, t))})")
                continue
            try:
                g.add_triple(str(t[0]), str(t[1]), str(t[2]))
            except GraphError as exc:
                problems.append(f"reserved-relation: triples[{i}]: {exc}")
    else:
        g = load_graph(args.graph, args.scene, check=False)
    problems += g.validate()
    for p in problems:
        print(p)
    return 1 if problems else 0


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sgwalk", description="Question answering by walks over scene graphs.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-corpus", help="write a synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--graphs", type=int, default=200, help="number of scene graphs")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--min-entities", type=int, default=8, help="fewest entities per graph")
    p.add_argument("--max-entities", type=int, default=15, help="most entities per graph")
    p.add_argument("--questions-per-graph", type=int, default=10, help="questions generated per graph")
    p.add_argument("--steps", type=int, default=4, help="episode length the oracle paths are padded to")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train an agent with REINFORCE")
    p.add_argument("--config", help="JSON or YAML file of run settings; flags override it")
    p.add_argument("--corpus", help="corpus directory (holds manifest.json)")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.npz")
    p.add_argument("--workers", type=int, help="parallel rollout shards per batch")
    p.add_argument("--seed", type=int, help="seed for initialization, shuffling and sampling")
    p.add_argument("--embeddings", help="word vector text file (word then floats per line)")
    p.add_argument("--steps", type=int, help="episode length T")
    p.add_argument("--dim", type=int, help="embedding dimension d")
    p.add_argument("--history-layers", type=int, help="stacked LSTM layers")
    p.add_argument("--rollouts", type=int, help="sampled walks per question")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--baseline-decay", type=float, help="moving-average baseline decay")
    p.add_argument("--entropy", type=float, help="entropy bonus weight")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", type=int, help="questions per update")
    p.add_argument("--clip-norm", type=float, help="global gradient norm limit")
    p.add_argument("--target-accuracy", type=float, help="stop once validation accuracy reaches this")
    p.add_argument("--no-baseline", action="store_true", help="plain REINFORCE without a baseline")
    p.add_argument("--freeze-words", action="store_true", help="keep word vectors fixed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--ckpt", required=True, help="checkpoint file or directory")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"), help="split to score")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("answer", help="answer one question about one graph")
    p.add_argument("--graph", required=True, help="native graph JSON or GQA scene JSON")
    p.add_argument("--scene", help="scene id inside a multi-scene GQA file")
    p.add_argument("--question", required=True, help="question text")
    p.add_argument("--ckpt", required=True, help="checkpoint file or directory")
    p.add_argument("--beam", type=int, default=1, help="beam width (1 = greedy)")
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("trace", help="export the greedy walk for a corpus question")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--qid", required=True, help="question id")
    p.add_argument("--ckpt", required=True, help="checkpoint file or directory")
    p.add_argument("--format", default="json", choices=("dot", "json"), help="output format")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("validate", help="check a scene graph file; exit 1 on violations")
    p.add_argument("--graph", required=True, help="native graph JSON or GQA scene JSON")
    p.add_argument("--scene", help="scene id inside a multi-scene GQA file")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sgwalk: error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, GraphError, CheckpointError, EnvError, EncoderError, PolicyError, EvaluationError,
            TrainingError, OSError, ValueError) as exc:
        print(f"sgwalk: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
