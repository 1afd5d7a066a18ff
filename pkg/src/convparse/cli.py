"""Command-line entry points: synth, preprocess, train, eval, serve, repl.

Every hyperparameter can come from a key=value config file; command-line
flags override config values, which override defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .kg import load_graph
from .linking import Linker, PopularityTable, build_popularity
from .metrics import aggregate, format_report, score_turn
from .model import ModelConfig, ModelParams
from .pipeline import Engine, ModelParser
from .sparql import SparqlSyntaxError, UnsupportedConstruct, execute, parse_sparql, query_entity_ids
from .synthetic import SynthConfig, load_interactions, make_synthetic_corpus, save_interactions
from .text import tokenize
from .training import TrainConfig, exact_match_rate, predict_example, preprocess, split_interactions, train
from .vocab import Vocab, save_syntax_vocab
from .kg import dump_graph

logger = logging.getLogger(__name__)


def read_config_file(path: str | Path) -> dict[str, str]:
    """key=value lines; # starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    """Apply config-file values for flags the user did not pass."""
    if not getattr(args, "config", None):
        return args
    config = read_config_file(args.config)
    defaults = {a.dest: a.default for a in parser._actions}
    for key, value in config.items():
        dest = key.replace("-", "_")
        if dest not in defaults:
            continue
        if getattr(args, dest) == defaults[dest]:  # flag not explicitly set
            default = defaults[dest]
            if isinstance(default, bool):
                parsed = value.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int) and default is not None:
                parsed = int(value)
            elif isinstance(default, float) and default is not None:
                parsed = float(value)
            else:
                parsed = value
            setattr(args, dest, parsed)
    return args


def _add_kg_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus-dir", help="directory produced by `synth` (kg + interactions)")
    p.add_argument("--kg-triples", help="triples TSV (subject<TAB>predicate<TAB>object)")
    p.add_argument("--kg-labels", help="labels TSV (id<TAB>label)")
    p.add_argument("--instance-of", default=None, help="relation id used for instance-of")
    p.add_argument("--corpus", help="interactions JSONL")


def _load_kg_and_corpus(args):
    if args.corpus_dir:
        d = Path(args.corpus_dir)
        meta = json.loads((d / "synth_config.json").read_text()) if (d / "synth_config.json").exists() else {}
        triples = args.kg_triples or d / "kg_triples.tsv"
        labels = args.kg_labels or d / "kg_labels.tsv"
        instance_of = args.instance_of or meta.get("instance_of", "P31")
        corpus_path = args.corpus or d / "interactions.jsonl"
    else:
        if not (args.kg_triples and args.kg_labels and args.corpus):
            raise SystemExit("need --corpus-dir or all of --kg-triples/--kg-labels/--corpus")
        triples, labels = args.kg_triples, args.kg_labels
        instance_of = args.instance_of or "P31"
        corpus_path = args.corpus
    kg = load_graph(triples, labels, instance_of)
    interactions = load_interactions(corpus_path)
    return kg, interactions


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    tc = TrainConfig()
    p.add_argument("--learning-rate", type=float, default=tc.learning_rate)
    p.add_argument("--batch-size", type=int, default=tc.batch_size)
    p.add_argument("--max-epochs", type=int, default=tc.max_epochs)
    p.add_argument("--patience", type=int, default=tc.patience)
    p.add_argument("--weight-decay", type=float, default=tc.weight_decay)
    p.add_argument("--t-max", type=int, default=tc.t_max)
    p.add_argument("--no-type-link", action="store_true", help="disable context-dependent type linking")
    p.add_argument("--top-k-entities", type=int, default=None, help="keep K candidates instead of disambiguating")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        weight_decay=args.weight_decay,
        t_max=args.t_max,
        use_type_link=not args.no_type_link,
        seed=args.seed,
    )


def build_vocab(kg, interactions) -> Vocab:
    token_lists = [tokenize(label) for label in kg.labels.values()]
    token_lists += [tokenize(t["utterance"]) for inter in interactions for t in inter["turns"]]
    token_lists += [["yes", "no", ","]] + [[str(d)] for d in range(51)]
    return Vocab.build(token_lists)


def _build_linker(kg, interactions, top_k=None) -> Linker:
    pop = build_popularity(interactions, query_entity_ids)
    return Linker(kg, popularity=pop, top_k=top_k)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        seed=args.seed,
        n_entities=args.entities,
        n_relations=args.relations,
        n_types=args.types,
        n_interactions=args.interactions,
        min_turns=args.min_turns,
        max_turns=args.max_turns,
    )
    kg, interactions = make_synthetic_corpus(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_graph(kg, out / "kg_triples.tsv", out / "kg_labels.tsv")
    save_interactions(interactions, out / "interactions.jsonl")
    meta = asdict(cfg)
    meta["instance_of"] = kg.instance_of
    (out / "synth_config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    n_turns = sum(len(i["turns"]) for i in interactions)
    print(f"wrote {len(kg.triples)} triples, {len(interactions)} interactions, {n_turns} turns to {out}")
    return 0


def cmd_preprocess(args) -> int:
    kg, interactions = _load_kg_and_corpus(args)
    train_inter, dev_inter = split_interactions(interactions)
    linker = _build_linker(kg, train_inter, top_k=args.top_k_entities)
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    linker.popularity.save(out / "popularity.tsv")
    vocab = build_vocab(kg, train_inter)
    vocab.save(out / "tokens.vocab")
    save_syntax_vocab(out / "syntax.vocab")
    stats = {}
    for name, split in (("train", train_inter), ("dev", dev_inter)):
        examples = preprocess(split, kg, linker, cfg)
        stats[name] = {
            "interactions": len(split),
            "turns": len(examples),
            "reachable": sum(ex.reachable for ex in examples),
            "unreachable": sum(not ex.reachable for ex in examples),
            "gold_unparseable": sum(ex.gold_unparseable for ex in examples),
        }
    (out / "preprocess_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    kg, interactions = _load_kg_and_corpus(args)
    cfg = _train_config(args)
    train_inter, dev_inter = split_interactions(interactions)
    linker = _build_linker(kg, train_inter, top_k=args.top_k_entities)
    train_ex = preprocess(train_inter, kg, linker, cfg)
    dev_ex = preprocess(dev_inter, kg, linker, cfg)
    vocab = build_vocab(kg, train_inter)
    params = ModelParams(ModelConfig(d_model=args.d_model, seed=args.seed), len(vocab))
    result = train(params, vocab, train_ex, dev_ex, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / "model.ckpt")
    vocab.save(out / "tokens.vocab")
    save_syntax_vocab(out / "syntax.vocab")
    linker.popularity.save(out / "popularity.tsv")
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    (out / "train_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    train_em = exact_match_rate(params, vocab, train_ex)
    dev_em = exact_match_rate(params, vocab, dev_ex) if dev_ex else float("nan")
    print(f"best dev EM {result.best_dev_em:.3f} (epoch {result.best_epoch}); final train EM {train_em:.3f} dev EM {dev_em:.3f}")
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return 0


def evaluate_examples(params, vocab, kg, examples, corpus_meta) -> tuple:
    """Score every example; returns (scores, report)."""
    scores = []
    for ex in examples:
        pred_text = predict_example(params, vocab, ex)
        try:
            pred_answer = execute(kg, parse_sparql(pred_text))
        except (SparqlSyntaxError, UnsupportedConstruct, ValueError):
            pred_answer = None
        scores.append(
            score_turn(
                pred_text,
                pred_answer,
                ex.gold_sparql,
                ex.gold_answer,
                question_type=ex.question_type,
                turn_position=ex.turn_index,
                phenomena=ex.phenomena,
                unreachable=not ex.reachable,
            )
        )
    return scores, aggregate(scores)


def cmd_eval(args) -> int:
    kg, interactions = _load_kg_and_corpus(args)
    cfg = _train_config(args)
    train_inter, dev_inter = split_interactions(interactions)
    split = {"train": train_inter, "dev": dev_inter, "all": interactions}[args.split]
    linker = _build_linker(kg, train_inter, top_k=args.top_k_entities)
    examples = preprocess(split, kg, linker, cfg)
    params = ModelParams.load(args.checkpoint)
    vocab = Vocab.load(Path(args.checkpoint).parent / "tokens.vocab" if args.vocab is None else args.vocab)
    scores, report = evaluate_examples(params, vocab, kg, examples, None)
    print(format_report(report))
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        print(f"report written to {args.out}")
    return 0


def _make_engine(args) -> Engine:
    kg, interactions = _load_kg_and_corpus(args)
    train_inter, _ = split_interactions(interactions)
    linker = _build_linker(kg, train_inter, top_k=args.top_k_entities)
    params = ModelParams.load(args.checkpoint)
    vocab = Vocab.load(Path(args.checkpoint).parent / "tokens.vocab" if args.vocab is None else args.vocab)
    parser = ModelParser(params, vocab)
    return Engine(
        kg,
        linker,
        parser,
        t_max=args.t_max,
        use_type_link=not args.no_type_link,
        checkpoint_id=str(args.checkpoint),
    )


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    engine = _make_engine(args)
    app = create_app(engine, ui_dir=args.ui_dir, idle_timeout_s=args.idle_timeout)
    config = uvicorn.Config(app, host=args.host, port=args.port, log_level="warning")
    server = uvicorn.Server(config)

    # report the bound port (supports --port 0)
    import socket

    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.bind((args.host, args.port))
    bound_port = sock.getsockname()[1]
    print(f"serving on http://{args.host}:{bound_port}", flush=True)
    config.port = bound_port
    server.run(sockets=[sock])
    return 0


def cmd_repl(args) -> int:
    engine = _make_engine(args)
    from .pipeline import SessionStore

    store = SessionStore(engine)
    session = store.create()
    print("interactive session started; empty line or ctrl-d exits")
    while True:
        try:
            line = input("you> ").strip()
        except EOFError:
            break
        if not line:
            break
        record = engine.step(session, line)
        print(f"sparql> {record.sparql}")
        if record.unexecutable:
            print("answer> (query did not execute)")
            continue
        d = record.answer.to_dict(engine.kg.label)
        if d["kind"] == "entity_set":
            print("answer>", ", ".join(d.get("labels", d["entities"])) or "(empty)")
        elif d["kind"] == "boolean":
            print("answer>", "Yes" if d["truth"] else "No")
        else:
            print("answer>", d["value"])
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    top = argparse.ArgumentParser(prog="convparse")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic KG + conversation corpus")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--interactions", type=int, default=200)
    p.add_argument("--entities", type=int, default=200)
    p.add_argument("--relations", type=int, default=10)
    p.add_argument("--types", type=int, default=15)
    p.add_argument("--min-turns", type=int, default=3)
    p.add_argument("--max-turns", type=int, default=5)
    p.set_defaults(func=cmd_synth, parser=p)

    p = sub.add_parser("preprocess", help="build popularity table, vocab, and reachability stats")
    p.add_argument("--config")
    _add_kg_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess, parser=p)

    p = sub.add_parser("train", help="train a parser on a corpus")
    p.add_argument("--config")
    _add_kg_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train, parser=p)

    p = sub.add_parser("eval", help="score a checkpoint and print the metric report")
    p.add_argument("--config")
    _add_kg_flags(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--split", choices=("train", "dev", "all"), default="dev")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval, parser=p)

    p = sub.add_parser("serve", help="serve the HTTP API and chat UI")
    p.add_argument("--config")
    _add_kg_flags(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8040)
    p.add_argument("--ui-dir", default=None)
    p.add_argument("--idle-timeout", type=float, default=1800.0)
    p.set_defaults(func=cmd_serve, parser=p)

    p = sub.add_parser("repl", help="interactive terminal chat over one session")
    p.add_argument("--config")
    _add_kg_flags(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_repl, parser=p)

    args = top.parse_args(argv)
    args = _merge_config(args, args.parser)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
