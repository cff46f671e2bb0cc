"""Command-line surface.

Commands: prepare, train-rec, train-gen, eval, chat, inspect-tree,
export-emb. Failures print a one-line JSON object to stderr and exit
nonzero so scripts can parse them.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Dict, List, Optional

import torch

from . import __version__
from .config import ConfigError, TrainConfig, load_config
from .data import GRAPH_FILE_NAMES, PreparedDataset, prepare
from .kg import load_kg, load_word_graph
from .session import chat_repl
from .training import (
    evaluate_generator,
    evaluate_reasoner,
    load_generator,
    load_reasoner,
    save_generator,
    save_reasoner,
    seed_all,
    train_generator,
    train_reasoner,
    write_loss_curve,
    write_metrics_json,
)
from .tree import init_tree

import os


def _parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _config_from_args(args) -> TrainConfig:
    overrides = _parse_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    config = load_config(getattr(args, "config", None), overrides)
    seed_all(config.seed)
    return config


def _cmd_prepare(args) -> int:
    kg = load_kg(args.kg, args.entities)
    wg = load_word_graph(args.word_vocab, args.word_edges)
    sources = dict(zip(GRAPH_FILE_NAMES, (args.kg, args.entities, args.word_vocab, args.word_edges)))
    report = prepare(args.raw, kg, wg, args.out, graph_sources=sources)
    print(
        json.dumps(
            {
                "out": report.out_dir,
                "kept": report.kept,
                "dropped": report.dropped,
                "splits": report.split_counts,
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_train_rec(args) -> int:
    config = _config_from_args(args)
    ds = PreparedDataset.load(args.data)
    valid = ds.splits["valid"] or None
    model, curve = train_reasoner(
        ds.splits["train"], ds.kg, ds.wg, config, valid_convs=valid, progress=print
    )
    os.makedirs(args.out, exist_ok=True)
    save_reasoner(os.path.join(args.out, "reasoner.pt"), model, config)
    write_loss_curve(os.path.join(args.out, "rec_loss_curve.csv"), curve)
    report = {"train": evaluate_reasoner(model, ds.splits["train"], ds.kg)}
    if valid:
        report["valid"] = evaluate_reasoner(model, valid, ds.kg)
    write_metrics_json(os.path.join(args.out, "rec_metrics.json"), report)
    print(json.dumps({"out": args.out, "epochs": len(curve)}, sort_keys=True))
    return 0


def _cmd_train_gen(args) -> int:
    config = _config_from_args(args)
    ds = PreparedDataset.load(args.data)
    reasoner = load_reasoner(args.reasoner, ds.kg, ds.wg)
    valid = ds.splits["valid"] or None
    model, curve = train_generator(
        ds.splits["train"], reasoner, ds.kg, ds.vocab, config, valid_convs=valid, progress=print
    )
    os.makedirs(args.out, exist_ok=True)
    save_generator(os.path.join(args.out, "generator.pt"), model, config)
    write_loss_curve(os.path.join(args.out, "gen_loss_curve.csv"), curve)
    report = {
        "train": evaluate_generator(
            model, reasoner, ds.splits["train"], ds.kg, ds.vocab, max_len=config.max_gen_len
        )
    }
    write_metrics_json(os.path.join(args.out, "gen_metrics.json"), report)
    print(json.dumps({"out": args.out, "epochs": len(curve)}, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    config = _config_from_args(args)
    ds = PreparedDataset.load(args.data)
    convs = ds.splits[args.split]
    if not convs:
        raise ValueError(f"split {args.split!r} is empty")
    reasoner = load_reasoner(args.reasoner, ds.kg, ds.wg)
    edges = tuple(int(e) for e in args.round_edges.split(",")) if args.round_edges else (5, 10)
    report: Dict = {"split": args.split}
    if args.ablate:
        report["ablate"] = args.ablate
    if args.ablate in ("iso", "aln"):
        report["note"] = (
            "this ablation changes the training loss; the supplied checkpoint "
            "must have been trained with the matching weight set to 0"
        )
    report.update(evaluate_reasoner(reasoner, convs, ds.kg, round_edges=edges))
    if args.generator:
        generator = load_generator(args.generator)
        report.update(
            evaluate_generator(
                generator,
                reasoner,
                convs,
                ds.kg,
                ds.vocab,
                max_len=config.max_gen_len,
                drop_entities=args.ablate in ("ent", "eu"),
                drop_utterances=args.ablate in ("utt", "eu"),
            )
        )
    if args.out:
        write_metrics_json(args.out, report)
        print(json.dumps({"out": args.out}, sort_keys=True))
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_chat(args) -> int:
    config = _config_from_args(args)
    ds = PreparedDataset.load(args.data)
    reasoner = load_reasoner(args.reasoner, ds.kg, ds.wg)
    generator = load_generator(args.generator)
    return chat_repl(
        reasoner,
        generator,
        ds.kg,
        ds.wg,
        ds.vocab,
        top_k=args.topk,
        max_len=config.max_gen_len,
    )


def _cmd_inspect_tree(args) -> int:
    ds = PreparedDataset.load(args.data)
    sample = None
    for split in ds.splits.values():
        for conv in split:
            if conv.conversation_id == args.conversation:
                sample = conv
                break
    if sample is None:
        raise ValueError(f"conversation {args.conversation!r} not found")
    if args.turn < 0 or args.turn > len(sample.turns):
        raise ValueError(
            f"turn must be in [0, {len(sample.turns)}]; it counts consumed turns"
        )
    if args.turn == 0:
        tree = init_tree()
    else:
        tree = sample.tree.snapshot(sample.nodes_after_turn[args.turn - 1])
    payload = {
        "conversation": args.conversation,
        "turn": args.turn,
        "nodes": len(tree.nodes),
        "mentions": tree.mention_count,
        "tree": tree.to_json_dict(),
        "dot": tree.to_dot(ds.kg),
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _cmd_export_emb(args) -> int:
    ds = PreparedDataset.load(args.data)
    reasoner = load_reasoner(args.reasoner, ds.kg, ds.wg)
    with torch.no_grad():
        table = reasoner.entity_encoder()
    with open(args.out, "w", encoding="utf-8") as fh:
        for e in range(table.shape[0]):
            values = " ".join(f"{float(v):.8f}" for v in table[e])
            fh.write(f"{e}\t{values}\n")
    print(json.dumps({"out": args.out, "rows": int(table.shape[0])}, sort_keys=True))
    return 0


def _add_common(parser: argparse.ArgumentParser, with_set: bool = True) -> None:
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    if with_set:
        parser.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override one setting; repeatable",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trea", description="conversational recommender over a reasoning tree"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="link, mask, and split a raw corpus")
    p.add_argument("--raw", required=True, help="raw JSONL conversations")
    p.add_argument("--kg", required=True, help="knowledge-graph triples TSV")
    p.add_argument("--entities", required=True, help="entity table TSV")
    p.add_argument("--word-vocab", required=True, help="word-graph vocabulary")
    p.add_argument("--word-edges", required=True, help="word-graph edges TSV")
    p.add_argument("--out", required=True, help="prepared dataset directory")
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("train-rec", help="train the next-entity scorer")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint and curves")
    _add_common(p)
    p.set_defaults(func=_cmd_train_rec)

    p = sub.add_parser("train-gen", help="train the response generator")
    p.add_argument("--data", required=True)
    p.add_argument("--reasoner", required=True, help="trained scorer checkpoint")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_train_gen)

    p = sub.add_parser("eval", help="run the metric suite on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--reasoner", required=True)
    p.add_argument("--generator", help="optional generator checkpoint for text metrics")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--round-edges", help="bucket edges for per-round recall, e.g. 5,10")
    p.add_argument(
        "--ablate",
        choices=("iso", "aln", "ent", "utt", "eu"),
        help="iso/aln label training-time ablations; ent/utt/eu drop generation context",
    )
    p.add_argument("--out", help="write the metric JSON here instead of stdout")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("chat", help="interactive session")
    p.add_argument("--data", required=True)
    p.add_argument("--reasoner", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--topk", type=int, default=10)
    _add_common(p)
    p.set_defaults(func=_cmd_chat)

    p = sub.add_parser("inspect-tree", help="show a stored tree state")
    p.add_argument("--data", required=True)
    p.add_argument("--conversation", required=True)
    p.add_argument("--turn", type=int, required=True, help="number of consumed turns")
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=_cmd_inspect_tree)

    p = sub.add_parser("export-emb", help="dump trained entity vectors")
    p.add_argument("--data", required=True)
    p.add_argument("--reasoner", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_emb)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # domain errors become machine-readable stderr JSON
        sys.stderr.write(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n"
        )
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
