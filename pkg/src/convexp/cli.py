"""Command-line entry point: ``python -m convexp <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import load_config, parse_assignments
from .data import DataError
from .synth import InfeasibleSpec, SynthSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file of dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--workdir", help="shorthand for --set paths.workdir=DIR")
    p.add_argument("--data", help="directory holding corpus.jsonl, sessions.jsonl and qrels.txt")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="convexp", description="Selective history expansion for conversational search.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a seeded synthetic corpus, sessions and qrels")
    p.add_argument("--out", required=True, help="output directory")
    for name, default in SynthSpec.__dataclass_fields__.items():
        if name == "filler_per_doc":
            continue
        typ = type(default.default)
        p.add_argument(f"--{name.replace('_', '-')}", type=typ, default=default.default)

    p = sub.add_parser("index", help="build the BM25 index and fit the base dense encoder")
    _common(p)
    p = sub.add_parser("prl-generate", help="label every historical turn with the base retriever")
    _common(p)
    p = sub.add_parser("selector-train", help="train the turn selector on training-split PRL")
    _common(p)
    p = sub.add_parser("retrieve", help="write a run file for one expansion form")
    _common(p)
    p.add_argument("--form", choices=pipeline.FORMS, required=True)
    p.add_argument("--split", choices=pipeline.SPLITS, default="test")
    p.add_argument("--retriever", choices=("bm25", "dense", "joint"))
    p = sub.add_parser("joint-train", help="jointly fine-tune the query encoder and a selector head")
    _common(p)
    p = sub.add_parser("evaluate", help="score a run file against the qrels")
    _common(p)
    p.add_argument("--run", required=True, help="run file (TREC format)")
    p.add_argument("--metric", action="append", help="metric such as mrr, ndcg@3, recall@10 (repeatable)")
    p = sub.add_parser("analyze", help="topic-switch analysis and success/failure accounting")
    _common(p)
    p.add_argument("--split", choices=pipeline.SPLITS, default="test")
    p.add_argument("--selected-form", choices=("selector", "prl"), default="selector")
    p.add_argument("--reference", help="second PRL file to compare against the gold labels")
    p = sub.add_parser("fig2", help="raw / all / gold-PRL comparison under BM25 and dense retrieval")
    _common(p)
    return parser


def _config(args):
    overrides = parse_assignments(args.set)
    if args.data:
        for key, name in (("paths.corpus", "corpus.jsonl"), ("paths.sessions", "sessions.jsonl"), ("paths.qrels", "qrels.txt")):
            overrides.setdefault(key, f"{args.data}/{name}")
    if args.workdir:
        overrides["paths.workdir"] = args.workdir
    return load_config(args.config, overrides)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        out = _dispatch(args)
    except (DataError, InfeasibleSpec, FileNotFoundError) as exc:
        print(f"convexp {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - last resort
        logging.getLogger(__name__).exception("internal error")
        print(f"convexp {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    if out:
        print(out)
    return EXIT_OK


def _dispatch(args) -> str:
    cmd = args.command
    if cmd == "synth":
        fields = {k: getattr(args, k) for k in SynthSpec.__dataclass_fields__ if k != "filler_per_doc"}
        paths = pipeline.cmd_synth(SynthSpec(**fields), args.out)
        return "\n".join(str(p) for p in paths.values())
    config = _config(args)
    if cmd == "index":
        pipeline.cmd_index(config)
        return str(config.workdir / "index")
    if cmd == "prl-generate":
        labels = pipeline.cmd_prl_generate(config)
        pos = sum(lab.label for lab in labels)
        return f"{len(labels)} labels ({pos} positive)"
    if cmd == "selector-train":
        return json.dumps(pipeline.cmd_selector_train(config), indent=1)
    if cmd == "retrieve":
        return str(pipeline.cmd_retrieve(config, args.form, args.split, args.retriever))
    if cmd == "joint-train":
        history = pipeline.cmd_joint_train(config)
        return json.dumps(history[-1]) if history else "no epochs run"
    if cmd == "evaluate":
        means = pipeline.cmd_evaluate(config, args.run, args.metric)
        return "\n".join(f"{k}\t{v:.4f}" for k, v in means.items())
    if cmd == "analyze":
        report = pipeline.cmd_analyze(config, args.split, args.selected_form, args.reference)
        return json.dumps(report, indent=1, sort_keys=True)
    if cmd == "fig2":
        return pipeline.format_table(pipeline.cmd_fig2(config))
    raise UsageError(f"unknown command {cmd}")  # pragma: no cover


def main() -> None:
    sys.exit(run())
