"""Command-line entry point: ``aicollective {party,sentence,pgg,export}``."""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import contextmanager
from typing import Iterator, Sequence

from .agents import AgentError
from .config import ConfigError, RunConfig, load_config
from .runner import (
    PGG_SCENARIOS,
    agent_builder,
    export_run,
    make_manifest,
    run_party_experiment,
    run_pgg_experiment,
    run_sentence_experiment,
)
from .sentence import CONDITIONS
from .store import RunError, RunStore

logger = logging.getLogger("aicollective")

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2


def _load(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.offline:
        cfg = cfg.offline()
    missing = cfg.missing_credentials()
    if missing:
        raise ConfigError(f"{args.config}: remote backend configured but {', '.join('$' + m for m in missing)} is not set")
    return cfg


@contextmanager
def _run_log(store: RunStore) -> Iterator[None]:
    handler = logging.FileHandler(store.file("run.log"), encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    try:
        yield
    finally:
        logger.removeHandler(handler)
        handler.close()
        store.release()


def _party_store(args: argparse.Namespace) -> RunStore | None:
    return RunStore.open(args.party_run, args.out) if args.party_run else None


def cmd_party(args: argparse.Namespace) -> int:
    cfg = _load(args)
    store = RunStore.create(args.out, make_manifest("party", cfg), resume=args.resume)
    with _run_log(store):
        run_party_experiment(store, cfg, agent_builder(cfg))
    print(store.path)
    return EXIT_OK


def cmd_sentence(args: argparse.Namespace) -> int:
    cfg = _load(args)
    conditions = list(CONDITIONS) if args.condition == "all" else [args.condition]
    party = _party_store(args)
    inputs = {"conditions": conditions, "party_run": party.run_id if party else None}
    store = RunStore.create(args.out, make_manifest("sentence", cfg, inputs=inputs), resume=args.resume)
    with _run_log(store):
        run_sentence_experiment(store, cfg, agent_builder(cfg), party, conditions)
    print(store.path)
    return EXIT_OK


def cmd_pgg(args: argparse.Namespace) -> int:
    cfg = _load(args)
    party = _party_store(args)
    inputs = {"scenario": args.scenario, "party_run": party.run_id if party else None}
    store = RunStore.create(args.out, make_manifest("pgg", cfg, inputs=inputs), resume=args.resume)
    with _run_log(store):
        run_pgg_experiment(store, cfg, lambda model: agent_builder(cfg, model), party, args.scenario)
    print(store.path)
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    store = RunStore.open(args.run, args.out)
    if not store.finished:
        raise RunError(f"run {args.run} is not finished; resume it before exporting")
    for rel in export_run(store, args.format):
        print(store.file(rel))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aicollective", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", default="runs", help="directory holding run directories (default: runs)")
        p.add_argument("--resume", action="store_true", help="continue an interrupted run")
        p.add_argument("--offline", action="store_true", help="force scripted agents and the test embedder")
        return p

    experiment("party", "run the cocktail party").set_defaults(func=cmd_party)

    p = experiment("sentence", "run the seven-word sentence game")
    p.add_argument("--party-run", help="party run id or directory (needed for collective and bridged)")
    p.add_argument("--condition", choices=("all", *CONDITIONS), default="all")
    p.set_defaults(func=cmd_sentence)

    p = experiment("pgg", "run the public goods game")
    p.add_argument("--scenario", choices=PGG_SCENARIOS, required=True)
    p.add_argument("--party-run", help="party run id or directory (needed for collective settings)")
    p.set_defaults(func=cmd_pgg)

    p = sub.add_parser("export", help="re-derive the CSV tables of a finished run")
    p.add_argument("run", help="run id or directory")
    p.add_argument("--out", default="runs", help="directory holding run directories (default: runs)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(logging.INFO)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, AgentError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
