"""Command-line entry point: ``hola <subcommand> [--config PATH] [--seed N] [--out DIR] [--workers N]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .arena import ConfigError, ContractError, EpisodeTrace, replay
from .config import RunConfig, load_run_config
from .episode import run_episode, team_controllers
from .harness import (
    custom_pool,
    export_graph,
    heterogeneous_pool,
    homogeneous_pool,
    one_evader_sr_benchmark,
    run_tournament,
)
from .openended import RunStore, generation_loop, pretrain_population, save_pretrain
from .policies import handle_from_name

log = logging.getLogger("hola")


def _apply_overrides(config: RunConfig, items: list[str]) -> RunConfig:
    """``section.key=value`` overrides, values parsed as YAML scalars."""
    data = config.to_dict()
    for item in items:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in data:
            raise ConfigError(f"bad override {item!r}; expected section.key=value")
        data[section][name] = yaml.safe_load(raw)
    return RunConfig.from_dict(data)


def _setup(args) -> RunConfig:
    config = load_run_config(args.config)
    config = _apply_overrides(config, args.set or [])
    if args.seed is not None:
        config.generation = replace(config.generation, seed=args.seed)
    workers = int(os.environ.get("HOLA_WORKERS", args.workers or config.generation.workers))
    config.generation = replace(config.generation, workers=workers)
    return config


def _out(args, default: str) -> Path:
    path = Path(args.out or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_pretrain(args) -> int:
    config = _setup(args)
    store = RunStore(_out(args, "run"))
    _, g0 = pretrain_population(config)
    save_pretrain(store, config, g0)
    print(f"pretrained {len(g0.nodes)} policies; G0 has {len(g0.weights)} hyperedges -> {store.root}")
    return 0


def cmd_evolve(args) -> int:
    config = _setup(args)
    store = RunStore(_out(args, "run"))
    initial = None
    g0_path = store.root / "gen_0" / "graph.json"
    if g0_path.exists():
        initial = store.load_graph(g0_path)
    records, g = generation_loop(config, store.root, initial)
    for r in records:
        print(f"gen {r.generation}: node {r.node_id} rank {r.rank} accepted={r.accepted}")
    print(f"final graph: {len(g.nodes)} nodes, {len(g.weights)} hyperedges")
    return 0


def _learner_from_args(args):
    if args.policy:
        return handle_from_name(args.policy, "learner")
    if args.run:
        run = Path(args.run)
        gens = sorted(
            (int(p.name.split("_")[1]) for p in run.glob("gen_*") if (p / "checkpoint").exists()),
        )
        if not gens:
            raise ContractError(f"{run} has no generation checkpoints")
        return handle_from_name(f"parametric:{run / f'gen_{gens[-1]}' / 'checkpoint'}", "learner")
    raise ContractError("eval needs --policy or --run")


def cmd_eval(args) -> int:
    config = _setup(args)
    learner = _learner_from_args(args)
    if args.pool == "heterogeneous":
        pool = heterogeneous_pool()
    elif args.pool == "homogeneous":
        pool = homogeneous_pool(args.pool_member)
    else:
        pool = custom_pool(args.pool_member)
    seeds = args.seeds or [config.generation.seed]
    metrics = run_tournament(learner, pool, args.episodes, seeds, config.arena, config.generation.workers)
    out = _out(args, "eval")
    metrics.write(out)
    print(json.dumps(metrics.summary(), sort_keys=True))
    return 0


def cmd_bench_pool(args) -> int:
    config = _setup(args)
    names = args.policy or ["greedy", "vicsek", "d3qn_g:10", "d3qn_g:16"]
    for name in names:
        handle = handle_from_name(name)
        sr, ael = one_evader_sr_benchmark(
            handle, args.episodes, config.arena, config.generation.seed, config.generation.workers
        )
        print(f"{name}\tSR={sr:.3f}\tAEL={ael:.2f}")
    return 0


def cmd_simulate(args) -> int:
    config = _setup(args)
    names = args.pursuers or ["greedy"]
    if len(names) == 1:
        names = names * config.arena.num_pursuers
    handles = [handle_from_name(n, f"{n}#{k}") for k, n in enumerate(names)]
    seed = config.generation.seed
    result = run_episode(config.arena, seed, team_controllers(handles, config.arena, seed), record=True)
    out = _out(args, "run")
    path = out / "trace.jsonl"
    result.trace.dump(path)
    print(
        f"seed={seed} ticks={result.length} captures={result.captures} "
        f"collisions={result.collision_events} reason={result.terminal_reason} trace={path}"
    )
    return 0


def cmd_graph(args) -> int:
    run = Path(args.run or args.out or "run")
    paths = export_graph(run, args.generation, args.export_dir)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def cmd_replay(args) -> int:
    trace = EpisodeTrace.load(args.trace)
    tick = replay(trace)
    if tick is None:
        print(f"trace replays exactly ({len(trace.records) - 1} ticks)")
        return 0
    print(f"trace diverges at tick {tick}", file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default", help="run config YAML or 'default'")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output/run directory")
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hola", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[common], help="pretrain the initial population and G0")
    sub.add_parser("evolve", parents=[common], help="run the generation loop")

    p = sub.add_parser("eval", parents=[common], help="tournament against an unseen pool")
    p.add_argument("--policy", help="learner policy name, e.g. parametric:<ckpt>")
    p.add_argument("--run", help="run directory; uses the newest generation checkpoint")
    p.add_argument("--pool", choices=["heterogeneous", "homogeneous", "custom"], default="heterogeneous")
    p.add_argument("--pool-member", action="append", default=[],
                   help="checkpoint (homogeneous) or policy name (custom); repeatable")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("bench-pool", parents=[common], help="one-evader SR / AEL of homogeneous teams")
    p.add_argument("--policy", action="append")
    p.add_argument("--episodes", type=int, default=50)

    p = sub.add_parser("simulate", parents=[common], help="run one scripted episode and export its trace")
    p.add_argument("--pursuers", nargs="+", help="pursuer policy names (one name fills every slot)")

    p = sub.add_parser("graph", parents=[common], help="export a generation's HyFoG and preference graph")
    p.add_argument("--run", help="run directory (defaults to --out)")
    p.add_argument("--generation", required=True)
    p.add_argument("--export-dir")

    p = sub.add_parser("replay", parents=[common], help="verify a trace bit-for-bit")
    p.add_argument("trace")
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "evolve": cmd_evolve,
    "eval": cmd_eval,
    "bench-pool": cmd_bench_pool,
    "simulate": cmd_simulate,
    "graph": cmd_graph,
    "replay": cmd_replay,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
