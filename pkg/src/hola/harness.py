"""Unseen-teammate pools, tournaments, the one-evader benchmark and graph export."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .arena import ArenaConfig, ContractError
from .episode import EpisodeResult, derive_seed, run_episode, team_controllers
from .hyfog import HyFoG, build_preference_hypergraph, hyper_preference_centrality, to_dot
from .policies import PolicyHandle, handle_from_name


@dataclass
class UnseenPool:
    name: str
    members: list[PolicyHandle]
    duplicate: bool = False  # homogeneous-by-duplication: one member fills both slots

    def __post_init__(self) -> None:
        if len(self.members) < 2:
            raise ContractError("an unseen pool needs at least two members")


def heterogeneous_pool() -> UnseenPool:
    return UnseenPool(
        "heterogeneous",
        [
            PolicyHandle("greedy", "greedy"),
            PolicyHandle("vicsek", "vicsek"),
            PolicyHandle("d3qn_g_shell", "d3qn_g-1", apf_index=10),
            PolicyHandle("d3qn_g_shell", "d3qn_g-2", apf_index=16),
        ],
    )


def homogeneous_pool(checkpoints: Sequence[str]) -> UnseenPool:
    members = [handle_from_name(f"parametric:{c}", f"ckpt-{k}") for k, c in enumerate(checkpoints)]
    return UnseenPool("homogeneous", members, duplicate=True)


def custom_pool(names: Sequence[str]) -> UnseenPool:
    return UnseenPool("custom", [handle_from_name(n, f"{n}#{k}") for k, n in enumerate(names)])


@dataclass
class EpisodeRow:
    seed: int
    episode: int
    episode_seed: int
    teammates: list[str]
    captures: int
    success: bool
    collision: bool
    length: int
    terminal_reason: str


@dataclass
class Metrics:
    success_rate: float
    collision_rate: float
    mean_episode_length: float
    episodes: int
    seeds: list[int]
    rows: list[EpisodeRow] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("rows")
        return out

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "episodes.jsonl", "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(asdict(row), sort_keys=True) + "\n")
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["success_rate", "collision_rate", "mean_episode_length", "episodes"])
            writer.writerow([self.success_rate, self.collision_rate, self.mean_episode_length, self.episodes])


def aggregate(rows: Sequence[EpisodeRow], seeds: Sequence[int]) -> Metrics:
    n = len(rows)
    if n == 0:
        return Metrics(0.0, 0.0, 0.0, 0, list(seeds), [])
    return Metrics(
        success_rate=sum(r.success for r in rows) / n,
        collision_rate=sum(r.collision for r in rows) / n,
        mean_episode_length=math.fsum(r.length for r in rows) / n,
        episodes=n,
        seeds=list(seeds),
        rows=list(rows),
    )


def _tournament_episode(task) -> EpisodeResult:
    arena, episode_seed, team = task
    return run_episode(arena, episode_seed, team_controllers(team, arena, episode_seed))


def _map(fn, tasks, workers: int):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def run_tournament(
    learner: PolicyHandle,
    pool: UnseenPool,
    episodes_per_seed: int,
    seeds: Sequence[int],
    arena: ArenaConfig | None = None,
    workers: int = 1,
) -> Metrics:
    """Learner in pursuer slot 0 with two pool teammates drawn per episode."""
    arena = arena or ArenaConfig()
    n_mates = arena.num_pursuers - 1
    plan = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for k in range(episodes_per_seed):
            if pool.duplicate:
                pick = [int(rng.integers(len(pool.members)))] * n_mates
            else:
                if n_mates > len(pool.members):
                    raise ContractError("pool too small to draw distinct teammates")
                pick = [int(i) for i in rng.choice(len(pool.members), n_mates, replace=False)]
            mates = [pool.members[i] for i in pick]
            plan.append((seed, k, derive_seed(seed, "tournament", k), mates))
    tasks = [(arena, ep_seed, [learner, *mates]) for _, _, ep_seed, mates in plan]
    results = _map(_tournament_episode, tasks, workers)
    rows = [
        EpisodeRow(
            seed=seed,
            episode=k,
            episode_seed=ep_seed,
            teammates=[m.id for m in mates],
            captures=res.captures,
            success=res.success,
            collision=res.pursuer_collision_episode,
            length=res.length,
            terminal_reason=res.terminal_reason,
        )
        for (seed, k, ep_seed, mates), res in zip(plan, results)
    ]
    return aggregate(rows, seeds)


def one_evader_sr_benchmark(
    team: Sequence[PolicyHandle] | PolicyHandle,
    episodes: int,
    arena: ArenaConfig | None = None,
    seed: int = 0,
    workers: int = 1,
) -> tuple[float, float]:
    """(fraction of episodes with at least one capture, mean episode length in ticks)."""
    arena = arena or ArenaConfig()
    if isinstance(team, PolicyHandle):
        team = [team] * arena.num_pursuers
    tasks = [(arena, derive_seed(seed, "bench", k), list(team)) for k in range(episodes)]
    results = _map(_tournament_episode, tasks, workers)
    sr = sum(r.captures >= 1 for r in results) / episodes
    ael = math.fsum(r.length for r in results) / episodes
    return sr, ael


# -- graph export -------------------------------------------------------------------


def export_graph(run_dir: str | Path, generation: int | str, out_dir: str | Path | None = None) -> dict[str, Path]:
    """Write canonical graph JSON, preference graph JSON, centrality and DOT files."""
    run_dir = Path(run_dir)
    if generation in ("", None):
        raise ContractError("a generation index is required")
    src = run_dir / f"gen_{int(generation)}" / "graph.json"
    if not src.exists():
        raise FileNotFoundError(f"no graph snapshot at {src}")
    g = HyFoG.from_dict(json.loads(src.read_text()))
    return write_graph_exports(g, Path(out_dir) if out_dir else src.parent, stem="export")


def write_graph_exports(g: HyFoG, out_dir: Path, stem: str = "export") -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    pg = build_preference_hypergraph(g)
    report = hyper_preference_centrality(pg)
    paths = {
        "graph": out_dir / f"{stem}_graph.json",
        "preference": out_dir / f"{stem}_preference.json",
        "centrality": out_dir / f"{stem}_centrality.json",
        "dot": out_dir / f"{stem}_preference.dot",
    }
    paths["graph"].write_text(g.to_json())
    paths["preference"].write_text(pg.to_json())
    paths["centrality"].write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    paths["dot"].write_text(to_dot(pg, report))
    return paths
