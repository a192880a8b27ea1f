"""The open-ended generation loop: pretraining, Grapher, phi-Solver hookup and Oracle.

Nodes of the HyFoG are integer ids; ``HyFoG.policies`` binds each id to a
PolicyHandle. Ids only grow, so the newest node always has the largest id.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .arena import ArenaConfig, ContractError, observation_width
from .config import RunConfig
from .episode import derive_seed, run_episode, team_controllers
from .hyfog import HyFoG, centrality, check, edge_key
from .myerson import PhiDistribution, myerson_closed_form, phi_distribution, sample_teammates
from .policies import PolicyHandle, PolicyParameters
from .ppo import (
    EpisodeSetup,
    PPOTrainer,
    collect_rollouts,
    compute_gae,
    save_checkpoint,
)

log = logging.getLogger(__name__)


def fingerprint(handle: PolicyHandle) -> str:
    """Content digest of a policy: equal behaviour-defining content, equal fingerprint."""
    h = hashlib.sha256(f"{handle.kind}:{handle.apf_index}:{handle.tuning}".encode())
    if handle.parameters is not None:
        h.update(repr(handle.parameters.shape).encode())
        h.update(np.ascontiguousarray(handle.parameters.vector).tobytes())
    return h.hexdigest()[:16]


def _edge_episode(args) -> float:
    members, arena, seed = args
    result = run_episode(arena, seed, team_controllers(members, arena, seed))
    return result.capture_fraction


def evaluate_hyperedge(
    members: Sequence[PolicyHandle],
    episodes: int,
    root_seed: int,
    arena: ArenaConfig,
    workers: int = 1,
) -> float:
    """Mean fraction of evaders captured by ``members`` as the pursuer team.

    Slot order and episode seeds depend only on the members' content
    fingerprints, so a team's weight is independent of node ids and scheduling.
    """
    if len(members) != arena.num_pursuers:
        raise ContractError(f"team of {len(members)} does not fill {arena.num_pursuers} pursuer slots")
    if len({h.id for h in members}) != len(members):
        raise ContractError("hyperedge members must be distinct")
    keyed = sorted(members, key=lambda h: (fingerprint(h), h.id))
    team_key = ",".join(fingerprint(h) for h in keyed)
    tasks = [(keyed, arena, derive_seed(root_seed, team_key, k)) for k in range(episodes)]
    if workers > 1 and episodes > 1:
        with ProcessPoolExecutor(workers) as pool:
            fractions = list(pool.map(_edge_episode, tasks))
    else:
        fractions = [_edge_episode(t) for t in tasks]
    return math.fsum(fractions) / episodes if episodes else 0.0


def capture_weight(capture_counts: Sequence[int], num_evaders: int) -> float:
    """Hyperedge weight from per-episode capture counts."""
    return math.fsum(c / num_evaders for c in capture_counts) / len(capture_counts)


def grapher_extend(
    g_prev: HyFoG,
    learner_id: int,
    learner: PolicyHandle,
    arena: ArenaConfig,
    episodes: int,
    root_seed: int,
    workers: int = 1,
) -> HyFoG:
    """Attach the learner with one weighted hyperedge per (l-1)-subset of old nodes."""
    if len(g_prev.nodes) < g_prev.edge_size - 1:
        raise ContractError("previous graph too small to host the learner's hyperedges")
    g = g_prev.copy()
    g.add_node(learner_id, learner)
    for others in combinations(g_prev.nodes, g_prev.edge_size - 1):
        team = [g_prev.policies[n] for n in others] + [learner]
        g.weights[edge_key((*others, learner_id))] = evaluate_hyperedge(
            team, episodes, root_seed, arena, workers
        )
    return g


def complete_graph(
    handles: dict[int, PolicyHandle], edge_size: int, arena: ArenaConfig, episodes: int,
    root_seed: int, workers: int = 1,
) -> HyFoG:
    g = HyFoG(edge_size, sorted(handles), {}, dict(handles))
    for members in combinations(sorted(handles), edge_size):
        g.weights[members] = evaluate_hyperedge(
            [handles[m] for m in members], episodes, root_seed, arena, workers
        )
    return g


def prune_graph(g: HyFoG, max_size: int) -> HyFoG:
    """Drop lowest-centrality nodes (oldest first on ties) until one slot is free.

    Centrality is recomputed after each removal. The node ranked first before
    pruning is never removed, even if its centrality drops along the way.
    """
    if max_size - 1 < g.edge_size and len(g.nodes) > max_size - 1:
        raise ContractError(f"pruning to {max_size - 1} nodes would leave fewer than {g.edge_size}")
    g = g.copy()
    if len(g.nodes) <= max_size - 1:
        return g
    incumbent = centrality(g).ranking[0]
    while len(g.nodes) > max_size - 1:
        report = centrality(g)
        victim = min((n for n in g.nodes if n != incumbent), key=lambda n: (report.in_degree[n], n))
        g.remove_node(victim)
    check(g)
    return g


def mean_incident_weight(g: HyFoG) -> dict[int, float]:
    return {n: math.fsum(g.weights[e] for e in g.incident(n)) / len(g.incident(n)) for n in g.nodes}


def solve_phi(g: HyFoG, mode: str = "myerson", epsilon: float = 1e-6) -> PhiDistribution:
    """Teammate distribution; ``inverse_mean_reward`` is the ablation without Myerson values."""
    if mode == "inverse_mean_reward":
        return phi_distribution(mean_incident_weight(g), epsilon)
    if mode == "softmax":
        return phi_distribution(myerson_closed_form(g), epsilon, mode="softmax")
    return phi_distribution(myerson_closed_form(g), epsilon)


# -- pretraining --------------------------------------------------------------------


def _self_play_source(arena: ArenaConfig, root_seed: int, tag: str):
    def source(k: int, rng: np.random.Generator) -> EpisodeSetup:
        return EpisodeSetup(arena, derive_seed(root_seed, tag, k), list(range(arena.num_pursuers)), {})

    return source


def pretrain_population(config: RunConfig) -> tuple[list[PolicyParameters], HyFoG]:
    """Self-play a population with the shared mixture-entropy bonus, then build G0."""
    gen, arena = config.generation, config.arena
    trainer_cfg = replace(config.trainer, population_entropy_alpha=gen.alpha)
    obs_dim = observation_width(arena)
    n0 = gen.pretrain_population_size
    trainers = [
        PPOTrainer(
            PolicyParameters.initialize(obs_dim, derive_seed(gen.seed, "init", k), trainer_cfg.hidden),
            trainer_cfg,
            derive_seed(gen.seed, "sgd", k),
        )
        for k in range(n0)
    ]
    rngs = [np.random.default_rng(derive_seed(gen.seed, "pretrain-rng", k)) for k in range(n0)]
    batch = min(trainer_cfg.batch_size, max(gen.pretrain_steps, 1))
    iterations = math.ceil(gen.pretrain_steps / batch) if gen.pretrain_steps > 0 else 0
    for it in range(iterations):
        population = [t.params for t in trainers]
        steps = min(batch, gen.pretrain_steps - it * batch)
        for k, trainer in enumerate(trainers):
            buf = collect_rollouts(
                population[k],
                _self_play_source(arena, gen.seed, f"pretrain-{k}-{it}"),
                steps,
                rngs[k],
                config.reward,
                population=population,
                alpha=gen.alpha,
                mc_samples=trainer_cfg.entropy_mc_samples,
            )
            compute_gae(buf, trainer_cfg.gamma, trainer_cfg.gae_lambda)
            stats = trainer.update(buf)
            log.info("pretrain policy %d iter %d: %s", k, it, stats)
    params = [t.params for t in trainers]
    handles = {k: PolicyHandle("parametric", f"node-{k}", params[k]) for k in range(n0)}
    g0 = complete_graph(
        handles, gen.edge_size, arena, gen.episodes_per_edge, derive_seed(gen.seed, "grapher"), gen.workers
    )
    check(g0)
    return params, g0


# -- oracle -------------------------------------------------------------------------


@dataclass
class GenerationRecord:
    generation: int
    node_id: int
    accepted: bool
    rank: int
    acceptance_rank: int
    graph_hash: str
    trial_graph_hash: str
    centrality: dict[str, Any]
    phi: dict[str, Any]
    training: list[dict[str, float]] = field(default_factory=list)
    wall_clock: float = 0.0
    steps: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class OracleResult:
    params: PolicyParameters
    record: GenerationRecord
    trial_graph: HyFoG
    phi: PhiDistribution


def oracle_train(
    g: HyFoG,
    learner_id: int,
    config: RunConfig,
    rng: np.random.Generator,
    generation: int = 0,
) -> OracleResult:
    """Train a learner against phi-sampled teammates until it ranks within the top m."""
    start = time.time()
    check(g)
    gen, arena, trainer_cfg = config.generation, config.arena, config.trainer
    report = centrality(g)
    incumbent = g.policies[report.ranking[0]]
    if incumbent.parameters is None:
        raise ContractError("learner warm start needs a parametric incumbent")
    trainer = PPOTrainer(incumbent.parameters.copy(), trainer_cfg, int(rng.integers(2**63)))
    phi = solve_phi(g, gen.phi_mode, gen.phi_epsilon)
    if len(phi.support()) < gen.edge_size - 1:
        raise ContractError("phi support too small to draw distinct teammates")
    n_mates = gen.edge_size - 1
    grapher_seed = derive_seed(gen.seed, "grapher")

    def source(k: int, ep_rng: np.random.Generator) -> EpisodeSetup:
        mates = sample_teammates(phi, n_mates, {learner_id}, ep_rng)
        seed = int(ep_rng.integers(2**63))
        controllers = team_controllers([g.policies[m] for m in mates], arena, seed)
        others = {slot + 1: c for slot, c in enumerate(controllers)}
        return EpisodeSetup(arena, seed, [0], others)

    interval = gen.acceptance_eval_interval or trainer_cfg.batch_size
    budget = gen.per_generation_step_budget
    steps_done, since_check = 0, 0
    best: tuple[int, int, PolicyParameters, HyFoG] | None = None
    training: list[dict[str, float]] = []
    accepted = False
    while steps_done < budget:
        steps = min(trainer_cfg.batch_size, budget - steps_done)
        buf = collect_rollouts(trainer.params, source, steps, rng, config.reward)
        compute_gae(buf, trainer_cfg.gamma, trainer_cfg.gae_lambda)
        stats = trainer.update(buf)
        steps_done += steps
        since_check += steps
        stats.update(
            iteration=trainer.iterations,
            steps=steps_done,
            mean_return=float(np.mean(buf.episode_returns)) if buf.episode_returns else float("nan"),
            success_rate=float(np.mean(buf.episode_successes)) if buf.episode_successes else float("nan"),
        )
        if since_check >= interval or steps_done >= budget:
            since_check = 0
            candidate = trainer.params
            handle = PolicyHandle("parametric", f"node-{learner_id}", candidate)
            trial = grapher_extend(g, learner_id, handle, arena, gen.episodes_per_edge, grapher_seed, gen.workers)
            rank = centrality(trial).rank(learner_id)
            stats["trial_rank"] = rank
            # keep the best-ranked checkpoint; later ones win ties
            if best is None or rank <= best[0]:
                best = (rank, trainer.iterations, candidate, trial)
            if rank <= gen.acceptance_rank:
                accepted = True
                training.append(stats)
                break
        training.append(stats)
    if best is None:
        raise ContractError("step budget too small for a single acceptance check")
    rank, _, params, trial = best
    record = GenerationRecord(
        generation=generation,
        node_id=learner_id,
        accepted=accepted,
        rank=rank,
        acceptance_rank=gen.acceptance_rank,
        graph_hash=g.digest(),
        trial_graph_hash=trial.digest(),
        centrality=centrality(trial).to_dict(),
        phi=phi.to_dict(),
        training=training,
        wall_clock=time.time() - start,
        steps=steps_done,
    )
    return OracleResult(params, record, trial, phi)


# -- persistence and the loop -------------------------------------------------------


class RunStore:
    """Run directory layout: config snapshot, nodes/, gen_<j>/ and metrics.csv."""

    METRIC_FIELDS = [
        "generation", "iteration", "steps", "mean_return", "success_rate", "policy_loss",
        "value_loss", "entropy", "approx_kl", "clip_fraction", "trial_rank",
    ]

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def node_path(self, node_id: int) -> Path:
        return self.root / "nodes" / f"node_{node_id}.ckpt"

    def gen_dir(self, j: int) -> Path:
        d = self.root / f"gen_{j}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def save_node(self, node_id: int, handle: PolicyHandle, config_hash: str) -> None:
        path = self.node_path(node_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        if not path.exists():
            save_checkpoint(path, handle.parameters, config_hash, {"node_id": node_id, "id": handle.id})

    def policy_ref(self, handle: PolicyHandle) -> str:
        node_id = int(handle.id.split("-")[-1])
        return str(self.node_path(node_id).relative_to(self.root))

    def save_graph(self, path: Path, g: HyFoG, config_hash: str) -> None:
        for n in g.nodes:
            self.save_node(n, g.policies[n], config_hash)
        path.write_text(g.to_json(self.policy_ref))

    def append_metrics(self, generation: int, rows: Sequence[dict[str, float]]) -> None:
        path = self.root / "metrics.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.METRIC_FIELDS, extrasaction="ignore")
            if new:
                writer.writeheader()
            for row in rows:
                writer.writerow({"generation": generation, **row})

    def load_graph(self, path: Path) -> HyFoG:
        from .ppo import load_checkpoint

        g = HyFoG.from_dict(json.loads(path.read_text()))
        for n in g.nodes:
            ref = g.policies.get(n)
            if ref is None:
                raise ContractError(f"{path}: node {n} has no policy reference")
            g.policies[n] = PolicyHandle("parametric", f"node-{n}", load_checkpoint(self.root / ref).params)
        return g


def save_pretrain(store: RunStore, config: RunConfig, g0: HyFoG) -> None:
    config.dump(store.root / "config.yaml")
    d = store.gen_dir(0)
    store.save_graph(d / "graph.json", g0, config.arena.digest())
    (d / "phi.json").write_text(solve_phi(g0, config.generation.phi_mode, config.generation.phi_epsilon).to_json())


def generation_loop(
    config: RunConfig,
    run_dir: str | Path | None = None,
    initial: HyFoG | None = None,
) -> tuple[list[GenerationRecord], HyFoG]:
    """Pretrain (unless ``initial`` is given), then grow the graph one learner per generation."""
    gen = config.generation
    if config.arena.num_pursuers != gen.edge_size:
        raise ContractError("edge_size must equal the number of pursuers")
    store = RunStore(run_dir) if run_dir is not None else None
    if initial is None:
        _, g = pretrain_population(config)
        if store is not None:
            save_pretrain(store, config, g)
    else:
        g = initial
        if store is not None:
            config.dump(store.root / "config.yaml")
    rng = np.random.default_rng(derive_seed(gen.seed, "oracle"))
    next_id = max(g.nodes) + 1
    records: list[GenerationRecord] = []
    for j in range(1, gen.generations + 1):
        g = prune_graph(g, gen.max_graph_size)
        result = oracle_train(g, next_id, config, rng, generation=j)
        handle = PolicyHandle("parametric", f"node-{next_id}", result.params)
        # the trial graph is exactly grapher_extend(g, learner) for the returned checkpoint
        extended = result.trial_graph
        extended.policies[next_id] = handle
        if store is not None:
            d = store.gen_dir(j)
            store.save_graph(d / "graph.json", g, config.arena.digest())
            (d / "phi.json").write_text(result.phi.to_json())
            store.save_graph(d / "trial_graph.json", extended, config.arena.digest())
            save_checkpoint(d / "checkpoint", result.params, config.arena.digest(), {"node_id": next_id})
            (d / "record.json").write_text(json.dumps(result.record.to_dict(), indent=1, sort_keys=True))
            store.append_metrics(j, result.record.training)
        log.info("generation %d: node %d rank %d accepted=%s", j, next_id, result.record.rank,
                 result.record.accepted)
        records.append(result.record)
        g = extended
        next_id += 1
    if store is not None:
        store.save_graph(store.root / "final_graph.json", g, config.arena.digest())
    return records, g
