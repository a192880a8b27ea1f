"""Running full episodes with bound controllers."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .arena import ArenaConfig, EpisodeTrace, StepEvents, new_world, step
from .policies import Controller, PolicyHandle, Tuning


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts (scheduling independent)."""
    blob = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") >> 1


@dataclass
class EpisodeResult:
    seed: int
    length: int
    captures: int
    num_evaders: int
    collision_events: int
    pursuer_collision_episode: bool
    terminal_reason: str
    capture_ticks: list[int] = field(default_factory=list)
    trace: EpisodeTrace | None = None

    @property
    def success(self) -> bool:
        return self.captures == self.num_evaders

    @property
    def capture_fraction(self) -> float:
        return self.captures / self.num_evaders


def count_pursuer_collisions(events: StepEvents, num_pursuers: int) -> int:
    return len(events.pursuer_collisions) + sum(
        1 for i in events.obstacle_collisions if i < num_pursuers
    )


def run_episode(
    config: ArenaConfig,
    seed: int,
    pursuers: Sequence[Controller],
    evaders: Sequence[Controller] | None = None,
    record: bool = False,
) -> EpisodeResult:
    """Play one episode to termination with the given per-slot controllers."""
    if len(pursuers) != config.num_pursuers:
        raise ValueError(f"need {config.num_pursuers} pursuer controllers")
    if evaders is None:
        evader_handle = PolicyHandle("evader", "evader", tuning=Tuning.for_arena(config))
        evaders = [evader_handle.controller(config) for _ in range(config.num_evaders)]
    controllers = list(pursuers) + list(evaders)
    for c in controllers:
        c.reset()
    world = new_world(config, seed)
    trace = None
    if record:
        trace = EpisodeTrace(seed, config.digest(), config.to_dict())
        trace.append(world, [], StepEvents())
    captures, collisions = 0, 0
    collided = False
    capture_ticks = []
    while True:
        actions = [
            c.act(world, i) if world.active[i] else 0.0 for i, c in enumerate(controllers)
        ]
        world, events = step(world, actions)
        if trace is not None:
            trace.append(world, actions, events)
        if events.captures:
            captures += len(events.captures)
            capture_ticks.extend([world.tick] * len(events.captures))
        n = count_pursuer_collisions(events, config.num_pursuers)
        collisions += n
        collided |= n > 0
        if events.terminal:
            return EpisodeResult(
                seed=seed,
                length=world.tick,
                captures=captures,
                num_evaders=config.num_evaders,
                collision_events=collisions,
                pursuer_collision_episode=collided,
                terminal_reason=events.terminal_reason,
                capture_ticks=capture_ticks,
                trace=trace,
            )


def team_controllers(
    handles: Sequence[PolicyHandle],
    config: ArenaConfig,
    seed: int,
    deterministic: bool = True,
) -> list[Controller]:
    """Fresh controllers for one episode; stochastic ones get per-slot generators."""
    return [
        h.controller(config, np.random.default_rng(derive_seed(seed, "slot", k)), deterministic)
        for k, h in enumerate(handles)
    ]
