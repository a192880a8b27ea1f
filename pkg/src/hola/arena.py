"""Deterministic 2D kinematic pursuit-evasion arena.

Pursuers and evaders are holonomic points moving at a fixed team speed; the
only control is the absolute heading. Obstacles are axis-aligned rectangles
that do not block motion but register collision events when a drone comes
within the safe radius. Walls are treated the same way.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, NamedTuple, Sequence

import numpy as np
import yaml

TWO_PI = 2.0 * math.pi
PURSUER = "pursuer"
EVADER = "evader"
MAX_SPAWN_ATTEMPTS = 10_000


class ConfigError(ValueError):
    """Raised for invalid arena configuration values or files."""


class SpawnError(RuntimeError):
    """Raised when spawn rejection sampling cannot place every drone."""


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


class Vec2(NamedTuple):
    x: float
    y: float


class Rect(NamedTuple):
    """Axis-aligned rectangle stored by its bounds."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @classmethod
    def centered(cls, cx: float, cy: float, width: float, height: float) -> "Rect":
        return cls(cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2)

    @property
    def center(self) -> Vec2:
        return Vec2((self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2)

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def intersects(self, other: "Rect") -> bool:
        return not (
            self.xmax < other.xmin
            or other.xmax < self.xmin
            or self.ymax < other.ymin
            or other.ymax < self.ymin
        )


def rect_distance(point: Sequence[float], rect: Rect) -> float:
    """Euclidean distance from ``point`` to the closed rectangle (0 inside)."""
    dx = max(rect.xmin - point[0], 0.0, point[0] - rect.xmax)
    dy = max(rect.ymin - point[1], 0.0, point[1] - rect.ymax)
    return math.hypot(dx, dy)


def rect_closest_point(point: Sequence[float], rect: Rect) -> Vec2:
    return Vec2(
        min(max(point[0], rect.xmin), rect.xmax),
        min(max(point[1], rect.ymin), rect.ymax),
    )


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    return math.atan2(math.sin(angle), math.cos(angle))


def default_obstacles(w_o: float = 0.65, h_o: float = 0.1) -> list[Rect]:
    # staggered rows, mirror-symmetric about x = 1.8
    centers = [(0.6, 1.8), (1.8, 1.8), (3.0, 1.8), (1.2, 3.2), (2.4, 3.2)]
    return [Rect.centered(cx, cy, w_o, h_o) for cx, cy in centers]


@dataclass(frozen=True)
class ArenaConfig:
    w_b: float = 3.6
    h_b: float = 5.0
    w_s: float = 3.2
    h_s: float = 0.6
    w_o: float = 0.65
    h_o: float = 0.1
    d_c: float = 0.2
    d_p: float = 2.0
    d_s: float = 0.1
    kappa: float = 0.2
    v_P: float = 0.3
    v_E: float = 0.6
    t_max: float = 100.0
    fps: int = 10
    num_pursuers: int = 3
    num_evaders: int = 2
    obstacles: tuple[Rect, ...] = field(default_factory=lambda: tuple(default_obstacles()))
    deactivate_captor: bool = True
    pursuer_spawn: Rect | None = None
    evader_spawn: Rect | None = None

    def __post_init__(self) -> None:
        obstacles = tuple(Rect(*map(float, o)) for o in self.obstacles)
        object.__setattr__(self, "obstacles", obstacles)
        if self.pursuer_spawn is None:
            object.__setattr__(
                self,
                "pursuer_spawn",
                Rect((self.w_b - self.w_s) / 2, 0.0, (self.w_b + self.w_s) / 2, self.h_s),
            )
        else:
            object.__setattr__(self, "pursuer_spawn", Rect(*map(float, self.pursuer_spawn)))
        if self.evader_spawn is None:
            object.__setattr__(
                self,
                "evader_spawn",
                Rect(
                    (self.w_b - self.w_s) / 2,
                    self.h_b - self.h_s,
                    (self.w_b + self.w_s) / 2,
                    self.h_b,
                ),
            )
        else:
            object.__setattr__(self, "evader_spawn", Rect(*map(float, self.evader_spawn)))
        self.validate()

    @property
    def dt(self) -> float:
        return 1.0 / self.fps

    @property
    def max_ticks(self) -> int:
        return int(round(self.t_max * self.fps))

    @property
    def num_drones(self) -> int:
        return self.num_pursuers + self.num_evaders

    @property
    def boundary(self) -> Rect:
        return Rect(0.0, 0.0, self.w_b, self.h_b)

    def validate(self) -> None:
        positive = ["w_b", "h_b", "w_s", "h_s", "w_o", "h_o", "d_c", "d_p", "d_s",
                    "kappa", "v_P", "v_E", "t_max", "fps"]
        for name in positive:
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ConfigError(f"{name} must be finite and > 0, got {value!r}")
        if not self.d_s < self.d_c:
            raise ConfigError("d_s must be smaller than d_c")
        if not self.v_P < self.v_E:
            raise ConfigError("v_P must be smaller than v_E")
        ticks = self.t_max * self.fps
        if abs(ticks - round(ticks)) > 1e-9:
            raise ConfigError(f"t_max * fps must be an integer, got {ticks}")
        if self.num_pursuers < 1 or self.num_evaders < 1:
            raise ConfigError("need at least one pursuer and one evader")
        bounds = self.boundary
        for i, ob in enumerate(self.obstacles):
            if ob.width <= 0 or ob.height <= 0:
                raise ConfigError(f"obstacle {i} has non-positive extent")
            if not (bounds.contains(ob.xmin, ob.ymin) and bounds.contains(ob.xmax, ob.ymax)):
                raise ConfigError(f"obstacle {i} is not inside the boundary")
        for name in ("pursuer_spawn", "evader_spawn"):
            spawn = getattr(self, name)
            if not (bounds.contains(spawn.xmin, spawn.ymin) and bounds.contains(spawn.xmax, spawn.ymax)):
                raise ConfigError(f"{name} is not inside the boundary")
            for i, ob in enumerate(self.obstacles):
                if spawn.intersects(ob):
                    raise ConfigError(f"{name} overlaps obstacle {i}")

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "obstacles":
                value = [list(ob) for ob in value]
            elif isinstance(value, Rect):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ArenaConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown arena keys: {', '.join(unknown)}")
        data = dict(data)
        if "obstacles" in data:
            obstacles = []
            for ob in data["obstacles"]:
                if isinstance(ob, dict):
                    obstacles.append(
                        Rect.centered(
                            ob["x"], ob["y"],
                            ob.get("w", data.get("w_o", 0.65)),
                            ob.get("h", data.get("h_o", 0.1)),
                        )
                    )
                else:
                    obstacles.append(Rect(*ob))
            data["obstacles"] = tuple(obstacles)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_yaml(path: str | Path) -> dict[str, Any]:
    """Read a YAML mapping, turning parse failures into ConfigError with line info."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse {path}{where}: {getattr(exc, 'problem', exc)}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_arena_config(path: str | Path) -> ArenaConfig:
    data = load_yaml(path)
    return ArenaConfig.from_dict(data.get("arena", data))


@dataclass(frozen=True)
class DroneState:
    id: int
    team: str
    position: Vec2
    heading: float
    active: bool


@dataclass
class WorldState:
    """Ground-truth state. Arrays are never mutated in place by ``step``."""

    config: ArenaConfig
    tick: int
    positions: np.ndarray  # (N, 2)
    headings: np.ndarray  # (N,)
    active: np.ndarray  # (N,) bool
    seed: int
    rng_state: dict = field(default_factory=dict)
    terminal: bool = False

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    @property
    def num_pursuers(self) -> int:
        return self.config.num_pursuers

    def team(self, agent_id: int) -> str:
        return PURSUER if agent_id < self.config.num_pursuers else EVADER

    @property
    def pursuer_ids(self) -> range:
        return range(self.config.num_pursuers)

    @property
    def evader_ids(self) -> range:
        return range(self.config.num_pursuers, self.config.num_drones)

    @property
    def drones(self) -> list[DroneState]:
        return [
            DroneState(
                i,
                self.team(i),
                Vec2(float(self.positions[i, 0]), float(self.positions[i, 1])),
                float(self.headings[i]),
                bool(self.active[i]),
            )
            for i in range(self.config.num_drones)
        ]

    def poses(self) -> list[dict[str, Any]]:
        return [
            {
                "id": i,
                "x": float(self.positions[i, 0]),
                "y": float(self.positions[i, 1]),
                "heading": float(self.headings[i]),
                "active": bool(self.active[i]),
            }
            for i in range(self.config.num_drones)
        ]


@dataclass
class StepEvents:
    captures: list[tuple[int, int]] = field(default_factory=list)
    pursuer_collisions: list[tuple[int, int]] = field(default_factory=list)
    obstacle_collisions: list[int] = field(default_factory=list)
    terminal: bool = False
    terminal_reason: str | None = None

    def pursuer_collision_ids(self, num_pursuers: int) -> set[int]:
        ids = {i for pair in self.pursuer_collisions for i in pair}
        ids.update(i for i in self.obstacle_collisions if i < num_pursuers)
        return ids

    def to_dict(self) -> dict[str, Any]:
        return {
            "captures": [list(c) for c in self.captures],
            "pursuer_collisions": [list(c) for c in self.pursuer_collisions],
            "obstacle_collisions": list(self.obstacle_collisions),
            "terminal": self.terminal,
            "terminal_reason": self.terminal_reason,
        }


def _clamp_action(value: float) -> float:
    value = float(value)
    if math.isnan(value):
        raise ContractError("action value is NaN")
    return min(1.0, max(0.0, value))


class Action(float):
    """Heading command in [0, 1]; values outside are clamped on construction."""

    def __new__(cls, value: float = 0.0) -> "Action":
        return super().__new__(cls, _clamp_action(value))

    @property
    def value(self) -> float:
        return float(self)

    @property
    def heading(self) -> float:
        return TWO_PI * float(self)


def new_world(config: ArenaConfig, seed: int) -> WorldState:
    """Spawn every drone uniformly in its team band, rejecting pairs closer than d_c."""
    config.validate()
    rng = np.random.default_rng(seed)
    n = config.num_drones
    positions = np.zeros((n, 2))
    margin = config.d_s
    for i in range(n):
        spawn = config.pursuer_spawn if i < config.num_pursuers else config.evader_spawn
        lo = np.array([spawn.xmin + margin, spawn.ymin + margin])
        hi = np.array([spawn.xmax - margin, spawn.ymax - margin])
        if np.any(hi < lo):
            lo = np.array([spawn.xmin, spawn.ymin])
            hi = np.array([spawn.xmax, spawn.ymax])
        for _ in range(MAX_SPAWN_ATTEMPTS):
            p = lo + (hi - lo) * rng.random(2)
            if i == 0 or np.all(np.hypot(*(positions[:i] - p).T) >= config.d_c):
                if all(rect_distance(p, ob) >= config.d_s for ob in config.obstacles):
                    positions[i] = p
                    break
        else:
            raise SpawnError(f"could not place drone {i} after {MAX_SPAWN_ATTEMPTS} attempts")
    headings = rng.random(n) * TWO_PI
    return WorldState(
        config=config,
        tick=0,
        positions=positions,
        headings=headings,
        active=np.ones(n, dtype=bool),
        seed=int(seed),
        rng_state=rng.bit_generator.state,
    )


def _match_captures(world_pos: np.ndarray, active: np.ndarray, config: ArenaConfig) -> list[tuple[int, int]]:
    candidates = []
    for p in range(config.num_pursuers):
        if not active[p]:
            continue
        for e in range(config.num_pursuers, config.num_drones):
            if not active[e]:
                continue
            d = math.hypot(world_pos[p, 0] - world_pos[e, 0], world_pos[p, 1] - world_pos[e, 1])
            if d < config.d_c:
                candidates.append((d, e, p))
    captures = []
    used_p: set[int] = set()
    used_e: set[int] = set()
    # nearest pair first; equal distances resolve to the lower evader id, then lower pursuer id
    for d, e, p in sorted(candidates):
        if p in used_p or e in used_e:
            continue
        used_p.add(p)
        used_e.add(e)
        captures.append((p, e))
    return sorted(captures)


def wall_distance(x: float, y: float, config: ArenaConfig) -> float:
    return min(x, config.w_b - x, y, config.h_b - y)


def step(world: WorldState, joint_actions: Sequence[float]) -> tuple[WorldState, StepEvents]:
    """Advance one tick. Returns a new state; ``world`` is left untouched."""
    config = world.config
    n = config.num_drones
    if len(joint_actions) != n:
        raise ContractError(f"expected {n} actions, got {len(joint_actions)}")
    if world.terminal:
        raise ContractError("cannot step a terminal world")

    positions = world.positions.copy()
    headings = world.headings.copy()
    active = world.active.copy()
    dt = config.dt
    for i in range(n):
        if not active[i]:
            continue
        theta = Action(joint_actions[i]).heading
        if theta >= TWO_PI:
            theta -= TWO_PI
        speed = config.v_P if i < config.num_pursuers else config.v_E
        x = positions[i, 0] + speed * dt * math.cos(theta)
        y = positions[i, 1] + speed * dt * math.sin(theta)
        positions[i, 0] = min(max(x, 0.0), config.w_b)
        positions[i, 1] = min(max(y, 0.0), config.h_b)
        headings[i] = theta

    events = StepEvents()
    moving = active.copy()
    for a in range(config.num_pursuers):
        if not moving[a]:
            continue
        for b in range(a + 1, config.num_pursuers):
            if moving[b] and math.hypot(*(positions[a] - positions[b])) < config.kappa:
                events.pursuer_collisions.append((a, b))
    for i in range(n):
        if not moving[i]:
            continue
        x, y = positions[i]
        near = wall_distance(x, y, config) < config.d_s or any(
            rect_distance((x, y), ob) < config.d_s for ob in config.obstacles
        )
        if near:
            events.obstacle_collisions.append(i)

    events.captures = _match_captures(positions, active, config)
    for p, e in events.captures:
        active[e] = False
        if config.deactivate_captor:
            active[p] = False

    tick = world.tick + 1
    if not active[config.num_pursuers:].any():
        events.terminal, events.terminal_reason = True, "all_captured"
    elif tick >= config.max_ticks:
        events.terminal, events.terminal_reason = True, "timeout"

    new = replace(
        world,
        tick=tick,
        positions=positions,
        headings=headings,
        active=active,
        terminal=events.terminal,
    )
    return new, events


# -- observation -----------------------------------------------------------------

SLOT_WIDTH = 5  # distance / d_p, sin, cos, active, visible


@dataclass(frozen=True)
class Slot:
    distance: float
    bearing: float
    active: bool
    visible: bool


@dataclass(frozen=True)
class Observation:
    agent_id: int
    self_position: Vec2  # normalized by boundary size
    self_heading: float
    teammate_slots: tuple[Slot, ...]
    evader_slots: tuple[Slot, ...]
    nearest_obstacle: tuple[float, float]
    nearest_wall: tuple[float, float]
    perception_range: float
    boundary: tuple[float, float]
    self_active: bool = True

    def absolute_position(self) -> tuple[float, float]:
        return (self.self_position.x * self.boundary[0], self.self_position.y * self.boundary[1])

    def relative_vector(self, distance: float, bearing: float) -> tuple[float, float]:
        """World-frame offset of an entity seen at (distance, bearing)."""
        angle = self.self_heading + bearing
        return distance * math.cos(angle), distance * math.sin(angle)

    def to_vector(self) -> np.ndarray:
        d_p = self.perception_range
        out = [
            self.self_position.x,
            self.self_position.y,
            math.sin(self.self_heading),
            math.cos(self.self_heading),
        ]
        for slot in self.teammate_slots + self.evader_slots:
            out.extend(
                [
                    slot.distance / d_p,
                    math.sin(slot.bearing),
                    math.cos(slot.bearing),
                    float(slot.active),
                    float(slot.visible),
                ]
            )
        for dist, bearing in (self.nearest_obstacle, self.nearest_wall):
            out.extend([min(dist, d_p) / d_p, math.sin(bearing), math.cos(bearing)])
        return np.asarray(out, dtype=np.float64)


def observation_width(config: ArenaConfig) -> int:
    slots = (config.num_pursuers - 1) + config.num_evaders
    return 4 + SLOT_WIDTH * slots + 6


def _slot(world: WorldState, agent_id: int, other: int) -> Slot:
    config = world.config
    dx, dy = world.positions[other] - world.positions[agent_id]
    dist = math.hypot(dx, dy)
    active = bool(world.active[other])
    if dist > config.d_p:
        return Slot(config.d_p, 0.0, active, False)
    bearing = wrap_angle(math.atan2(dy, dx) - world.headings[agent_id]) if dist > 0 else 0.0
    return Slot(dist, bearing, active, True)


def nearest_obstacle(x: float, y: float, config: ArenaConfig) -> tuple[float, float, float]:
    """(distance, dx, dy) to the closest obstacle point; (inf, 0, 0) without obstacles.

    A drone touching or inside an obstacle gets the direction of its center.
    """
    best = (math.inf, 0.0, 0.0)
    for ob in config.obstacles:
        cx, cy = rect_closest_point((x, y), ob)
        d = math.hypot(cx - x, cy - y)
        if d < best[0]:
            if d == 0.0:
                center = ob.center
                cx, cy = center.x, center.y
            best = (d, cx - x, cy - y)
    return best


def nearest_wall(x: float, y: float, config: ArenaConfig) -> tuple[float, float, float]:
    """(distance, ux, uy): distance and outward unit normal of the closest wall.

    Ties resolve W, E, S, N.
    """
    options = [
        (x, -1.0, 0.0),
        (config.w_b - x, 1.0, 0.0),
        (y, 0.0, -1.0),
        (config.h_b - y, 0.0, 1.0),
    ]
    return min(options, key=lambda o: o[0])


def _wall_angle(dx: float, dy: float) -> float:
    if dx == 0.0 and dy == 0.0:
        return 0.0
    return math.atan2(dy, dx)


def observe(world: WorldState, agent_id: int) -> Observation:
    """Egocentric, range-masked view for ``agent_id``."""
    config = world.config
    if not 0 <= agent_id < config.num_drones:
        raise ContractError(f"invalid agent id {agent_id}")
    x, y = (float(v) for v in world.positions[agent_id])
    heading = float(world.headings[agent_id])
    if agent_id < config.num_pursuers:
        mates = [i for i in range(config.num_pursuers) if i != agent_id]
        targets = list(range(config.num_pursuers, config.num_drones))
    else:
        mates = [i for i in range(config.num_pursuers, config.num_drones) if i != agent_id]
        targets = list(range(config.num_pursuers))
    od, odx, ody = nearest_obstacle(x, y, config)
    if math.isinf(od) or od > config.d_p:
        obstacle = (config.d_p, 0.0)
    else:
        obstacle = (od, wrap_angle(_wall_angle(odx, ody) - heading))
    wd, wdx, wdy = nearest_wall(x, y, config)
    if wd > config.d_p:
        wall = (config.d_p, 0.0)
    else:
        wall = (wd, wrap_angle(_wall_angle(wdx, wdy) - heading))
    return Observation(
        agent_id=agent_id,
        self_position=Vec2(x / config.w_b, y / config.h_b),
        self_heading=heading,
        teammate_slots=tuple(_slot(world, agent_id, j) for j in mates),
        evader_slots=tuple(_slot(world, agent_id, j) for j in targets),
        nearest_obstacle=obstacle,
        nearest_wall=wall,
        perception_range=config.d_p,
        boundary=(config.w_b, config.h_b),
        self_active=bool(world.active[agent_id]),
    )


# -- traces ----------------------------------------------------------------------


@dataclass
class TraceRecord:
    tick: int
    poses: list[dict[str, Any]]
    actions: list[float]
    events: dict[str, Any]


@dataclass
class EpisodeTrace:
    seed: int
    config_hash: str
    config: dict[str, Any]
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, world: WorldState, actions: Iterable[float], events: StepEvents) -> None:
        self.records.append(
            TraceRecord(world.tick, world.poses(), [float(a) for a in actions], events.to_dict())
        )

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            header = {"seed": self.seed, "config_hash": self.config_hash, "config": self.config}
            fh.write(json.dumps({"header": header}) + "\n")
            for rec in self.records:
                fh.write(json.dumps(asdict(rec)) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EpisodeTrace":
        with open(path) as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines or "header" not in lines[0]:
            raise ContractError(f"{path}: missing trace header")
        header = lines[0]["header"]
        trace = cls(header["seed"], header["config_hash"], header["config"])
        for rec in lines[1:]:
            trace.records.append(TraceRecord(**rec))
        return trace


def replay(trace: EpisodeTrace) -> int | None:
    """Re-simulate recorded actions; return the first divergent tick or None.

    Tick 0 is the spawn state, so a tampered initial pose is reported as 0.
    """
    config = ArenaConfig.from_dict(trace.config)
    if config.digest() != trace.config_hash:
        raise ContractError("trace config does not match its recorded hash")
    world = new_world(config, trace.seed)
    for rec in trace.records:
        if rec.tick == 0:
            if rec.poses != world.poses():
                return 0
            continue
        if world.terminal:
            return rec.tick
        world, events = step(world, rec.actions)
        if world.tick != rec.tick or world.poses() != rec.poses or events.to_dict() != rec.events:
            return rec.tick
    return None
