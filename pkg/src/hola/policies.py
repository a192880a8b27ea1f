"""Rule-based pursuer/evader controllers and the trainable parametric policy.

Every rule-based policy emits an orientation only; the arena maps an action
``a`` in [0, 1] to the absolute heading ``2*pi*a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .arena import (
    TWO_PI,
    Action,
    ArenaConfig,
    ContractError,
    Observation,
    WorldState,
    observe,
    rect_closest_point,
)

MIN_DIST = 1e-3
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass(frozen=True)
class Tuning:
    """Force-law constants shared by the rule-based controllers."""

    evasion_range: float = 0.3
    avoid_clearance: float = 0.2
    t_pred: float = 1.0
    # pursuer-pursuer repulsion (VICSEK, APF-A inter-robot force)
    c_p: float = 0.01
    r_p: float = 0.6
    # obstacle / wall repulsion
    c_o: float = 0.005
    r_o: float = 0.15
    # evader escape policy
    evader_c_p: float = 1.0
    evader_c_o: float = 0.02
    evader_r_o: float = 0.4
    squeeze_angle: float = math.pi / 3
    fallback_target: tuple[float, float] | None = None

    @classmethod
    def for_arena(cls, config: ArenaConfig, **overrides) -> "Tuning":
        center = config.evader_spawn.center
        return cls(fallback_target=(center.x, center.y), **overrides)


DEFAULT_TUNING = Tuning()


def heading_to_action(theta: float) -> Action:
    return Action((theta % TWO_PI) / TWO_PI)


def _unit(x: float, y: float) -> tuple[float, float]:
    n = math.hypot(x, y)
    if n == 0.0:
        return 0.0, 0.0
    return x / n, y / n


def _fallback_offset(obs: Observation, tuning: Tuning) -> tuple[float, float]:
    if tuning.fallback_target is None:
        target = (obs.boundary[0] / 2, obs.boundary[1] - 0.3)
    else:
        target = tuning.fallback_target
    x, y = obs.absolute_position()
    return target[0] - x, target[1] - y


def nearest_evader_offset(obs: Observation) -> tuple[float, float] | None:
    """World-frame offset to the nearest visible active evader (ties: lower slot)."""
    best = None
    for slot in obs.evader_slots:
        if slot.visible and slot.active and (best is None or slot.distance < best.distance):
            best = slot
    if best is None:
        return None
    return obs.relative_vector(best.distance, best.bearing)


def _target_offset(obs: Observation, tuning: Tuning) -> tuple[float, float]:
    offset = nearest_evader_offset(obs)
    return offset if offset is not None else _fallback_offset(obs, tuning)


def _repulsors(obs: Observation, radius: float, teammates: bool = True, obstacles: bool = True):
    """Yield (kind, distance, world-frame unit vector pointing at the repulsor)."""
    if teammates:
        for slot in obs.teammate_slots:
            if slot.visible and slot.active and slot.distance < radius:
                angle = obs.self_heading + slot.bearing
                yield "mate", slot.distance, (math.cos(angle), math.sin(angle))
    if obstacles:
        for dist, bearing in (obs.nearest_obstacle, obs.nearest_wall):
            if dist < radius:
                angle = obs.self_heading + bearing
                yield "obstacle", dist, (math.cos(angle), math.sin(angle))


def _inside_cone(theta: float, center: float, half: float) -> bool:
    return abs(math.remainder(theta - center, TWO_PI)) < half


def greedy_action(obs: Observation, tuning: Tuning = DEFAULT_TUNING) -> Action:
    """Head for the nearest visible evader, dodging anything inside the evasion range."""
    tx, ty = _target_offset(obs, tuning)
    theta = math.atan2(ty, tx)
    cones = []
    for _, dist, (ux, uy) in _repulsors(obs, tuning.evasion_range):
        half = math.asin(min(1.0, tuning.avoid_clearance / max(dist, MIN_DIST)))
        cones.append((math.atan2(uy, ux), half, ux, uy))
    if not cones or not any(_inside_cone(theta, c, h) for c, h, _, _ in cones):
        return heading_to_action(theta)
    candidates = []
    for center, half, _, _ in cones:
        for side in (1.0, -1.0):
            edge = center + side * (half + 1e-9)
            if not any(_inside_cone(edge, c, h) for c, h, _, _ in cones):
                rotation = math.remainder(edge - theta, TWO_PI)
                # prefer the smaller rotation, counter-clockwise on exact ties
                candidates.append((abs(rotation), -rotation, edge))
    if candidates:
        return heading_to_action(min(candidates)[2])
    ax = -sum(c[2] for c in cones)
    ay = -sum(c[3] for c in cones)
    return heading_to_action(math.atan2(ay, ax))


def _repulsion(obs: Observation, gain: float, radius: float, teammates: bool, obstacles: bool):
    fx = fy = 0.0
    for _, dist, (ux, uy) in _repulsors(obs, radius, teammates, obstacles):
        mag = gain / max(dist, MIN_DIST) ** 2
        fx -= mag * ux
        fy -= mag * uy
    return fx, fy


def vicsek_action(
    obs: Observation,
    tuning: Tuning = DEFAULT_TUNING,
    evader_velocity: tuple[float, float] | None = None,
) -> Action:
    """Group-chase heading: attraction to the predicted evader plus 1/d^2 repulsions."""
    offset = nearest_evader_offset(obs)
    if offset is None:
        offset = _fallback_offset(obs, tuning)
    elif evader_velocity is not None:
        # predicted aim point, kept inside the arena
        sx, sy = obs.absolute_position()
        aim_x = min(max(sx + offset[0] + evader_velocity[0] * tuning.t_pred, 0.0), obs.boundary[0])
        aim_y = min(max(sy + offset[1] + evader_velocity[1] * tuning.t_pred, 0.0), obs.boundary[1])
        offset = (aim_x - sx, aim_y - sy)
    ax, ay = _unit(*offset)
    px, py = _repulsion(obs, tuning.c_p, tuning.r_p, teammates=True, obstacles=False)
    ox, oy = _repulsion(obs, tuning.c_o, tuning.r_o, teammates=False, obstacles=True)
    return heading_to_action(math.atan2(ay + py + oy, ax + px + ox))


# -- APF-A and the D3QN-G shell -------------------------------------------------------

LAMBDA_GRID: tuple[float, ...] = tuple(float(v) for v in np.geomspace(0.1, 5.0, 8))
ETA_GRID: tuple[float, ...] = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class ApfParams:
    lam: float
    eta: float


APF_PAIRS: tuple[ApfParams, ...] = tuple(ApfParams(l, e) for l in LAMBDA_GRID for e in ETA_GRID)
MID_APF_INDEX = 3 * 3 + 1  # lambda index 3, eta index 1


def apf_a_action(obs: Observation, params: ApfParams, tuning: Tuning = DEFAULT_TUNING) -> Action:
    """Unit attraction + eta * obstacle repulsion + lambda * inter-robot repulsion.

    Both repulsions use the base 1/d^2 law with gains ``c_o`` / ``c_p``; the
    (lambda, eta) pair scales them.
    """
    ax, ay = _unit(*_target_offset(obs, tuning))
    ox, oy = _repulsion(obs, params.eta * tuning.c_o, tuning.r_o, teammates=False, obstacles=True)
    px, py = _repulsion(obs, params.lam * tuning.c_p, tuning.r_p, teammates=True, obstacles=False)
    return heading_to_action(math.atan2(ay + oy + py, ax + ox + px))


Selector = Callable[[Observation], int]


def mid_grid_selector(obs: Observation) -> int:
    return MID_APF_INDEX


def fixed_selector(index: int) -> Selector:
    if not 0 <= index < len(APF_PAIRS):
        raise ContractError(f"APF pair index out of range: {index}")
    return lambda obs: index


@dataclass
class D3QNShell:
    """Caller-owned phase state: APF-A until the first capture, Greedy after."""

    selector: Selector = mid_grid_selector
    captures_seen: int = 0

    def update(self, obs: Observation) -> None:
        captured = sum(1 for slot in obs.evader_slots if not slot.active)
        self.captures_seen = max(self.captures_seen, captured)


def d3qn_g_action(shell: D3QNShell, obs: Observation, tuning: Tuning = DEFAULT_TUNING) -> Action:
    shell.update(obs)
    if shell.captures_seen > 0:
        return greedy_action(obs, tuning)
    return apf_a_action(obs, APF_PAIRS[shell.selector(obs)], tuning)


# -- evader escape ------------------------------------------------------------------


def _surfaces(x: float, y: float, config: ArenaConfig, radius: float):
    """Closest points on walls and obstacles within ``radius``: (distance, dx, dy)."""
    out = []
    for d, dx, dy in (
        (x, -x, 0.0),
        (config.w_b - x, config.w_b - x, 0.0),
        (y, 0.0, -y),
        (config.h_b - y, 0.0, config.h_b - y),
    ):
        if d < radius:
            out.append((d, dx, dy))
    for ob in config.obstacles:
        cx, cy = rect_closest_point((x, y), ob)
        d = math.hypot(cx - x, cy - y)
        if d < radius:
            out.append((d, cx - x, cy - y))
    return out


def evader_action(world: WorldState, evader_id: int, tuning: Tuning = DEFAULT_TUNING) -> Action:
    """Escape heading from pursuer and obstacle repulsions, with wall following.

    When the pursuer push and the obstacle push are nearly opposed the evader is
    being squeezed; it then slides along the nearest surface, away from the
    nearest pursuer.
    """
    config = world.config
    x, y = world.positions[evader_id]
    heading = float(world.headings[evader_id])

    px = py = 0.0
    nearest_p = None
    for p in world.pursuer_ids:
        if not world.active[p]:
            continue
        dx, dy = x - world.positions[p, 0], y - world.positions[p, 1]
        d = math.hypot(dx, dy)
        if d > config.d_p:
            continue
        if nearest_p is None or d < nearest_p[0]:
            nearest_p = (d, dx, dy)
        mag = tuning.evader_c_p / max(d, MIN_DIST) ** 2
        ux, uy = _unit(dx, dy)
        px += mag * ux
        py += mag * uy

    ox = oy = 0.0
    surfaces = _surfaces(x, y, config, tuning.evader_r_o)
    for d, dx, dy in surfaces:
        ux, uy = _unit(-dx, -dy)
        if ux == 0.0 and uy == 0.0:
            # sitting on the surface: push toward the arena centre
            ux, uy = _unit(config.w_b / 2 - x, config.h_b / 2 - y)
        mag = tuning.evader_c_o / max(d, MIN_DIST) ** 2
        ox += mag * ux
        oy += mag * uy

    if nearest_p is not None and surfaces and (ox or oy) and (px or py):
        cos_angle = (px * ox + py * oy) / (math.hypot(px, py) * math.hypot(ox, oy))
        if cos_angle < -math.cos(tuning.squeeze_angle):
            d, dx, dy = min(surfaces, key=lambda s: s[0])
            nx, ny = _unit(-dx, -dy)
            if nx == 0.0 and ny == 0.0:
                nx, ny = _unit(ox, oy)
            tx, ty = -ny, nx
            away = tx * nearest_p[1] + ty * nearest_p[2]
            if abs(away) < 1e-9:
                # tie: take the tangent with more room ahead of it
                room_pos = _room(x, y, tx, ty, config)
                room_neg = _room(x, y, -tx, -ty, config)
                away = 1.0 if room_pos >= room_neg else -1.0
            if away < 0:
                tx, ty = -tx, -ty
            return heading_to_action(math.atan2(ty, tx))

    fx, fy = px + ox, py + oy
    if math.hypot(fx, fy) < 1e-12:
        if nearest_p is None:
            return heading_to_action(heading)
        # balanced pursuers: break out toward the farther horizontal wall
        return heading_to_action(math.pi / 2 if config.h_b - y >= y else 3 * math.pi / 2)
    return heading_to_action(math.atan2(fy, fx))


def _room(x: float, y: float, dx: float, dy: float, config: ArenaConfig) -> float:
    """Distance to the boundary along direction (dx, dy)."""
    limits = []
    if dx > 1e-12:
        limits.append((config.w_b - x) / dx)
    elif dx < -1e-12:
        limits.append(-x / dx)
    if dy > 1e-12:
        limits.append((config.h_b - y) / dy)
    elif dy < -1e-12:
        limits.append(-y / dy)
    return min(limits) if limits else 0.0


# -- parametric policy --------------------------------------------------------------


@dataclass(frozen=True)
class PolicyParameters:
    """Flat weights of a tanh MLP with a shared trunk and a 3-output head.

    Head outputs are (action mean, raw log-std, state value); the raw log-std is
    squashed smoothly into [LOG_STD_MIN, LOG_STD_MAX].
    """

    shape: tuple[int, int, int]
    vector: np.ndarray

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.size != parameter_count(self.shape):
            raise ContractError(
                f"parameter vector of length {vec.size} does not match shape {self.shape}"
            )
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @classmethod
    def initialize(cls, obs_dim: int, seed: int, hidden: int = 64) -> "PolicyParameters":
        rng = np.random.default_rng(seed)
        shape = (obs_dim, hidden, hidden)
        parts = []
        for fan_in, fan_out, gain in ((obs_dim, hidden, 1.0), (hidden, hidden, 1.0)):
            parts.append(rng.normal(0.0, gain / math.sqrt(fan_in), (fan_in, fan_out)).ravel())
            parts.append(np.zeros(fan_out))
        head = rng.normal(0.0, 0.01 / math.sqrt(hidden), (hidden, 3))
        head[:, 2] *= 100.0
        parts.append(head.ravel())
        parts.append(np.array([0.0, 0.29, 0.0]))  # initial std ~0.6
        return cls(shape, np.concatenate(parts))

    def unpack(self) -> list[np.ndarray]:
        return unpack(self.vector, self.shape)

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(self.shape, self.vector.copy())


def parameter_count(shape: Sequence[int]) -> int:
    n_in, h1, h2 = shape
    return n_in * h1 + h1 + h1 * h2 + h2 + h2 * 3 + 3


def unpack(vector, shape: Sequence[int]) -> list:
    """Split a flat vector (numpy or torch) into W1, b1, W2, b2, W3, b3."""
    n_in, h1, h2 = shape
    sizes = [(n_in, h1), (h1,), (h1, h2), (h2,), (h2, 3), (3,)]
    out, start = [], 0
    for size in sizes:
        count = int(np.prod(size))
        out.append(vector[start : start + count].reshape(size))
        start += count
    return out


def squash_log_std(raw):
    lib = np if isinstance(raw, (np.ndarray, float)) else __import__("torch")
    return LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (lib.tanh(raw) + 1.0)


def forward(params: PolicyParameters, obs_vec: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, log_std, value) for a batch or a single observation vector."""
    obs_vec = np.asarray(obs_vec, dtype=np.float64)
    if obs_vec.shape[-1] != params.shape[0]:
        raise ContractError(f"observation width {obs_vec.shape[-1]} != {params.shape[0]}")
    w1, b1, w2, b2, w3, b3 = params.unpack()
    h = np.tanh(obs_vec @ w1 + b1)
    h = np.tanh(h @ w2 + b2)
    out = h @ w3 + b3
    return out[..., 0], squash_log_std(out[..., 1]), out[..., 2]


def _softplus(x):
    return np.logaddexp(0.0, x)


def squashed_log_prob(pre_action, mean, log_std):
    """Log-density of ``sigmoid(u)`` where u ~ N(mean, exp(log_std)^2)."""
    std = np.exp(log_std)
    z = (pre_action - mean) / std
    gauss = -0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)
    # log d/du sigmoid(u) = -softplus(-u) - softplus(u)
    return gauss + _softplus(-pre_action) + _softplus(pre_action)


def logit(a):
    return np.log(a) - np.log1p(-a)


def parametric_act(
    params: PolicyParameters,
    obs: Observation | np.ndarray,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
) -> tuple[Action, float, float]:
    """Sample a squashed-Gaussian action; returns (action, log-prob, value)."""
    vec = obs.to_vector() if isinstance(obs, Observation) else np.asarray(obs, dtype=np.float64)
    mean, log_std, value = forward(params, vec)
    mean, log_std, value = float(mean), float(log_std), float(value)
    if deterministic:
        u = mean
    else:
        if rng is None:
            raise ContractError("stochastic action requires an rng")
        u = mean + math.exp(log_std) * rng.standard_normal()
    # keep the pre-action where sigmoid is invertible in float64
    u = min(max(u, -30.0), 30.0)
    action = 1.0 / (1.0 + math.exp(-u))
    return Action(action), float(squashed_log_prob(u, mean, log_std)), value


# -- handles and controllers --------------------------------------------------------

RULE_KINDS = ("greedy", "vicsek", "apf_a", "d3qn_g_shell", "evader")


@dataclass(frozen=True)
class PolicyHandle:
    kind: str
    id: str
    parameters: PolicyParameters | None = None
    apf_index: int = MID_APF_INDEX
    tuning: Tuning | None = None

    def __post_init__(self) -> None:
        if self.kind == "parametric":
            if self.parameters is None:
                raise ContractError("parametric handle needs PolicyParameters")
        elif self.kind not in RULE_KINDS:
            raise ContractError(f"unknown policy kind {self.kind!r}")
        elif self.parameters is not None:
            raise ContractError(f"{self.kind} handles carry no network parameters")

    def controller(
        self,
        config: ArenaConfig,
        rng: np.random.Generator | None = None,
        deterministic: bool = True,
    ) -> "Controller":
        tuning = self.tuning or Tuning.for_arena(config)
        if self.kind == "parametric":
            return ParametricController(self.parameters, rng, deterministic)
        if self.kind == "greedy":
            return RuleController(lambda w, i: greedy_action(observe(w, i), tuning))
        if self.kind == "vicsek":
            return VicsekController(tuning)
        if self.kind == "apf_a":
            params = APF_PAIRS[self.apf_index]
            return RuleController(lambda w, i: apf_a_action(observe(w, i), params, tuning))
        if self.kind == "d3qn_g_shell":
            return D3QNController(fixed_selector(self.apf_index), tuning)
        return RuleController(lambda w, i: evader_action(w, i, tuning))


class Controller:
    """Per-episode actor bound to one drone slot."""

    def reset(self) -> None:
        pass

    def act(self, world: WorldState, agent_id: int) -> float:
        raise NotImplementedError


class RuleController(Controller):
    def __init__(self, fn: Callable[[WorldState, int], Action]):
        self.fn = fn

    def act(self, world, agent_id):
        return float(self.fn(world, agent_id))


class VicsekController(Controller):
    """Tracks the nearest evader's absolute position to estimate its velocity."""

    def __init__(self, tuning: Tuning):
        self.tuning = tuning
        self.reset()

    def reset(self) -> None:
        self._last: tuple[float, float] | None = None

    def act(self, world, agent_id):
        obs = observe(world, agent_id)
        offset = nearest_evader_offset(obs)
        velocity = None
        if offset is None:
            self._last = None
        else:
            sx, sy = obs.absolute_position()
            here = (sx + offset[0], sy + offset[1])
            if self._last is not None:
                dt = world.config.dt
                vx, vy = (here[0] - self._last[0]) / dt, (here[1] - self._last[1]) / dt
                # a jump faster than any evader means the target switched
                if math.hypot(vx, vy) <= world.config.v_E * 1.01:
                    velocity = (vx, vy)
            self._last = here
        return float(vicsek_action(obs, self.tuning, velocity))


class D3QNController(Controller):
    def __init__(self, selector: Selector, tuning: Tuning):
        self.selector = selector
        self.tuning = tuning
        self.reset()

    def reset(self) -> None:
        self.shell = D3QNShell(self.selector)

    def act(self, world, agent_id):
        return float(d3qn_g_action(self.shell, observe(world, agent_id), self.tuning))


class ParametricController(Controller):
    def __init__(self, params: PolicyParameters, rng, deterministic: bool):
        self.params = params
        self.rng = rng
        self.deterministic = deterministic

    def act(self, world, agent_id):
        action, _, _ = parametric_act(
            self.params, observe(world, agent_id), self.rng, self.deterministic
        )
        return float(action)


def handle_from_name(name: str, handle_id: str | None = None) -> PolicyHandle:
    """Resolve ``greedy``, ``vicsek``, ``d3qn_g[:k]``, ``apf_a[:k]``, ``evader`` or
    ``parametric:<checkpoint-path>``."""
    kind, _, arg = name.partition(":")
    handle_id = handle_id or name
    if kind == "parametric":
        from .ppo import load_checkpoint

        if not arg:
            raise ContractError("parametric policy needs a checkpoint path")
        return PolicyHandle("parametric", handle_id, load_checkpoint(arg).params)
    if kind in ("d3qn_g", "d3qn_g_shell", "apf_a"):
        index = int(arg) if arg else MID_APF_INDEX
        fixed_selector(index)
        return PolicyHandle("apf_a" if kind == "apf_a" else "d3qn_g_shell", handle_id, apf_index=index)
    if kind in ("greedy", "vicsek", "evader") and not arg:
        return PolicyHandle(kind, handle_id)
    raise ContractError(f"unknown policy name {name!r}")
