"""Clipped policy-gradient trainer with GAE and a population-entropy reward bonus."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .arena import ArenaConfig, ContractError, WorldState, new_world, observe, step
from .policies import (
    Controller,
    PolicyHandle,
    PolicyParameters,
    forward,
    logit,
    squash_log_std,
    squashed_log_prob,
    unpack,
)

CHECKPOINT_VERSION = 1
EVADER_HANDLE = PolicyHandle("evader", "evader")
DENSITY_FLOOR = 1e-8


class TrainingDivergence(RuntimeError):
    """Non-finite loss or parameters during an update."""


@dataclass
class TrainerConfig:
    batch_size: int = 1024
    minibatch_size: int = 256
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    value_loss_coefficient: float = 1.0
    entropy_coefficient: float = 0.01
    clip_ratio: float = 0.2
    epochs_per_update: int = 20
    total_env_steps: int = 1_000_000
    population_entropy_alpha: float = 0.0
    max_grad_norm: float = 0.5
    hidden: int = 64
    entropy_mc_samples: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ContractError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ContractError("gae_lambda must be in [0, 1]")
        if self.batch_size % self.minibatch_size:
            raise ContractError("minibatch_size must divide batch_size")
        if not 0 <= self.population_entropy_alpha <= 1:
            raise ContractError("population_entropy_alpha must be in [0, 1]")


@dataclass
class RewardConfig:
    time_penalty: float = -0.01
    capture: float = 10.0
    collision: float = -5.0
    shaping: float = 0.1


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    pre_actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    terminals: np.ndarray
    stream_ids: np.ndarray
    bonuses: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episode_returns: list[float] = field(default_factory=list)
    episode_successes: list[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def empty(cls, obs_dim: int) -> "RolloutBuffer":
        z = np.zeros(0)
        return cls(np.zeros((0, obs_dim)), z, z, z, z, z, np.zeros(0, bool), np.zeros(0, int), z)

    @property
    def actions(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.pre_actions))


# -- rewards ------------------------------------------------------------------------


def _min_pursuit_distance(world: WorldState, pursuers: np.ndarray, evaders: np.ndarray) -> float:
    if not pursuers.any() or not evaders.any():
        return 0.0
    p = world.positions[: world.config.num_pursuers][pursuers]
    e = world.positions[world.config.num_pursuers :][evaders]
    diff = p[:, None, :] - e[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).min())


def step_rewards(before: WorldState, after: WorldState, events, reward: RewardConfig) -> np.ndarray:
    """Per-pursuer reward for one tick: shared capture/shaping terms, own collisions."""
    n_p = before.config.num_pursuers
    pursuers = before.active[:n_p]
    evaders = before.active[n_p:]
    shaping = _min_pursuit_distance(before, pursuers, evaders) - _min_pursuit_distance(
        after, pursuers, evaders
    )
    team = reward.time_penalty + reward.capture * len(events.captures) + reward.shaping * shaping
    out = np.full(n_p, team)
    for a, b in events.pursuer_collisions:
        out[a] += reward.collision
        out[b] += reward.collision
    for i in events.obstacle_collisions:
        if i < n_p:
            out[i] += reward.collision
    return out


# -- population entropy -------------------------------------------------------------


def mixture_density(population: Sequence[PolicyParameters], obs_vec: np.ndarray, action: float) -> float:
    u = float(logit(min(max(action, 1e-12), 1 - 1e-12)))
    dens = []
    for params in population:
        mean, log_std, _ = forward(params, obs_vec)
        dens.append(math.exp(squashed_log_prob(u, float(mean), float(log_std))))
    return math.fsum(dens) / len(dens)


def population_entropy_bonus(
    population: Sequence[PolicyParameters],
    obs_vec: np.ndarray,
    action: float,
    mc_samples: int = 1,
    rng: np.random.Generator | None = None,
    alpha: float = 1.0,
) -> float:
    """alpha * single-sample estimate of the population-mean policy's entropy.

    The estimate is -log of the (floored) mixture density at the taken action;
    with ``mc_samples > 1`` it is averaged with further draws from the mixture.
    """
    if not population:
        raise ContractError("population must be non-empty")
    actions = [action]
    if mc_samples > 1:
        if rng is None:
            raise ContractError("resampling needs an rng")
        for _ in range(mc_samples - 1):
            k = rng.integers(len(population))
            mean, log_std, _ = forward(population[k], obs_vec)
            u = float(mean) + math.exp(float(log_std)) * rng.standard_normal()
            actions.append(1.0 / (1.0 + math.exp(-min(max(u, -30.0), 30.0))))
    est = [-math.log(max(mixture_density(population, obs_vec, a), DENSITY_FLOOR)) for a in actions]
    return alpha * math.fsum(est) / len(est)


# -- rollouts -----------------------------------------------------------------------


@dataclass
class EpisodeSetup:
    """One episode for collection: who the learner controls, who fills the rest."""

    config: ArenaConfig
    seed: int
    learner_slots: list[int]
    others: dict[int, Controller]


EpisodeSource = Callable[[int, np.random.Generator], EpisodeSetup]


def collect_rollouts(
    policy: PolicyParameters,
    episode_source: EpisodeSource,
    steps: int,
    rng: np.random.Generator,
    reward: RewardConfig | None = None,
    population: Sequence[PolicyParameters] | None = None,
    alpha: float = 0.0,
    mc_samples: int = 1,
    max_episodes: int = 1_000_000,
) -> RolloutBuffer:
    """Gather exactly ``steps`` learner transitions across as many episodes as needed.

    Each learner slot in an episode forms its own stream; a stream ends on
    deactivation or capture of every evader (terminal), or on timeout /
    end of collection (bootstrapped from the value of the next observation).
    """
    reward = reward or RewardConfig()
    obs_dim = policy.shape[0]
    if steps <= 0:
        return RolloutBuffer.empty(obs_dim)
    use_bonus = alpha > 0 and population
    rows: dict[str, list] = {k: [] for k in
                             ("obs", "u", "logp", "r", "v", "nv", "term", "sid", "bonus")}
    count, episode, next_stream = 0, 0, 0
    returns, successes = [], []
    while count < steps:
        if episode >= max_episodes:
            raise ContractError("episode source exhausted before the step budget")
        try:
            setup = episode_source(episode, rng)
        except (StopIteration, IndexError) as exc:
            raise ContractError("episode source exhausted before the step budget") from exc
        episode += 1
        world = new_world(setup.config, setup.seed)
        others = dict(setup.others)
        for i in world.evader_ids:
            others.setdefault(i, EVADER_HANDLE.controller(setup.config))
        for c in others.values():
            c.reset()
        open_streams: dict[int, tuple[int, int]] = {}  # slot -> (stream id, last row)
        for slot in setup.learner_slots:
            open_streams[slot] = (next_stream, -1)
            next_stream += 1
        ep_return, captured = 0.0, 0
        while True:
            actions = [0.0] * setup.config.num_drones
            pending = {}
            for i in range(setup.config.num_drones):
                if not world.active[i]:
                    continue
                if i in open_streams:
                    vec = observe(world, i).to_vector()
                    mean, log_std, value = (float(x) for x in forward(policy, vec))
                    u = mean + math.exp(log_std) * rng.standard_normal()
                    u = min(max(u, -30.0), 30.0)
                    a = 1.0 / (1.0 + math.exp(-u))
                    sid, last = open_streams[i]
                    if last >= 0:
                        rows["nv"][last] = value
                    if count + len(pending) < steps:
                        pending[i] = (vec, u, float(squashed_log_prob(u, mean, log_std)), value, a)
                    else:
                        # out of budget: the previous row bootstraps from this value
                        del open_streams[i]
                    actions[i] = a
                else:
                    actions[i] = others[i].act(world, i)
            before = world
            world, events = step(world, actions)
            captured += len(events.captures)
            r_all = step_rewards(before, world, events, reward)
            for i, (vec, u, logp, value, a) in pending.items():
                sid, _ = open_streams[i]
                bonus = 0.0
                if use_bonus:
                    bonus = population_entropy_bonus(population, vec, a, mc_samples, rng, alpha)
                r = float(r_all[i]) + bonus
                ep_return += float(r_all[i])
                done = (not world.active[i]) or events.terminal_reason == "all_captured"
                rows["obs"].append(vec)
                rows["u"].append(u)
                rows["logp"].append(logp)
                rows["r"].append(r)
                rows["v"].append(value)
                rows["nv"].append(0.0)
                rows["term"].append(done)
                rows["sid"].append(sid)
                rows["bonus"].append(bonus)
                row = len(rows["r"]) - 1
                count += 1
                if done:
                    del open_streams[i]
                else:
                    open_streams[i] = (sid, row)
            if events.terminal or count >= steps:
                for i, (sid, last) in open_streams.items():
                    if last >= 0 and not world.active[i]:
                        rows["term"][last] = True
                    elif last >= 0:
                        rows["nv"][last] = float(forward(policy, observe(world, i).to_vector())[2])
                if events.terminal:
                    returns.append(ep_return)
                    successes.append(captured == setup.config.num_evaders)
                break
    buf = RolloutBuffer(
        obs=np.asarray(rows["obs"]),
        pre_actions=np.asarray(rows["u"]),
        log_probs=np.asarray(rows["logp"]),
        rewards=np.asarray(rows["r"]),
        values=np.asarray(rows["v"]),
        next_values=np.asarray(rows["nv"]),
        terminals=np.asarray(rows["term"], dtype=bool),
        stream_ids=np.asarray(rows["sid"], dtype=int),
        bonuses=np.asarray(rows["bonus"]),
        episode_returns=returns,
        episode_successes=successes,
    )
    return buf


# -- advantages ---------------------------------------------------------------------


def compute_gae(
    buffer: RolloutBuffer, gamma: float, gae_lambda: float, normalize: bool = False
) -> RolloutBuffer:
    """Backward GAE recursion per stream; returns = advantages + values.

    Normalization is applied by the update step by default; pass
    ``normalize=True`` to normalize the stored advantages here instead.
    """
    n = len(buffer)
    adv = np.zeros(n)
    if n:
        delta = (
            buffer.rewards
            + gamma * buffer.next_values * (~buffer.terminals)
            - buffer.values
        )
        following = {}
        nxt = np.full(n, -1)
        for idx in range(n - 1, -1, -1):
            sid = buffer.stream_ids[idx]
            nxt[idx] = following.get(sid, -1)
            following[sid] = idx
        for idx in range(n - 1, -1, -1):
            carry = adv[nxt[idx]] if nxt[idx] >= 0 and not buffer.terminals[idx] else 0.0
            adv[idx] = delta[idx] + gamma * gae_lambda * carry
    buffer.advantages = adv
    buffer.returns = adv + buffer.values
    if normalize and n > 1:
        buffer.advantages = normalize_advantages(adv)
    return buffer


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; a constant batch is only centered."""
    if len(adv) == 0:
        return adv
    centered = adv - adv.mean()
    std = adv.std()
    return centered / std if std > 0 else centered


# -- update -------------------------------------------------------------------------

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def torch_forward(theta: torch.Tensor, shape: Sequence[int], obs: torch.Tensor):
    w1, b1, w2, b2, w3, b3 = unpack(theta, shape)
    h = torch.tanh(obs @ w1 + b1)
    h = torch.tanh(h @ w2 + b2)
    out = h @ w3 + b3
    return out[:, 0], squash_log_std(out[:, 1]), out[:, 2]


def torch_log_prob(u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    z = (u - mean) / torch.exp(log_std)
    gauss = -0.5 * z * z - log_std - LOG_SQRT_2PI
    return gauss + torch.nn.functional.softplus(-u) + torch.nn.functional.softplus(u)


def ppo_loss(
    theta: torch.Tensor,
    shape: Sequence[int],
    obs: torch.Tensor,
    u: torch.Tensor,
    old_logp: torch.Tensor,
    adv: torch.Tensor,
    returns: torch.Tensor,
    config: TrainerConfig,
):
    """Total loss = -clipped surrogate + c1 * value MSE - entropy_coef * entropy."""
    mean, log_std, value = torch_forward(theta, shape, obs)
    logp = torch_log_prob(u, mean, log_std)
    ratio = torch.exp(logp - old_logp)
    clipped = torch.clamp(ratio, 1 - config.clip_ratio, 1 + config.clip_ratio)
    policy_loss = -torch.min(ratio * adv, clipped * adv).mean()
    value_loss = ((value - returns) ** 2).mean()
    # entropy of the pre-squash Gaussian
    entropy = (log_std + 0.5 + LOG_SQRT_2PI).mean()
    loss = (
        policy_loss
        + config.value_loss_coefficient * value_loss
        - config.entropy_coefficient * entropy
    )
    with torch.no_grad():
        info = {
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy),
            "approx_kl": float((old_logp - logp).mean()),
            "clip_fraction": float(((ratio - 1).abs() > config.clip_ratio).double().mean()),
        }
    return loss, info


class PPOTrainer:
    """Holds parameters plus optimizer state across updates."""

    def __init__(self, params: PolicyParameters, config: TrainerConfig, seed: int = 0):
        self.shape = params.shape
        self.config = config
        self.theta = torch.tensor(params.vector, dtype=torch.float64, requires_grad=True)
        self.optimizer = torch.optim.Adam([self.theta], lr=config.learning_rate, eps=1e-5)
        self.rng = np.random.default_rng(seed)
        self.iterations = 0

    @property
    def params(self) -> PolicyParameters:
        return PolicyParameters(self.shape, self.theta.detach().numpy().copy())

    def update(self, buffer: RolloutBuffer) -> dict[str, float]:
        if buffer.advantages is None or buffer.returns is None:
            raise ContractError("compute_gae must run before the update")
        config = self.config
        n = len(buffer)
        obs = torch.as_tensor(buffer.obs, dtype=torch.float64)
        u = torch.as_tensor(buffer.pre_actions, dtype=torch.float64)
        old_logp = torch.as_tensor(buffer.log_probs, dtype=torch.float64)
        adv = torch.as_tensor(normalize_advantages(buffer.advantages), dtype=torch.float64)
        ret = torch.as_tensor(buffer.returns, dtype=torch.float64)
        mb = min(config.minibatch_size, n)
        history: dict[str, list[float]] = {}
        for _ in range(config.epochs_per_update):
            order = self.rng.permutation(n)
            for start in range(0, n, mb):
                idx = torch.as_tensor(order[start : start + mb])
                loss, info = ppo_loss(
                    self.theta, self.shape, obs[idx], u[idx], old_logp[idx], adv[idx], ret[idx], config
                )
                if not torch.isfinite(loss):
                    raise TrainingDivergence(
                        f"non-finite loss at iteration {self.iterations}: {info}; "
                        "check the learning rate and advantage scale"
                    )
                self.optimizer.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_([self.theta], config.max_grad_norm)
                self.optimizer.step()
                for k, v in info.items():
                    history.setdefault(k, []).append(v)
        if not torch.isfinite(self.theta).all():
            raise TrainingDivergence("parameters became non-finite")
        self.iterations += 1
        return {k: float(np.mean(v)) for k, v in history.items()}


def ppo_update(
    params: PolicyParameters, buffer: RolloutBuffer, config: TrainerConfig, seed: int = 0
) -> tuple[PolicyParameters, dict[str, float]]:
    """Single update with fresh optimizer state."""
    trainer = PPOTrainer(params, config, seed)
    stats = trainer.update(buffer)
    return trainer.params, stats


def surrogate_gradient(params: PolicyParameters, buffer: RolloutBuffer, config: TrainerConfig):
    """(loss, gradient) of the full-batch loss at ``params``; advantages used as stored."""
    theta = torch.tensor(params.vector, dtype=torch.float64, requires_grad=True)
    loss, _ = ppo_loss(
        theta,
        params.shape,
        torch.as_tensor(buffer.obs, dtype=torch.float64),
        torch.as_tensor(buffer.pre_actions, dtype=torch.float64),
        torch.as_tensor(buffer.log_probs, dtype=torch.float64),
        torch.as_tensor(buffer.advantages, dtype=torch.float64),
        torch.as_tensor(buffer.returns, dtype=torch.float64),
        config,
    )
    loss.backward()
    return float(loss.detach()), theta.grad.numpy().copy()


# -- checkpoints --------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: PolicyParameters
    config_hash: str
    meta: dict


def save_checkpoint(path: str | Path, params: PolicyParameters, config_hash: str = "", meta: dict | None = None) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "shape": list(params.shape),
        "config_hash": config_hash,
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.write(json.dumps([float(v) for v in params.vector]) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path) as fh:
        header = json.loads(fh.readline())
        vector = json.loads(fh.readline())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    params = PolicyParameters(tuple(header["shape"]), np.asarray(vector, dtype=np.float64))
    return Checkpoint(params, header.get("config_hash", ""), header.get("meta", {}))


def trainer_config_dict(config: TrainerConfig) -> dict:
    return asdict(config)
