"""Run configuration: arena, trainer, generation loop and reward settings in one YAML file."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .arena import ArenaConfig, ConfigError, load_yaml
from .ppo import RewardConfig, TrainerConfig


@dataclass
class GenerationConfig:
    edge_size: int = 3
    episodes_per_edge: int = 10
    acceptance_rank: int = 3
    max_graph_size: int = 10
    generations: int = 3
    per_generation_step_budget: int = 20_000
    acceptance_eval_interval: int | None = None  # None: one PPO iteration
    pretrain_population_size: int = 4
    pretrain_steps: int = 20_000
    alpha: float = 0.1
    seed: int = 0
    phi_mode: str = "myerson"  # or "inverse_mean_reward"
    phi_epsilon: float = 1e-6
    workers: int = 1

    def __post_init__(self) -> None:
        if not 2 <= self.edge_size <= self.max_graph_size:
            raise ConfigError("need 2 <= edge_size <= max_graph_size")
        if self.acceptance_rank < 1:
            raise ConfigError("acceptance_rank must be >= 1")
        if self.pretrain_population_size < self.edge_size:
            raise ConfigError("pretrain_population_size must be >= edge_size")
        if self.phi_mode not in ("myerson", "inverse_mean_reward", "softmax"):
            raise ConfigError(f"unknown phi_mode {self.phi_mode!r}")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("alpha must be in [0, 1]")


@dataclass
class RunConfig:
    arena: ArenaConfig = field(default_factory=ArenaConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)

    def to_dict(self) -> dict[str, Any]:
        return {
            "arena": self.arena.to_dict(),
            "trainer": asdict(self.trainer),
            "generation": asdict(self.generation),
            "reward": asdict(self.reward),
        }

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        unknown = set(data) - {"arena", "trainer", "generation", "reward"}
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")

        def build(kind, section):
            values = data.get(section) or {}
            known = {f.name for f in fields(kind)}
            bad = set(values) - known
            if bad:
                raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(bad))}")
            try:
                return kind(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}] {exc}") from exc

        return cls(
            arena=ArenaConfig.from_dict(data.get("arena") or {}),
            trainer=build(TrainerConfig, "trainer"),
            generation=build(GenerationConfig, "generation"),
            reward=build(RewardConfig, "reward"),
        )


def default_config_path() -> Path:
    return Path(str(resources.files("hola") / "configs" / "default.yaml"))


def load_run_config(path: str | Path | None = None) -> RunConfig:
    """Load a run config; ``None`` or ``"default"`` gives the packaged defaults."""
    if path is None or str(path) == "default":
        path = default_config_path()
    return RunConfig.from_dict(load_yaml(path))
