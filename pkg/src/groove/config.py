"""YAML run configuration: profile defaults, file values, then command-line overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .antagonist import AntagonistConfig
from .curator import CuratorConfig
from .gridworld import DistributionConfig
from .lpg import MetaObjectiveConfig
from .trainer import TrainRunConfig

OUTPUT_ENV = "GROOVE_OUT"
NESTED = {"meta": MetaObjectiveConfig, "curator": CuratorConfig,
          "distribution": DistributionConfig, "antagonist": AntagonistConfig}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSettings:
    suite: str = "hard"          # hard | easy | random | handcrafted
    num_levels: int = 50
    suite_seed: int = 1000
    seeds: tuple[int, ...] = (0,)
    mode: str = "tabular"        # tabular | dense
    episodes: int = 128
    agent_envs: int = 8

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.suite not in ("hard", "easy", "random", "handcrafted"):
            raise ConfigError(f"eval.suite: unknown suite {self.suite!r}")
        if self.mode not in ("tabular", "dense"):
            raise ConfigError(f"eval.mode: unknown mode {self.mode!r}")
        if not self.seeds:
            raise ConfigError("eval.seeds: at least one seed is required")


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    train: TrainRunConfig = field(default_factory=lambda: TrainRunConfig.profile("desk"))
    eval: EvalSettings = field(default_factory=EvalSettings)
    output_dir: str | None = None
    checkpoint_every: int = 10

    def output_root(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ENV, "groove-runs"))

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        nested = {k: train.pop(k) for k in NESTED}
        ev = {f.name: getattr(self.eval, f.name) for f in fields(self.eval)}
        ev["seeds"] = list(ev["seeds"])
        return {"profile": self.profile, "output_dir": self.output_dir,
                "checkpoint_every": self.checkpoint_every, "train": train, **nested, "eval": ev}

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


# Descriptions double as the documented defaults printed by ``groove train --show-defaults``.
DOCS = {
    "profile": "geometry preset: desk (64 lifetimes x 8 envs) or full (512 x 64)",
    "output_dir": "run directory root; falls back to $GROOVE_OUT, then ./groove-runs",
    "checkpoint_every": "meta-updates between checkpoints (0 keeps only the final one)",
    "train.num_lifetimes": "parallel agent lifetimes per meta-batch",
    "train.envs_per_lifetime": "environments stepped in lockstep by each agent",
    "train.rollout_len": "steps per rollout, one agent update per rollout",
    "train.meta_updates": "outer updates of the optimizer",
    "train.score_kind": "ar | optimal_regret | l1_value_loss | positive_value_loss | uniform",
    "train.seed": "root seed of every random stream in the run",
    "train.bootstrap_dim": "size of the categorical bootstrap vector",
    "train.agent_lr": "agent step size on the update targets",
    "train.alpha_y": "bootstrap target weight in the agent update",
    "train.lstm_hidden": "hidden width of the reverse LSTM",
    "train.embed_dim": "width of the transition embedding",
    "train.eval_episodes": "episodes used to score a finished lifetime",
    "train.drop_alarm": "warn when this fraction of lifetimes hit non-finite gradients",
    "train.antagonist_kind": "random | expert | a2c | ppo",
    "meta.policy_entropy": "policy entropy bonus in the outer objective",
    "meta.bootstrap_entropy": "bootstrap entropy bonus in the outer objective",
    "meta.pi_hat_l2": "L2 penalty on policy targets",
    "meta.y_hat_l2": "L2 penalty on bootstrap targets",
    "meta.lr": "Adam step size of the outer update",
    "meta.updates_per_meta": "agent updates unrolled per meta-gradient",
    "meta.grad_clip": "global norm clip of the meta-gradient (null disables)",
    "meta.gamma": "discount of the outer return",
    "meta.return_baseline": "subtract the batch mean return in the outer policy gradient",
    "curator.capacity": "level buffer size",
    "curator.p_replay": "probability of replaying a buffered level",
    "curator.temperature": "rank prioritisation temperature",
    "curator.staleness": "weight of staleness in the replay distribution",
    "distribution.grid_sizes": "grid side lengths drawn uniformly",
    "distribution.wall_density": "range of the per-cell wall probability",
    "distribution.num_objects": "inclusive range of object counts",
    "distribution.reward_mode": "binary or uniform object rewards",
    "distribution.eps_term": "termination probabilities on pickup",
    "distribution.eps_respawn": "per-step respawn probabilities",
    "distribution.max_steps": "episode horizons",
    "distribution.lifetime": "agent lifetime in steps per environment",
    "distribution.lifetime_choices": "if non-empty, lifetimes drawn from this list",
    "antagonist.num_envs": "environments used by antagonist training",
    "antagonist.rollout_len": "antagonist rollout length",
    "antagonist.lr": "antagonist Adam step size",
    "antagonist.gamma": "antagonist discount",
    "antagonist.entropy_coef": "antagonist entropy bonus",
    "antagonist.value_coef": "antagonist value loss weight",
    "antagonist.ppo_clip": "PPO ratio clip",
    "antagonist.ppo_epochs": "PPO epochs per rollout",
    "antagonist.ppo_minibatches": "PPO minibatches per epoch",
    "antagonist.kl_ceiling": "PPO KL ceiling checked in tests",
    "antagonist.eval_episodes": "episodes used to measure antagonist return",
    "antagonist.budget_cap": "largest allowed training budget",
    "eval.suite": "held-out level suite: hard | easy | random | handcrafted",
    "eval.num_levels": "suite size (ignored for handcrafted)",
    "eval.suite_seed": "seed of the suite sampler",
    "eval.seeds": "agent seeds per level",
    "eval.mode": "tabular or dense agent",
    "eval.episodes": "evaluation episodes per trained agent",
    "eval.agent_envs": "environments per evaluated agent",
}


def default_text(profile: str = "desk") -> str:
    """Commented YAML listing every key with its default."""
    data = RunConfig(profile=profile, train=TrainRunConfig.profile(profile)).to_dict()
    lines = []
    for key, value in data.items():
        if isinstance(value, dict):
            lines.append(f"{key}:")
            for k, v in value.items():
                lines.append(f"  {k}: {_scalar(v)}  # {DOCS[f'{key}.{k}']}")
        else:
            lines.append(f"{key}: {_scalar(value)}  # {DOCS[key]}")
    return "\n".join(lines) + "\n"


def _scalar(v) -> str:
    return yaml.safe_dump(v, default_flow_style=True).strip().removesuffix("\n...").strip()


def _build(cls, base, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    current = {f.name: getattr(base, f.name) for f in fields(cls)}
    current.update(values)
    try:
        return cls(**current)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def build(data: dict | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Merge a parsed mapping and dotted overrides onto the profile defaults."""
    data = dict(data or {})
    for key, value in (overrides or {}).items():
        section, _, name = key.rpartition(".")
        target = data.setdefault(section, {}) if section else data
        if not isinstance(target, dict):
            raise ConfigError(f"{section}: expected a mapping")
        target[name] = value
    top = {"profile", "output_dir", "checkpoint_every", "train", "eval", *NESTED}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    profile = data.get("profile", "desk")
    try:
        base = TrainRunConfig.profile(profile)
    except ValueError as exc:
        raise ConfigError(f"profile: {exc}") from exc
    nested = {}
    for name, cls in NESTED.items():
        nested[name] = _build(cls, getattr(base, name), data.get(name) or {}, name)
    train_values = dict(data.get("train") or {})
    for name in NESTED:
        if name in train_values:
            raise ConfigError(f"train.{name}: give this as a top-level section")
    train = _build(TrainRunConfig, replace(base, **nested), train_values, "train")
    ev = _build(EvalSettings, EvalSettings(), data.get("eval") or {}, "eval")
    every = data.get("checkpoint_every", 10)
    if not isinstance(every, int) or every < 0:
        raise ConfigError("checkpoint_every: expected a non-negative integer")
    return RunConfig(profile, train, ev, data.get("output_dir"), every)


def load(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    if path is None:
        return build({}, overrides)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return build(data, overrides)


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value`` with the value parsed as YAML."""
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    return key.strip(), yaml.safe_load(value)
