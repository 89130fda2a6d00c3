"""Meta-training loop: parallel lifetimes, meta-gradients, scoring and curation."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .agent import TabularAgent
from .antagonist import AntagonistCache, AntagonistConfig, AntagonistKind
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .curator import FRESH, Curator, CuratorConfig
from .gridworld import DistributionConfig, EnvState, Level, sample_level
from .lpg import (
    AgentConfig,
    MetaGradient,
    MetaObjectiveConfig,
    OptimizerParams,
    Workers,
    meta_gradient_batch,
    outer_update,
)
from .optim import AdamState
from .scoring import ScoreKind, ScoringContext, score_levels

log = logging.getLogger(__name__)

LevelSampler = Callable[[np.random.Generator], Level]


@dataclass
class TrainRunConfig:
    num_lifetimes: int = 64
    envs_per_lifetime: int = 8
    rollout_len: int = 20
    meta_updates: int = 200
    score_kind: str = "ar"
    seed: int = 0
    bootstrap_dim: int = 16
    agent_lr: float = 40.0
    alpha_y: float = 0.5
    lstm_hidden: int = 32
    embed_dim: int = 32
    eval_episodes: int = 128
    drop_alarm: float = 0.01
    meta: MetaObjectiveConfig = field(default_factory=MetaObjectiveConfig)
    curator: CuratorConfig = field(default_factory=CuratorConfig)
    distribution: DistributionConfig = field(default_factory=DistributionConfig)
    antagonist: AntagonistConfig = field(default_factory=lambda: AntagonistConfig(num_envs=8))
    antagonist_kind: str = "a2c"

    def __post_init__(self):
        for name in ("num_lifetimes", "envs_per_lifetime", "rollout_len", "bootstrap_dim",
                     "lstm_hidden", "embed_dim", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.meta_updates < 0:
            raise ValueError("meta_updates must be >= 0")
        ScoreKind(self.score_kind)
        AntagonistKind(self.antagonist_kind)

    @classmethod
    def profile(cls, name: str, **overrides) -> "TrainRunConfig":
        if name == "desk":
            # fewer lifetimes give a noisier but still usable gradient at a larger step
            base = cls(meta=MetaObjectiveConfig(lr=1e-3))
        elif name == "full":
            base = cls(num_lifetimes=512, envs_per_lifetime=64,
                       antagonist=AntagonistConfig(num_envs=64))
        else:
            raise ValueError(f"unknown profile {name!r}")
        return replace(base, **overrides)

    @property
    def agent(self) -> AgentConfig:
        return AgentConfig(n=self.bootstrap_dim, lr=self.agent_lr, alpha_y=self.alpha_y,
                           rollout_len=self.rollout_len, num_envs=self.envs_per_lifetime)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else (
                asdict(v) if hasattr(v, "__dataclass_fields__") else v)
        return out

    def digest(self) -> str:
        """Hash of everything that shapes the trajectory; run length is left out."""
        d = self.to_dict()
        d.pop("meta_updates")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def lifetime_rng(seed: int, slot: int, generation: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, slot, generation])


def scoring_rng(seed: int, slot: int, generation: int) -> np.random.Generator:
    return np.random.default_rng([seed, 3, slot, generation])


def fixed_set_sampler(levels: Sequence[Level]) -> LevelSampler:
    """Uniform draws from a fixed level set (static curriculum)."""
    levels = list(levels)
    if not levels:
        raise ValueError("fixed level set is empty")
    return lambda rng: levels[int(rng.integers(len(levels)))]


@dataclass
class Lifetime:
    level: Level
    provenance: str
    generation: int
    interactions: int = 0


@dataclass
class TrainResult:
    eta: OptimizerParams
    metrics: list[dict]


class Trainer:
    """Owns eta, its Adam state, the curator and a lockstep batch of lifetimes."""

    def __init__(self, cfg: TrainRunConfig, curator: Curator | None = None,
                 sampler: LevelSampler | None = None,
                 cache: AntagonistCache | None = None,
                 metrics_sink: Callable[[dict], None] | None = None,
                 eta: OptimizerParams | None = None):
        self.cfg = cfg
        self.agent_cfg = cfg.agent
        self.sampler = sampler or (lambda rng: sample_level(rng, cfg.distribution))
        self.curator = curator if curator is not None else Curator(cfg.curator)
        self.scoring = ScoringContext(antagonist=AntagonistKind(cfg.antagonist_kind),
                                      cache=cache or AntagonistCache(cfg.antagonist),
                                      antagonist_seed=cfg.seed, gamma=cfg.meta.gamma,
                                      eval_episodes=cfg.eval_episodes)
        self.metrics_sink = metrics_sink
        self.eta = eta or OptimizerParams.init(cfg.bootstrap_dim, cfg.lstm_hidden, cfg.embed_dim,
                                               np.random.default_rng([cfg.seed, 0]))
        self.adam = AdamState()
        self.curator_rng = np.random.default_rng([cfg.seed, 2])
        self.batch = 0
        self.interactions = 0
        self.dropped = 0
        self.contributions = 0
        self.lifetimes: list[Lifetime] = []
        for slot in range(cfg.num_lifetimes):
            level, prov = self.curator.next_level(self.curator_rng, self.sampler, 0)
            self.lifetimes.append(Lifetime(level, prov, 0))
        rngs = [lifetime_rng(cfg.seed, i, 0) for i in range(cfg.num_lifetimes)]
        self.workers = Workers.start([lt.level for lt in self.lifetimes], rngs, self.agent_cfg)

    # ------------------------------------------------------------------ steps

    def expected_interactions(self, meta_updates: int) -> int:
        """Analytic count when lifetimes are a whole number of windows."""
        c = self.cfg
        return meta_updates * c.num_lifetimes * c.meta.updates_per_meta * c.rollout_len \
            * c.envs_per_lifetime

    def _gradient(self):
        """Batched meta-gradient; per-lifetime fallback when it goes non-finite."""
        w = self.workers
        saved = [copy.deepcopy(r.bit_generator.state) for r in w.rngs]
        try:
            return meta_gradient_batch(self.eta, w, self.cfg.meta, self.agent_cfg), []
        except T.NonFiniteError:
            pass
        for r, s in zip(w.rngs, saved):
            r.bit_generator.state = s
        grads, failed, agents, envs = [], [], [], []
        diag_all = []
        for l in range(w.num_lifetimes):
            sub = w.subset([l])
            try:
                res = meta_gradient_batch(self.eta, sub, self.cfg.meta, self.agent_cfg)
            except T.NonFiniteError as exc:
                log.warning("non-finite meta-gradient: batch %d lifetime %d level %s seed %d: %s",
                            self.batch, l, self.lifetimes[l].level.content_hash()[:12],
                            self.cfg.seed, exc)
                failed.append(l)
                agents.append(None)
                envs.append(None)
                continue
            grads.append(res.grads)
            agents.append(res.agent)
            envs.append(res.env)
            diag_all.append(res.diagnostics)
        return _merge(w, grads, agents, envs, diag_all), failed

    def step(self) -> dict:
        cfg, w = self.cfg, self.workers
        t0 = time.perf_counter()
        res, failed = self._gradient()
        ok = w.num_lifetimes - len(failed)
        self.dropped += len(failed)
        self.contributions += w.num_lifetimes
        norm = 0.0
        if res is not None:
            self.eta, self.adam, norm = outer_update(self.eta, res.grads, self.adam, cfg.meta)
            w.agent, w.env = res.agent, res.env
        used = np.minimum(w.updates_left, cfg.meta.updates_per_meta)
        used[failed] = 0
        steps = used * cfg.rollout_len
        for lt, s in zip(self.lifetimes, steps):
            lt.interactions += int(s)
        self.interactions += int(steps.sum()) * cfg.envs_per_lifetime
        w.updates_left = w.updates_left - used
        w.updates_left[failed] = 0
        self.batch += 1
        record = {"batch": self.batch, "grad_norm": float(norm), "lifetimes_ok": ok,
                  "dropped": len(failed), "interactions": self.interactions}
        if res is not None:
            record.update(res.diagnostics)
        record.update(self._turnover(set(failed)))
        record.update(self.curator.stats())
        record["seconds"] = time.perf_counter() - t0
        rate = self.dropped / max(self.contributions, 1)
        if rate > cfg.drop_alarm:
            log.warning("non-finite drop rate %.2f%% exceeds alarm", 100 * rate)
        if self.metrics_sink:
            self.metrics_sink(record)
        return record

    def _turnover(self, failed: set[int]) -> dict:
        """Score finished lifetimes, report them, and start replacements."""
        cfg, w = self.cfg, self.workers
        finished = [i for i in range(w.num_lifetimes) if w.updates_left[i] <= 0]
        if not finished:
            return {"finished": 0}
        scored = [i for i in finished if i not in failed]
        out: dict = {"finished": len(finished)}
        if scored:
            agents = w.split_agents()
            tables = [agents[i].policy_probs() for i in scored]
            levels = [self.lifetimes[i].level for i in scored]
            rngs = [scoring_rng(cfg.seed, i, self.lifetimes[i].generation) for i in scored]
            scores = score_levels(cfg.score_kind, levels, tables, rngs, self.scoring)
            for lv, sc in zip(levels, scores):
                self.curator.report_score(lv, sc.value, self.batch)
            out["score_mean"] = float(np.mean([s.value for s in scores]))
            out["return_mean"] = float(np.mean([s.protagonist for s in scores]))
            refs = [s.reference for s in scores if s.reference is not None]
            if refs:
                out["reference_mean"] = float(np.mean(refs))
        sources: list[int | None] = list(range(w.num_lifetimes))
        replayed = 0
        for i in finished:
            level, prov = self.curator.next_level(self.curator_rng, self.sampler, self.batch)
            replayed += prov != FRESH
            self.lifetimes[i] = Lifetime(level, prov, self.lifetimes[i].generation + 1)
            sources[i] = None
        rngs = [w.rngs[i] if sources[i] is not None
                else lifetime_rng(cfg.seed, i, self.lifetimes[i].generation)
                for i in range(w.num_lifetimes)]
        updates = np.array([w.updates_left[i] if sources[i] is not None
                            else max(self.lifetimes[i].level.lifetime // cfg.rollout_len, 1)
                            for i in range(w.num_lifetimes)])
        self.workers = w.rebuild(sources, [lt.level for lt in self.lifetimes], rngs, updates)
        out["replay_fraction"] = replayed / len(finished)
        return out

    def run(self, until: int | None = None, should_stop: Callable[[], bool] | None = None,
            checkpoint_every: int = 0, checkpoint_path: str | Path | None = None) -> TrainResult:
        until = self.cfg.meta_updates if until is None else until
        metrics = []
        while self.batch < until:
            metrics.append(self.step())
            if checkpoint_path and checkpoint_every and self.batch % checkpoint_every == 0:
                self.save(checkpoint_path)
            if should_stop and should_stop():
                break
        if checkpoint_path:
            self.save(checkpoint_path)
        return TrainResult(self.eta, metrics)

    # -------------------------------------------------------------- persistence

    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        w = self.workers
        arrays = {f"eta/{k}": v for k, v in self.eta.arrays().items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.adam.v.items()})
        pol, boot = w.agent.arrays()
        arrays.update({"agent/policy": pol, "agent/bootstrap": boot,
                       "env/lvl": w.env.lvl, "env/pos": w.env.pos, "env/mask": w.env.mask,
                       "env/t": w.env.t, "env/done": w.env.done,
                       "updates_left": w.updates_left})
        meta = {
            "config_hash": self.cfg.digest(),
            "config": self.cfg.to_dict(),
            "batch": self.batch,
            "interactions": self.interactions,
            "dropped": self.dropped,
            "contributions": self.contributions,
            "adam_step": self.adam.step,
            "curator": self.curator.snapshot(),
            "curator_rng": self.curator_rng.bit_generator.state,
            "lifetime_rngs": [r.bit_generator.state for r in w.rngs],
            "lifetimes": [{"level": lt.level.to_record(), "provenance": lt.provenance,
                           "generation": lt.generation, "interactions": lt.interactions}
                          for lt in self.lifetimes],
            "eta_checksum": self.eta.checksum(),
        }
        return arrays, meta

    def save(self, path: str | Path) -> Path:
        arrays, meta = self.state()
        return save_checkpoint(path, arrays, meta)

    @classmethod
    def resume(cls, path: str | Path, cfg: TrainRunConfig, allow_config_change: bool = False,
               **kwargs) -> "Trainer":
        arrays, meta = load_checkpoint(path)
        if meta["config_hash"] != cfg.digest() and not allow_config_change:
            raise CheckpointError("checkpoint was written with a different configuration")
        trainer = cls(cfg, **kwargs)
        try:
            trainer._restore(arrays, meta)
        except (KeyError, ValueError, T.ShapeError) as exc:
            raise CheckpointError(f"checkpoint does not match configuration: {exc}") from exc
        return trainer

    def _restore(self, arrays: dict, meta: dict) -> None:
        def group(prefix):
            return {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(prefix + "/")}

        eta = OptimizerParams.from_arrays(group("eta"))
        if eta.hidden != self.cfg.lstm_hidden or eta.n != self.cfg.bootstrap_dim:
            raise ValueError("optimizer shape differs from configuration")
        adam = AdamState(int(meta["adam_step"]), group("adam_m"), group("adam_v"))
        lifetimes = [Lifetime(Level.from_record(rec["level"]), rec["provenance"],
                              int(rec["generation"]), int(rec["interactions"]))
                     for rec in meta["lifetimes"]]
        if len(lifetimes) != self.cfg.num_lifetimes:
            raise ValueError("lifetime count differs from configuration")
        rngs = []
        for st in meta["lifetime_rngs"]:
            r = np.random.default_rng()
            r.bit_generator.state = st
            rngs.append(r)
        curator_rng = np.random.default_rng()
        curator_rng.bit_generator.state = meta["curator_rng"]
        workers = Workers.start([lt.level for lt in lifetimes], rngs, self.agent_cfg)
        if arrays["agent/policy"].shape != workers.agent.policy.shape:
            raise ValueError("agent table shape differs from lifetime levels")
        workers.agent = TabularAgent(arrays["agent/policy"].copy(), arrays["agent/bootstrap"].copy())
        workers.env = EnvState(arrays["env/lvl"].copy(), arrays["env/pos"].copy(),
                               arrays["env/mask"].copy(), arrays["env/t"].copy(),
                               arrays["env/done"].copy())
        workers.updates_left = arrays["updates_left"].copy()
        self.eta, self.adam = eta, adam
        self.curator = Curator.from_snapshot(meta["curator"])
        self.curator_rng = curator_rng
        self.lifetimes = lifetimes
        self.workers = workers
        self.batch = int(meta["batch"])
        self.interactions = int(meta["interactions"])
        self.dropped = int(meta["dropped"])
        self.contributions = int(meta["contributions"])


def _merge(w: Workers, grads, agents, envs, diags):
    """Recombine per-lifetime meta-gradient results; failed lifetimes keep old state."""
    if not grads:
        return None
    mean = {k: np.mean([g[k] for g in grads], axis=0) for k in grads[0]}
    own = w.split_agents()
    merged_agents = [a if a is not None else o for a, o in zip(agents, own)]
    agent = TabularAgent.concat(merged_agents)
    env = w.env.copy()
    E = w.envs_per_lifetime
    for l, e in enumerate(envs):
        if e is None:
            continue
        rows = slice(l * E, (l + 1) * E)
        env.pos[rows] = e.pos + w.levels.pos_offset[l]
        env.mask[rows], env.t[rows], env.done[rows] = e.mask, e.t, e.done
    diag = {k: float(np.mean([d[k] for d in diags])) for k in diags[0]}
    return MetaGradient(mean, agent, env, np.zeros(w.num_lifetimes, np.int64), diag)


def train(cfg: TrainRunConfig, curator: Curator | None = None,
          sampler: LevelSampler | None = None, **kwargs) -> TrainResult:
    """Run meta-training for ``cfg.meta_updates`` batches."""
    return Trainer(cfg, curator, sampler, **kwargs).run()
