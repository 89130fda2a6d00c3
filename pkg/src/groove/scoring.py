"""Level scores used to prioritise the curriculum."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .agent import AlignmentError
from .antagonist import AntagonistCache, AntagonistKind
from .gridworld import CompiledLevels, Level, evaluate_episodes, solve_optimal, table_policy


class ScoreKind(str, Enum):
    AR = "ar"
    OPTIMAL_REGRET = "optimal_regret"
    L1_VALUE_LOSS = "l1_value_loss"
    POSITIVE_VALUE_LOSS = "positive_value_loss"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class LevelScore:
    value: float
    kind: ScoreKind
    protagonist: float
    reference: float | None = None
    noise: float = 0.0


@dataclass
class ScoringContext:
    antagonist: AntagonistKind = AntagonistKind.A2C
    cache: AntagonistCache = field(default_factory=AntagonistCache)
    antagonist_seed: int = 0
    gamma: float = 0.99
    gae_lambda: float = 0.95
    critic_steps: int = 50
    critic_lr: float = 0.1
    eval_episodes: int = 128
    discounted: bool = True


def gae(rewards: np.ndarray, dones: np.ndarray, values: np.ndarray, next_values: np.ndarray,
        gamma: float, lam: float) -> np.ndarray:
    """Generalised advantage estimates over time-major (T, B) arrays, reset at dones."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if not (rewards.shape == np.shape(dones) == np.shape(values) == np.shape(next_values)):
        raise AlignmentError("rewards, dones and values must share a (T, B) shape")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    cont = 1.0 - np.asarray(dones, dtype=np.float64)
    delta = rewards + gamma * cont * next_values - values
    adv = np.zeros_like(delta)
    running = np.zeros(delta.shape[1:])
    for t in range(len(delta) - 1, -1, -1):
        running = delta[t] + gamma * lam * cont[t] * running
        adv[t] = running
    return adv


def batch_gae(batch, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """GAE for a TransitionBatch given one value per state id."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or max(batch.states.max(), batch.next_states.max()) >= len(values):
        raise AlignmentError(f"values of shape {values.shape} do not cover the batch states")
    return gae(batch.rewards, batch.dones, values[batch.states], values[batch.next_states],
               gamma, lam)


def returns_to_go(rewards: np.ndarray, dones: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros_like(rewards, dtype=np.float64)
    running = np.zeros(rewards.shape[1:])
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * (1.0 - dones[t]) * running
        out[t] = running
    return out


def fit_critic(states, targets, num_states: int, steps: int, lr: float) -> np.ndarray:
    """Tabular critic by gradient descent on each state's mean squared return error."""
    counts = np.bincount(states, minlength=num_states).astype(float)
    sums = np.bincount(states, weights=targets, minlength=num_states)
    mean_target = np.divide(sums, counts, out=np.zeros(num_states), where=counts > 0)
    V = np.zeros(num_states)
    for _ in range(steps):
        V = V - lr * np.where(counts > 0, V - mean_target, 0.0)
    return V


def value_loss_scores(traj: dict, num_states: int, num_levels: int, episodes: int,
                      ctx: ScoringContext) -> tuple[np.ndarray, np.ndarray]:
    """Per-level (mean |GAE|, mean max(GAE, 0)), averaged within then across episodes."""
    valid = traj["valid"]
    rewards = np.where(valid, traj["rewards"], 0.0)
    dones = traj["dones"] | ~valid
    G = returns_to_go(rewards, dones, ctx.gamma)
    V = fit_critic(traj["states"][valid], G[valid], num_states, ctx.critic_steps, ctx.critic_lr)
    adv = gae(rewards, dones, V[traj["states"]], V[traj["next_states"]], ctx.gamma,
              ctx.gae_lambda)
    steps = np.maximum(valid.sum(axis=0), 1)
    l1 = (np.abs(adv) * valid).sum(axis=0) / steps
    pos = (np.maximum(adv, 0.0) * valid).sum(axis=0) / steps
    return (l1.reshape(num_levels, episodes).mean(axis=1),
            pos.reshape(num_levels, episodes).mean(axis=1))


def protagonist_returns(levels: Sequence[Level], policy_tables: Sequence[np.ndarray],
                        rngs: Sequence[np.random.Generator], ctx: ScoringContext,
                        record: bool = False):
    comp = CompiledLevels(levels)
    table = np.concatenate(policy_tables)
    if len(table) != comp.total_states:
        raise AlignmentError("policy tables do not match the levels' state spaces")
    return comp, evaluate_episodes(comp, table_policy(table), ctx.eval_episodes, rngs,
                                   ctx.gamma, record=record)


def score_levels(kind, levels: Sequence[Level], policy_tables: Sequence[np.ndarray],
                 rngs: Sequence[np.random.Generator], ctx: ScoringContext | None = None
                 ) -> list[LevelScore]:
    """Score each level given the protagonist's final action-probability table on it."""
    kind = ScoreKind(kind)
    ctx = ctx or ScoringContext()
    levels = list(levels)
    if not levels:
        return []
    value_loss = kind in (ScoreKind.L1_VALUE_LOSS, ScoreKind.POSITIVE_VALUE_LOSS)
    comp, res = protagonist_returns(levels, policy_tables, rngs, ctx, record=value_loss)
    if ctx.discounted:
        prot, noise = res.mean(), res.stderr()
    else:
        n = res.undiscounted.shape[1]
        prot = res.undiscounted.mean(axis=1)
        noise = res.undiscounted.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else 0.0 * prot
    if kind == ScoreKind.UNIFORM:
        return [LevelScore(1.0, kind, float(p), None, float(e)) for p, e in zip(prot, noise)]
    if kind == ScoreKind.AR:
        refs = ctx.cache.returns(ctx.antagonist, levels, ctx.antagonist_seed)
        ref = [(r.value, r.stderr) if ctx.discounted else (r.undiscounted, r.undiscounted_stderr)
               for r in refs]
        return [LevelScore(float(v - p), kind, float(p), float(v), float(np.hypot(e, se)))
                for (v, se), p, e in zip(ref, prot, noise)]
    if kind == ScoreKind.OPTIMAL_REGRET:
        if not ctx.discounted:
            raise ValueError("optimal regret is defined on discounted returns")
        opt = [solve_optimal(lv, ctx.gamma).value for lv in levels]
        return [LevelScore(float(o - p), kind, float(p), float(o), float(e))
                for o, p, e in zip(opt, prot, noise)]
    l1, pos = value_loss_scores(res.trajectory, comp.total_states, len(levels),
                                ctx.eval_episodes, ctx)
    vals = l1 if kind == ScoreKind.L1_VALUE_LOSS else pos
    return [LevelScore(float(v), kind, float(p), None, float(e))
            for v, p, e in zip(vals, prot, noise)]


def score_level(kind, level: Level, policy_table: np.ndarray, rng: np.random.Generator,
                ctx: ScoringContext | None = None) -> LevelScore:
    return score_levels(kind, [level], [policy_table], [rng], ctx)[0]
