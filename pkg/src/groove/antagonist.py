"""Hand-designed reference learners: tabular A2C and PPO, random and expert policies.

Trainable antagonists for many levels run side by side in one compiled
batch. Each level owns a contiguous block of table rows, its own env
columns, RNG stream and Adam step counter, so results match training the
levels one at a time.
"""
from __future__ import annotations

import threading
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .agent import softmax_np
from .gridworld import (
    NUM_ACTIONS,
    CompiledLevels,
    Level,
    evaluate_episodes,
    reset_state,
    run_rollout,
    solve_optimal,
    uniform_policy,
)
from .gridworld.env import draw_uniforms


class AntagonistKind(str, Enum):
    A2C = "a2c"
    PPO = "ppo"
    RANDOM = "random"
    EXPERT = "expert"


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class AntagonistConfig:
    num_envs: int = 64
    rollout_len: int = 20
    lr: float = 0.01
    gamma: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    ppo_clip: float = 0.2
    ppo_epochs: int = 4
    ppo_minibatches: int = 4
    kl_ceiling: float = 0.05
    eval_episodes: int = 128
    budget_cap: int = 1_000_000

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ActorCriticParams:
    policy: np.ndarray  # (S, A) logits
    value: np.ndarray   # (S,)

    def __post_init__(self):
        if self.policy.shape != (len(self.value), NUM_ACTIONS):
            raise ValueError(f"policy {self.policy.shape} inconsistent with value {self.value.shape}")


@dataclass
class AntagonistResult:
    kind: AntagonistKind
    value: float        # mean discounted return of the final policy
    stderr: float
    interactions: int   # per-env steps consumed in training
    params: ActorCriticParams | None = None
    max_kl: float = 0.0
    undiscounted: float = 0.0
    undiscounted_stderr: float = 0.0


class _RowAdam:
    """Elementwise Adam with a per-row step counter for bias correction."""

    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, param, grad, t_rows, live_rows):
        """Rows of levels that are not live keep their parameters and moments."""
        shape = (-1,) + (1,) * (param.ndim - 1)
        live = live_rows.reshape(shape)
        self.m = np.where(live, self.b1 * self.m + (1 - self.b1) * grad, self.m)
        self.v = np.where(live, self.b2 * self.v + (1 - self.b2) * grad ** 2, self.v)
        t = np.maximum(t_rows, 1).reshape(shape)
        mhat = self.m / (1 - self.b1 ** t)
        vhat = self.v / (1 - self.b2 ** t)
        return np.where(live, param - self.lr * mhat / (np.sqrt(vhat) + self.eps), param)


def truncated_returns(rewards, dones, next_values, last, gamma):
    """n-step returns over columns that keep steps ``0..last[b]``.

    The return at the last kept step bootstraps from ``next_values`` there;
    later steps are zero.
    """
    n, B = rewards.shape
    R = np.zeros((n, B))
    running = np.zeros(B)
    for t in range(n - 1, -1, -1):
        cont = gamma * (1.0 - dones[t])
        running = np.where(t == last, rewards[t] + cont * next_values[t],
                           np.where(t < last, rewards[t] + cont * running, 0.0))
        R[t] = running
    return R


def _entropy_grad(p):
    logp = np.log(np.maximum(p, 1e-12))
    H = -(p * logp).sum(axis=1, keepdims=True)
    return -p * (logp + H)


def _a2c_grads(policy, value, s, a, R, w, cfg):
    """Gradients of sum_i w_i [-log pi(a|s) A - c_H H(pi(s)) + c_V (R - V(s))^2]."""
    p = softmax_np(policy[s])
    adv = R - value[s]
    onehot = np.eye(NUM_ACTIONS)[a]
    dz = -(onehot - p) * adv[:, None] - cfg.entropy_coef * _entropy_grad(p)
    g_p = np.zeros_like(policy)
    np.add.at(g_p, s, dz * w[:, None])
    g_v = np.zeros_like(value)
    np.add.at(g_v, s, w * 2.0 * cfg.value_coef * (value[s] - R))
    return g_p, g_v


def _ppo_grads(policy, value, s, a, R, adv, p_old_a, w, cfg):
    p = softmax_np(policy[s])
    ratio = p[np.arange(len(s)), a] / p_old_a
    clipped = ((adv > 0) & (ratio > 1 + cfg.ppo_clip)) | ((adv < 0) & (ratio < 1 - cfg.ppo_clip))
    onehot = np.eye(NUM_ACTIONS)[a]
    coef = np.where(clipped, 0.0, -adv * ratio)
    dz = coef[:, None] * (onehot - p) - cfg.entropy_coef * _entropy_grad(p)
    g_p = np.zeros_like(policy)
    np.add.at(g_p, s, dz * w[:, None])
    g_v = np.zeros_like(value)
    np.add.at(g_v, s, w * 2.0 * cfg.value_coef * (value[s] - R))
    return g_p, g_v


def _budgets(levels: Sequence[Level], budget) -> np.ndarray:
    if budget is None:
        return np.array([lv.lifetime for lv in levels], np.int64)
    return np.broadcast_to(np.asarray(budget, np.int64), (len(levels),)).copy()


def train_tabular(kind, levels: Sequence[Level], rngs: Sequence[np.random.Generator],
                  cfg: AntagonistConfig = AntagonistConfig(), budget=None):
    """Train A2C or PPO tables on every level.

    ``budget`` counts per-env steps (default: each level's lifetime) and is
    consumed exactly; a level's final rollout is cut short when needed.
    Returns (params per level, steps consumed per level, max mean KL per PPO update).
    """
    kind = AntagonistKind(kind)
    if kind not in (AntagonistKind.A2C, AntagonistKind.PPO):
        raise ValueError(f"{kind.value} is not trainable")
    budgets = _budgets(levels, budget)
    if (budgets < 1).any():
        raise BudgetError("budget must be >= 1 for trainable antagonists")
    if (budgets > cfg.budget_cap).any():
        raise BudgetError(f"budget {budgets.max()} exceeds cap {cfg.budget_cap}")
    comp = CompiledLevels(levels)
    L, E = len(levels), cfg.num_envs
    row_level = np.repeat(np.arange(L), comp.num_states)
    policy = np.zeros((comp.total_states, NUM_ACTIONS))
    value = np.zeros(comp.total_states)
    opt_p, opt_v = _RowAdam(policy.shape, cfg.lr), _RowAdam(value.shape, cfg.lr)
    steps = np.zeros(L, np.int64)
    consumed = np.zeros(L, np.int64)
    env = reset_state(comp, np.repeat(np.arange(L), E))
    col_level = np.repeat(np.arange(L), E)
    max_kl = 0.0

    def act(s, t, lvl):
        return softmax_np(policy[s])

    while (consumed < budgets).any():
        remaining = budgets - consumed
        n = int(min(cfg.rollout_len, remaining.max()))
        batch, env = run_rollout(comp, env, act, n, draw_uniforms(rngs, [E] * L, n))
        take = np.minimum(remaining, n)
        consumed += take
        live = take > 0
        last = take[col_level] - 1
        keep = np.arange(n)[:, None] <= last[None, :]
        R = truncated_returns(batch.rewards, batch.dones.astype(float),
                              value[batch.next_states], last, cfg.gamma)
        per_level = np.maximum(take * E, 1)
        w_full = (keep / per_level[col_level][None, :]).reshape(-1)
        s, a, fR = batch.states.reshape(-1), batch.actions.reshape(-1), R.reshape(-1)
        if kind == AntagonistKind.A2C:
            steps += live
            g_p, g_v = _a2c_grads(policy, value, s, a, fR, w_full, cfg)
            policy = opt_p.step(policy, g_p, steps[row_level], live[row_level])
            value = opt_v.step(value, g_v, steps[row_level], live[row_level])
            continue
        old = softmax_np(policy[s])
        p_old_a = old[np.arange(len(s)), a]
        adv = fR - value[s]
        flat_level = np.tile(col_level, n)
        flat_keep = keep.reshape(-1)
        for _ in range(cfg.ppo_epochs):
            for w in _minibatch_weights(flat_level, flat_keep, L, cfg.ppo_minibatches, rngs):
                steps += live
                g_p, g_v = _ppo_grads(policy, value, s, a, fR, adv, p_old_a, w, cfg)
                policy = opt_p.step(policy, g_p, steps[row_level], live[row_level])
                value = opt_v.step(value, g_v, steps[row_level], live[row_level])
        new = softmax_np(policy[s])
        kl = (old * (np.log(np.maximum(old, 1e-12)) - np.log(np.maximum(new, 1e-12)))).sum(1)
        max_kl = max(max_kl, float(kl[flat_keep].mean()))
    params = [ActorCriticParams(policy[sl].copy(), value[sl].copy()) for sl in comp.level_slices()]
    return params, consumed, max_kl


def _minibatch_weights(flat_level, flat_keep, L, M, rngs):
    """Per-level random split of kept transitions into M chunks, as loss weights."""
    chunks = [np.zeros(len(flat_level)) for _ in range(M)]
    for l in range(L):
        idx = np.flatnonzero((flat_level == l) & flat_keep)
        if len(idx) == 0:
            continue
        for j, part in enumerate(np.array_split(rngs[l].permutation(idx), M)):
            if len(part):
                chunks[j][part] = 1.0 / len(part)
    return chunks


# ------------------------------------------------------------------ evaluation


def _table_policy_fn(tables: np.ndarray):
    probs = softmax_np(tables)
    return lambda s, t, lvl: probs[s]


def _expert_policy_fn(comp: CompiledLevels, solutions):
    def policy(s, t, lvl):
        out = np.zeros((len(s), NUM_ACTIONS))
        for l in np.unique(lvl):
            rows = np.flatnonzero(lvl == l)
            sol = solutions[l]
            local = s[rows] - comp.state_offset[l]
            left = comp.max_steps[l] - t[rows] - 1
            out[rows, sol.policy[left, local]] = 1.0
        return out
    return policy


def evaluate_policy(levels: Sequence[Level], policy, rngs, cfg: AntagonistConfig):
    comp = CompiledLevels(levels)
    return evaluate_episodes(comp, policy, cfg.eval_episodes, rngs, cfg.gamma)


def train_antagonists(kind, levels: Sequence[Level], seeds: Sequence[int] | int = 0,
                      cfg: AntagonistConfig = AntagonistConfig(), budget=None
                      ) -> list[AntagonistResult]:
    """Final expected discounted return of ``kind`` on each level.

    Each level gets a training stream and an evaluation stream derived from
    (seed, level content hash), so results do not depend on batching.
    """
    kind = AntagonistKind(kind)
    levels = list(levels)
    seeds = np.broadcast_to(np.asarray(seeds, np.int64), (len(levels),))
    train_rngs = [level_rng(kind, lv, int(sd), "train") for lv, sd in zip(levels, seeds)]
    eval_rngs = [level_rng(kind, lv, int(sd), "eval") for lv, sd in zip(levels, seeds)]
    comp = CompiledLevels(levels)
    params: list[ActorCriticParams | None] = [None] * len(levels)
    consumed = np.zeros(len(levels), np.int64)
    max_kl = 0.0
    if kind in (AntagonistKind.A2C, AntagonistKind.PPO):
        params, consumed, max_kl = train_tabular(kind, levels, train_rngs, cfg, budget)
        policy = _table_policy_fn(np.concatenate([p.policy for p in params]))
    elif kind == AntagonistKind.RANDOM:
        policy = uniform_policy
    else:
        policy = _expert_policy_fn(comp, [solve_optimal(lv, cfg.gamma) for lv in levels])
    res = evaluate_policy(levels, policy, eval_rngs, cfg)
    n = res.undiscounted.shape[1]
    und = res.undiscounted.mean(axis=1)
    und_se = res.undiscounted.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(und))
    return [AntagonistResult(kind, float(m), float(e), int(c), p, max_kl, float(u), float(ue))
            for m, e, c, p, u, ue in zip(res.mean(), res.stderr(), consumed, params, und, und_se)]


def train_antagonist(kind, level: Level, budget: int | None = None,
                     rng_seed: int = 0, cfg: AntagonistConfig = AntagonistConfig()):
    """Single-level form: returns (final expected return, trained params or None)."""
    res = train_antagonists(kind, [level], rng_seed, cfg, budget)[0]
    return res.value, res.params


_KIND_CODE = {k: i for i, k in enumerate(AntagonistKind)}
_PURPOSE = {"train": 0, "eval": 1}


def level_rng(kind, level: Level, seed: int, purpose: str) -> np.random.Generator:
    digest = int(level.content_hash()[:12], 16)
    return np.random.default_rng([seed, digest, _KIND_CODE[AntagonistKind(kind)], _PURPOSE[purpose]])


# ------------------------------------------------------------------------ cache


class AntagonistCache:
    """Memo of antagonist returns keyed by (kind, level hash, budget, seed)."""

    def __init__(self, cfg: AntagonistConfig = AntagonistConfig()):
        self.cfg = cfg
        self._store: dict[tuple, AntagonistResult] = {}
        self._lock = threading.Lock()
        self.trainings = 0

    def key(self, kind, level: Level, budget: int | None, seed: int) -> tuple:
        b = level.lifetime if budget is None else int(budget)
        return (AntagonistKind(kind).value, level.content_hash(), b, int(seed))

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, key) -> bool:
        return key in self._store

    def returns(self, kind, levels: Sequence[Level], seed: int = 0,
                budget: int | None = None) -> list[AntagonistResult]:
        """Look up every level, training the missing ones in one batch."""
        keys = [self.key(kind, lv, budget, seed) for lv in levels]
        missing: dict[tuple, Level] = {}
        for k, lv in zip(keys, levels):
            if k not in self._store and k not in missing:
                missing[k] = lv
        if missing:
            todo = list(missing.values())
            budgets = [k[2] for k in missing]
            results = train_antagonists(kind, todo, seed, self.cfg, budgets)
            with self._lock:
                self.trainings += len(todo)
                for k, res in zip(missing, results):
                    res.params = None  # tables are not needed once scored
                    self._store.setdefault(k, res)
        return [self._store[k] for k in keys]

    def items(self):
        return list(self._store.items())

    def load_items(self, items) -> None:
        with self._lock:
            for k, v in items:
                self._store[tuple(k)] = v


DEFAULT_CACHE = AntagonistCache()


def cached_antagonist_return(kind, level: Level, budget: int | None = None, seed: int = 0,
                             cache: AntagonistCache | None = None) -> float:
    cache = cache if cache is not None else DEFAULT_CACHE
    return cache.returns(kind, [level], seed, budget)[0].value
