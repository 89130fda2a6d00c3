"""Vectorized Grid-World dynamics over batches of heterogeneous levels.

Levels are compiled into flat lookup tables so that one numpy call advances
every environment of every level at once. Each level owns a contiguous block
of global state ids ``state_offset[l] + pos * 2**n_objects + presence_mask``,
which is also the row layout used by tabular agents.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .level import ACTIONS, MAX_OBJECTS, NUM_ACTIONS, Level

# per-env uniforms drawn per step: action, termination, one per object slot
DRAWS_PER_STEP = 2 + MAX_OBJECTS


class SteppingDoneError(RuntimeError):
    pass


class CompiledLevels:
    """Flat transition tables for a sequence of levels."""

    def __init__(self, levels: Sequence[Level]):
        self.levels = list(levels)
        L = len(self.levels)
        self.num_levels = L
        self.n_obj = np.array([lv.num_objects for lv in self.levels], dtype=np.int64)
        self.full_mask = (1 << self.n_obj) - 1
        self.max_steps = np.array([lv.max_steps for lv in self.levels], dtype=np.int64)
        self.obj_reward = np.zeros((L, MAX_OBJECTS))
        self.obj_term = np.zeros((L, MAX_OBJECTS))
        self.obj_respawn = np.zeros((L, MAX_OBJECTS))
        moves, obj_at, pos_counts, starts, cells_all = [], [], [], [], []
        offset = 0
        for l, lv in enumerate(self.levels):
            cells = lv.reachable_cells()
            index = {cell: i for i, cell in enumerate(cells)}
            objects = {o.position: k for k, o in enumerate(lv.objects)}
            for k, o in enumerate(lv.objects):
                self.obj_reward[l, k] = o.reward
                self.obj_term[l, k] = o.eps_term
                self.obj_respawn[l, k] = o.eps_respawn
            mv = np.empty((len(cells), NUM_ACTIONS), dtype=np.int64)
            for i, (r, c) in enumerate(cells):
                for a, (dr, dc) in enumerate(ACTIONS):
                    nxt = (r + dr, c + dc)
                    mv[i, a] = offset + index.get(nxt, i)
            moves.append(mv)
            obj_at.append(np.array([objects.get(cell, -1) for cell in cells], dtype=np.int64))
            starts.append(offset + index[lv.start])
            pos_counts.append(len(cells))
            cells_all.extend(cells)
            offset += len(cells)
        self.move = np.concatenate(moves) if moves else np.zeros((0, 4), np.int64)
        self.obj_at = np.concatenate(obj_at) if obj_at else np.zeros(0, np.int64)
        self.cells = cells_all
        self.num_positions = np.array(pos_counts, dtype=np.int64)
        self.pos_offset = np.concatenate([[0], np.cumsum(self.num_positions)[:-1]]).astype(np.int64)
        self.start = np.array(starts, dtype=np.int64)
        self.num_states = self.num_positions << self.n_obj
        self.state_offset = np.concatenate([[0], np.cumsum(self.num_states)[:-1]]).astype(np.int64)
        self.total_states = int(self.num_states.sum())
        self.level_of_pos = np.repeat(np.arange(L), self.num_positions)

    def state_ids(self, lvl: np.ndarray, gpos: np.ndarray, mask: np.ndarray) -> np.ndarray:
        local = gpos - self.pos_offset[lvl]
        return self.state_offset[lvl] + (local << self.n_obj[lvl]) + mask

    def decode(self, state_id: int) -> tuple[int, tuple[int, int], int]:
        """Global state id -> (level index, cell, presence mask)."""
        lvl = int(np.searchsorted(self.state_offset, state_id, side="right") - 1)
        local = state_id - int(self.state_offset[lvl])
        pos, mask = divmod(local, 1 << int(self.n_obj[lvl]))
        return lvl, self.cells[int(self.pos_offset[lvl]) + pos], mask

    def level_slices(self) -> list[slice]:
        return [slice(int(o), int(o + n)) for o, n in zip(self.state_offset, self.num_states)]


@dataclass
class EnvState:
    """Batch of environment states; row i plays level ``lvl[i]``."""

    lvl: np.ndarray
    pos: np.ndarray
    mask: np.ndarray
    t: np.ndarray
    done: np.ndarray

    def copy(self) -> "EnvState":
        return EnvState(self.lvl.copy(), self.pos.copy(), self.mask.copy(), self.t.copy(),
                        self.done.copy())

    @property
    def size(self) -> int:
        return len(self.lvl)


def reset_state(levels: CompiledLevels, lvl: np.ndarray) -> EnvState:
    lvl = np.asarray(lvl, dtype=np.int64)
    n = len(lvl)
    return EnvState(lvl.copy(), levels.start[lvl].copy(), levels.full_mask[lvl].copy(),
                    np.zeros(n, np.int64), np.zeros(n, bool))


def step(levels: CompiledLevels, state: EnvState, action: np.ndarray,
         uniforms: np.ndarray) -> tuple[EnvState, np.ndarray, np.ndarray]:
    """Advance every row one step.

    ``uniforms`` is (B, DRAWS_PER_STEP); column 1 drives termination and
    columns 2.. drive per-object respawn. Collection resolves before respawn,
    and the termination draw happens after the reward is assigned.
    """
    if np.any(state.done):
        raise SteppingDoneError("step() called on a finished episode; reset it first")
    lvl = state.lvl
    pos = levels.move[state.pos, action]
    k = levels.obj_at[pos]
    has = k >= 0
    kk = np.where(has, k, 0)
    collected = has & (((state.mask >> kk) & 1) == 1)
    reward = np.where(collected, levels.obj_reward[lvl, kk], 0.0)
    mask = np.where(collected, state.mask & ~(1 << kk), state.mask)
    terminated = collected & (uniforms[:, 1] < levels.obj_term[lvl, kk])
    slot = np.arange(MAX_OBJECTS)
    absent = ((mask[:, None] >> slot) & 1) == 0
    live = slot[None, :] < levels.n_obj[lvl][:, None]
    spawn = absent & live & (uniforms[:, 2:2 + MAX_OBJECTS] < levels.obj_respawn[lvl])
    mask = mask | (spawn.astype(np.int64) << slot).sum(axis=1)
    t = state.t + 1
    done = terminated | (t >= levels.max_steps[lvl])
    return EnvState(lvl, pos, mask, t, done), reward, done


def auto_reset(levels: CompiledLevels, state: EnvState) -> EnvState:
    d = state.done
    if not np.any(d):
        return state
    out = state.copy()
    lvl = out.lvl[d]
    out.pos[d] = levels.start[lvl]
    out.mask[d] = levels.full_mask[lvl]
    out.t[d] = 0
    out.done[d] = False
    return out


@dataclass
class TransitionBatch:
    """Time-major (T, B) arrays of one rollout; ``next_states`` are pre-reset."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    next_states: np.ndarray
    action_probs: np.ndarray
    steps: np.ndarray
    lvl: np.ndarray

    @property
    def num_steps(self) -> int:
        return self.states.shape[0]

    @property
    def num_envs(self) -> int:
        return self.states.shape[1]

    @property
    def size(self) -> int:
        return self.states.size

    def select_envs(self, cols) -> "TransitionBatch":
        return TransitionBatch(*(getattr(self, f)[:, cols] for f in
                                 ("states", "actions", "rewards", "dones", "next_states",
                                  "action_probs", "steps")), self.lvl[cols])


PolicyFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def sample_actions(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((cdf < u[:, None] * cdf[:, -1:]).sum(axis=1), probs.shape[1] - 1)


def draw_uniforms(rngs: Sequence[np.random.Generator], envs_per_rng: Sequence[int],
                  num_steps: int) -> np.ndarray:
    """(num_steps, sum(envs_per_rng), DRAWS_PER_STEP) uniforms, one block per stream."""
    blocks = [rng.random((num_steps, n, DRAWS_PER_STEP)) for rng, n in zip(rngs, envs_per_rng)]
    return np.concatenate(blocks, axis=1)


def run_rollout(levels: CompiledLevels, state: EnvState, policy: PolicyFn, num_steps: int,
                uniforms: np.ndarray) -> tuple[TransitionBatch, EnvState]:
    """Roll ``num_steps`` with auto-reset; returns the batch and the final state."""
    T, B = num_steps, state.size
    out = {name: np.empty((T, B), dtype) for name, dtype in (
        ("states", np.int64), ("actions", np.int64), ("rewards", np.float64),
        ("dones", bool), ("next_states", np.int64), ("action_probs", np.float64),
        ("steps", np.int64))}
    rows = np.arange(B)
    for t in range(T):
        s = levels.state_ids(state.lvl, state.pos, state.mask)
        probs = policy(s, state.t, state.lvl)
        a = sample_actions(probs, uniforms[t, :, 0])
        out["states"][t] = s
        out["steps"][t] = state.t
        out["actions"][t] = a
        out["action_probs"][t] = probs[rows, a]
        state, r, d = step(levels, state, a, uniforms[t])
        out["rewards"][t] = r
        out["dones"][t] = d
        out["next_states"][t] = levels.state_ids(state.lvl, state.pos, state.mask)
        state = auto_reset(levels, state)
    return TransitionBatch(**out, lvl=state.lvl.copy()), state


def rollout(level: Level, policy: PolicyFn, num_envs: int, num_steps: int,
            rng: np.random.Generator) -> TransitionBatch:
    """Single-level convenience wrapper: fresh episodes on ``num_envs`` copies."""
    levels = CompiledLevels([level])
    state = reset_state(levels, np.zeros(num_envs, np.int64))
    uniforms = draw_uniforms([rng], [num_envs], num_steps)
    batch, _ = run_rollout(levels, state, policy, num_steps, uniforms)
    return batch


def table_policy(table: np.ndarray) -> PolicyFn:
    """Stationary policy from a (num_states, 4) probability table."""
    return lambda s, t, lvl: table[s]


def uniform_policy(s, t, lvl) -> np.ndarray:
    return np.full((len(s), NUM_ACTIONS), 1.0 / NUM_ACTIONS)


@dataclass
class EpisodeResult:
    returns: np.ndarray        # (L, E) discounted returns
    undiscounted: np.ndarray   # (L, E)
    lengths: np.ndarray        # (L, E)
    trajectory: dict | None = None

    def mean(self) -> np.ndarray:
        return self.returns.mean(axis=1)

    def stderr(self) -> np.ndarray:
        n = self.returns.shape[1]
        return self.returns.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(self.returns))


def evaluate_episodes(levels: CompiledLevels, policy: PolicyFn, num_episodes: int,
                      rngs: Sequence[np.random.Generator], gamma: float,
                      record: bool = False) -> EpisodeResult:
    """Run ``num_episodes`` complete episodes per level, one RNG stream per level.

    With ``record`` the full (T, L*E) trajectories are kept; rows that already
    finished are marked invalid.
    """
    L, E = levels.num_levels, num_episodes
    lvl = np.repeat(np.arange(L), E)
    state = reset_state(levels, lvl)
    horizon = int(levels.max_steps.max()) if L else 0
    returns = np.zeros(L * E)
    undiscounted = np.zeros(L * E)
    lengths = np.zeros(L * E, np.int64)
    alive = np.ones(L * E, bool)
    traj = None
    if record:
        traj = {k: np.zeros((horizon, L * E), dt) for k, dt in (
            ("states", np.int64), ("rewards", np.float64), ("dones", bool),
            ("next_states", np.int64), ("valid", bool))}
    chunk = 64
    for t0 in range(0, horizon, chunk):
        n = min(chunk, horizon - t0)
        uniforms = draw_uniforms(rngs, [E] * L, n)
        for j in range(n):
            t = t0 + j
            idx = np.flatnonzero(alive)
            if len(idx) == 0:
                break
            sub = EnvState(state.lvl[idx], state.pos[idx], state.mask[idx], state.t[idx],
                           state.done[idx])
            s = levels.state_ids(sub.lvl, sub.pos, sub.mask)
            probs = policy(s, sub.t, sub.lvl)
            a = sample_actions(probs, uniforms[j, idx, 0])
            nxt, r, d = step(levels, sub, a, uniforms[j, idx])
            returns[idx] += gamma ** t * r
            undiscounted[idx] += r
            lengths[idx] += 1
            if record:
                traj["states"][t, idx] = s
                traj["rewards"][t, idx] = r
                traj["dones"][t, idx] = d
                traj["next_states"][t, idx] = levels.state_ids(nxt.lvl, nxt.pos, nxt.mask)
                traj["valid"][t, idx] = True
            state.pos[idx], state.mask[idx], state.t[idx] = nxt.pos, nxt.mask, nxt.t
            alive[idx[d]] = False
        if not alive.any():
            break
    return EpisodeResult(returns.reshape(L, E), undiscounted.reshape(L, E),
                         lengths.reshape(L, E), traj)
