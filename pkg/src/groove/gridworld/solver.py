"""Exact finite-horizon backward induction for a single level."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import CompiledLevels
from .level import NUM_ACTIONS, Level

DEFAULT_BUDGET = 10 ** 8


class SolverBudgetError(RuntimeError):
    pass


@dataclass
class OptimalSolution:
    value: float
    # policy[k - 1, s]: optimal action with k steps left in state s (local ids)
    policy: np.ndarray
    start_state: int

    def action(self, state: int, steps_elapsed: int, max_steps: int) -> int:
        return int(self.policy[max_steps - steps_elapsed - 1, state])


def respawn_matrix(n_obj: int, respawn: np.ndarray) -> np.ndarray:
    """R[m, m']: probability that presence mask m becomes m' at step end."""
    M = 1 << n_obj
    R = np.ones((M, M))
    masks = np.arange(M)
    for j in range(n_obj):
        before = ((masks >> j) & 1)[:, None]
        after = ((masks >> j) & 1)[None, :]
        p = respawn[j]
        factor = np.where(before == 1, (after == 1).astype(float),
                          np.where(after == 1, p, 1.0 - p))
        R *= factor
    return R


def solve_optimal(level: Level, gamma: float = 0.99,
                  budget: int = DEFAULT_BUDGET) -> OptimalSolution:
    """Optimal expected discounted return from the start state.

    Exact expectation over termination and respawn draws; the policy is
    time-dependent (indexed by steps remaining).
    """
    comp = CompiledLevels([level])
    P = int(comp.num_positions[0])
    n = level.num_objects
    M = 1 << n
    T = level.max_steps
    if P * M * T > budget:
        raise SolverBudgetError(f"{P} positions x {M} masks x {T} steps exceeds budget {budget}")
    masks = np.arange(M)
    move = comp.move  # (P, A), offset 0
    k = comp.obj_at[move]  # (P, A)
    has = k >= 0
    kk = np.where(has, k, 0)
    present = ((masks[None, :, None] >> kk[:, None, :]) & 1) == 1  # (P, M, A)
    collected = has[:, None, :] & present
    reward = np.where(collected, comp.obj_reward[0, kk][:, None, :], 0.0)
    cont = 1.0 - np.where(collected, comp.obj_term[0, kk][:, None, :], 0.0)
    mask_after = np.where(collected, masks[None, :, None] & ~(1 << kk[:, None, :]),
                          masks[None, :, None])
    pnext = np.broadcast_to(move[:, None, :], (P, M, NUM_ACTIONS))
    R_T = respawn_matrix(n, comp.obj_respawn[0]).T
    V = np.zeros((P, M))
    policy = np.empty((T, P * M), dtype=np.int8)
    for steps_left in range(1, T + 1):
        EV = V @ R_T  # EV[p', m_after] = E[V(p', m') | m_after]
        Q = reward + gamma * cont * EV[pnext, mask_after]
        policy[steps_left - 1] = Q.argmax(axis=2).reshape(-1)
        V = Q.max(axis=2)
    start_local = int(comp.start[0])
    start_state = start_local * M + (M - 1)
    return OptimalSolution(float(V[start_local, M - 1]), policy, start_state)
