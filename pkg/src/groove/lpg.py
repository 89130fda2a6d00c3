"""The learned policy optimizer: target network, inner loop and meta-gradient.

A batch of lifetimes is advanced in lockstep. All tabular agents of the
batch live in one tall table (rows laid out by ``CompiledLevels``), so one
tape per meta-gradient window covers every lifetime at once.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .agent import (
    DEFAULT_BOOTSTRAP_DIM,
    DenseAgent,
    TabularAgent,
    UpdateTargets,
    init_agent,
    lpg_update,
)
from .gridworld import CompiledLevels, EnvState, Level, TransitionBatch, reset_state, run_rollout
from .gridworld.env import draw_uniforms
from .optim import AdamConfig, AdamState, adam_step, clip_by_global_norm

GAMMA = 0.99


@dataclass
class AgentConfig:
    n: int = DEFAULT_BOOTSTRAP_DIM
    lr: float = 40.0
    alpha_y: float = 0.5
    rollout_len: int = 20
    num_envs: int = 64
    mode: str = "tabular"
    dense_lr: float = 5e-4


@dataclass
class MetaObjectiveConfig:
    policy_entropy: float = 0.05      # beta0
    bootstrap_entropy: float = 0.001  # beta1
    pi_hat_l2: float = 0.005          # beta2
    y_hat_l2: float = 0.001           # beta3
    lr: float = 1e-4
    updates_per_meta: int = 5         # K
    grad_clip: float | None = 0.5
    gamma: float = GAMMA
    return_baseline: bool = False

    def __post_init__(self):
        coeffs = (self.policy_entropy, self.bootstrap_entropy, self.pi_hat_l2, self.y_hat_l2)
        if min(coeffs) < 0:
            raise ValueError("meta-objective coefficients must be non-negative")
        if self.updates_per_meta < 1:
            raise ValueError("updates_per_meta (K) must be >= 1")


# ------------------------------------------------------------------ parameters


class OptimizerParams:
    """Weights of the target network: embedding, reverse LSTM, two output heads."""

    KEYS = ("embed_w", "embed_b", "lstm_wx", "lstm_wh", "lstm_b", "pi_w", "pi_b", "y_w", "y_b")

    def __init__(self, tensors: dict[str, T.Tensor]):
        missing = set(self.KEYS) - set(tensors)
        if missing:
            raise KeyError(f"missing optimizer weights: {sorted(missing)}")
        self.tensors = {k: T.as_tensor(tensors[k]) for k in self.KEYS}
        h = self.hidden
        if self.tensors["pi_w"].shape != (h, 1) or self.tensors["y_w"].shape[0] != h:
            raise T.ShapeError("output heads inconsistent with hidden size")
        if self.tensors["y_b"].shape != (self.n,):
            raise T.ShapeError("y head bias inconsistent with n")
        if self.tensors["embed_w"].shape[0] != input_width(self.n):
            raise T.ShapeError(f"embedding expects width {input_width(self.n)}")

    @property
    def n(self) -> int:
        return self.tensors["y_w"].shape[1]

    @property
    def hidden(self) -> int:
        return self.tensors["lstm_wh"].shape[0]

    @property
    def embed(self) -> int:
        return self.tensors["embed_w"].shape[1]

    @property
    def lstm(self) -> T.LstmCellParams:
        t = self.tensors
        return T.LstmCellParams(t["lstm_wx"], t["lstm_wh"], t["lstm_b"])

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], requires_grad: bool = False):
        return cls({k: T.Tensor(np.array(arrays[k], dtype=np.float64), requires_grad)
                    for k in cls.KEYS})

    def leaves(self) -> "OptimizerParams":
        """Copy whose tensors are differentiable leaves."""
        return OptimizerParams.from_arrays(self.arrays(), requires_grad=True)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in self.KEYS:
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k].data).tobytes())
        return h.hexdigest()

    @classmethod
    def init(cls, n: int = DEFAULT_BOOTSTRAP_DIM, hidden: int = 32, embed: int = 32,
             rng: np.random.Generator | None = None) -> "OptimizerParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        w = input_width(n)
        lstm = T.LstmCellParams.init(embed, hidden, rng)
        a = 1.0 / np.sqrt(w)
        return cls({
            "embed_w": T.Tensor(rng.uniform(-a, a, (w, embed))),
            "embed_b": T.Tensor(np.zeros(embed)),
            "lstm_wx": lstm.w_input, "lstm_wh": lstm.w_recurrent, "lstm_b": lstm.bias,
            "pi_w": T.Tensor(rng.uniform(-1, 1, (hidden, 1)) / np.sqrt(hidden)),
            "pi_b": T.Tensor(np.zeros(1)),
            "y_w": T.Tensor(rng.uniform(-1, 1, (hidden, n)) / np.sqrt(hidden)),
            "y_b": T.Tensor(np.zeros(n)),
        })

    @classmethod
    def zeros(cls, n: int = DEFAULT_BOOTSTRAP_DIM, hidden: int = 32, embed: int = 32):
        w = input_width(n)
        shapes = {"embed_w": (w, embed), "embed_b": (embed,), "lstm_wx": (embed, 4 * hidden),
                  "lstm_wh": (hidden, 4 * hidden), "lstm_b": (4 * hidden,),
                  "pi_w": (hidden, 1), "pi_b": (1,), "y_w": (hidden, n), "y_b": (n,)}
        return cls({k: T.Tensor(np.zeros(s)) for k, s in shapes.items()})


def input_width(n: int) -> int:
    return 3 + 1 + 2 * n


# ------------------------------------------------------------- target network


def build_inputs(batch: TransitionBatch, agent, gamma: float = GAMMA) -> T.Tensor:
    """x_t = [r_t, d_t, gamma, pi(a_t|s_t), y(s_t), y(s_{t+1})], shape (T, B, 4 + 2n)."""
    Tn, B = batch.states.shape
    n = agent.n
    s = batch.states.reshape(-1)
    s_next = batch.next_states.reshape(-1)
    pol, boot = agent.logits(s)
    _, boot_next = agent.logits(s_next)
    pa = T.take_along(T.softmax(pol), batch.actions.reshape(-1))
    const = np.stack([batch.rewards.reshape(-1), batch.dones.reshape(-1).astype(float),
                      np.full(Tn * B, gamma)], axis=1)
    x = T.concat([const, T.reshape(pa, (-1, 1)), T.softmax(boot), T.softmax(boot_next)], axis=1)
    return T.reshape(x, (Tn, B, input_width(n)))


def compute_targets(eta: OptimizerParams, xs: T.Tensor, dones: np.ndarray) -> UpdateTargets:
    """Reverse-LSTM targets; the state is reset wherever an episode ended."""
    xs = T.as_tensor(xs)
    Tn, B, W = xs.shape
    t = eta.tensors
    e = T.tanh(T.add(T.matmul(T.reshape(xs, (Tn * B, W)), t["embed_w"]), t["embed_b"]))
    H = T.lstm_reverse_sequence(eta.lstm, T.reshape(e, (Tn, B, eta.embed)), resets=dones)
    Hf = T.reshape(H, (Tn * B, eta.hidden))
    pi_hat = T.add(T.matmul(Hf, t["pi_w"]), t["pi_b"])
    y_hat = T.softmax(T.add(T.matmul(Hf, t["y_w"]), t["y_b"]))
    return UpdateTargets(T.reshape(pi_hat, (Tn, B)), T.reshape(y_hat, (Tn, B, eta.n)))


# ------------------------------------------------------------------- workers


@dataclass
class Workers:
    """A lockstep batch of lifetimes: env rows ``[l*E, (l+1)*E)`` belong to lifetime l."""

    levels: CompiledLevels
    env: EnvState
    agent: TabularAgent | DenseAgent
    rngs: list[np.random.Generator]
    envs_per_lifetime: int
    updates_left: np.ndarray

    @property
    def num_lifetimes(self) -> int:
        return self.levels.num_levels

    @classmethod
    def start(cls, levels: Sequence[Level], rngs: Sequence[np.random.Generator],
              agent_cfg: AgentConfig, agents: Sequence | None = None) -> "Workers":
        comp = CompiledLevels(levels)
        E = agent_cfg.num_envs
        env = reset_state(comp, np.repeat(np.arange(len(levels)), E))
        if agents is None:
            if agent_cfg.mode == "dense":
                if len(levels) != 1:
                    raise ValueError("dense agents run one lifetime per worker batch")
                agent = init_agent(int(comp.total_states), agent_cfg.n, rngs[0], "dense")
            else:
                agent = init_agent(int(comp.total_states), agent_cfg.n, mode="tabular")
        elif len(agents) == 1 and isinstance(agents[0], DenseAgent):
            agent = agents[0]
        else:
            agent = TabularAgent.concat(list(agents))
        updates = np.array([lv.lifetime // agent_cfg.rollout_len for lv in levels], np.int64)
        return cls(comp, env, agent, list(rngs), E, np.maximum(updates, 1))

    def _env_rows(self, l: int) -> slice:
        E = self.envs_per_lifetime
        return slice(l * E, (l + 1) * E)

    def rebuild(self, sources: Sequence[int | None], levels: Sequence[Level],
                rngs: Sequence[np.random.Generator], updates: np.ndarray) -> "Workers":
        """New batch whose slot j continues old lifetime ``sources[j]`` or starts fresh (None)."""
        if not isinstance(self.agent, TabularAgent):
            raise TypeError("only tabular worker batches can be rebuilt")
        comp = CompiledLevels(levels)
        E = self.envs_per_lifetime
        fresh_env = reset_state(comp, np.repeat(np.arange(len(levels)), E))
        pol, boot = self.agent.arrays()
        old_slices = self.levels.level_slices()
        new_pol, new_boot = [], []
        for j, (src, sl) in enumerate(zip(sources, comp.level_slices())):
            size = sl.stop - sl.start
            if src is None:
                new_pol.append(np.zeros((size, pol.shape[1])))
                new_boot.append(np.zeros((size, boot.shape[1])))
                continue
            new_pol.append(pol[old_slices[src]].copy())
            new_boot.append(boot[old_slices[src]].copy())
            rows, dst = self._env_rows(src), slice(j * E, (j + 1) * E)
            shift = comp.pos_offset[j] - self.levels.pos_offset[src]
            fresh_env.pos[dst] = self.env.pos[rows] + shift
            fresh_env.mask[dst] = self.env.mask[rows]
            fresh_env.t[dst] = self.env.t[rows]
            fresh_env.done[dst] = self.env.done[rows]
        agent = TabularAgent(np.concatenate(new_pol), np.concatenate(new_boot))
        return Workers(comp, fresh_env, agent, list(rngs), E, np.asarray(updates, np.int64).copy())

    def subset(self, idx: Sequence[int]) -> "Workers":
        idx = list(idx)
        return self.rebuild(idx, [self.levels.levels[i] for i in idx],
                            [self.rngs[i] for i in idx], self.updates_left[idx])

    def active_columns(self, k: int) -> np.ndarray:
        return np.repeat(self.updates_left > k, self.envs_per_lifetime).astype(float)

    def split_agents(self) -> list[TabularAgent]:
        return [self.agent.slice(s) for s in self.levels.level_slices()]


RolloutSource = Callable[[int, Callable, EnvState], tuple[TransitionBatch, EnvState]]


def env_rollouts(workers: Workers, rollout_len: int) -> RolloutSource:
    L, E = workers.num_lifetimes, workers.envs_per_lifetime

    def source(k, policy, env):
        u = draw_uniforms(workers.rngs, [E] * L, rollout_len)
        return run_rollout(workers.levels, env, policy, rollout_len, u)

    return source


def frozen_rollouts(recorded: Sequence[TransitionBatch]) -> RolloutSource:
    """Replay fixed recordings; index ``k`` = update number, last = validation."""

    def source(k, policy, env):
        return recorded[k], env

    return source


def _agent_policy(agent):
    return lambda s, t, lvl: agent.act_probs(s)


def discounted_returns(rewards: np.ndarray, dones: np.ndarray, gamma: float) -> np.ndarray:
    """Return-to-go within a rollout; zero bootstrap at the window boundary."""
    G = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1])
    for t in range(rewards.shape[0] - 1, -1, -1):
        running = rewards[t] + gamma * (1.0 - dones[t]) * running
        G[t] = running
    return G


# --------------------------------------------------------------- meta-gradient


@dataclass
class MetaGradient:
    grads: dict[str, np.ndarray]
    agent: TabularAgent
    env: EnvState
    updates: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _outer_loss(eta, agent_k, val: TransitionBatch, targets: list[UpdateTargets],
                cfg: MetaObjectiveConfig):
    s = val.states.reshape(-1)
    G = discounted_returns(val.rewards, val.dones.astype(float), cfg.gamma)
    if cfg.return_baseline:
        G = G - G.mean()
    pol, boot = agent_k.logits(s)
    logp = T.take_along(T.log_softmax(pol), val.actions.reshape(-1))
    pg = T.mul(T.mean(T.mul(logp, G.reshape(-1))), -1.0)
    h_pi = T.mean(T.entropy(T.softmax(pol)))
    h_y = T.mean(T.entropy(T.softmax(boot)))
    K = len(targets)
    reg_pi = T.mul(T.sum(T.stack([T.mean(T.square(tg.pi_hat)) for tg in targets])), 1.0 / K)
    reg_y = T.mul(T.sum(T.stack([T.mean(T.square(tg.y_hat)) for tg in targets])), 1.0 / K)
    loss = T.add(T.add(T.sub(T.sub(pg, T.mul(h_pi, cfg.policy_entropy)),
                             T.mul(h_y, cfg.bootstrap_entropy)),
                       T.mul(reg_pi, cfg.pi_hat_l2)),
                 T.mul(reg_y, cfg.y_hat_l2))
    diag = {"outer_loss": loss.item(), "pg_loss": pg.item(), "policy_entropy": h_pi.item(),
            "bootstrap_entropy": h_y.item(), "pi_hat_sq": reg_pi.item(),
            "y_hat_sq": reg_y.item(), "val_reward_per_step": float(val.rewards.mean())}
    return loss, diag


def meta_gradient_batch(eta: OptimizerParams, workers: Workers, cfg: MetaObjectiveConfig,
                        agent_cfg: AgentConfig, source: RolloutSource | None = None,
                        num_updates: int | None = None) -> MetaGradient:
    """K chained {rollout, targets, update} steps on one tape, then the outer loss.

    Returns d(outer loss)/d(eta), the detached final agent and the advanced
    env state. ``workers`` is not mutated apart from its RNG streams.
    """
    if not isinstance(workers.agent, TabularAgent):
        raise TypeError("meta-gradients are defined for tabular agents only")
    K = cfg.updates_per_meta if num_updates is None else num_updates
    source = source or env_rollouts(workers, agent_cfg.rollout_len)
    leaves = eta.leaves()
    group = workers.envs_per_lifetime * agent_cfg.rollout_len
    env = workers.env
    with T.Tape() as tape:
        agent = TabularAgent(T.Tensor(workers.agent.policy), T.Tensor(workers.agent.bootstrap))
        targets_all = []
        rewards = []
        for k in range(K):
            batch, env = source(k, _agent_policy(agent), env)
            xs = build_inputs(batch, agent, cfg.gamma)
            targets = compute_targets(leaves, xs, batch.dones)
            targets_all.append(targets)
            rewards.append(float(batch.rewards.mean()))
            agent = lpg_update(agent, batch, targets, agent_cfg.alpha_y, agent_cfg.lr,
                               group_size=group, active=workers.active_columns(k))
        val, _ = source(K, _agent_policy(agent), env.copy())
        loss, diag = _outer_loss(leaves, agent, val, targets_all, cfg)
    grads = T.backward(tape, loss)
    out = {k: grads[t].copy() for k, t in leaves.tensors.items()}
    diag["train_reward_per_step"] = float(np.mean(rewards))
    diag["pi_hat_mean"] = float(np.mean([tg.pi_hat.data.mean() for tg in targets_all]))
    updates = np.minimum(workers.updates_left, K)
    return MetaGradient(out, agent.detach(), env, updates, diag)


def meta_gradient(eta: OptimizerParams, theta: TabularAgent, level: Level, K: int,
                  cfg: MetaObjectiveConfig, rng: np.random.Generator,
                  agent_cfg: AgentConfig | None = None, env: EnvState | None = None):
    """Single-lifetime form: returns (gradient of eta, detached theta_K, diagnostics)."""
    agent_cfg = agent_cfg or AgentConfig()
    workers = Workers.start([level], [rng], agent_cfg, agents=[theta])
    workers.updates_left[:] = K
    if env is not None:
        workers.env = env
    res = meta_gradient_batch(eta, workers, cfg, agent_cfg, num_updates=K)
    res.diagnostics["env"] = res.env
    return res.grads, res.agent, res.diagnostics


def outer_update(eta: OptimizerParams, grads: dict[str, np.ndarray], state: AdamState,
                 cfg: MetaObjectiveConfig):
    """One clipped Adam step on eta; returns (new eta, new state, pre-clip norm)."""
    clipped, norm = clip_by_global_norm(grads, cfg.grad_clip)
    new, state = adam_step(eta.arrays(), clipped, state, AdamConfig(lr=cfg.lr))
    return OptimizerParams.from_arrays(new), state, norm


# ---------------------------------------------------------------- inner loop


def inner_updates(eta: OptimizerParams, workers: Workers, num_updates: int,
                  agent_cfg: AgentConfig, gamma: float = GAMMA):
    """Advance every lifetime by ``num_updates`` learned updates, no meta-gradient.

    Lifetimes whose ``updates_left`` is exhausted are frozen. Returns the new
    agent and env state.
    """
    source = env_rollouts(workers, agent_cfg.rollout_len)
    group = workers.envs_per_lifetime * agent_cfg.rollout_len
    agent, env = workers.agent, workers.env
    dense_opt = AdamConfig(lr=agent_cfg.dense_lr)
    with T.no_grad():
        for k in range(num_updates):
            active = workers.active_columns(k)
            if not active.any():
                break
            batch, env = source(k, _agent_policy(agent), env)
            xs = build_inputs(batch, agent, gamma)
            targets = compute_targets(eta, xs, batch.dones)
            agent = lpg_update(agent, batch, targets, agent_cfg.alpha_y, agent_cfg.lr,
                               group_size=group, active=active, dense_opt=dense_opt)
            if isinstance(agent, TabularAgent):
                agent = agent.detach()
    return agent, env


def train_lifetimes(eta: OptimizerParams, levels: Sequence[Level],
                    rngs: Sequence[np.random.Generator], agent_cfg: AgentConfig,
                    chunk: int = 25):
    """Train fresh agents on ``levels`` for their full lifetimes; returns final agents."""
    workers = Workers.start(levels, rngs, agent_cfg)
    total = int(workers.updates_left.max())
    done = 0
    while done < total:
        n = min(chunk, total - done)
        workers.agent, workers.env = inner_updates(eta, workers, n, agent_cfg)
        workers.updates_left = np.maximum(workers.updates_left - n, 0)
        done += n
    if isinstance(workers.agent, DenseAgent):
        return [workers.agent]
    return workers.split_agents()
