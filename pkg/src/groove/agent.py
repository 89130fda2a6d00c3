"""Student agents: softmax policy plus categorical bootstrap function.

Tabular agents keep one logit row per state id, so a batch of lifetimes is
just a taller table (see :class:`groove.gridworld.CompiledLevels`). The
learned update for tabular agents is written in closed form from
differentiable primitives, which keeps the new parameters on the tape when a
meta-gradient is being taken.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .gridworld import NUM_ACTIONS, TransitionBatch
from .optim import AdamConfig, AdamState, adam_step

DEFAULT_BOOTSTRAP_DIM = 16
DENSE_HIDDEN = (64, 64)


class AlignmentError(ValueError):
    pass


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class UpdateTargets:
    pi_hat: T.Tensor   # (T, B)
    y_hat: T.Tensor    # (T, B, n)


@dataclass
class TabularAgent:
    policy: T.Tensor | np.ndarray     # (S, A) logits
    bootstrap: T.Tensor | np.ndarray  # (S, n) logits

    @property
    def num_states(self) -> int:
        return self.policy.shape[0]

    @property
    def n(self) -> int:
        return self.bootstrap.shape[1]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return (T.as_tensor(self.policy).data, T.as_tensor(self.bootstrap).data)

    def detach(self) -> "TabularAgent":
        p, b = self.arrays()
        return TabularAgent(p.copy(), b.copy())

    def act_probs(self, states: np.ndarray) -> np.ndarray:
        return softmax_np(self.arrays()[0][states])

    def policy_probs(self) -> np.ndarray:
        return softmax_np(self.arrays()[0])

    def bootstrap_probs(self) -> np.ndarray:
        return softmax_np(self.arrays()[1])

    def logits(self, states: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
        return (T.gather_rows(T.as_tensor(self.policy), states),
                T.gather_rows(T.as_tensor(self.bootstrap), states))

    def slice(self, rows: slice) -> "TabularAgent":
        p, b = self.arrays()
        return TabularAgent(p[rows].copy(), b[rows].copy())

    @staticmethod
    def concat(agents: list["TabularAgent"]) -> "TabularAgent":
        return TabularAgent(np.concatenate([a.arrays()[0] for a in agents]),
                            np.concatenate([a.arrays()[1] for a in agents]))


@dataclass
class DenseAgent:
    """MLP on a one-hot state encoding, first hidden layer shared by both heads."""

    params: dict[str, np.ndarray]
    opt_state: AdamState = field(default_factory=AdamState)

    @property
    def num_states(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def n(self) -> int:
        return self.params["wy3"].shape[1]

    @property
    def hidden(self) -> tuple[int, int]:
        return (self.params["w1"].shape[1], self.params["wp2"].shape[1])

    def logits(self, states: np.ndarray, tensors: dict[str, T.Tensor] | None = None):
        p = tensors if tensors is not None else {k: T.Tensor(v) for k, v in self.params.items()}
        # one-hot @ w1 is a row gather
        h1 = T.relu(T.add(T.gather_rows(p["w1"], states), p["b1"]))
        hp = T.relu(T.add(T.matmul(h1, p["wp2"]), p["bp2"]))
        hy = T.relu(T.add(T.matmul(h1, p["wy2"]), p["by2"]))
        return (T.add(T.matmul(hp, p["wp3"]), p["bp3"]),
                T.add(T.matmul(hy, p["wy3"]), p["by3"]))

    def act_probs(self, states: np.ndarray) -> np.ndarray:
        with T.no_grad():
            pl, _ = self.logits(np.asarray(states))
        return softmax_np(pl.data)

    def policy_probs(self) -> np.ndarray:
        return self.act_probs(np.arange(self.num_states))

    def detach(self) -> "DenseAgent":
        return DenseAgent({k: v.copy() for k, v in self.params.items()}, self.opt_state.copy())


def _fan_in(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_agent(num_states: int, n: int = DEFAULT_BOOTSTRAP_DIM,
               rng: np.random.Generator | None = None, mode: str = "tabular"):
    """Fresh student parameters: zero tables, or a fan-in scaled D(64)-D(64) net."""
    if n < 2:
        raise ValueError("bootstrap dimension must be at least 2")
    if mode == "tabular":
        return TabularAgent(np.zeros((num_states, NUM_ACTIONS)), np.zeros((num_states, n)))
    if mode != "dense":
        raise ValueError(f"unknown agent mode {mode!r}")
    if rng is None:
        raise ValueError("dense init needs an rng")
    h1, h2 = DENSE_HIDDEN
    params = {
        "w1": _fan_in(rng, num_states, (num_states, h1)), "b1": _fan_in(rng, num_states, h1),
        "wp2": _fan_in(rng, h1, (h1, h2)), "bp2": _fan_in(rng, h1, h2),
        "wp3": _fan_in(rng, h2, (h2, NUM_ACTIONS)), "bp3": _fan_in(rng, h2, NUM_ACTIONS),
        "wy2": _fan_in(rng, h1, (h1, h2)), "by2": _fan_in(rng, h1, h2),
        "wy3": _fan_in(rng, h2, (h2, n)), "by3": _fan_in(rng, h2, n),
    }
    return DenseAgent(params)


def _check_aligned(batch: TransitionBatch, targets: UpdateTargets, n: int):
    if targets.pi_hat.shape != batch.states.shape:
        raise AlignmentError(f"pi_hat {targets.pi_hat.shape} vs batch {batch.states.shape}")
    if targets.y_hat.shape != batch.states.shape + (n,):
        raise AlignmentError(f"y_hat {targets.y_hat.shape} vs batch {batch.states.shape}+({n},)")


def surrogate(policy_logits: T.Tensor, boot_logits: T.Tensor, actions: np.ndarray,
              pi_hat, y_hat, alpha_y: float) -> T.Tensor:
    """Per-transition log pi(a|s) * pi_hat - alpha_y * KL(y || y_hat), shape (N,)."""
    logp = T.take_along(T.log_softmax(policy_logits), actions)
    kl = T.kl(T.softmax(boot_logits), y_hat)
    return T.sub(T.mul(logp, pi_hat), T.mul(kl, alpha_y))


def lpg_update(agent, batch: TransitionBatch, targets: UpdateTargets, alpha_y: float = 0.5,
               lr: float = 40.0, group_size: int | None = None,
               active: np.ndarray | None = None, dense_opt: AdamConfig | None = None):
    """Apply the learned update to ``agent``.

    Tabular: theta + lr * mean_t[grad log pi(a_t|s_t) pi_hat_t - alpha_y grad KL(y(s_t) || y_hat_t)],
    where the mean runs over each lifetime's own ``group_size`` transitions
    (default: the whole batch). ``active`` (B,) zeroes columns whose lifetime
    has ended. Dependence on the agent and the targets stays on the tape.

    Dense: the same surrogate is differentiated on an inner tape with the
    targets held fixed, followed by an Adam ascent step.
    """
    _check_aligned(batch, targets, agent.n)
    states = batch.states.reshape(-1)
    actions = batch.actions.reshape(-1)
    pi_hat = T.reshape(targets.pi_hat, (-1,))
    y_hat = T.reshape(targets.y_hat, (-1, agent.n))
    if isinstance(agent, DenseAgent):
        return _dense_update(agent, states, actions, pi_hat.data, y_hat.data, alpha_y,
                             dense_opt or AdamConfig(lr=5e-4), active, batch.states.shape)
    scale = lr / float(group_size or batch.size)
    if active is not None:
        col = np.broadcast_to(np.asarray(active, float)[None, :], batch.states.shape).reshape(-1)
        pi_hat = T.mul(pi_hat, col)
        weight = col[:, None]
    else:
        weight = None
    pol_logits, boot_logits = agent.logits(states)
    probs = T.softmax(pol_logits)
    onehot = np.eye(NUM_ACTIONS)[actions]
    d_policy = T.mul(T.sub(onehot, probs), T.reshape(pi_hat, (-1, 1)))
    # d/dz KL(softmax(z) || q) = y * (log y - log q - KL)
    y = T.softmax(boot_logits)
    log_ratio = T.sub(T.log(y, floor=T.PROB_FLOOR), T.log(y_hat, floor=T.PROB_FLOOR))
    kl = T.sum(T.mul(y, log_ratio), axis=1, keepdims=True)
    d_boot = T.mul(T.mul(y, T.sub(log_ratio, kl)), -alpha_y)
    if weight is not None:
        d_boot = T.mul(d_boot, weight)
    return TabularAgent(T.index_add(T.as_tensor(agent.policy), states, d_policy, scale),
                        T.index_add(T.as_tensor(agent.bootstrap), states, d_boot, scale))


def _dense_update(agent: DenseAgent, states, actions, pi_hat, y_hat, alpha_y, opt, active,
                  shape):
    tensors = {k: T.Tensor(v, requires_grad=True) for k, v in agent.params.items()}
    weight = None
    if active is not None:
        weight = np.broadcast_to(np.asarray(active, float)[None, :], shape).reshape(-1)
    with T.Tape() as tape:
        pl, bl = agent.logits(states, tensors)
        per = surrogate(pl, bl, actions, pi_hat, y_hat, alpha_y)
        if weight is not None:
            per = T.mul(per, weight)
        loss = T.mul(T.mean(per), -1.0)  # ascend the surrogate
    grads = T.backward(tape, loss)
    g = {k: grads[t] for k, t in tensors.items()}
    new, state = adam_step(agent.params, g, agent.opt_state, opt)
    return DenseAgent(new, state)
