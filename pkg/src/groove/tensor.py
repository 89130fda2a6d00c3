"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one input requires a gradient. :func:`backward` walks a tape in
reverse and returns a :class:`Gradients` map keyed by tensor identity.

Tapes compose: a tensor produced on one tape may be an input on another, and
``backward(tape_a, y, grad_output=g)`` continues the chain rule with the
cotangent ``g`` obtained from a later tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of primitive operations.

    Use as a context manager; nested tapes record on the innermost one only.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


class no_grad:
    """Suspend recording (a null tape sits on top of the stack)."""

    def __enter__(self):
        Tape._stack.append(_NullTape())
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()


class _NullTape(Tape):
    def record(self, node: Node) -> None:
        pass


class Gradients:
    """Gradient map: ``grads[t]`` is d(loss)/d(t), zero when ``t`` is unreachable."""

    def __init__(self, grads: dict[int, np.ndarray], refs: dict[int, Tensor]):
        self._grads = grads
        self._refs = refs

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._refs.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads and self._refs.get(id(t)) is t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite output from {op}")


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    _check_finite(op, out)
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.record(Node(op, inputs, result, bwd))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def backward(tape: Tape, loss: Tensor, grad_output=None) -> Gradients:
    """Reverse pass over ``tape`` seeded at ``loss``.

    ``loss`` must be scalar unless ``grad_output`` supplies a cotangent of the
    same shape (used to chain tapes).
    """
    if grad_output is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(grad_output, dtype=np.float64)
        if seed.shape != loss.shape:
            raise ShapeError(f"grad_output shape {seed.shape} != {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): seed}
    refs: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                refs[key] = t
    return Gradients(grads, refs)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    x = as_tensor(x)
    if floor is None:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x.data)
        return _make("log", out, (x,), lambda g: (g / x.data,))
    clamped = np.maximum(x.data, floor)
    live = x.data >= floor
    return _make("log", np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ----------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(out), (x,), bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# ------------------------------------------------------------------- shaping


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make("concat", out, xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from exc
    return _make("stack", out, xs,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))))


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    basic = not any(isinstance(k, (np.ndarray, list)) for k in
                    (key if isinstance(key, tuple) else (key,)))

    def bwd(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make("getitem", np.array(out), (x,), bwd)


def gather_rows(table, idx) -> Tensor:
    """``table[idx]`` for an integer index array (rows may repeat)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("gather_rows", table.data[idx], (table,), bwd)


def take_along(x, idx) -> Tensor:
    """Row-wise pick: ``out[i] = x[i, idx[i]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"take_along: x {x.shape}, idx {idx.shape}")

    def bwd(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        return (full,)

    return _make("take_along", x.data[rows, idx], (x,), bwd)


def index_add(base, idx, src, scale: float = 1.0) -> Tensor:
    """``base`` with ``scale * src[i]`` added to row ``idx[i]`` (duplicates accumulate)."""
    base, src = as_tensor(base), as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    if src.shape[0] != idx.shape[0] or src.shape[1:] != base.shape[1:]:
        raise ShapeError(f"index_add: base {base.shape}, idx {idx.shape}, src {src.shape}")
    out = base.data.copy()
    np.add.at(out, idx, scale * src.data)
    return _make("index_add", out, (base, src), lambda g: (g, scale * g[idx]))


# -------------------------------------------------------------- distributions


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    p = _softmax(x.data)
    return _make("softmax", p, (x,),
                 lambda g: (p * (g - np.sum(g * p, axis=-1, keepdims=True)),))


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make("log_softmax", out, (x,),
                 lambda g: (g - p * np.sum(g, axis=-1, keepdims=True),))


def kl(p, q) -> Tensor:
    """Row-wise KL(p || q) over the last axis, probabilities floored at 1e-12."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl: shapes {p.shape} and {q.shape}")
    pc = np.maximum(p.data, PROB_FLOOR)
    qc = np.maximum(q.data, PROB_FLOOR)
    lp, lq = np.log(pc), np.log(qc)
    out = np.sum(p.data * (lp - lq), axis=-1)

    def bwd(g):
        g = g[..., None]
        dp = g * (lp - lq + np.where(p.data >= PROB_FLOOR, 1.0, 0.0))
        dq = np.where(q.data >= PROB_FLOOR, -g * p.data / qc, 0.0)
        return dp, dq

    return _make("kl", out, (p, q), bwd)


def entropy(p) -> Tensor:
    """Row-wise entropy over the last axis, probabilities floored at 1e-12."""
    p = as_tensor(p)
    lp = np.log(np.maximum(p.data, PROB_FLOOR))
    out = -np.sum(p.data * lp, axis=-1)

    def bwd(g):
        live = np.where(p.data >= PROB_FLOOR, 1.0, 0.0)
        return (-g[..., None] * (lp + live),)

    return _make("entropy", out, (p,), bwd)


# --------------------------------------------------------------------- LSTM


@dataclass
class LstmCellParams:
    """Gate layout along the last axis: input, forget, cell, output."""

    w_input: Tensor
    w_recurrent: Tensor
    bias: Tensor

    def __post_init__(self):
        h = self.hidden_size
        if self.w_input.ndim != 2 or self.w_input.shape[1] != 4 * h:
            raise ShapeError(f"w_input shape {self.w_input.shape} for hidden size {h}")
        if self.bias.shape != (4 * h,):
            raise ShapeError(f"bias shape {self.bias.shape} for hidden size {h}")

    @property
    def hidden_size(self) -> int:
        return self.w_recurrent.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_input.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.w_input, self.w_recurrent, self.bias]

    @classmethod
    def init(cls, input_size: int, hidden: int, rng: np.random.Generator,
             requires_grad: bool = True) -> "LstmCellParams":
        scale = 1.0 / np.sqrt(hidden)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        return cls(
            Tensor(rng.uniform(-scale, scale, (input_size, 4 * hidden)), requires_grad),
            Tensor(rng.uniform(-scale, scale, (hidden, 4 * hidden)), requires_grad),
            Tensor(bias, requires_grad),
        )


def lstm_cell(x, state, params: LstmCellParams) -> Tensor:
    """One fused LSTM step. ``state`` packs ``[h, c]`` as (B, 2h); so does the result."""
    x, state = as_tensor(x), as_tensor(state)
    wx, wh, b = params.w_input, params.w_recurrent, params.bias
    hs = params.hidden_size
    if x.ndim != 2 or x.shape[1] != params.input_size:
        raise ShapeError(f"lstm_cell: input {x.shape}, expected (B, {params.input_size})")
    if state.shape != (x.shape[0], 2 * hs):
        raise ShapeError(f"lstm_cell: state {state.shape}, expected ({x.shape[0]}, {2 * hs})")
    h, c = state.data[:, :hs], state.data[:, hs:]
    z = x.data @ wx.data + h @ wh.data + b.data
    i = _sigmoid(z[:, :hs])
    f = _sigmoid(z[:, hs:2 * hs])
    gg = np.tanh(z[:, 2 * hs:3 * hs])
    o = _sigmoid(z[:, 3 * hs:])
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    def bwd(g):
        dh, dc = g[:, :hs], g[:, hs:]
        dct = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dct * gg * i * (1.0 - i),
            dct * c * f * (1.0 - f),
            dct * i * (1.0 - gg * gg),
            dh * tc * o * (1.0 - o),
        ], axis=1)
        dstate = np.concatenate([dz @ wh.data.T, dct * f], axis=1)
        return dz @ wx.data.T, dstate, x.data.T @ dz, h.T @ dz, dz.sum(axis=0)

    return _make("lstm_cell", np.concatenate([h_new, c_new], axis=1),
                 (x, state, wx, wh, b), bwd)


def lstm_scan_reverse(params: LstmCellParams, inputs: Sequence, resets=None) -> list[Tensor]:
    """Run the cell from the last input to the first.

    ``outputs[t]`` depends only on ``inputs[t:]``. ``resets[t]`` (shape (B,),
    1 where an episode ended at step t) zeroes the state carried in from t+1.
    """
    if len(inputs) == 0:
        raise ValueError("lstm_scan_reverse needs a nonempty sequence")
    xs = [as_tensor(x) for x in inputs]
    squeeze = xs[0].ndim == 1
    if squeeze:
        xs = [reshape(x, (1, -1)) for x in xs]
    width = xs[0].shape[1]
    if any(x.shape != xs[0].shape for x in xs):
        raise ShapeError(f"lstm_scan_reverse: inconsistent input width, expected {width}")
    hs = params.hidden_size
    state: Tensor = Tensor(np.zeros((xs[0].shape[0], 2 * hs)))
    outputs: list[Tensor] = [None] * len(xs)  # type: ignore[list-item]
    for t in range(len(xs) - 1, -1, -1):
        if resets is not None and t < len(xs) - 1:
            keep = 1.0 - np.asarray(resets[t], dtype=np.float64)
            if np.any(keep != 1.0):
                state = mul(state, keep[:, None])
        state = lstm_cell(xs[t], state, params)
        h = state[:, :hs]
        outputs[t] = reshape(h, (hs,)) if squeeze else h
    return outputs


def lstm_reverse_sequence(params: LstmCellParams, xs, resets=None) -> Tensor:
    """Fused reverse scan over a (T, B, in) tensor; returns hidden states (T, B, h).

    Same semantics as :func:`lstm_scan_reverse` with the whole backward
    pass through time done inside a single tape node.
    """
    xs = as_tensor(xs)
    if xs.ndim != 3 or xs.shape[0] == 0:
        raise ShapeError(f"lstm_reverse_sequence: expected nonempty (T, B, in), got {xs.shape}")
    Tn, B, width = xs.shape
    if width != params.input_size:
        raise ShapeError(f"lstm_reverse_sequence: input width {width} != {params.input_size}")
    wx, wh, b = params.w_input, params.w_recurrent, params.bias
    hs = params.hidden_size
    keep = np.ones((Tn, B))
    if resets is not None:
        keep = 1.0 - np.asarray(resets, dtype=np.float64).reshape(Tn, B)
    keep[Tn - 1] = 0.0  # nothing is carried in past the window end
    xproj = (xs.data.reshape(Tn * B, width) @ wx.data).reshape(Tn, B, 4 * hs) + b.data
    H = np.empty((Tn, B, hs))
    C = np.empty((Tn, B, hs))
    gates = np.empty((Tn, B, 4 * hs))
    h_in = np.empty((Tn, B, hs))
    c_in = np.empty((Tn, B, hs))
    h = np.zeros((B, hs))
    c = np.zeros((B, hs))
    for t in range(Tn - 1, -1, -1):
        h = h * keep[t][:, None]
        c = c * keep[t][:, None]
        h_in[t], c_in[t] = h, c
        z = xproj[t] + h @ wh.data
        g = np.concatenate([_sigmoid(z[:, :2 * hs]), np.tanh(z[:, 2 * hs:3 * hs]),
                            _sigmoid(z[:, 3 * hs:])], axis=1)
        gates[t] = g
        c = g[:, hs:2 * hs] * c + g[:, :hs] * g[:, 2 * hs:3 * hs]
        h = g[:, 3 * hs:] * np.tanh(c)
        H[t], C[t] = h, c

    def bwd(gH):
        dz_all = np.empty((Tn, B, 4 * hs))
        dh_next = np.zeros((B, hs))
        dc_next = np.zeros((B, hs))
        for t in range(Tn):
            i, f = gates[t, :, :hs], gates[t, :, hs:2 * hs]
            gg, o = gates[t, :, 2 * hs:3 * hs], gates[t, :, 3 * hs:]
            tc = np.tanh(C[t])
            dh = gH[t] + dh_next
            dct = dc_next + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dct * gg * i * (1.0 - i),
                dct * c_in[t] * f * (1.0 - f),
                dct * i * (1.0 - gg * gg),
                dh * tc * o * (1.0 - o),
            ], axis=1)
            dz_all[t] = dz
            # state fed into step t came from step t+1, scaled by keep[t]
            dh_next = (dz @ wh.data.T) * keep[t][:, None]
            dc_next = dct * f * keep[t][:, None]
        dz_flat = dz_all.reshape(Tn * B, 4 * hs)
        dx = (dz_flat @ wx.data.T).reshape(Tn, B, width)
        dwx = xs.data.reshape(Tn * B, width).T @ dz_flat
        dwh = h_in.reshape(Tn * B, hs).T @ dz_flat
        return dx, dwx, dwh, dz_flat.sum(axis=0)

    return _make("lstm_reverse_sequence", H, (xs, wx, wh, b), bwd)


def parameters_to_vector(tensors: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate([t.data.ravel() for t in tensors])
