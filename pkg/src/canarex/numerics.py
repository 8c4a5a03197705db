"""Reverse-mode tensor autodiff kernel.

A minimal Wengert-list tape over float64 numpy arrays, supplying exactly the
operations the sequence model and the extraction attack need, plus the Adam
optimizer and a finite-difference gradient oracle.  Not a general autodiff
framework: ops are 1-D/2-D only, and a few composites (LSTM cell, linear-chain
scoring steps) are fused single tape entries with analytic adjoints so that a
full forward/backward pass stays cheap at desk scale.

Gradients flow to whatever leads to the loss; a tape's ``watch`` registry only
selects which gradients are exposed afterwards.  Watched tensors that do not
reach the loss get exactly-zero gradients.  Tensors are immutable values:
optimizer steps return fresh tensors and fresh state.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractViolationError,
    InvalidInputError,
    InvalidTemperatureError,
)

__all__ = [
    "Tensor",
    "GradTape",
    "AdamState",
    "tensor",
    "zeros",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sum_all",
    "matmul",
    "gather_rows",
    "row",
    "index1d",
    "slice1d",
    "concat1d",
    "stack_rows",
    "reshape",
    "max_over_rows",
    "pad_rows",
    "unfold_rows",
    "softmax_with_temperature",
    "log_sum_exp",
    "lstm_step",
    "lstm_sequence",
    "concat_cols",
    "chain_start",
    "chain_step",
    "chain_final",
    "chain_gold_score",
    "adam_init",
    "adam_step",
    "gradient_check",
    "GradCheckReport",
]


class Tensor:
    """Dense float64 array with shape; a value node in the tape graph."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    # Convenience arithmetic; mirrors the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


_TAPES = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = []
        _TAPES.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Records operations in execution order; replays them in reverse.

    Usage::

        with GradTape() as tape:
            tape.watch(w, "w")
            loss = f(w)
        tape.backward(loss)
        g = tape.grad(w)
    """

    def __init__(self):
        self._entries: list = []  # (outputs, parents, backward_fn)
        self._watched: dict[int, Tensor] = {}
        self._names: dict[int, str] = {}
        self._grads: dict[int, np.ndarray] | None = None

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractViolationError("tape exited out of order")
        stack.pop()

    def watch(self, t: Tensor, name: str | None = None) -> None:
        self._watched[id(t)] = t
        if name is not None:
            self._names[id(t)] = name

    @property
    def watched(self) -> list[Tensor]:
        return list(self._watched.values())

    def watched_ids(self) -> set[int]:
        return set(self._watched.keys())

    def _record(self, outputs, parents, backward) -> None:
        self._entries.append((outputs, parents, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != ():
            raise ContractViolationError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {id(loss): np.float64(1.0)}
        for outputs, parents, backward in reversed(self._entries):
            out_grads = [grads.get(id(o)) for o in outputs]
            if all(g is None for g in out_grads):
                continue
            parent_grads = backward(*out_grads)
            for p, pg in zip(parents, parent_grads):
                if pg is None:
                    continue
                pid = id(p)
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. ``t`` (zeros if off-path)."""
        if self._grads is None:
            raise ContractViolationError("backward() has not been run on this tape")
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        if np.shape(g) == t.data.shape:
            return np.asarray(g)
        return np.broadcast_to(g, t.data.shape).astype(np.float64, copy=False)

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradients of all watched-and-named tensors."""
        out = {}
        for tid, t in self._watched.items():
            name = self._names.get(tid, f"tensor@{tid}")
            out[name] = self.grad(t)
        return out


def _record(outputs, parents, backward) -> None:
    t = _active_tape()
    if t is not None:
        t._record(outputs, parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if np.shape(g) == shape:
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data + b.data)
    _record(
        (out,),
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )
    return out


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data - b.data)
    _record(
        (out,),
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )
    return out


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = Tensor(a.data * b.data)
    _record(
        (out,),
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )
    return out


def neg(a) -> Tensor:
    a = tensor(a)
    out = Tensor(-a.data)
    _record((out,), (a,), lambda g: (-g,))
    return out


def scale(a, s: float) -> Tensor:
    a = tensor(a)
    s = float(s)
    out = Tensor(a.data * s)
    _record((out,), (a,), lambda g: (g * s,))
    return out


def sum_all(a) -> Tensor:
    a = tensor(a)
    out = Tensor(a.data.sum())
    _record((out,), (a,), lambda g: (np.broadcast_to(g, a.data.shape),))
    return out


def matmul(a, b) -> Tensor:
    """1-D/2-D matrix product with shape-aware adjoints."""
    a, b = tensor(a), tensor(b)
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    if ad.ndim == 2 and bd.ndim == 2:
        bk = lambda g: (g @ bd.T, ad.T @ g)
    elif ad.ndim == 1 and bd.ndim == 2:
        bk = lambda g: (g @ bd.T, np.outer(ad, g))
    elif ad.ndim == 2 and bd.ndim == 1:
        bk = lambda g: (np.outer(g, bd), ad.T @ g)
    else:
        raise ContractViolationError(
            f"matmul supports 1-D/2-D operands, got {ad.ndim}-D @ {bd.ndim}-D"
        )
    _record((out,), (a, b), bk)
    return out


def gather_rows(m: Tensor, indices) -> Tensor:
    """Rows m[indices]; adjoint scatter-adds (duplicate indices accumulate)."""
    m = tensor(m)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(m.data[idx])

    def bk(g):
        gm = np.zeros_like(m.data)
        np.add.at(gm, idx, g)
        return (gm,)

    _record((out,), (m,), bk)
    return out


def row(m: Tensor, i: int) -> Tensor:
    m = tensor(m)
    out = Tensor(m.data[i])

    def bk(g):
        gm = np.zeros_like(m.data)
        gm[i] = g
        return (gm,)

    _record((out,), (m,), bk)
    return out


def index1d(v: Tensor, i: int) -> Tensor:
    v = tensor(v)
    out = Tensor(v.data[i])

    def bk(g):
        gv = np.zeros_like(v.data)
        gv[i] = g
        return (gv,)

    _record((out,), (v,), bk)
    return out


def slice1d(v: Tensor, start: int, stop: int) -> Tensor:
    v = tensor(v)
    out = Tensor(v.data[start:stop])

    def bk(g):
        gv = np.zeros_like(v.data)
        gv[start:stop] = g
        return (gv,)

    _record((out,), (v,), bk)
    return out


def concat1d(parts: Sequence[Tensor]) -> Tensor:
    parts = [tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts]))
    offsets = [0]
    for p in parts:
        offsets.append(offsets[-1] + p.data.shape[0])

    def bk(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    _record((out,), tuple(parts), bk)
    return out


def stack_rows(rows_: Sequence[Tensor]) -> Tensor:
    rows_ = [tensor(r) for r in rows_]
    out = Tensor(np.stack([r.data for r in rows_]))

    def bk(g):
        return tuple(g[i] for i in range(len(rows_)))

    _record((out,), tuple(rows_), bk)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = tensor(a)
    out = Tensor(a.data.reshape(shape))
    _record((out,), (a,), lambda g: (np.asarray(g).reshape(a.data.shape),))
    return out


def max_over_rows(m: Tensor) -> Tensor:
    """Column-wise max of a 2-D tensor; adjoint routes to the first argmax row."""
    m = tensor(m)
    if m.ndim != 2:
        raise ContractViolationError("max_over_rows expects a 2-D tensor")
    idx = m.data.argmax(axis=0)
    out = Tensor(m.data[idx, np.arange(m.data.shape[1])])

    def bk(g):
        gm = np.zeros_like(m.data)
        gm[idx, np.arange(m.data.shape[1])] = g
        return (gm,)

    _record((out,), (m,), bk)
    return out


def pad_rows(m: Tensor, before: int, after: int) -> Tensor:
    """Zero rows prepended/appended to a 2-D tensor."""
    m = tensor(m)
    cols = m.data.shape[1]
    out = Tensor(
        np.concatenate(
            [
                np.zeros((before, cols)),
                m.data,
                np.zeros((after, cols)),
            ]
        )
    )
    n = m.data.shape[0]
    _record((out,), (m,), lambda g: (g[before : before + n],))
    return out


def unfold_rows(m: Tensor, width: int) -> Tensor:
    """Sliding windows of ``width`` consecutive rows, flattened per window.

    (N, C) -> (N - width + 1, width * C); adjoint folds overlaps back by sum.
    """
    m = tensor(m)
    n, c = m.data.shape
    if width < 1 or width > n:
        raise ContractViolationError(f"unfold width {width} invalid for {n} rows")
    wins = n - width + 1
    out = Tensor(np.concatenate([m.data[i : i + wins] for i in range(width)], axis=1))

    def bk(g):
        gm = np.zeros_like(m.data)
        for i in range(width):
            gm[i : i + wins] += g[:, i * c : (i + 1) * c]
        return (gm,)

    _record((out,), (m,), bk)
    return out


# ---------------------------------------------------------------------------
# nonlinear ops
# ---------------------------------------------------------------------------


def softmax_with_temperature(logits, temperature: float) -> Tensor:
    """Stable softmax of logits/T over a 1-D vector.

    Low temperatures sharpen the distribution toward the arg-max; the output
    always sums to 1 within 1e-12 and is differentiable w.r.t. the logits.
    """
    temperature = float(temperature)
    if not math.isfinite(temperature) or temperature <= 0.0:
        raise InvalidTemperatureError(f"temperature must be > 0, got {temperature}")
    z = tensor(logits)
    if z.ndim != 1 or z.data.shape[0] == 0:
        raise InvalidInputError("softmax_with_temperature expects a non-empty vector")
    if not np.all(np.isfinite(z.data)):
        raise InvalidInputError("softmax_with_temperature got non-finite logits")

    scaled = z.data / temperature
    scaled = scaled - scaled.max()
    e = np.exp(scaled)
    p = e / e.sum()
    out = Tensor(p)

    def bk(g):
        return ((p * (g - np.dot(g, p))) / temperature,)

    _record((out,), (z,), bk)
    return out


def log_sum_exp(values) -> Tensor:
    """log(sum(exp(v))) of a 1-D vector via max-subtraction; exact for length 1."""
    v = tensor(values)
    if v.ndim != 1 or v.data.shape[0] == 0:
        raise InvalidInputError("log_sum_exp expects a non-empty vector")
    m = v.data.max()
    e = np.exp(v.data - m)
    s = e.sum()
    out = Tensor(m + np.log(s))

    def bk(g):
        return (g * (e / s),)

    _record((out,), (v,), bk)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # saturated gates round to exactly 0/1; exp overflow is benign here
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def lstm_step(x, h_prev, c_prev, w_x, w_h, b) -> tuple[Tensor, Tensor]:
    """One LSTM cell update; fused into a single tape entry.

    Gate layout along the 4H axis is [input, forget, output, cell] so the
    three sigmoid gates occupy one contiguous slice.
    Returns (h_next, c_next); adjoints cover all six inputs.
    """
    x, h_prev, c_prev = tensor(x), tensor(h_prev), tensor(c_prev)
    w_x, w_h, b = tensor(w_x), tensor(w_h), tensor(b)
    hidden = h_prev.data.shape[0]
    gates = x.data @ w_x.data + h_prev.data @ w_h.data + b.data
    sig = _sigmoid(gates[: 3 * hidden])
    i = sig[:hidden]
    f = sig[hidden : 2 * hidden]
    o = sig[2 * hidden :]
    g_ = np.tanh(gates[3 * hidden :])
    c_next = f * c_prev.data + i * g_
    tc = np.tanh(c_next)
    h_next = o * tc

    out_h, out_c = Tensor(h_next), Tensor(c_next)

    def bk(gh, gc):
        gh = 0.0 if gh is None else gh
        gc = 0.0 if gc is None else gc
        go = gh * tc
        gc_total = gc + gh * o * (1.0 - tc * tc)
        gi = gc_total * g_
        gf = gc_total * c_prev.data
        gg = gc_total * i
        gc_prev = gc_total * f
        dgates = np.concatenate(
            [
                gi * i * (1.0 - i),
                gf * f * (1.0 - f),
                go * o * (1.0 - o),
                gg * (1.0 - g_ * g_),
            ]
        )
        gx = w_x.data @ dgates
        gh_prev = w_h.data @ dgates
        gwx = np.outer(x.data, dgates)
        gwh = np.outer(h_prev.data, dgates)
        return (gx, gh_prev, gc_prev, gwx, gwh, dgates)

    _record((out_h, out_c), (x, h_prev, c_prev, w_x, w_h, b), bk)
    return out_h, out_c


def lstm_sequence(xs, w_x, w_h, b, reverse: bool = False) -> Tensor:
    """Unrolled LSTM over a (L, in_dim) sequence; one fused tape entry.

    Output row t is the hidden state after consuming position t (in original
    positions; ``reverse`` runs the recurrence right-to-left).  The adjoint is
    standard backprop-through-time with the input/weight products batched.
    Agrees with step-by-step lstm_step composition to the ulp (the batched
    input product uses a different BLAS path).
    """
    xs, w_x, w_h, b = tensor(xs), tensor(w_x), tensor(w_h), tensor(b)
    length = xs.data.shape[0]
    hidden = w_h.data.shape[0]
    order = range(length - 1, -1, -1) if reverse else range(length)

    gx = xs.data @ w_x.data  # (L, 4H)
    i_t = np.empty((length, hidden))
    f_t = np.empty((length, hidden))
    g_t = np.empty((length, hidden))
    o_t = np.empty((length, hidden))
    tc_t = np.empty((length, hidden))
    hprev_t = np.empty((length, hidden))
    cprev_t = np.empty((length, hidden))
    out = np.empty((length, hidden))

    h = np.zeros(hidden)
    c = np.zeros(hidden)
    with np.errstate(over="ignore"):
        for t in order:
            # same association order as lstm_step
            gates = gx[t] + h @ w_h.data + b.data
            sig = 1.0 / (1.0 + np.exp(-gates[: 3 * hidden]))
            i = sig[:hidden]
            f = sig[hidden : 2 * hidden]
            o = sig[2 * hidden :]
            g_ = np.tanh(gates[3 * hidden :])
            hprev_t[t] = h
            cprev_t[t] = c
            c = f * c + i * g_
            tc = np.tanh(c)
            h = o * tc
            i_t[t], f_t[t], g_t[t], o_t[t], tc_t[t] = i, f, g_, o, tc
            out[t] = h

    result = Tensor(out)

    def bk(gout):
        gh = np.zeros(hidden)
        gc = np.zeros(hidden)
        dgates = np.empty((length, 4 * hidden))
        for t in reversed(order):
            ght = gout[t] + gh
            i, f, g_, o, tc = i_t[t], f_t[t], g_t[t], o_t[t], tc_t[t]
            go = ght * tc
            gc_tot = gc + ght * o * (1.0 - tc * tc)
            row_ = dgates[t]
            row_[:hidden] = (gc_tot * g_) * i * (1.0 - i)
            row_[hidden : 2 * hidden] = (gc_tot * cprev_t[t]) * f * (1.0 - f)
            row_[2 * hidden : 3 * hidden] = go * o * (1.0 - o)
            row_[3 * hidden :] = (gc_tot * i) * (1.0 - g_ * g_)
            gc = gc_tot * f
            gh = w_h.data @ row_
        gxs = dgates @ w_x.data.T
        gwx = xs.data.T @ dgates
        gwh = hprev_t.T @ dgates
        gb = dgates.sum(axis=0)
        return (gxs, gwx, gwh, gb)

    _record((result,), (xs, w_x, w_h, b), bk)
    return result


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of two 2-D tensors with equal row counts."""
    a, b = tensor(a), tensor(b)
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    na = a.data.shape[1]
    _record((out,), (a, b), lambda g: (g[:, :na], g[:, na:]))
    return out


# ---------------------------------------------------------------------------
# linear-chain scoring steps (shared by the structured tagging head)
# ---------------------------------------------------------------------------
#
# Scores live in an augmented square matrix with two extra states: index
# n_states is the chain start (BOS), n_states+1 the chain end (EOS).  Entries
# into BOS / out of EOS are never read, which keeps every stored tensor finite
# while behaving as if those transitions scored -inf.


def chain_start(transitions: Tensor, emissions: Tensor, n_states: int) -> Tensor:
    """alpha_0 = transitions[BOS, :n] + emissions[0]."""
    transitions, emissions = tensor(transitions), tensor(emissions)
    bos = n_states
    out = Tensor(transitions.data[bos, :n_states] + emissions.data[0])

    def bk(g):
        gt = np.zeros_like(transitions.data)
        gt[bos, :n_states] = g
        ge = np.zeros_like(emissions.data)
        ge[0] = g
        return (gt, ge)

    _record((out,), (transitions, emissions), bk)
    return out


def chain_step(
    alpha: Tensor, transitions: Tensor, emissions: Tensor, position: int, n_states: int
) -> Tensor:
    """One forward-recursion step in log space.

    alpha'_j = logsumexp_i((alpha_i + transitions[i, j]) + emissions[pos, j]).
    """
    alpha, transitions, emissions = tensor(alpha), tensor(transitions), tensor(emissions)
    block = transitions.data[:n_states, :n_states]
    scores = (alpha.data[:, None] + block) + emissions.data[position][None, :]
    m = scores.max(axis=0)
    e = np.exp(scores - m[None, :])
    s = e.sum(axis=0)
    out = Tensor(m + np.log(s))

    def bk(g):
        w = e / s[None, :]  # column-wise posterior over previous state
        wg = w * g[None, :]
        ga = wg.sum(axis=1)
        gt = np.zeros_like(transitions.data)
        gt[:n_states, :n_states] = wg
        ge = np.zeros_like(emissions.data)
        ge[position] = g
        return (ga, gt, ge)

    _record((out,), (alpha, transitions, emissions), bk)
    return out


def chain_final(alpha: Tensor, transitions: Tensor, n_states: int) -> Tensor:
    """log-partition: logsumexp(alpha + transitions[:n, EOS])."""
    alpha, transitions = tensor(alpha), tensor(transitions)
    eos = n_states + 1
    v = alpha.data + transitions.data[:n_states, eos]
    m = v.max()
    e = np.exp(v - m)
    s = e.sum()
    out = Tensor(m + np.log(s))

    def bk(g):
        w = g * (e / s)
        gt = np.zeros_like(transitions.data)
        gt[:n_states, eos] = w
        return (w, gt)

    _record((out,), (alpha, transitions), bk)
    return out


def chain_gold_score(
    emissions: Tensor, transitions: Tensor, states: Sequence[int], n_states: int
) -> Tensor:
    """Score of one state path, accumulated in the same association order as
    the forward recursion so a single-state chain yields an exactly-zero NLL."""
    emissions, transitions = tensor(emissions), tensor(transitions)
    states = [int(s) for s in states]
    if any(s < 0 or s >= n_states for s in states):
        raise ContractViolationError(f"state index out of range in {states}")
    bos, eos = n_states, n_states + 1
    td, ed = transitions.data, emissions.data
    score = td[bos, states[0]] + ed[0, states[0]]
    for i in range(1, len(states)):
        score = (score + td[states[i - 1], states[i]]) + ed[i, states[i]]
    score = score + td[states[-1], eos]
    out = Tensor(score)

    def bk(g):
        ge = np.zeros_like(ed)
        gt = np.zeros_like(td)
        pos = np.arange(len(states))
        np.add.at(ge, (pos, states), g)
        np.add.at(gt, ([bos] + states[:-1], states), g)
        gt[states[-1], eos] += g
        return (ge, gt)

    _record((out,), (emissions, transitions), bk)
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    """Adam moments and step counter; immutable, one instance per update."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def with_learning_rate(self, lr: float) -> "AdamState":
        return replace(self, learning_rate=float(lr))


def adam_init(params: dict[str, Tensor], learning_rate: float, **kwargs) -> AdamState:
    m = {k: np.zeros_like(p.data) for k, p in params.items()}
    v = {k: np.zeros_like(p.data) for k, p in params.items()}
    return AdamState(learning_rate=float(learning_rate), m=m, v=v, **kwargs)


def adam_step(
    state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray]
) -> tuple[dict[str, Tensor], AdamState]:
    """Bias-corrected Adam update; returns fresh params and state."""
    t = state.step_count + 1
    lr_corrected = state.learning_rate / (1.0 - state.beta1 ** t)
    root_bc2 = math.sqrt(1.0 - state.beta2 ** t)
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape or state.m[name].shape != p.data.shape:
            raise ContractViolationError(
                f"adam_step shape mismatch for '{name}': "
                f"param {p.data.shape}, grad {g.shape}, moment {state.m[name].shape}"
            )
        m = state.beta1 * state.m[name]
        m += (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name]
        v += (1.0 - state.beta2) * (g * g)
        # p - lr * (m / bc1) / (sqrt(v / bc2) + eps), with scalars prefolded
        denom = np.sqrt(v)
        denom /= root_bc2
        denom += state.epsilon
        step = m / denom
        step *= lr_corrected
        new_params[name] = Tensor(p.data - step)
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, step_count=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    tape_value: float
    fd_value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` must be a deterministic scalar function closing over the exact
    tensors in ``params`` (this is verified by evaluating it twice; any
    stochastic path such as active dropout is rejected).  Relative error is
    |a - b| / max(|a|, |b|, 1e-3): the floor keeps near-zero coordinates from
    amplifying finite-difference round-off into spurious failures.

    The check temporarily perturbs param storage in place and restores it.
    """
    v1 = float(loss_fn())
    v2 = float(loss_fn())
    if v1 != v2:
        raise InvalidInputError(
            "gradient_check requires a deterministic loss_fn "
            "(disable dropout or any other stochastic path)"
        )

    with GradTape() as tape:
        for name, p in params.items():
            tape.watch(p, name)
        loss = loss_fn()
    tape.backward(loss)

    worst = GradCheckReport(0.0, "", (), 0.0, 0.0, tol)
    for name, p in params.items():
        tape_grad = tape.grad(p)
        flat = p.data.reshape(-1)
        for k in range(flat.shape[0]):
            orig = flat[k]
            flat[k] = orig + h
            lp = float(loss_fn())
            flat[k] = orig - h
            lm = float(loss_fn())
            flat[k] = orig
            fd = (lp - lm) / (2.0 * h)
            tg = float(tape_grad.reshape(-1)[k])
            denom = max(abs(tg), abs(fd), 1e-3)
            rel = abs(tg - fd) / denom
            if rel > worst.max_rel_error:
                idx = np.unravel_index(k, p.data.shape)
                worst = GradCheckReport(rel, name, tuple(int(j) for j in idx), tg, fd, tol)
    return worst
