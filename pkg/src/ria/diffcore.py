"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs is tracked (a parameter leaf or the output of a recorded
operation).  Outside a tape every primitive is a plain numpy evaluation,
which is what evaluation passes use.

    with Tape() as tape:
        loss = mean(softmax_cross_entropy(logits, y))
    grad(loss, params, tape)
    descent_step(params, lr)
"""

from __future__ import annotations

import json
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import sparse

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "requires_grad", "parents", "backward_fn")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of the primitives applied while the tape is active."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def const(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64))


def _op(value, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(value)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op(a.value * b.value, (a, b),
               lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _op(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _op(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _op(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.value)
    return _op(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _op(np.log(a.value), (a,), lambda g: (g / a.value,))


def straight_through(hard, soft) -> Tensor:
    """Forward value of ``hard``; gradients pass to ``soft`` unchanged."""
    hard = np.asarray(hard.value if isinstance(hard, Tensor) else hard, dtype=np.float64)
    soft = as_tensor(soft)
    if hard.shape != soft.shape:
        raise ValueError(f"shape mismatch {hard.shape} vs {soft.shape}")
    return _op(hard.copy(), (soft,), lambda g: (g,))


# -- linear algebra and reductions ---------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _op(a.value @ b.value, (a, b),
               lambda g: (g @ b.value.T if a.requires_grad else None,
                          a.value.T @ g if b.requires_grad else None))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _op(a.value.sum(axis=axis), (a,), back)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    if n == 0:
        raise ValueError("mean over an empty axis")
    return mul(sum(a, axis), 1.0 / n)


def max_axis(a, axis: int = 0) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.value, axis=axis)
    out = np.take_along_axis(a.value, np.expand_dims(idx, axis), axis).squeeze(axis)

    def back(g):
        z = np.zeros(a.shape)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (z,)

    return _op(out, (a,), back)


def stack(items: Sequence) -> Tensor:
    """Stack scalars (or equal-shape tensors) along a new leading axis."""
    ts = [as_tensor(t) for t in items]
    return _op(np.stack([t.value for t in ts]), ts, lambda g: tuple(g[i] for i in range(len(ts))))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def variance(a) -> Tensor:
    """Population variance of a 1-D sequence."""
    a = as_tensor(a)
    n = a.value.size
    centered = a.value - a.value.mean()
    return _op(np.mean(centered ** 2), (a,), lambda g: (g * 2.0 * centered / n,))


def l2_norm(a, axis: int | None = None) -> Tensor:
    """Euclidean norm; the (sub)gradient at a zero vector is taken as 0."""
    a = as_tensor(a)
    nrm = np.sqrt(np.sum(a.value ** 2, axis=axis))

    def back(g):
        safe = np.where(nrm > 0, nrm, 1.0)
        scale = np.where(nrm > 0, g / safe, 0.0)
        if axis is not None:
            scale = np.expand_dims(scale, axis)
        return (a.value * scale,)

    return _op(nrm, (a,), back)


def softmax(logits) -> Tensor:
    """Row-wise softmax of a ``[B, C]`` matrix."""
    z = as_tensor(logits)
    e = np.exp(z.value - z.value.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return _op(p, (z,), back)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-row cross entropy ``-log softmax(z)[y]`` for ``[B, C]`` logits."""
    z = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    shifted = z.value - z.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(y))
    loss = lse - shifted[rows, y]

    def back(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, y] -= 1.0
        return (p * g[:, None],)

    return _op(loss, (z,), back)


# -- row gather / scatter (neighbour aggregation) ------------------------------------

def _incidence(index: np.ndarray, num_rows: int) -> sparse.csr_matrix:
    # row r sums the entries i with index[i] == r
    n = len(index)
    return sparse.csr_matrix((np.ones(n), (index, np.arange(n))), shape=(num_rows, n))


def gather_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        flat = g.reshape(len(index), int(np.prod(a.shape[1:])))
        return np.asarray(_incidence(index, a.shape[0]) @ flat).reshape(a.shape),

    return _op(a.value[index], (a,), back)


def scatter_add_rows(a, index, num_rows: int) -> Tensor:
    """``out[index[i]] += a[i]`` into ``num_rows`` zero rows."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    flat = a.value.reshape(len(index), int(np.prod(a.shape[1:])))
    out = np.asarray(_incidence(index, num_rows) @ flat).reshape((num_rows,) + a.shape[1:])
    return _op(out, (a,), lambda g: (g[index],))


def segment_max(a, index, num_rows: int) -> Tensor:
    """Row-wise maximum of ``a`` within each segment; empty segments yield 0."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    out = np.full((num_rows,) + a.shape[1:], -np.inf)
    np.maximum.at(out, index, a.value)
    # winner = first row in each segment attaining the max, per column
    big = a.shape[0]
    rows = np.broadcast_to(np.arange(big).reshape((-1,) + (1,) * (a.value.ndim - 1)), a.shape)
    winner = np.full(out.shape, big, dtype=np.int64)
    np.minimum.at(winner, index, np.where(a.value == out[index], rows, big))
    winner[winner == big] = -1
    out = np.where(np.isfinite(out), out, 0.0)

    def back(g):
        z = np.zeros(a.shape)
        seg, col = np.nonzero(winner >= 0)
        z[winner[seg, col], col] = g[seg, col]
        return (z,)

    return _op(out, (a,), back)


# -- parameters ---------------------------------------------------------------

class ParamStore:
    """Named parameter tensors with gradient slots of identical shape."""

    def __init__(self):
        self._values: dict[str, Tensor] = {}
        self._grads: dict[str, np.ndarray] = {}
        self.grads_ready = False

    def add(self, name: str, value) -> Tensor:
        if name in self._values:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._values[name] = t
        self._grads[name] = np.zeros_like(t.value)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def items(self):
        return self._values.items()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_grad(self, name: str, g) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self._values[name].shape:
            raise ValueError(f"gradient shape {g.shape} != value shape {self._values[name].shape}")
        self._grads[name] = g

    def zero_grad(self) -> None:
        for name, t in self._values.items():
            self._grads[name] = np.zeros_like(t.value)
        self.grads_ready = False

    def numel(self) -> int:
        return int(np.sum([t.value.size for t in self._values.values()]))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self._values.items()}

    def load(self, values: dict) -> None:
        for k, v in values.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self._values[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self._values[k].shape}")
            self._values[k].value = v.copy()

    def to_json(self) -> str:
        return json.dumps({k: {"shape": list(t.shape), "values": t.value.ravel().tolist()}
                           for k, t in self._values.items()})

    @classmethod
    def from_json(cls, text: str) -> "ParamStore":
        store = cls()
        for k, rec in json.loads(text).items():
            store.add(k, np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"]))
        return store


def grad(scalar_output: Tensor, params: ParamStore, tape: Tape) -> None:
    """Backpropagate ``scalar_output`` over ``tape`` into the gradient slots of ``params``."""
    if scalar_output.shape != ():
        raise ValueError(f"grad needs a scalar output, got shape {scalar_output.shape}")
    params.zero_grad()
    pending = {id(scalar_output): np.ones(())}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + gp if key in pending else gp
    for name, t in params.items():
        if id(t) in pending:
            params.set_grad(name, pending[id(t)])
        elif t is scalar_output:
            params.set_grad(name, np.ones(()))
    params.grads_ready = True


def finite_diff(loss_fn: Callable[[ParamStore], float], params: ParamStore,
                eps: float = 1e-4) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, one entry at a time."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    out = {}
    for name, t in params.items():
        g = np.zeros_like(t.value)
        base = t.value.copy()
        for i in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[i] += eps
            minus[i] -= eps
            t.value = plus
            fp = float(loss_fn(params))
            t.value = minus
            fm = float(loss_fn(params))
            g[i] = (fp - fm) / (2 * eps)
        t.value = base
        out[name] = g
    return out


def _step(params: ParamStore, lr: float, sign: float) -> ParamStore:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not params.grads_ready:
        raise RuntimeError("gradients are not populated; call grad() first")
    for name, t in params.items():
        t.value = t.value + sign * lr * params.grad(name)
    return params


def descent_step(params: ParamStore, lr: float) -> ParamStore:
    return _step(params, lr, -1.0)


def ascent_step(params: ParamStore, lr: float) -> ParamStore:
    return _step(params, lr, +1.0)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
