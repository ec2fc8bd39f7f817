"""Minimal float64 reverse-mode engine.

Tensors wrap numpy arrays; ops executed inside a `recording` block append
(inputs, output, local-vjp) nodes to a Tape, and `backward` replays the tape
in reverse. Any non-finite value in an op output or a gradient is a hard
NumericError. Also home to the two optimizer modes, inverted dropout, and a
central-difference gradient checker.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericError", "Tensor", "Tape", "ParamSet", "OptimizerState",
    "recording", "backward", "record_op", "optimizer_step", "grad_check",
    "dropout_mask", "rng_from",
    "add", "sub", "mul", "neg", "scale", "matmul", "tanh", "exp", "log",
    "tsum", "tmean", "logsumexp", "reshape", "concat", "gather_rows",
    "take_pairs",
]

_MASK64 = (1 << 64) - 1


class NumericError(RuntimeError):
    """A non-finite value appeared in an op output or a gradient."""


def rng_from(*keys: int) -> np.random.Generator:
    """Deterministic generator from an integer key path (base seed first)."""
    entropy = [int(k) & _MASK64 for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


class Tensor:
    """Dense float64 array node. Construction validates finiteness."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor created with non-finite values")
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"

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

    def __truediv__(self, c):
        return scale(self, 1.0 / float(c))


def _bare(data: np.ndarray) -> Tensor:
    # internal constructor that skips re-validation
    t = Tensor.__new__(Tensor)
    t.data = data
    return t


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("out", "inputs", "vjp", "name")

    def __init__(self, out: Tensor, inputs: tuple, vjp: Callable, name: str):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered log of primitive ops: the computation record for one forward."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)


_LOCAL = threading.local()


def _active() -> Tape | None:
    return getattr(_LOCAL, "tape", None)


@contextmanager
def recording(tape: Tape | None = None):
    """Route ops executed in this thread onto `tape` (fresh one if omitted)."""
    tape = Tape() if tape is None else tape
    prev = _active()
    _LOCAL.tape = tape
    try:
        yield tape
    finally:
        _LOCAL.tape = prev


def record_op(out_data: np.ndarray, inputs: tuple, vjp: Callable, name: str) -> Tensor:
    """Emit one primitive: validate the output and log the node if recording.

    `vjp(out_grad)` must return one gradient array (or None) per input.
    Custom fused ops (e.g. the recurrent scan) plug in through this hook.
    """
    out_data = np.asarray(out_data, dtype=np.float64)
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"op '{name}' produced non-finite values")
    out = _bare(out_data)
    tape = _active()
    if tape is not None:
        tape.nodes.append(_Node(out, inputs, vjp, name))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record_op(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return record_op(a.data * b.data, (a, b), vjp, "mul")


def neg(a) -> Tensor:
    a = _t(a)
    return record_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = _t(a)
    c = float(c)
    return record_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects rank-2 operands")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return record_op(a.data @ b.data, (a, b), vjp, "matmul")


def tanh(a) -> Tensor:
    a = _t(a)
    out_data = np.tanh(a.data)
    return record_op(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),), "tanh")


def exp(a) -> Tensor:
    a = _t(a)
    out_data = np.exp(a.data)
    return record_op(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a) -> Tensor:
    a = _t(a)
    return record_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tsum(a, axis: int | None = None) -> Tensor:
    a = _t(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return record_op(a.data.sum(axis=axis), (a,), vjp, "tsum")


def tmean(a) -> Tensor:
    a = _t(a)
    n = a.data.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return record_op(np.asarray(a.data.mean()), (a,), vjp, "tmean")


def logsumexp(a, axis: int | None = None) -> Tensor:
    """Numerically stable log-sum-exp reduction (the CRF workhorse)."""
    a = _t(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = shifted.sum(axis=axis, keepdims=True)
    soft = shifted / s
    if axis is None:
        out_data = (m + np.log(s)).reshape(())
    else:
        out_data = np.squeeze(m + np.log(s), axis=axis)

    def vjp(g):
        if axis is None:
            return (g * soft,)
        return (np.expand_dims(g, axis) * soft,)

    return record_op(out_data, (a,), vjp, "logsumexp")


def reshape(a, shape) -> Tensor:
    a = _t(a)
    orig = a.data.shape
    return record_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_t(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record_op(np.concatenate([p.data for p in parts], axis=axis),
                     tuple(parts), vjp, "concat")


def gather_rows(a, ids) -> Tensor:
    """Select rows by index; backward scatter-adds into the source rows only."""
    a = _t(a)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError("gather_rows index out of range")

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return record_op(a.data[idx], (a,), vjp, "gather_rows")


def take_pairs(a, rows, cols) -> Tensor:
    """Pick a[rows[i], cols[i]] as a flat vector (path scoring helper)."""
    a = _t(a)
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    if r.shape != c.shape or r.ndim != 1:
        raise ValueError("take_pairs expects matching flat index lists")
    if r.size and (r.min() < 0 or r.max() >= a.data.shape[0]
                   or c.min() < 0 or c.max() >= a.data.shape[1]):
        raise IndexError("take_pairs index out of range")

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (r, c), g)
        return (out,)

    return record_op(a.data[r, c], (a,), vjp, "take_pairs")


# ----------------------------------------------------------------- backward

def backward(loss: Tensor, tape: Tape, params: "ParamSet") -> "ParamSet":
    """dLoss/dθ for every entry of `params`; untouched parameters map to zeros."""
    if loss.data.ndim != 0:
        raise ValueError("backward expects a scalar loss node")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            if not np.all(np.isfinite(ig)):
                raise NumericError(f"non-finite gradient flowing out of op '{node.name}'")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    out = ParamSet()
    for name, p in params.items():
        g = grads.get(id(p))
        if g is None:
            out[name] = _bare(np.zeros_like(p.data))
        else:
            out[name] = _bare(np.array(g, dtype=np.float64).reshape(p.data.shape))
    return out


# ----------------------------------------------------------------- ParamSet

class ParamSet:
    """Insertion-ordered name -> Tensor map holding a model's parameters."""

    __slots__ = ("_entries",)

    def __init__(self, entries=None):
        self._entries: dict[str, Tensor] = {}
        if entries is not None:
            items = entries.items() if hasattr(entries, "items") else entries
            for name, t in items:
                self[name] = t

    def __setitem__(self, name: str, value):
        self._entries[name] = _t(value)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def clone(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            out[name] = _bare(t.data.copy())
        return out

    def zeros_like(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            out[name] = _bare(np.zeros_like(t.data))
        return out

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._entries.values()])

    def from_flat(self, vec: np.ndarray) -> "ParamSet":
        out = ParamSet()
        pos = 0
        for name, t in self.items():
            n = t.data.size
            out[name] = _bare(np.array(vec[pos:pos + n], dtype=np.float64).reshape(t.data.shape))
            pos += n
        if pos != vec.size:
            raise ValueError("flat vector length does not match parameter count")
        return out

    def allclose(self, other: "ParamSet", atol: float = 0.0) -> bool:
        if self.names() != other.names():
            return False
        return all(np.allclose(t.data, other[n].data, rtol=0.0, atol=atol)
                   for n, t in self.items())

    def identical(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(t.data, other[n].data) for n, t in self.items())


# --------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    """Plain descent or the decoupled-weight-decay adaptive update."""

    mode: str
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: ParamSet | None = field(default=None, repr=False)
    v: ParamSet | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("plain", "adaptive"):
            raise ValueError(f"unknown optimizer mode: {self.mode!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(state: OptimizerState, params: ParamSet, grads: ParamSet) -> ParamSet:
    """One update; returns new parameters and advances `state` in place."""
    if params.names() != grads.names():
        raise KeyError("gradient keys do not match parameter keys")
    for name, p in params.items():
        if grads[name].data.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
    out = ParamSet()
    if state.mode == "plain":
        for name, p in params.items():
            out[name] = _bare(p.data - state.lr * grads[name].data)
    else:
        if state.m is None:
            state.m = params.zeros_like()
            state.v = params.zeros_like()
        t = state.step_count + 1
        b1, b2 = state.beta1, state.beta2
        for name, p in params.items():
            g = grads[name].data
            m = b1 * state.m[name].data + (1.0 - b1) * g
            v = b2 * state.v[name].data + (1.0 - b2) * g * g
            state.m[name] = _bare(m)
            state.v[name] = _bare(v)
            mh = m / (1.0 - b1 ** t)
            vh = v / (1.0 - b2 ** t)
            step = state.lr * mh / (np.sqrt(vh) + state.eps)
            out[name] = _bare(p.data - step - state.lr * state.weight_decay * p.data)
    state.step_count += 1
    for name, p in out.items():
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"optimizer produced non-finite values for {name!r}")
    return out


# ------------------------------------------------------------------ dropout

def dropout_mask(shape, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted-dropout mask: 0 with probability `rate`, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return _bare(np.ones(shape))
    keep = rng.random(shape) >= rate
    return _bare(keep.astype(np.float64) / (1.0 - rate))


# --------------------------------------------------------------- grad check

def grad_check(loss_fn: Callable[[ParamSet], Tensor], params: ParamSet,
               eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    `loss_fn` must be deterministic in `params` (fix any rng outside).
    """
    tape = Tape()
    with recording(tape):
        loss = loss_fn(params)
    analytic = backward(loss, tape, params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        aflat = analytic[name].data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn(params).data)
            flat[i] = orig - eps
            f_minus = float(loss_fn(params).data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("loss non-finite at perturbed point during grad check")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, rel)
    return worst
