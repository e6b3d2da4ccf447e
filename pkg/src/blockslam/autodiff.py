"""Reverse-mode automatic differentiation over numpy arrays.

All training in the system runs on this module: a ``Tape`` records every
primitive applied while a forward pass executes inside ``recording(tape)``,
and ``backward`` replays the records in reverse order, accumulating
d(loss)/d(param) into each tensor's ``grad`` buffer. Everything is 64-bit.

Gradients accumulate across backward calls until ``ParameterStore.zero_grad``
is invoked, which lets mapping sum contributions over ray batches.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit as _expit

from .errors import ContractViolation, NumericError

_TAPE: "Tape | None" = None
# During a backward pass: ids of gradient buffers some tensor already owns.
# Lets accumulate_grad adopt closure results without copying, while a second
# adoption of the same underlying buffer falls back to a copy.
_CLAIMED: "set[int] | None" = None


class Tape:
    """Append-only record of primitive operations for one forward pass."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops: list[tuple[str, Tensor, Callable[[], None]]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def clear(self) -> None:
        self._ops.clear()

    def op_names(self) -> list[str]:
        return [name for name, _, _ in self._ops]


@contextmanager
def recording(tape: Tape):
    """Route primitive records to ``tape`` for the duration of the block."""
    global _TAPE
    prev = _TAPE
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = prev


def active_tape() -> Tape | None:
    return _TAPE


class Tensor:
    """An array value tracked by the tape. 64-bit floats only."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is not None:
            self.grad += g
            return
        buf = g.base if g.base is not None else g
        if (
            _CLAIMED is not None
            and g.dtype == np.float64
            and buf.flags.writeable
            and id(buf) not in _CLAIMED
        ):
            # adopt the closure's array; its upstream source is never read
            # again in reverse order, and the claim registry prevents two
            # tensors from sharing one buffer
            _CLAIMED.add(id(buf))
            self.grad = g
        else:
            self.grad = np.array(g, dtype=np.float64)
            if _CLAIMED is not None:
                _CLAIMED.add(id(self.grad))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return sum_(self, axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def record(name: str, out: Tensor, pairs: Iterable[tuple[Tensor, Callable]]) -> None:
    """Register a backward rule for ``out``.

    ``pairs`` maps each differentiable input tensor to a function taking the
    output gradient array and returning the gradient contribution for that
    input. Fused operations defined in other modules use this hook too.
    """
    tape = _TAPE
    if tape is None or not out.requires_grad:
        return
    pairs = [(t, fn) for t, fn in pairs if t.requires_grad]

    def backward():
        g = out.grad
        if g is None:
            return
        for t, fn in pairs:
            t.accumulate_grad(fn(g))

    tape._ops.append((name, out, backward))


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the source shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _result(data: np.ndarray, *inputs: Tensor) -> Tensor:
    req = _TAPE is not None and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=req)


# -- primitives ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data + b.data, a, b)
    record("add", out, [
        (a, lambda g: _sum_to_shape(g, a.data.shape)),
        (b, lambda g: _sum_to_shape(g, b.data.shape)),
    ])
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data - b.data, a, b)
    record("sub", out, [
        (a, lambda g: _sum_to_shape(g, a.data.shape)),
        (b, lambda g: _sum_to_shape(-g, b.data.shape)),
    ])
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data * b.data, a, b)
    record("mul", out, [
        (a, lambda g: _sum_to_shape(g * b.data, a.data.shape)),
        (b, lambda g: _sum_to_shape(g * a.data, b.data.shape)),
    ])
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data / b.data, a, b)
    record("div", out, [
        (a, lambda g: _sum_to_shape(g / b.data, a.data.shape)),
        (b, lambda g: _sum_to_shape(-g * out.data / b.data, b.data.shape)),
    ])
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, a)
    record("neg", out, [(a, lambda g: -g)])
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data @ b.data, a, b)
    record("matmul", out, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])
    return out


def affine_pair(a: Tensor, b: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """``concat([a, b], 1) @ w + bias`` without materializing the concat.

    ``a`` is (n, da), ``b`` (n, db), ``w`` (da+db, m), ``bias`` (m,).
    """
    da = a.data.shape[1]
    out_data = a.data @ w.data[:da] + b.data @ w.data[da:] + bias.data
    out = _result(out_data, a, b, w, bias)

    def back_w(g):
        buf = np.empty_like(w.data)
        np.matmul(a.data.T, g, out=buf[:da])
        np.matmul(b.data.T, g, out=buf[da:])
        return buf

    record("affine_pair", out, [
        (a, lambda g: g @ w.data[:da].T),
        (b, lambda g: g @ w.data[da:].T),
        (w, back_w),
        (bias, lambda g: g.sum(axis=0)),
    ])
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), a)
    record("relu", out, [(a, lambda g: g * (a.data > 0.0))])
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _result(_expit(a.data), a)
    record("sigmoid", out, [(a, lambda g: g * out.data * (1.0 - out.data))])
    return out


def exp(a: Tensor) -> Tensor:
    out = _result(np.exp(a.data), a)
    record("exp", out, [(a, lambda g: g * out.data)])
    return out


def log(a: Tensor) -> Tensor:
    out = _result(np.log(a.data), a)
    record("log", out, [(a, lambda g: g / a.data)])
    return out


def sqrt(a: Tensor) -> Tensor:
    out = _result(np.sqrt(a.data), a)
    record("sqrt", out, [(a, lambda g: g * (0.5 / out.data))])
    return out


def sin(a: Tensor) -> Tensor:
    out = _result(np.sin(a.data), a)
    record("sin", out, [(a, lambda g: g * np.cos(a.data))])
    return out


def cos(a: Tensor) -> Tensor:
    out = _result(np.cos(a.data), a)
    record("cos", out, [(a, lambda g: -g * np.sin(a.data))])
    return out


def square(a: Tensor) -> Tensor:
    out = _result(a.data * a.data, a)
    record("square", out, [(a, lambda g: 2.0 * g * a.data)])
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape)

    record("sum", out, [(a, back)])
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape), a)
    record("reshape", out, [(a, lambda g: g.reshape(a.data.shape))])
    return out


def getitem(a: Tensor, key) -> Tensor:
    out = _result(a.data[key], a)
    unique_rows = (
        isinstance(key, np.ndarray) and key.ndim == 1 and key.dtype.kind == "i"
        and (len(key) < 2 or bool(np.all(np.diff(key) > 0)))
    )

    def back(g):
        buf = np.zeros_like(a.data)
        if unique_rows:
            buf[key] = g
        else:
            np.add.at(buf, key, g)
        return buf

    record("getitem", out, [(a, back)])
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    out_data = np.concatenate(datas, axis=axis)
    out = _result(out_data, *parts)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    pairs = []
    for i, p in enumerate(parts):
        def back(g, i=i):
            return np.split(g, splits, axis=axis)[i]
        pairs.append((p, back))
    record("concat", out, pairs)
    return out


def stack(parts: list[Tensor], axis: int = 0) -> Tensor:
    out = _result(np.stack([p.data for p in parts], axis=axis), *parts)
    pairs = []
    for i, p in enumerate(parts):
        def back(g, i=i):
            return np.take(g, i, axis=axis)
        pairs.append((p, back))
    record("stack", out, pairs)
    return out


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """``table[idx]`` for a (rows, F) table and an integer index array.

    The backward pass scatter-adds into the table, implemented per feature
    column with bincount for speed.
    """
    idx = np.asarray(idx)
    out = _result(table.data[idx], table)

    def back(g):
        rows, fdim = table.data.shape
        flat_idx = idx.ravel()
        gflat = g.reshape(-1, fdim)
        buf = np.empty_like(table.data)
        for f in range(fdim):
            buf[:, f] = np.bincount(flat_idx, weights=gflat[:, f], minlength=rows)
        return buf

    record("gather_rows", out, [(table, back)])
    return out


def put_rows(n_rows: int, idx: np.ndarray, values: Tensor) -> Tensor:
    """A (n_rows, D) tensor that is zero except ``out[idx] += values``.

    Duplicate indices are summed. Used to scatter per-block features into a
    shared per-point accumulator (where row indices are unique and the fast
    assignment path applies).
    """
    idx = np.asarray(idx)
    data = np.zeros((n_rows,) + values.data.shape[1:], dtype=np.float64)
    unique_rows = idx.ndim == 1 and (len(idx) < 2 or bool(np.all(np.diff(idx) > 0)))
    if unique_rows:
        data[idx] = values.data
    else:
        np.add.at(data, idx, values.data)
    out = _result(data, values)
    record("put_rows", out, [(values, lambda g: g[idx])])
    return out


def where_mask(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select by a constant boolean mask (the mask itself carries no gradient)."""
    mask = np.asarray(mask, dtype=bool)
    out = _result(np.where(mask, a.data, b.data), a, b)
    record("where", out, [
        (a, lambda g: _sum_to_shape(g * mask, a.data.shape)),
        (b, lambda g: _sum_to_shape(g * ~mask, b.data.shape)),
    ])
    return out


# -- forward / backward drivers -----------------------------------------

def run_forward(tape: Tape, fn: Callable[[], Tensor]) -> Tensor:
    """Run ``fn`` while recording onto ``tape``; poisoned values are fatal.

    The tape must be empty at call start. If the result is not finite, the
    earliest recorded op with a non-finite output is named in the error.
    """
    if len(tape):
        raise ContractViolation("forward requires an empty tape")
    with recording(tape):
        out = fn()
    if not np.all(np.isfinite(out.data)):
        for name, t, _ in tape._ops:
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"non-finite value produced by op '{name}'")
        raise NumericError("non-finite forward result")
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into the grad of every tensor on the tape."""
    global _CLAIMED
    if len(tape) == 0 and not loss.requires_grad:
        raise ContractViolation("backward called before a recorded forward")
    if loss.data.size != 1:
        raise ContractViolation("backward requires a scalar loss")
    loss.accumulate_grad(np.ones_like(loss.data))
    prev = _CLAIMED
    _CLAIMED = set()
    try:
        for _, out, fn in reversed(tape._ops):
            # this op's output gradient is consumed here for the last time,
            # so its buffer may be handed down to an input
            if out.grad is not None:
                buf = out.grad.base if out.grad.base is not None else out.grad
                _CLAIMED.discard(id(buf))
            fn()
    finally:
        _CLAIMED = prev


# -- parameters and the optimizer ----------------------------------------

class Parameter(Tensor):
    """A named, learnable tensor owned by a ParameterStore group."""

    __slots__ = ("group", "name")

    def __init__(self, data, group: str, name: str):
        super().__init__(data, requires_grad=True)
        self.group = group
        self.name = name

    def constant(self) -> Tensor:
        """A frozen view sharing this parameter's storage (no gradient)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        return t


class _AdamState:
    __slots__ = ("m", "v", "step")

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step = 0


class ParameterStore:
    """All learnable scalars, organized in named groups, plus Adam state."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups: dict[str, dict[str, Parameter]] = {}
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state: dict[tuple[str, str], _AdamState] = {}

    def register(self, group: str, name: str, data: np.ndarray) -> Parameter:
        p = Parameter(np.array(data, dtype=np.float64), group, name)
        bucket = self.groups.setdefault(group, {})
        if name in bucket:
            raise ContractViolation(f"parameter {group}/{name} already registered")
        bucket[name] = p
        self._state[(group, name)] = _AdamState(p.data.shape)
        return p

    def remove(self, group: str, name: str) -> None:
        del self.groups[group][name]
        del self._state[(group, name)]

    def get(self, group: str, name: str) -> Parameter:
        return self.groups[group][name]

    def parameters(self, group: str | None = None):
        if group is None:
            for bucket in self.groups.values():
                yield from bucket.values()
        else:
            yield from self.groups.get(group, {}).values()

    def zero_grad(self, group: str | None = None) -> None:
        for p in self.parameters(group):
            p.grad = None

    def adam_step(self, learning_rates: Mapping[str, float]) -> None:
        """One Adam update for every group named in ``learning_rates``.

        Parameters whose grad buffer is untouched are skipped (their step
        counter does not advance). Non-finite results are fatal.
        """
        for group, lr in learning_rates.items():
            for p in self.parameters(group):
                if p.grad is None:
                    continue
                st = self._state[(group, p.name)]
                st.step += 1
                g = p.grad
                st.m += (1.0 - self.beta1) * (g - st.m)
                st.v += (1.0 - self.beta2) * (g * g - st.v)
                mhat = st.m / (1.0 - self.beta1 ** st.step)
                vhat = st.v / (1.0 - self.beta2 ** st.step)
                p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
                if not np.all(np.isfinite(p.data)):
                    raise NumericError(f"parameter {group}/{p.name} became non-finite")
