"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Operations run eagerly. When at least one input belongs to the active
:class:`Tape`, the operation is appended to that tape together with a
closure that maps the output gradient to input gradients.  ``Tape.backward``
replays the record in reverse order.

Softmax-style ops subtract the (segment) maximum before exponentiating.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat",
    "constant",
    "exp",
    "gather_rows",
    "grad_check",
    "layer_norm",
    "leaky_relu",
    "log_softmax",
    "lstm_cell",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "scaled_dot_attention",
    "segment_sum",
    "slice_",
    "softmax",
    "sub",
    "sum_",
]

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's signature."""


class Tensor:
    """A float64 array, optionally registered as a node on a :class:`Tape`."""

    __slots__ = ("value", "node", "tape")

    def __init__(self, value, node: int | None = None, tape: "Tape | None" = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def recorded(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Entry:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Computation record for one forward/backward pass.

    Use as a context manager; ops executed inside record onto this tape.
    A tape can be differentiated once.  Records are thread-local, so separate
    threads can each run their own tape over shared read-only parameters.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.leaves: dict[int, str | None] = {}
        self._shapes: dict[int, tuple[int, ...]] = {}
        self._next = 0
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _new_node(self, shape) -> int:
        node = self._next
        self._next += 1
        self._shapes[node] = tuple(shape)
        return node

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register ``value`` as a differentiable leaf of this tape."""
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        arr = np.asarray(value.value if isinstance(value, Tensor) else value, dtype=np.float64)
        node = self._new_node(arr.shape)
        self.leaves[node] = name
        return Tensor(arr, node, self)

    def _record(self, kind, inputs, value, backward_fn) -> Tensor:
        node = self._new_node(value.shape)
        self.entries.append(_Entry(kind, tuple(inputs), node, backward_fn))
        return Tensor(value, node, self)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss`` for every node reached, zeros for unused leaves."""
        if self.consumed:
            raise RuntimeError("backward() called twice on the same tape")
        if loss.tape is not self:
            raise ValueError("loss was not produced by this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.value)}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output, None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None or t.node is None:
                    continue
                prev = grads.get(t.node)
                grads[t.node] = gi if prev is None else prev + gi
        out = {}
        for node in self.leaves:
            g = grads.get(node)
            out[node] = np.zeros(self._shapes[node]) if g is None else np.array(g, dtype=np.float64)
        self.consumed = True
        self.entries = []
        return out


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    if loss.tape is None:
        raise ValueError("loss is not recorded on any tape")
    return loss.tape.backward(loss)


def _emit(kind: str, inputs: Sequence[Tensor], value: np.ndarray, backward_fn: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{kind}: inputs belong to different tapes")
            tape = t.tape
    if tape is None or tape.consumed:
        return Tensor(value)
    return tape._record(kind, inputs, value, backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.value + b.value,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.value - b.value,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def relu(x) -> Tensor:
    x = constant(x)
    mask = x.value > 0
    return _emit("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = constant(x)
    scale = np.where(x.value > 0, 1.0, slope)
    return _emit("leaky_relu", (x,), x.value * scale, lambda g: (g * scale,))


def exp(x) -> Tensor:
    x = constant(x)
    y = np.exp(x.value)
    return _emit("exp", (x,), y, lambda g: (g * y,))


# --- linear algebra and shape --------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = constant(a), constant(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    av, bv = a.value, b.value

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), av @ bv, back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [constant(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].value.ndim
    for t in ts[1:]:
        if t.value.ndim != ts[0].value.ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.value.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _emit("concat", ts, np.concatenate([t.value for t in ts], axis=ax),
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def slice_(x, start: int, stop: int, axis: int = -1) -> Tensor:
    x = constant(x)
    ax = axis % x.value.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for extent {x.shape[ax]}")
    idx = [slice(None)] * x.value.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        out = np.zeros(x.shape)
        out[idx] = g
        return (out,)

    return _emit("slice", (x,), x.value[idx], back)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = constant(x)
    try:
        y = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _emit("reshape", (x,), y, lambda g: (g.reshape(x.shape),))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = constant(x)
    y = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), y, back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = constant(x)
    if x.value.size == 0:
        raise ShapeError("mean: empty input")
    n = x.value.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    y = x.value.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit("mean", (x,), y, back)


def gather_rows(x, index) -> Tensor:
    """Rows ``x[index]`` along axis 0; repeated indices accumulate in backward."""
    x = constant(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def back(g):
        out = np.zeros(x.shape)
        np.add.at(out, index, g)
        return (out,)

    return _emit("gather_rows", (x,), x.value[index], back)


def segment_sum(x, segments, num_segments: int) -> Tensor:
    """Sum rows of ``x`` that share a segment id; output has ``num_segments`` rows."""
    x = constant(x)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != x.shape[:1]:
        raise ShapeError(f"segment_sum: {segments.shape[0]} segment ids for {x.shape[0]} rows")
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, segments, x.value)
    return _emit("segment_sum", (x,), out, lambda g: (g[segments],))


# --- normalizers ----------------------------------------------------------


def _segment_max(v, segments, n):
    m = np.full((n,) + v.shape[1:], -np.inf)
    np.maximum.at(m, segments, v)
    return m


def _segment_total(v, segments, n):
    s = np.zeros((n,) + v.shape[1:])
    np.add.at(s, segments, v)
    return s


def _check_segments(kind, x, segments):
    segments = np.asarray(segments, dtype=np.int64)
    if x.value.ndim == 0 or x.shape[0] == 0:
        raise ShapeError(f"{kind}: empty axis")
    if segments.shape != x.shape[:1]:
        raise ShapeError(f"{kind}: {segments.shape[0]} segment ids for {x.shape[0]} rows")
    return segments, int(segments.max()) + 1


def softmax(x, axis: int = -1, segments=None) -> Tensor:
    """Softmax along ``axis``, or over rows grouped by ``segments`` ids."""
    x = constant(x)
    if segments is not None:
        segments, n = _check_segments("softmax", x, segments)
        z = np.exp(x.value - _segment_max(x.value, segments, n)[segments])
        p = z / _segment_total(z, segments, n)[segments]

        def back(g):
            return (p * (g - _segment_total(g * p, segments, n)[segments]),)

        return _emit("softmax", (x,), p, back)
    if x.value.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax: empty axis")
    z = np.exp(x.value - x.value.max(axis=axis, keepdims=True))
    p = z / z.sum(axis=axis, keepdims=True)
    return _emit("softmax", (x,), p,
                 lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1, segments=None) -> Tensor:
    x = constant(x)
    if segments is not None:
        segments, n = _check_segments("log_softmax", x, segments)
        shifted = x.value - _segment_max(x.value, segments, n)[segments]
        lse = np.log(_segment_total(np.exp(shifted), segments, n))
        y = shifted - lse[segments]
        p = np.exp(y)
        return _emit("log_softmax", (x,), y,
                     lambda g: (g - p * _segment_total(g, segments, n)[segments],))
    if x.value.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("log_softmax: empty axis")
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(y)
    return _emit("log_softmax", (x,), y, lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = constant(x), constant(gamma), constant(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gamma.shape} / bias {beta.shape} do not match feature extent {d}")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gamma.value

    def back(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gamma, beta), xhat * gv + beta.value, back)


# --- fused cells ----------------------------------------------------------


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def lstm_cell(x, h, c, weight, bias) -> Tensor:
    """One LSTM step; returns ``[h', c']`` concatenated on the last axis.

    ``weight`` has shape ``(in + hidden, 4 * hidden)`` with gate blocks in
    the order input, forget, candidate, output.
    """
    x, h, c, weight, bias = (constant(t) for t in (x, h, c, weight, bias))
    n_in, hid = x.shape[-1], h.shape[-1]
    if weight.shape != (n_in + hid, 4 * hid) or bias.shape != (4 * hid,) or c.shape != h.shape:
        raise ShapeError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape}, weight {weight.shape}, bias {bias.shape} inconsistent"
        )
    xh = np.concatenate([x.value, h.value], axis=-1)
    z = xh @ weight.value + bias.value
    i = _sigmoid(z[..., :hid])
    f = _sigmoid(z[..., hid:2 * hid])
    cand = np.tanh(z[..., 2 * hid:3 * hid])
    o = _sigmoid(z[..., 3 * hid:])
    c_new = f * c.value + i * cand
    tc = np.tanh(c_new)
    h_new = o * tc
    cv, wv = c.value, weight.value

    def back(g):
        gh, gc = g[..., :hid], g[..., hid:]
        gc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc * cand * i * (1.0 - i),
            gc * cv * f * (1.0 - f),
            gc * i * (1.0 - cand * cand),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        dxh = dz @ wv.T
        dw = xh.reshape(-1, n_in + hid).T @ dz.reshape(-1, 4 * hid)
        return dxh[..., :n_in], dxh[..., n_in:], gc * f, dw, dz.reshape(-1, 4 * hid).sum(axis=0)

    return _emit("lstm_cell", (x, h, c, weight, bias), np.concatenate([h_new, c_new], axis=-1), back)


def scaled_dot_attention(q, k, v, heads: int, key_mask=None) -> Tensor:
    """Multi-head scaled dot-product attention over ``(batch, length, dim)`` inputs.

    ``key_mask`` is a boolean ``(batch, length)`` array; False keys receive no
    weight.  Every query row must see at least one valid key.
    """
    q, k, v = constant(q), constant(k), constant(v)
    if q.value.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"scaled_dot_attention: expected equal (B, L, d) inputs, got {q.shape}, {k.shape}, {v.shape}")
    b, n, d = q.shape
    if d % heads:
        raise ShapeError(f"scaled_dot_attention: dim {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)

    def split(a):
        return a.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(b, n, d)

    qh, kh, vh = split(q.value), split(k.value), split(v.value)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (b, n):
            raise ShapeError(f"scaled_dot_attention: mask {key_mask.shape} != {(b, n)}")
        if not key_mask.any(axis=1).all():
            raise ShapeError("scaled_dot_attention: a sequence has no valid keys")
        s = np.where(key_mask[:, None, None, :], s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vh

    def back(g):
        gh = split(g)
        dv = p.transpose(0, 1, 3, 2) @ gh
        dp = gh @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        return merge(ds @ kh), merge(ds.transpose(0, 1, 3, 2) @ qh), merge(dv)

    return _emit("scaled_dot_attention", (q, k, v), merge(out), back)


# --- verification -----------------------------------------------------------


def grad_check(f: Callable[..., Tensor], x, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is an array or a sequence of arrays passed positionally to ``f``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    single = isinstance(x, (np.ndarray, float, int))
    xs = [np.array(x, dtype=np.float64)] if single else [np.array(a, dtype=np.float64) for a in x]
    with Tape() as tape:
        watched = [tape.watch(a) for a in xs]
        out = f(*watched)
    grads = tape.backward(out)
    worst = 0.0
    for w, a in zip(watched, xs):
        analytic = grads[w.node]
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(f(*[Tensor(v) for v in xs]).value)
            flat[i] = orig - epsilon
            lo = float(f(*[Tensor(v) for v in xs]).value)
            flat[i] = orig
            num = (hi - lo) / (2 * epsilon)
            an = analytic.reshape(-1)[i]
            worst = max(worst, abs(an - num) / (abs(an) + abs(num) + 1e-8))
    return worst
