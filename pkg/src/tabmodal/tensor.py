"""Dense tensors with reverse-mode automatic differentiation.

The design is a classic gradient tape:

* ``Tensor`` is an immutable value wrapping a read-only numpy array.
* While a ``Tape`` is active, every primitive applied to a tracked tensor
  appends a node holding the primitive id, references to its parent nodes
  and a closure that maps the output gradient to input gradients.
* ``backward`` walks the tape once in reverse and returns a mapping from
  leaf-parameter names to gradient tensors.

Compute precision is a process-global setting (``float32`` for training,
``float64`` for gradient checking); see :func:`set_default_dtype` and the
:func:`precision` context manager.

Any primitive whose output contains NaN or Inf raises :class:`NumericError`
immediately; non-finite values are never silently propagated.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np



def _contig(a) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d to 1-d; this keeps scalar shapes intact
    a = np.asarray(a)
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)

class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the primitive (log/sqrt/power)."""


class NumericError(ArithmeticError):
    """A primitive produced NaN or Inf."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


def _tls():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float64
        _state.tapes = []
    return _state


def set_default_dtype(name: str) -> None:
    """Set the process-wide compute dtype: "float32" or "float64"."""
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _tls().dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_tls().dtype)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default compute dtype."""
    tls = _tls()
    saved = tls.dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        tls.dtype = saved


class Tensor:
    """Immutable dense N-d array of floats (row-major)."""

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: take ownership of a freshly computed array, no copy
        t = object.__new__(cls)
        arr.setflags(write=False)
        t._data = arr
        return t

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._data

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self._data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self._data.dtype})"


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def scalar(value: float) -> Tensor:
    return Tensor(np.asarray(value))


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=get_default_dtype()))


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=get_default_dtype()))


class _Node:
    __slots__ = ("op", "parents", "vjp", "out", "grad")

    def __init__(self, op, parents, vjp, out):
        self.op = op
        self.parents = parents  # tuple of _Node or None, aligned with inputs
        self.vjp = vjp          # grad_out -> tuple of grad_in arrays (None for constants)
        self.out = out          # keep output tensor alive so id() keys stay unique
        self.grad = None


class Tape:
    """Recorded computation for one reverse-mode differentiation pass.

    Confined to a single thread; independent tapes may run in parallel.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._by_id: dict[int, _Node] = {}
        self._params: dict[str, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tls().tapes.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tls().tapes.pop()
        assert popped is self

    def param(self, name: str, t: Tensor) -> Tensor:
        """Register a leaf parameter under a unique name."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice")
        self._params[name] = t
        if id(t) not in self._by_id:
            node = _Node("leaf", (), None, t)
            self._nodes.append(node)
            self._by_id[id(t)] = node
        return t

    @property
    def params(self) -> dict:
        return dict(self._params)

    def node_of(self, t: Tensor):
        return self._by_id.get(id(t))

    def _track(self, op, out: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        parents = tuple(self._by_id.get(id(x)) for x in inputs)
        if not any(p is not None for p in parents):
            return
        node = _Node(op, parents, vjp, out)
        self._nodes.append(node)
        self._by_id[id(out)] = node


def active_tape() -> Tape | None:
    tapes = _tls().tapes
    return tapes[-1] if tapes else None


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Gradient of a scalar loss w.r.t. every leaf parameter on the tape.

    Leaves that do not influence the loss get zero gradients.
    """
    if loss.size != 1 or loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    root = tape.node_of(loss)
    if root is None:
        raise ValueError("loss was not produced under this tape")
    for node in tape._nodes:
        node.grad = None
    root.grad = np.ones((), dtype=loss.dtype)
    for node in reversed(tape._nodes):
        g = node.grad
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            if parent.grad is None:
                parent.grad = pg.copy() if pg.base is not None else pg
            else:
                parent.grad = parent.grad + pg
    out = {}
    for name, t in tape._params.items():
        node = tape.node_of(t)
        g = node.grad if node.grad is not None else np.zeros(t.shape, dtype=t.dtype)
        out[name] = Tensor._wrap(_contig(g))
    return out


def _finished(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: output contains NaN/Inf")
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None:
        tape._track(op, t, inputs, vjp)
    return t


def _check_tensor(op, *ts):
    for t in ts:
        if not isinstance(t, Tensor):
            raise TypeError(f"{op}: expected Tensor, got {type(t).__name__}")


# ---------------------------------------------------------------------------
# elementwise binary ops: broadcasting restricted to scalar operands or
# leading-dimension expansion (smaller shape == trailing suffix of larger)


def _broadcast_shapes(op, a: Tensor, b: Tensor) -> tuple:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return sa if sa != () else sb
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform "
                     "(broadcast is scalar or leading-dimension only)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor("add", a, b)
    _broadcast_shapes("add", a, b)
    out = a._data + b._data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _finished("add", out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor("sub", a, b)
    _broadcast_shapes("sub", a, b)
    out = a._data - b._data

    def vjp(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _finished("sub", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor("mul", a, b)
    _broadcast_shapes("mul", a, b)
    out = a._data * b._data

    def vjp(g):
        return _reduce_to(g * b._data, a.shape), _reduce_to(g * a._data, b.shape)

    return _finished("mul", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    """Composition helper: 0 - a."""
    return sub(scalar(0.0), a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_tensor("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a._data @ b._data

    def vjp(g):
        return g @ b._data.T, a._data.T @ g

    return _finished("matmul", out, (a, b), vjp)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) of x:[B,Cin,S] with w:[Cout,Cin,k]."""
    _check_tensor("conv1d", x, w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: shapes {x.shape} and {w.shape} do not conform")
    if stride < 1 or pad < 0:
        raise ValueError("conv1d: stride must be >= 1 and pad >= 0")
    batch, c_in, length = x.shape
    c_out, _, k = w.shape
    if length + 2 * pad < k:
        raise ShapeError(f"conv1d: kernel {k} longer than padded input {length + 2 * pad}")
    s_out = (length + 2 * pad - k) // stride + 1
    xp = np.pad(x._data, ((0, 0), (0, 0), (pad, pad))) if pad else x._data
    # windows: [B, Cin, S_out, k]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    out = np.einsum("bcok,dck->bdo", win, w._data, optimize=True)
    out = _contig(np.asarray(out, dtype=x.dtype))

    def vjp(g):
        gw = np.einsum("bdo,bcok->dck", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + stride * s_out:stride] += np.einsum(
                "bdo,dc->bco", g, w._data[:, :, j], optimize=True)
        gx = gxp[:, :, pad:pad + length] if pad else gxp
        return _contig(gx), gw

    return _finished("conv1d", out, (x, w), vjp)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(op, axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % ndim for a in axes)
    if len(set(axes)) != len(axes):
        raise ValueError(f"{op}: repeated axis in {axis}")
    return tuple(sorted(axes))


def _expand(g: np.ndarray, axes: tuple, shape: tuple) -> np.ndarray:
    for a in axes:
        g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None) -> Tensor:
    _check_tensor("sum", x)
    axes = _norm_axes("sum", axis, x.ndim)
    out = x._data.sum(axis=axes)

    def vjp(g):
        return (_contig(_expand(g, axes, x.shape)),)

    return _finished("sum", np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    _check_tensor("mean", x)
    axes = _norm_axes("mean", axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = x._data.mean(axis=axes)

    def vjp(g):
        return (_contig(_expand(g, axes, x.shape)) / count,)

    return _finished("mean", np.asarray(out), (x,), vjp)


def max_(x: Tensor, axis=None) -> Tensor:
    _check_tensor("max", x)
    axes = _norm_axes("max", axis, x.ndim)
    out = x._data.max(axis=axes)

    def vjp(g):
        full = _expand(np.asarray(out), axes, x.shape)
        mask = (x._data == full)
        counts = mask.sum(axis=axes)
        share = _expand(g / counts, axes, x.shape)
        return (_contig(mask * share),)

    return _finished("max", np.asarray(out), (x,), vjp)


# ---------------------------------------------------------------------------
# elementwise unary ops


def relu(x: Tensor) -> Tensor:
    _check_tensor("relu", x)
    out = np.maximum(x._data, 0)

    def vjp(g):
        return (g * (x._data > 0),)

    return _finished("relu", out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    _check_tensor("sigmoid", x)
    # stable in both tails
    out = np.empty_like(x._data)
    pos = x._data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x._data[pos]))
    ex = np.exp(x._data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _finished("sigmoid", out, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    _check_tensor("tanh", x)
    out = np.tanh(x._data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _finished("tanh", out, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    _check_tensor("exp", x)
    out = np.exp(x._data)

    def vjp(g):
        return (g * out,)

    return _finished("exp", out, (x,), vjp)


def log(x: Tensor) -> Tensor:
    _check_tensor("log", x)
    if np.any(x._data <= 0):
        raise DomainError("log: input must be strictly positive")
    out = np.log(x._data)

    def vjp(g):
        return (g / x._data,)

    return _finished("log", out, (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    _check_tensor("sqrt", x)
    if np.any(x._data < 0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(x._data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _finished("sqrt", out, (x,), vjp)


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise x**p with a constant exponent."""
    _check_tensor("power", x)
    p = float(p)
    if p != int(p) and np.any(x._data < 0):
        raise DomainError(f"power: negative base with non-integer exponent {p}")
    out = np.power(x._data, p)

    def vjp(g):
        return (g * p * np.power(x._data, p - 1.0),)

    return _finished("power", out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalizations over an axis


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_tensor("softmax", x)
    axis = axis % x.ndim
    z = x._data - x._data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _finished("softmax", out, (x,), vjp)


def log_sum_exp(x: Tensor, axis: int = -1) -> Tensor:
    _check_tensor("log_sum_exp", x)
    axis = axis % x.ndim
    m = x._data.max(axis=axis, keepdims=True)
    s = np.exp(x._data - m).sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def vjp(g):
        soft = np.exp(x._data - m) / s
        return (np.expand_dims(g, axis) * soft,)

    return _finished("log_sum_exp", np.asarray(out), (x,), vjp)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    _check_tensor("l2_normalize", x)
    axis = axis % x.ndim
    norm = np.sqrt(np.square(x._data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    out = x._data / safe

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        # below the clamp the denominator is a constant, so the map is linear
        live = (norm > eps)
        return ((g - live * out * dot) / safe,)

    return _finished("l2_normalize", out, (x,), vjp)


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check_tensor("concat", *tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim:
            raise ShapeError("concat: rank mismatch")
        for a in range(t.ndim):
            if a != axis and t.shape[a] != tensors[0].shape[a]:
                raise ShapeError(f"concat: shapes {[u.shape for u in tensors]} "
                                 f"do not conform along axis {axis}")
    out = np.concatenate([t._data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(_contig(g[tuple(sl)]))
        return tuple(pieces)

    return _finished("concat", out, tensors, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    _check_tensor("reshape", x)
    try:
        out = x._data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {x.shape} -> {tuple(shape)}: {e}") from None
    out = _contig(out)

    def vjp(g):
        return (_contig(g.reshape(x.shape)),)

    return _finished("reshape", out, (x,), vjp)


def transpose(x: Tensor, axes=None) -> Tensor:
    _check_tensor("transpose", x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {x.shape}")
    out = _contig(x._data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (_contig(g.transpose(inverse)),)

    return _finished("transpose", out, (x,), vjp)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    _check_tensor("slice", x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    out = _contig(x._data[tuple(sl)])

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[tuple(sl)] = g
        return (gx,)

    return _finished("slice", out, (x,), vjp)


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Expand size-1 axes and prepend leading axes; backward sums them out."""
    _check_tensor("broadcast_to", x)
    shape = tuple(shape)
    if len(shape) < x.ndim:
        raise ShapeError(f"broadcast_to: cannot shrink {x.shape} to {shape}")
    aligned = (1,) * (len(shape) - x.ndim) + x.shape
    for a, (have, want) in enumerate(zip(aligned, shape)):
        if have != want and have != 1:
            raise ShapeError(f"broadcast_to: {x.shape} incompatible with {shape} at axis {a}")
    out = _contig(np.broadcast_to(x._data, shape))
    summed = tuple(a for a, (have, want) in enumerate(zip(aligned, shape)) if have != want)

    def vjp(g):
        gx = g.sum(axis=summed, keepdims=True) if summed else g
        return (_contig(gx.reshape(x.shape)),)

    return _finished("broadcast_to", out, (x,), vjp)


def detach(x: Tensor) -> Tensor:
    """Cut the tensor out of the active tape (stop-gradient)."""
    return Tensor._wrap(x._data)


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv1d": conv1d,
    "sum": sum_,
    "mean": mean,
    "max": max_,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "power": power,
    "softmax": softmax,
    "log_sum_exp": log_sum_exp,
    "l2_normalize": l2_normalize,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_,
    "broadcast_to": broadcast_to,
}


def apply_primitive(op_id: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by id; records on the active tape like the named form."""
    try:
        fn = _PRIMITIVES[op_id]
    except KeyError:
        raise ValueError(f"unknown primitive {op_id!r}") from None
    if op_id == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Runs in float64 regardless of the ambient precision setting.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    with precision("float64"):
        x64 = Tensor(np.asarray(x.numpy(), dtype=np.float64))
        with Tape() as tape:
            xt = tape.param("x", x64)
            loss = f(xt)
        if loss.shape != ():
            raise ShapeError(f"grad_check: f must return a scalar, got {loss.shape}")
        if not np.isfinite(loss.numpy()):
            raise NumericError("grad_check: f returned a non-finite value")
        analytic = backward(tape, loss)["x"].numpy()

        base = np.asarray(x64.numpy(), dtype=np.float64)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            bump = np.array(flat)
            bump[i] = flat[i] + eps
            hi = f(Tensor(bump.reshape(base.shape))).item()
            bump[i] = flat[i] - eps
            lo = f(Tensor(bump.reshape(base.shape))).item()
            nflat[i] = (hi - lo) / (2.0 * eps)
        rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
        return float(rel.max()) if rel.size else 0.0
