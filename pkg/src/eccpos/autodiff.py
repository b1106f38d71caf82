"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every network in the package (edge encoder/decoder, attention fusion, LSTM,
regression head) is written against the :class:`Tensor` type defined here.
Graphs are built on the fly by calling the primitive functions; calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates gradients.

All values are float64.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteGradientError",
    "Tensor",
    "ParamSet",
    "Adam",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tanh",
    "sigmoid",
    "relu",
    "sqrt",
    "softmax",
    "concat",
    "reshape",
    "transpose",
    "getitem",
    "tensor_sum",
    "tensor_mean",
    "lstm_cell",
    "ste_quantize",
    "forward_backward",
    "glorot_uniform",
    "save_params",
    "load_params",
]


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN or inf."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class Tensor:
    """A float64 array node in a dynamically built computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    # make numpy defer to the reflected operators below (``ndarray @ Tensor``)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        ``self`` must be a scalar unless an explicit ``seed`` is given.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() on non-scalar node {self.op!r} "
                                 f"of shape {self.shape}")
            seed = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op, parents, backward) -> Tensor:
    if not any(_needs_grad(p) for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, op=op, parents=parents, backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape} "
                         f"(operands from {a.op!r} and {b.op!r})") from None


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _node(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = constant(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (operands of rank >= 2)."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape} "
                         f"(operands from {a.op!r} and {b.op!r})")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc} for {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, "matmul", (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------

def tanh(a) -> Tensor:
    a = constant(a)
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = constant(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.data > 0
    return _node(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def sqrt(a) -> Tensor:
    a = constant(a)
    out = np.sqrt(a.data)
    return _node(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (row-wise by default)."""
    a = constant(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, "softmax", (a,), backward)


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [constant(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref))
                                     if i != ax):
            raise ShapeError(f"concat: shape {t.shape} from {t.op!r} does not match "
                             f"{ref} outside axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax)
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(out, "concat", tuple(ts), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = constant(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} from {a.op!r} "
                         f"into {tuple(shape)}") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = constant(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inverse),))


def getitem(a, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = constant(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _node(out, "slice", (a,), backward)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, "sum", (a,), backward)


def tensor_mean(a, axis=None) -> Tensor:
    a = constant(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tensor_sum(a, axis=axis) / float(n)


# ---------------------------------------------------------------------------
# composites and special nodes
# ---------------------------------------------------------------------------

def lstm_cell(x: Tensor, s: Tensor, c: Tensor, weight: Tensor, bias: Tensor):
    """One LSTM step. Gate order in ``weight`` columns: input, forget, cell, output.

    ``weight`` has shape (in + hidden, 4 * hidden) and acts on ``[x, s]``.
    Returns the new (hidden, cell) pair.
    """
    h = s.shape[-1]
    z = matmul(concat([x, s], axis=-1), weight) + bias
    i = sigmoid(z[..., 0:h])
    f = sigmoid(z[..., h:2 * h])
    g = tanh(z[..., 2 * h:3 * h])
    o = sigmoid(z[..., 3 * h:4 * h])
    c_new = f * c + i * g
    return o * tanh(c_new), c_new


def ste_quantize(y, n_bits: int, step: float) -> Tensor:
    """Midrise quantizer with a straight-through backward pass.

    Forward values equal :func:`eccpos.fronthaul.quantize`. The backward pass
    forwards the upstream gradient where ``|y| <= A`` and blocks it elsewhere,
    with ``A = (2**n_bits - 1) * step / 2``.
    """
    from .fronthaul import QuantizerConfig, quantize

    y = constant(y)
    cfg = QuantizerConfig(n_bits, step)
    inside = np.abs(y.data) <= cfg.amplitude
    return _node(quantize(y.data, cfg), "ste_quantize", (y,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# parameters and optimization
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...] | None = None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class ParamSet:
    """Named, ordered trainable tensors plus Adam moment buffers."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, op=name)
        self._params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def subset(self, prefix: str) -> "ParamSet":
        """A view sharing tensors (and moments) whose names start with ``prefix``."""
        out = ParamSet()
        for name, t in self._params.items():
            if name.startswith(prefix):
                out._params[name] = t
                out.m[name] = self.m[name]
                out.v[name] = self.v[name]
        return out

    def merge(self, other: "ParamSet") -> "ParamSet":
        out = ParamSet()
        for src in (self, other):
            for name, t in src._params.items():
                if name in out._params:
                    raise KeyError(f"duplicate parameter name {name!r}")
                out._params[name] = t
                out.m[name] = src.m[name]
                out.v[name] = src.v[name]
        return out

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in self._params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]):
        for name, v in values.items():
            t = self._params[name]
            if t.shape != np.shape(v):
                raise ShapeError(f"parameter {name!r}: checkpoint shape {np.shape(v)} "
                                 f"!= {t.shape}")
            t.data = np.array(v, dtype=np.float64)


class Adam:
    """Adam with bias correction. Defaults follow common practice."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, params: ParamSet, grads: dict[str, np.ndarray] | None = None) -> ParamSet:
        """Apply one update in place and return ``params``.

        No parameter is touched if any gradient is non-finite.
        """
        grads = params.grads() if grads is None else grads
        for name in params:
            if name in grads and not np.all(np.isfinite(grads[name])):
                raise NonFiniteGradientError(name)
        params.step += 1
        t = params.step
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            if name not in grads:
                continue
            g = grads[name]
            m = params.m[name]
            v = params.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def forward_backward(fn: Callable[..., Tensor | Sequence[Tensor]],
                     inputs: Iterable, params: ParamSet):
    """Run ``fn(*inputs)``, backpropagate its first output, collect gradients.

    The first output must be a scalar loss. Returns ``(outputs, grads)`` where
    ``grads`` maps parameter names to arrays of the parameter's shape.
    """
    params.zero_grad()
    outputs = fn(*inputs)
    if isinstance(outputs, Tensor):
        outputs = (outputs,)
    outputs[0].backward()
    return tuple(outputs), params.grads()


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

PARAM_MAGIC = b"ECCPARAM"
PARAM_VERSION = 1


def save_params(path, values: dict[str, np.ndarray]):
    """Write parameters as ``ECCPARAM`` records (little-endian float64)."""
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<B", PARAM_VERSION))
        for name, arr in values.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if buf[8] != PARAM_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {buf[8]}")
    pos = 9
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    while pos < len(buf):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        rank = buf[pos]
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    return out
