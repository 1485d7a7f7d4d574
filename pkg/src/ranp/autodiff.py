"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every primitive is a pair of pure functions (forward, vector-Jacobian product)
registered under an op-id. A :class:`Tape` records one node per applied
primitive; values are computed eagerly. :func:`backward` walks the tape in
reverse and sums cotangents over fan-out.

Example:
    >>> tape = Tape()
    >>> x = tape.leaf(3.0)
    >>> y = x * x
    >>> float(backward(tape, y)[x])
    6.0
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float64


class AutodiffError(Exception):
    """Base class for errors raised by the engine."""


class ShapeError(AutodiffError, ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, shapes: Sequence[Tuple[int, ...]], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(AutodiffError, ValueError):
    """Input outside the mathematical domain of an op (log/sqrt of negatives)."""


class ContractError(AutodiffError, ValueError):
    """A caller violated a documented precondition."""


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Tuple[Optional[np.ndarray], ...]]
    n_inputs: Optional[int] = None  # None = variadic


PRIMITIVES: Dict[str, Primitive] = {}


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, *arrays: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        raise ShapeError(op, [a.shape for a in arrays], "trailing dimensions must align") from None


def _binary(name: str, fn, da, db):
    def fwd(a, b):
        _broadcast_shape(name, a, b)
        return fn(a, b)

    def vjp(g, out, a, b):
        return unbroadcast(da(g, out, a, b), a.shape), unbroadcast(db(g, out, a, b), b.shape)

    PRIMITIVES[name] = Primitive(fwd, vjp, 2)


_binary("add", np.add, lambda g, o, a, b: g, lambda g, o, a, b: g)
_binary("sub", np.subtract, lambda g, o, a, b: g, lambda g, o, a, b: -g)
_binary("mul", np.multiply, lambda g, o, a, b: g * b, lambda g, o, a, b: g * a)
_binary("div", np.divide, lambda g, o, a, b: g / b, lambda g, o, a, b: -g * o / b)


def _unary(name: str, fn, d):
    PRIMITIVES[name] = Primitive(fn, lambda g, out, a: (d(g, out, a),), 1)


def _log(a):
    if np.any(a < 0):
        raise DomainError(f"log: negative input (min {a.min():.6g})")
    return np.log(a)


def _sqrt(a):
    if np.any(a < 0):
        raise DomainError(f"sqrt: negative input (min {a.min():.6g})")
    return np.sqrt(a)


def _sigmoid(a):
    # exact 0.5 at 0, no overflow warnings
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _softplus(a):
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))


_unary("neg", np.negative, lambda g, o, a: -g)
_unary("exp", np.exp, lambda g, o, a: g * o)
_unary("log", _log, lambda g, o, a: g / a)
_unary("tanh", np.tanh, lambda g, o, a: g * (1.0 - o * o))
_unary("sigmoid", _sigmoid, lambda g, o, a: g * o * (1.0 - o))
_unary("softplus", _softplus, lambda g, o, a: g * _sigmoid(a))
_unary("square", np.square, lambda g, o, a: 2.0 * g * a)
_unary("sqrt", _sqrt, lambda g, o, a: g / (2.0 * o))
_unary("abs", np.abs, lambda g, o, a: g * np.sign(a))


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", [a.shape, b.shape], "operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape], "inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", [a.shape, b.shape], "batch dimensions") from None
    return np.matmul(a, b)


def _matmul_vjp(g, out, a, b):
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


PRIMITIVES["matmul"] = Primitive(_matmul_fwd, _matmul_vjp, 2)


def _expand_reduced(g, a, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * a.ndim) if not keepdims else g, a.shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


PRIMITIVES["sum"] = Primitive(
    lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
    lambda g, out, a, axis=None, keepdims=False: (_expand_reduced(g, a, axis, keepdims).copy(),),
    1,
)


def _count(a, axis):
    if axis is None:
        return a.size
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([a.shape[i] for i in axes]))


PRIMITIVES["mean"] = Primitive(
    lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims),
    lambda g, out, a, axis=None, keepdims=False: (
        _expand_reduced(g, a, axis, keepdims) / _count(a, axis),
    ),
    1,
)


def _max_vjp(g, out, a, axis=None, keepdims=False):
    o = _expand_reduced(out, a, axis, keepdims)
    mask = (a == o).astype(DTYPE)
    # ties share the cotangent equally
    counts = np.sum(mask, axis=axis, keepdims=True)
    return (_expand_reduced(g, a, axis, keepdims) * mask / counts,)


PRIMITIVES["max"] = Primitive(
    lambda a, axis=None, keepdims=False: np.max(a, axis=axis, keepdims=keepdims), _max_vjp, 1
)


def _softmax_fwd(a, axis=-1):
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


PRIMITIVES["softmax"] = Primitive(
    _softmax_fwd,
    lambda g, out, a, axis=-1: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),),
    1,
)


def _concat_fwd(*arrays, axis=-1):
    try:
        return np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError("concat", [a.shape for a in arrays], f"axis={axis}") from None


def _concat_vjp(g, out, *arrays, axis=-1):
    sizes = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


PRIMITIVES["concat"] = Primitive(_concat_fwd, _concat_vjp, None)


def _slice_fwd(a, index):
    return np.array(a[index])


def _slice_vjp(g, out, a, index):
    ga = np.zeros_like(a)
    ga[index] = g  # basic indexing only, so no duplicate targets
    return (ga,)


PRIMITIVES["slice"] = Primitive(_slice_fwd, _slice_vjp, 1)


def _reshape_fwd(a, shape):
    try:
        return a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [a.shape, tuple(shape)]) from None


PRIMITIVES["reshape"] = Primitive(
    _reshape_fwd, lambda g, out, a, shape: (g.reshape(a.shape),), 1
)


def _broadcast_fwd(a, shape):
    try:
        return np.array(np.broadcast_to(a, shape))
    except ValueError:
        raise ShapeError("broadcast", [a.shape, tuple(shape)]) from None


PRIMITIVES["broadcast"] = Primitive(
    _broadcast_fwd, lambda g, out, a, shape: (unbroadcast(g, a.shape),), 1
)


def _transpose_fwd(a, axes=None):
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", [a.shape], f"bad axes {axes}")
    return np.transpose(a, axes)


def _transpose_vjp(g, out, a, axes=None):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


PRIMITIVES["transpose"] = Primitive(_transpose_fwd, _transpose_vjp, 1)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str  # "leaf" for inputs
    inputs: Tuple[int, ...]
    attrs: Dict[str, Any]
    value: np.ndarray
    requires_grad: bool


class Tape:
    """Append-only record of a computation.

    Node inputs always refer to earlier indices, so the node list is a
    topological order. A tape is owned by one thread.
    """

    def __init__(self, dtype=DTYPE) -> None:
        self.nodes: List[Node] = []
        self.dtype = np.dtype(dtype)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True) -> "Var":
        arr = np.array(value, dtype=self.dtype)
        self.nodes.append(Node("leaf", (), {}, arr, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> "Var":
        return self.leaf(value, requires_grad=False)

    def apply(self, op: str, *inputs: "Var", **attrs) -> "Var":
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise ContractError(f"unknown primitive {op!r}")
        if prim.n_inputs is not None and len(inputs) != prim.n_inputs:
            raise ContractError(f"{op} takes {prim.n_inputs} inputs, got {len(inputs)}")
        for v in inputs:
            if v.tape is not self:
                raise ContractError(f"{op}: input recorded on a different tape")
        vals = [self.nodes[v.index].value for v in inputs]
        out = np.asarray(prim.forward(*vals, **attrs), dtype=self.dtype)
        rg = any(self.nodes[v.index].requires_grad for v in inputs)
        self.nodes.append(Node(op, tuple(v.index for v in inputs), attrs, out, rg))
        return Var(self, len(self.nodes) - 1)

    def replay(self, leaf_values: Optional[Dict[int, np.ndarray]] = None) -> List[np.ndarray]:
        """Recompute every node value from the leaves (optionally overridden)."""
        leaf_values = leaf_values or {}
        values: List[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                values.append(np.array(leaf_values.get(i, node.value), dtype=self.dtype))
            else:
                prim = PRIMITIVES[node.op]
                args = [values[j] for j in node.inputs]
                values.append(np.asarray(prim.forward(*args, **node.attrs), dtype=self.dtype))
        return values


def _as_var(tape: Tape, x) -> "Var":
    if isinstance(x, Var):
        return x
    return tape.const(x)


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.shape})"

    def _bin(self, op, other, reverse=False):
        other = _as_var(self.tape, other)
        return self.tape.apply(op, other, self) if reverse else self.tape.apply(op, self, other)

    def __add__(self, o):
        return self._bin("add", o)

    def __radd__(self, o):
        return self._bin("add", o, True)

    def __sub__(self, o):
        return self._bin("sub", o)

    def __rsub__(self, o):
        return self._bin("sub", o, True)

    def __mul__(self, o):
        return self._bin("mul", o)

    def __rmul__(self, o):
        return self._bin("mul", o, True)

    def __truediv__(self, o):
        return self._bin("div", o)

    def __rtruediv__(self, o):
        return self._bin("div", o, True)

    def __matmul__(self, o):
        return self._bin("matmul", o)

    def __rmatmul__(self, o):
        return self._bin("matmul", o, True)

    def __neg__(self):
        return self.tape.apply("neg", self)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


# ---------------------------------------------------------------------------
# functional API


def apply_primitive(op: str, inputs: Sequence[Var], **attrs) -> Var:
    if not inputs:
        raise ContractError(f"{op}: no inputs")
    return inputs[0].tape.apply(op, *inputs, **attrs)


def matmul(a: Var, b: Var) -> Var:
    return a.tape.apply("matmul", a, _as_var(a.tape, b))


def exp(a: Var) -> Var:
    return a.tape.apply("exp", a)


def log(a: Var) -> Var:
    return a.tape.apply("log", a)


def tanh(a: Var) -> Var:
    return a.tape.apply("tanh", a)


def sigmoid(a: Var) -> Var:
    return a.tape.apply("sigmoid", a)


def softplus(a: Var) -> Var:
    return a.tape.apply("softplus", a)


def square(a: Var) -> Var:
    return a.tape.apply("square", a)


def sqrt(a: Var) -> Var:
    return a.tape.apply("sqrt", a)


def abs_(a: Var) -> Var:
    return a.tape.apply("abs", a)


def _norm_axis(axis):
    if isinstance(axis, list):
        return tuple(axis)
    return axis


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    return a.tape.apply("sum", a, axis=_norm_axis(axis), keepdims=keepdims)


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    return a.tape.apply("mean", a, axis=_norm_axis(axis), keepdims=keepdims)


def max_(a: Var, axis=None, keepdims: bool = False) -> Var:
    return a.tape.apply("max", a, axis=_norm_axis(axis), keepdims=keepdims)


def softmax(a: Var, axis: int = -1) -> Var:
    return a.tape.apply("softmax", a, axis=axis)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    tape = parts[0].tape
    return tape.apply("concat", *[_as_var(tape, p) for p in parts], axis=axis)


def slice_(a: Var, index) -> Var:
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not (isinstance(ix, (int, np.integer, slice)) or ix is Ellipsis):
            raise ContractError("slice: only basic indexing (ints, slices, ...) is differentiable")
    return a.tape.apply("slice", a, index=index)


def reshape(a: Var, shape) -> Var:
    return a.tape.apply("reshape", a, shape=tuple(shape))


def broadcast(a: Var, shape) -> Var:
    return a.tape.apply("broadcast", a, shape=tuple(shape))


def transpose(a: Var, axes=None) -> Var:
    return a.tape.apply("transpose", a, axes=None if axes is None else tuple(axes))


def swap_last(a: Var) -> Var:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# ---------------------------------------------------------------------------
# reverse pass


class GradientMap:
    """Gradients keyed by node; nodes the root does not depend on map to zeros."""

    def __init__(self, tape: Tape, grads: Dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key) -> np.ndarray:
        idx = key.index if isinstance(key, Var) else int(key)
        g = self._grads.get(idx)
        if g is None:
            return np.zeros_like(self._tape.nodes[idx].value)
        return g

    def __contains__(self, key) -> bool:
        idx = key.index if isinstance(key, Var) else int(key)
        return idx in self._grads


def backward(tape: Tape, root: Var) -> GradientMap:
    """Reverse-mode sweep from a scalar root."""
    if root.tape is not tape:
        raise ContractError("backward: root belongs to another tape")
    rv = root.value
    if rv.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {rv.shape}")
    if not np.all(np.isfinite(rv)):
        raise ContractError("backward: root value is not finite")
    grads: Dict[int, np.ndarray] = {root.index: np.ones_like(rv)}
    nodes = tape.nodes
    for i in range(root.index, -1, -1):
        g = grads.get(i)
        node = nodes[i]
        if g is None or node.op == "leaf" or not node.requires_grad:
            continue
        prim = PRIMITIVES[node.op]
        args = [nodes[j].value for j in node.inputs]
        in_grads = prim.vjp(g, node.value, *args, **node.attrs)
        for j, gj in zip(node.inputs, in_grads):
            if gj is None or not nodes[j].requires_grad:
                continue
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = np.array(gj, dtype=DTYPE)
    return GradientMap(tape, grads)


# ---------------------------------------------------------------------------
# parameters


_MAGIC = b"RANPPS"
_VERSION = 1


class ParamStore:
    """Named float64 parameters with stable insertion order."""

    def __init__(self, items: Optional[Iterable[Tuple[str, np.ndarray]]] = None):
        self._params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, value in items or ():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._params[name] = np.array(value, dtype=DTYPE)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._params:
            raise KeyError(name)
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self._params[name].shape:
            raise ShapeError("param-assign", [self._params[name].shape, value.shape])
        self._params[name] = value.copy()

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def size(self) -> int:
        return int(sum(v.size for v in self._params.values()))

    def copy(self) -> "ParamStore":
        return ParamStore((k, v.copy()) for k, v in self._params.items())

    def bind(self, tape: "Tape") -> Dict[str, Var]:
        """Record every parameter as a leaf of ``tape``."""
        return {k: tape.leaf(v) for k, v in self._params.items()}

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self._params.items()}

    def to_bytes(self) -> bytes:
        out = [_MAGIC, struct.pack("<BI", _VERSION, len(self._params))]
        for name, value in self._params.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
            out.append(struct.pack("<B", value.ndim))
            out.append(struct.pack(f"<{value.ndim}Q", *value.shape))
            out.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        if not data.startswith(_MAGIC):
            raise ValueError("not a parameter store (bad magic)")
        pos = len(_MAGIC)
        version, count = struct.unpack_from("<BI", data, pos)
        if version != _VERSION:
            raise ValueError(f"unsupported parameter store version {version}")
        pos += struct.calcsize("<BI")
        store = cls()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count_el = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=count_el, offset=pos).reshape(dims)
            pos += 8 * count_el
            store.add(name, arr.astype(DTYPE))
        if pos != len(data):
            raise ValueError("trailing bytes after parameter store")
        return store


# ---------------------------------------------------------------------------
# finite-difference check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: Optional[str]
    worst_index: Optional[Tuple[int, ...]]
    ad: float
    fd: float
    n_coords: int
    errors: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


def gradient_check(
    fn: Callable[[Tape, Dict[str, Var]], Var],
    params: ParamStore,
    eps: float = 1e-5,
    names: Optional[Sequence[str]] = None,
    fd_dtype=DTYPE,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` builds a scalar on the given tape from bound parameters. It must be
    deterministic (fix any noise outside of it). Relative error per coordinate
    is ``|ad - fd| / max(1e-8, |ad| + |fd|)``.

    Reverse mode always runs in float64. ``fd_dtype=np.longdouble`` evaluates
    the perturbed forward passes in extended precision, which keeps the
    difference quotient meaningful for gradients near 1e-9 where float64
    cancellation error (~1e-16 / eps) would dominate.
    """
    if eps <= 0:
        raise ContractError("gradient_check: eps must be positive")
    tape = Tape()
    bound = params.bind(tape)
    root = fn(tape, bound)
    grads = backward(tape, root)

    def value_at(name, idx, delta):
        t = Tape(fd_dtype)
        bound_fd = params.bind(t)
        leaf = t.nodes[bound_fd[name].index]
        leaf.value = leaf.value.copy()
        leaf.value[idx] += delta
        v = fn(t, bound_fd).value.item()
        if not np.isfinite(v):
            raise NonFiniteError(f"non-finite function value at {name}{list(idx)}")
        return v

    worst = (0.0, None, None, 0.0, 0.0)
    errors = {}
    n = 0
    for name in names or params.names():
        ad_all = grads[bound[name]]
        err = np.zeros_like(ad_all)
        for idx in np.ndindex(*params[name].shape):
            fd = (value_at(name, idx, eps) - value_at(name, idx, -eps)) / (2 * eps)
            ad = float(ad_all[idx])
            rel = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
            err[idx] = rel
            n += 1
            if rel > worst[0] or worst[1] is None:
                worst = (rel, name, idx, ad, fd)
        errors[name] = err
    return GradCheckReport(worst[0], worst[1], worst[2], worst[3], worst[4], n, errors)
