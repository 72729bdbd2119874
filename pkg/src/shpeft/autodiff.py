"""Minimal dense tensor engine with reverse-mode automatic differentiation.

Every primitive is a plain function that computes its output with numpy and,
when any operand requires gradients, records a :class:`GraphNode` holding a
closure that maps the output gradient to input gradients.  The tape is
single-use: a graph is released after :func:`backward_pass` unless
``retain_graph=True`` is passed.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphNode",
    "DimensionError",
    "NumericError",
    "GraphConsumedError",
    "OracleInvalidError",
    "apply_primitive",
    "backward_pass",
    "finite_difference_gradient",
    "strict_finite",
    "matmul",
    "add",
    "sub",
    "multiply",
    "scale",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "l2_normalize",
    "cross_entropy_with_logits",
    "reshape",
    "transpose",
    "mean",
    "sum_",
    "getitem",
    "concat",
    "broadcast_to",
]

LAYER_NORM_EPS = 1e-5
L2_EPS = 1e-12
# tanh approximation of GELU
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class GraphConsumedError(RuntimeError):
    pass


class OracleInvalidError(RuntimeError):
    pass


_STRICT_FINITE = False


@contextlib.contextmanager
def strict_finite(enabled: bool = True):
    """Reject non-finite operands in every primitive while active."""
    global _STRICT_FINITE
    prev = _STRICT_FINITE
    _STRICT_FINITE = enabled
    try:
        yield
    finally:
        _STRICT_FINITE = prev


class GraphNode:
    __slots__ = ("op", "inputs", "backward", "consumed")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: GraphNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, **kwargs) -> None:
        backward_pass(self, **kwargs)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def mean(self, axis=None):
        return mean(self, axis)

    def sum(self, axis=None):
        return sum_(self, axis)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check(op: str, operands: Sequence[Tensor]) -> None:
    dtypes = {t.dtype for t in operands}
    if len(dtypes) > 1:
        raise DimensionError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")
    if _STRICT_FINITE:
        for t in operands:
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"{op}: non-finite operand of shape {t.shape}")


def _make(op: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = GraphNode(op, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check("matmul", (a, b))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch dims into rows: one GEMM instead of a batched sum
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), backward)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check("add", (a, b))
    _broadcast_shape("add", a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check("sub", (a, b))
    _broadcast_shape("sub", a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _make("sub", a.data - b.data, (a, b), backward)


def multiply(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check("multiply", (a, b))
    _broadcast_shape("multiply", a, b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make("multiply", a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    _check("scale", (a,))
    c = a.dtype.type(c)

    def backward(g):
        return (g * c,)

    return _make("scale", a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    _check("relu", (a,))
    pos = a.data > 0

    def backward(g):
        return (g * pos,)

    return _make("relu", a.data * pos, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    _check("gelu", (a,))
    x = a.data
    dt = x.dtype.type
    inner = dt(GELU_C) * (x + dt(GELU_A) * x * x * x)
    t = np.tanh(inner)
    out = dt(0.5) * x * (dt(1) + t)

    def backward(g):
        d_inner = dt(GELU_C) * (dt(1) + dt(3 * GELU_A) * x * x)
        d = dt(0.5) * (dt(1) + t) + dt(0.5) * x * (dt(1) - t * t) * d_inner
        return (g * d,)

    return _make("gelu", out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check("softmax", (a,))
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    _check("layer_norm", (x, gamma, beta))
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match feature dim {d}"
        )
    dt = x.dtype.type
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = dt(1) / np.sqrt(var + dt(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _make("layer_norm", out, (x, gamma, beta), backward)


def l2_normalize(x: Tensor, eps: float = L2_EPS) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    _check("l2_normalize", (x,))
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, x.dtype.type(eps))
    y = x.data / denom

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / denom,)

    return _make("l2_normalize", y, (x,), backward)


def cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy over the batch; ``targets`` are class indices."""
    _check("cross_entropy_with_logits", (logits,))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(
            f"cross_entropy_with_logits: logits {logits.shape} vs targets {targets.shape}"
        )
    n, c = logits.shape
    if n and (targets.min() < 0 or targets.max() >= c):
        raise DimensionError(f"cross_entropy_with_logits: target out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1
        return (p * (g / n),)

    return _make("cross_entropy_with_logits", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    _check("reshape", (a,))
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    _check("transpose", (a,))
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make("transpose", a.data.transpose(axes), (a,), backward)


def sum_(a: Tensor, axis=None) -> Tensor:
    _check("sum", (a,))
    out = np.asarray(a.data.sum(axis=axis, keepdims=True))

    def backward(g):
        return (np.broadcast_to(g.reshape(out.shape), a.shape).copy(),)

    squeezed = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    return _make("sum", np.asarray(squeezed), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    _check("mean", (a,))
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    keep = np.asarray(a.data.mean(axis=axis, keepdims=True))
    c = a.dtype.type(1.0 / count)

    def backward(g):
        return (np.broadcast_to(g.reshape(keep.shape) * c, a.shape).copy(),)

    out = keep.reshape(()) if axis is None else np.squeeze(keep, axis=axis)
    return _make("mean", np.asarray(out), (a,), backward)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing: ints, slices, Ellipsis, None."""
    _check("getitem", (a,))
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise DimensionError(f"getitem: {exc} for shape {a.shape}") from None

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make("getitem", np.array(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check("concat", tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tensors, backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    _check("broadcast_to", (a,))
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: {a.shape} -> {tuple(shape)}") from None

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _make("broadcast_to", out, (a,), backward)


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "multiply": multiply,
    "scale": scale,
    "relu": relu,
    "gelu": gelu,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "l2_normalize": l2_normalize,
    "cross_entropy_with_logits": cross_entropy_with_logits,
    "reshape": reshape,
    "transpose": transpose,
    "mean": mean,
    "sum": sum_,
    "getitem": getitem,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "broadcast_to": broadcast_to,
}


def apply_primitive(kind: str, *operands, **params) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("layer_norm", x, g, b, eps=1e-5)``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(_PRIMITIVES)}") from None
    return fn(*operands, **params)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward_pass(
    loss: Tensor,
    *,
    accumulate: bool = False,
    retain_graph: bool = False,
    leaves: Iterable[Tensor] | None = None,
) -> None:
    """Populate ``.grad`` on every leaf that requires gradients.

    Leaf grads are overwritten unless ``accumulate`` is set.  Leaves listed in
    ``leaves`` but not connected to ``loss`` receive zeros.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward_pass: loss must be scalar, got shape {loss.shape}")
    if loss.node is not None and loss.node.consumed:
        raise GraphConsumedError("graph already consumed by a previous backward pass; re-run forward")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reached: set[int] = set()
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                reached.add(id(t))
                if accumulate and t.grad is not None:
                    t.grad = t.grad + g
                else:
                    t.grad = np.array(g, dtype=t.dtype, copy=True)
            continue
        node = t.node
        if node.consumed:
            raise GraphConsumedError(f"node {node.op} already consumed; re-run forward")
        in_grads = node.backward(g)
        for parent, pg in zip(node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node.consumed = True
    if leaves is not None:
        for leaf in leaves:
            if id(leaf) not in reached and not (accumulate and leaf.grad is not None):
                leaf.grad = np.zeros_like(leaf.data)


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-4, check_repeats: int = 2
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a float64 array."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, copy=True)
    if h <= 0:
        raise ValueError("step h must be positive")
    base = [float(f(x.copy())) for _ in range(check_repeats)]
    if any(b != base[0] for b in base):
        raise OracleInvalidError("f is not deterministic: repeated evaluation differs")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x.copy()))
        flat[i] = orig - h
        fm = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
