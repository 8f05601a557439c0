"""Dense tensors with tape-based reverse-mode differentiation.

Every operation records itself on the active :class:`DiffGraph` (if any input
requires a gradient).  ``backward`` walks that tape once, newest node first.

Shapes never broadcast implicitly.  The two places where a row vector meets a
batch (bias addition and tiling a shared parameter over a batch) have their
own explicit ops, ``add_bias`` and ``expand_batch``.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "DiffGraph", "ShapeError", "NumericalError", "GraphError",
    "backward", "finite_difference_grad", "forward_op", "OP_IDS",
    "matmul", "add", "sub", "scalar_mul", "elementwise_mul", "div",
    "concat_along_sequence", "concat", "slice_sequence", "layer_norm", "gelu",
    "softmax", "mean", "sum_all", "l2_norm", "frobenius_inner_product",
    "sigmoid", "add_bias", "expand_batch", "reshape", "transpose", "select",
    "cross_entropy", "constant",
]


class ShapeError(ValueError):
    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericalError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GraphError(RuntimeError):
    pass


_local = threading.local()


def _active_graph() -> "DiffGraph | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class DiffGraph:
    """A tape of recorded operations.  Use as a context manager.

    One graph per training step; throw it away after ``backward``.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "DiffGraph":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, out: "Tensor", parents: tuple, fn: Callable) -> None:
        self.nodes.append((out, parents, fn))
        self._produced.add(id(out))

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """Immutable n-d array plus an optional handle into a :class:`DiffGraph`."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # thin operator sugar; each maps onto one op
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor) and other.size != 1:
            return elementwise_mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, parents: tuple, fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError(f"{op}: non-finite output")
    out = Tensor(data)
    graph = _active_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        graph._record(out, parents, fn)
    return out


def _lastsum(x: np.ndarray) -> np.ndarray:
    # numpy's axis=-1 reductions are slow for short rows; einsum is not
    return np.einsum("...i->...", x)[..., None]


def _lastdot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", x, y)[..., None]


def _lastmax(x: np.ndarray) -> np.ndarray:
    m = x
    while m.shape[-1] > 1:
        half = m.shape[-1] // 2
        top = np.maximum(m[..., :half], m[..., half:2 * half])
        if m.shape[-1] % 2:
            np.maximum(top[..., :1], m[..., -1:], out=top[..., :1])
        m = top
    return m


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, [a.shape, b.shape])


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., n, k) and ``b`` of shape (k, m) or (..., k, m).

    A 2-d right operand is the weight-matrix case and is shared across the
    leading dimensions of ``a``; otherwise leading dimensions must match.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", [a.shape, b.shape])
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", [a.shape, b.shape], "batch dims differ")
    ad, bd = a.data, b.data
    out = ad @ bd

    def grad(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", out, (a, b), grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` to every trailing block of ``x``; ``b.shape`` must equal ``x.shape[-b.ndim:]``."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError("add_bias", [x.shape, b.shape])
    lead = tuple(range(x.ndim - b.ndim))

    def grad(g):
        if not b.requires_grad:
            return g, None
        return g, g.sum(axis=lead) if lead else g

    return _emit("add_bias", x.data + b.data, (x, b), grad)


def expand_batch(x: Tensor, n: int) -> Tensor:
    """Tile ``x`` along a new leading axis of length ``n``."""
    out = np.broadcast_to(x.data, (n,) + x.shape)
    return _emit("expand_batch", out, (x,), lambda g: (g.sum(axis=0),))


def scalar_mul(x: Tensor, s) -> Tensor:
    """``s * x`` where ``s`` is a Python float or a single-element tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError("scalar_mul", [x.shape, s.shape], "multiplier must hold one element")
        sv = s.data.reshape(())
        xd = x.data

        def grad(g):
            return g * sv, np.reshape(np.sum(g * xd), s.shape)

        return _emit("scalar_mul", xd * sv, (x, s), grad)
    s = float(s)
    return _emit("scalar_mul", x.data * s, (x,), lambda g: (g * s,))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("elementwise_mul", a, b)
    ad, bd = a.data, b.data
    return _emit("elementwise_mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _emit("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat", [], "nothing to concatenate")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError("concat", [t.shape for t in tensors], f"axis={axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def grad(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", out, tuple(tensors), grad)


def concat_along_sequence(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the token axis (second to last)."""
    if any(t.ndim < 2 for t in tensors):
        raise ShapeError("concat_along_sequence", [t.shape for t in tensors])
    return concat(tensors, axis=-2)


def slice_sequence(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the token axis."""
    n = x.shape[-2]
    if not 0 <= start <= stop <= n:
        raise ShapeError("slice_sequence", [x.shape], f"range {start}:{stop}")
    out = x.data[..., start:stop, :]

    def grad(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop, :] = g
        return (full,)

    return _emit("slice_sequence", out, (x,), grad)


def select(x: Tensor, index: int) -> Tensor:
    """``x[index]`` along the first axis."""
    if not 0 <= index < x.shape[0]:
        raise ShapeError("select", [x.shape], f"index {index}")

    def grad(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _emit("select", x.data[index], (x,), grad)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _emit("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then optionally scale and shift."""
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError("layer_norm", [x.shape, p.shape])
    xd = x.data
    xc = xd - _lastsum(xd) * (1.0 / d)
    var = _lastdot(xc, xc)
    var *= 1.0 / d
    var += eps
    rstd = 1.0 / np.sqrt(var)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    lead = tuple(range(x.ndim - 1))
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def grad(g):
        gh = g * gamma.data if gamma is not None else g
        gx = gh - _lastsum(gh) * (1.0 / d)
        gx -= xhat * (_lastdot(gh, xhat) * (1.0 / d))
        gx *= rstd
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=lead) if beta.requires_grad else None)
        return tuple(grads)

    return _emit("layer_norm", out, parents, grad)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = 0.044715 * x2
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)
    out = 1.0 + t
    out *= xd
    out *= 0.5

    def grad(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3a x^2)
        du = (3 * 0.044715 * _GELU_C) * x2
        du += _GELU_C
        s = t * t
        np.subtract(1.0, s, out=s)
        s *= du
        s *= xd
        s += t
        s += 1.0
        s *= 0.5
        s *= g
        return (s,)

    return _emit("gelu", out, (x,), grad)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = np.exp(x.data - _lastmax(x.data))
    y /= _lastsum(y)

    def grad(g):
        return (y * (g - _lastdot(g, y)),)

    return _emit("softmax", y, (x,), grad)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean over all elements (``axis=None``) or one axis."""
    if axis is None:
        n = x.size
        out = np.asarray(x.data.mean())
        return _emit("mean", out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))
    ax = axis % x.ndim
    n = x.shape[ax]
    out = x.data.mean(axis=ax)

    def grad(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, x.shape).copy(),)

    return _emit("mean", out, (x,), grad)


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def _trailing(x: Tensor, batch_dims: int) -> tuple:
    if not 0 <= batch_dims < max(x.ndim, 1):
        raise ShapeError("reduce", [x.shape], f"batch_dims={batch_dims}")
    return tuple(range(batch_dims, x.ndim))


def frobenius_inner_product(a: Tensor, b: Tensor, batch_dims: int = 0) -> Tensor:
    """Sum of ``a * b`` over all axes after the first ``batch_dims``."""
    _same_shape("frobenius_inner_product", a, b)
    ax = _trailing(a, batch_dims)
    ad, bd = a.data, b.data
    out = np.asarray((ad * bd).sum(axis=ax))

    def grad(g):
        ge = np.reshape(g, g.shape + (1,) * len(ax))
        return ge * bd, ge * ad

    return _emit("frobenius_inner_product", out, (a, b), grad)


def l2_norm(x: Tensor, batch_dims: int = 0) -> Tensor:
    """Euclidean norm over all axes after the first ``batch_dims``."""
    ax = _trailing(x, batch_dims)
    xd = x.data
    out = np.asarray(np.sqrt((xd * xd).sum(axis=ax)))

    def grad(g):
        ge = np.reshape(g / out, g.shape + (1,) * len(ax))
        return (ge * xd,)

    return _emit("l2_norm", out, (x,), grad)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", [logits.shape, labels.shape])
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean())

    def grad(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _emit("cross_entropy", out, (logits,), grad)


OP_IDS = (
    "matmul", "add", "scalar_mul", "elementwise_mul", "concat_along_sequence",
    "layer_norm", "gelu", "softmax", "mean", "l2_norm",
    "frobenius_inner_product", "sigmoid",
)

_OP_TABLE = {
    "matmul": lambda xs: matmul(*xs),
    "add": lambda xs: add(*xs),
    "scalar_mul": lambda xs: scalar_mul(*xs),
    "elementwise_mul": lambda xs: elementwise_mul(*xs),
    "concat_along_sequence": lambda xs: concat_along_sequence(xs),
    "layer_norm": lambda xs: layer_norm(*xs),
    "gelu": lambda xs: gelu(*xs),
    "softmax": lambda xs: softmax(*xs),
    "mean": lambda xs: mean(*xs),
    "l2_norm": lambda xs: l2_norm(*xs),
    "frobenius_inner_product": lambda xs: frobenius_inner_product(*xs),
    "sigmoid": lambda xs: sigmoid(*xs),
}


def forward_op(op_id: str, inputs: Sequence[Tensor]) -> Tensor:
    """Dispatch by name; the single entry point the gradient sweeps iterate over."""
    try:
        fn = _OP_TABLE[op_id]
    except KeyError:
        raise ValueError(f"unknown op_id {op_id!r}; expected one of {OP_IDS}") from None
    return fn(list(inputs))


# ---------------------------------------------------------------------------
# differentiation


def backward(graph: DiffGraph, loss: Tensor,
             wrt: Iterable[Tensor] | None = None):
    """Reverse sweep over ``graph`` starting at the scalar ``loss``.

    Returns a dict mapping every reached leaf to its gradient.  With ``wrt``,
    returns a list aligned to it instead; leaves the loss does not depend on
    get exact zeros.
    """
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in graph._produced:
        raise GraphError("loss was not produced on this graph (detached)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for out, parents, fn in reversed(graph.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = fn(g)
        for p, pg in zip(parents, pgrads):
            if not p.requires_grad:
                continue
            key = id(p)
            if key not in graph._produced:
                leaves[key] = p
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = {leaves[k]: grads[k] for k in leaves}
    if wrt is None:
        return result
    return [grads[id(t)] if id(t) in leaves else np.zeros(t.shape, dtype=t.dtype)
            for t in wrt]


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(base.shape)
