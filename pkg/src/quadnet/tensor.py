"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape`.  Outside of a
tape nothing is recorded and results are plain constants, which is what the
evaluation code relies on for cheap inference.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x.sum()
    >>> backward(y, tape)
    >>> x.grad
    array([1., 1., 1.], dtype=float32)
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPE = [np.float32]


def get_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default scalar type (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    _DTYPE.append(dtype)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=get_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so the list is already in
    topological order and backward simply walks it in reverse.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self, "tapes must be closed in LIFO order"

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_ACTIVE: list[Tape] = []


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out_data`` as a Tensor and register its backward rule.

    ``backward_fn`` receives dL/d(out) and returns one gradient (or None) per
    input, each with that input's shape.
    """
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        node = Node(op, tuple(inputs), out, backward_fn)
        out.requires_grad = True
        out._node = node
        _ACTIVE[-1].nodes.append(node)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        # constant loss (e.g. 0 * f(x) folded away, or nothing required grad)
        return
    if tape is None:
        tape = _find_tape(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    found = False
    for node in reversed(tape.nodes):
        if node.out is loss:
            found = True
        g = adjoint.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.astype(inp.data.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                adjoint[key] = gi if key not in adjoint else adjoint[key] + gi
    if not found:
        raise ValueError("loss was not recorded on the given tape")


def _find_tape(loss: Tensor) -> Tape:
    for tape in reversed(_ACTIVE):
        if loss._node in tape.nodes:
            return tape
    raise ValueError("no tape given and the loss is not on an active tape")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    return record("mul", a.data * b.data, (a, b),
                  lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (_reduce_to(g / b.data, a.shape),
                _reduce_to(-g * out / b.data, b.shape))

    return record("div", out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return record("matmul", a.data @ b.data, (a, b),
                  lambda g: (g @ b.data.T, a.data.T @ g))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the only broadcasting the ops accept."""
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)

    def bw(g):
        lead = g.ndim - a.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return record("expand", out, (a,), bw)


def take(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return record("take", a.data[index], (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                  lambda g: (g * mask,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        # zero subgradient at 0
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0),)

    return record("sqrt", out, (a,), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("maximum", a, b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return record("maximum", out, (a, b),
                  lambda g: (_reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)))


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """L2 distance along the last axis; a [D] pair gives a scalar, [N, D] gives [N].

    At coincident points the gradient is zero.
    """
    if a.shape != b.shape:
        raise ValueError(f"euclidean_distance: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=-1))

    def bw(g):
        safe = np.where(d > 0, d, 1)
        unit = np.where((d > 0)[..., None], diff / safe[..., None], 0)
        ga = np.asarray(g)[..., None] * unit
        return (ga, -ga)

    return record("euclidean_distance", d, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------------------
# finite-difference checking


class GradCheckError(FloatingPointError):
    pass


def grad_check(f: Callable[..., Tensor], inputs: Sequence, h: float = 1e-5,
               eps: float = 1e-7) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps tensors to a scalar tensor.  Everything runs in float64.  The
    relative error per coordinate is |a - n| / max(|a|, |n|, eps), and 0 when
    both sides vanish.
    """
    with precision(np.float64):
        xs = [Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
                     requires_grad=True) for x in inputs]
        with Tape() as tape:
            out = f(*xs)
        for node in tape.nodes:
            if not np.all(np.isfinite(node.out.data)):
                raise GradCheckError(f"non-finite output from op '{node.op}'")
        if out.data.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
        backward(out, tape)

        worst = 0.0
        for x in xs:
            analytic = np.zeros_like(x.data) if x.grad is None else x.grad
            flat = x.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*xs).data)
                flat[i] = orig - h
                fm = float(f(*xs).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradCheckError("non-finite value during finite differencing")
                num = (fp - fm) / (2 * h)
                ana = float(analytic.reshape(-1)[i])
                if ana == num:
                    continue
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), eps))
        return worst
