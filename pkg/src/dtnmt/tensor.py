"""Dense float64 tensors with a reverse-mode gradient tape.

Every primitive computes its value with numpy, then records a node on the
thread-local :class:`Tape` together with a backward rule. :func:`backward`
replays the tape in reverse and accumulates gradients additively into every
tensor that requires them; callers zero gradients between steps.

Broadcasting is limited to two cases: a scalar operand, or an operand whose
shape is a suffix of the other's (leading-batch broadcasting, e.g. a bias of
shape ``(d,)`` added to ``(B, T, d)``). Anything else must be reshaped
explicitly.
"""

# Import future modules
from __future__ import annotations

# Import built-in modules
import contextlib
from dataclasses import dataclass
import threading
from typing import Any
from typing import Callable
from typing import Iterator
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

# Import third-party modules
import numpy as np

# Import local modules
from dtnmt.errors import DtnmtError
from dtnmt.errors import GradCheckError
from dtnmt.errors import ShapeError


LAYER_NORM_EPS = 1e-6

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A dense array of 64-bit floats that may take part in the tape.

    Attributes:
        data: The values, row-major.
        requires_grad: Whether gradients are accumulated into :attr:`grad`.
        grad: Accumulated gradient, same shape as :attr:`data`, or ``None``.
        name: Optional parameter path, used in messages.
    """

    __slots__ = ("data", "grad", "name", "requires_grad")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Arithmetic sugar; every operator dispatches to a recorded primitive.
    def __add__(self, other: ArrayLike) -> Tensor:
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: float) -> Tensor:
        if isinstance(other, Tensor):
            raise ShapeError("div", detail="only division by a python scalar is supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return slice_(self, index)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes if axes else None)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class Node:
    """One recorded primitive application."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of primitive applications.

    A node's inputs are always recorded before the node itself, so replaying
    the list backwards visits the graph in reverse topological order.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []

    def op_names(self) -> List[str]:
        return [node.op for node in self.nodes]


class _State(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def get_tape() -> Tape:
    """Return the calling thread's tape."""
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def tensor(data: Any, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    """Create a tensor that owns a copy of ``data``."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def detach(value: Tensor) -> Tensor:
    """Return a read-only view of ``value``'s data, outside the graph; ``value`` stays writeable."""
    out = Tensor(value.data.view())
    out.data.flags.writeable = False
    return out


def _record(op: str, inputs: Sequence[Tensor], data: np.ndarray, rule: BackwardFn) -> Tensor:
    needs_grad = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        _state.tape.record(Node(op, tuple(inputs), out, rule))
    return out


def _broadcast_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    if int(np.prod(b)) == 1 and len(b) <= 1:
        return a
    if int(np.prod(a)) == 1 and len(a) <= 1:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(op, a, b, detail="only scalar and leading-batch broadcasting are supported")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", ta.shape, tb.shape)

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _record("add", (ta, tb), ta.data + tb.data, rule)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", ta.shape, tb.shape)

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return _record("sub", (ta, tb), ta.data - tb.data, rule)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", ta.shape, tb.shape)

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)

    return _record("mul", (ta, tb), ta.data * tb.data, rule)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g * active,)

    return _record("relu", (x,), np.where(active, x.data, 0.0), rule)


def xlogx(x: Tensor) -> Tensor:
    """Elementwise ``x * log(x)`` with ``0 * log 0 := 0``."""
    if np.any(x.data < 0):
        raise ShapeError("xlogx", x.shape, detail="negative entries")
    positive = x.data > 0
    safe = np.where(positive, x.data, 1.0)
    logs = np.log(safe)

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.where(positive, g * (logs + 1.0), 0.0),)

    return _record("xlogx", (x,), np.where(positive, x.data * logs, 0.0), rule)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by the constant ``value``."""
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError("masked_fill", x.shape, mask.shape) from None

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.where(full, 0.0, g),)

    return _record("masked_fill", (x,), np.where(full, value, x.data), rule)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; the identity when ``rng`` is ``None`` or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g * keep,)

    return _record("dropout", (x,), x.data * keep, rule)


# ---------------------------------------------------------------------------
# Structural primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Either ``b`` is a 2-D weight shared across all leading axes of ``a``, or
    both operands carry identical leading (batch) axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim == 2:
        k, n = b.shape

        def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
            grad_a = g @ b.data.T
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return grad_a, grad_b

        return _record("matmul", (a, b), a.data @ b.data, rule)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch axes differ")

    def batched_rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record("matmul", (a, b), a.data @ b.data, batched_rule)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    perm = tuple(range(x.ndim))[::-1] if axes is None else tuple(int(a) for a in axes)
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, detail=f"bad permutation {perm}")
    inverse = tuple(int(i) for i in np.argsort(perm))

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.transpose(g, inverse),)

    return _record("transpose", (x,), np.transpose(x.data, perm), rule)


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    perm = list(range(x.ndim))
    perm[axis1], perm[axis2] = perm[axis2], perm[axis1]
    return transpose(x, perm)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g.reshape(x.shape),)

    return _record("reshape", (x,), out, rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat", detail="nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tuple(tensors), out, rule)


def slice_(x: Tensor, index: Any) -> Tensor:
    """Basic (slice/integer) indexing."""
    try:
        out = np.array(x.data[index], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError("slice", x.shape, detail=str(exc)) from None

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad = np.zeros_like(x.data)
        grad[index] += g
        return (grad,)

    return _record("slice", (x,), out, rule)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; gradients scatter-add back into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding", weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", weight.shape, ids.shape, detail=f"id {int(ids.max())} out of range")

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (grad,)

    return _record("embedding", (weight,), weight.data[ids], rule)


# ---------------------------------------------------------------------------
# Reductions and normalizations
# ---------------------------------------------------------------------------


def sum_(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), np.asarray(out), rule)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise ShapeError("mean", x.shape, detail="empty reduction")
    out = x.data.sum(axis=axis, keepdims=keepdims) / count

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record("mean", (x,), np.asarray(out), rule)


def softmax_array(data: np.ndarray, axis: int) -> np.ndarray:
    shifted = data - data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax", x.shape, detail="reduced axis has length 0")
    probs = softmax_array(x.data, axis)

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), probs, rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("log_softmax", x.shape, detail="reduced axis has length 0")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (x,), out, rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    width = x.shape[-1] if x.ndim else 0
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def rule(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        g_normed = g * gain.data
        grad_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        grad_gain = (g * normed).reshape(-1, width).sum(axis=0)
        grad_bias = g.reshape(-1, width).sum(axis=0)
        return grad_x, grad_gain, grad_bias

    return _record("layer_norm", (x, gain, bias), normed * gain.data + bias.data, rule)


# ---------------------------------------------------------------------------
# Reverse pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into every tensor on the tape that requires it.

    The tape is reset afterwards.

    Raises:
        ShapeError: ``loss`` is not a scalar.
        DtnmtError: ``loss`` was not produced by a recorded operation.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    tape = _state.tape
    if not tape.nodes or not loss.requires_grad:
        tape.reset()
        raise DtnmtError("backward: loss is not connected to any recorded operation")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad_out = grads.get(id(node.output))
        if grad_out is None:
            continue
        for source, grad in zip(node.inputs, node.backward(grad_out)):
            if grad is None or not source.requires_grad:
                continue
            key = id(source)
            if key in grads:
                grads[key] = grads[key] + grad
            else:
                grads[key] = np.array(grad, dtype=np.float64)

    seen = set()
    for node in tape.nodes:
        for t in (*node.inputs, node.output):
            if not t.requires_grad or id(t) in seen:
                continue
            seen.add(id(t))
            grad = grads.get(id(t))
            if grad is None:
                grad = np.zeros_like(t.data)
            t.grad = grad.reshape(t.shape) if t.grad is None else t.grad + grad.reshape(t.shape)
    tape.reset()


@dataclass
class GradCheckReport:
    """Outcome of :func:`grad_check`.

    Attributes:
        errors: Relative error per coordinate, shaped like the point.
        max_error: Largest entry of :attr:`errors`.
        passed: ``max_error <= tol``.
    """

    errors: np.ndarray
    max_error: float
    tol: float
    passed: bool


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Any,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.

    Args:
        f: Deterministic map from a tensor to a scalar tensor.
        point: Where to evaluate.
        step: Finite-difference step; must be positive.
        tol: Pass threshold on the maximum relative error.
        floor: Lower bound of the denominator, so vanishing gradients are
            compared absolutely.

    Raises:
        GradCheckError: ``f`` produced a non-finite value.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point, dtype=np.float64)
    get_tape().reset()
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise GradCheckError("output", float(out.data.reshape(-1)[0]))
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    with no_grad():
        for index in np.ndindex(*base.shape):
            values = []
            for sign in (1.0, -1.0):
                probe = base.copy()
                probe[index] += sign * step
                value = f(Tensor(probe)).item()
                if not np.isfinite(value):
                    raise GradCheckError(index, value)
                values.append(value)
            numeric[index] = (values[0] - values[1]) / (2.0 * step)

    for index in np.ndindex(*base.shape):
        if not np.isfinite(analytic[index]):
            raise GradCheckError(index, float(analytic[index]))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    errors = np.abs(analytic - numeric) / denom
    max_error = float(errors.max()) if errors.size else 0.0
    return GradCheckReport(errors=errors, max_error=max_error, tol=tol, passed=max_error <= tol)
