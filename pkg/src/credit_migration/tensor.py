"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is a `Tensor` wrapping a C-contiguous float64 ndarray. Operations
record their inputs and a backward closure on the output tensor; calling
`backward` on a scalar result walks the recorded graph once in reverse
topological order and fills the `grad` buffer of every reachable tensor
that has `requires_grad` set.

Matrix operations act on the last two axes; any leading axes are treated as
a batch. Broadcasting is deliberately narrow: the second operand of an
elementwise op may be a constant whose shape is a suffix of the first
operand's shape (a bias vector, a positional table). Nothing else
broadcasts, which keeps every adjoint auditable.

Speed is not the goal here; 64-bit precision and exact gradients are.
"""

from __future__ import annotations

import builtins
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar backward, stale gradients)."""


class Tensor:
    """A dense float64 array that can participate in a differentiable graph.

    Leaves are created directly; non-leaves are created by the operation
    functions in this module and carry a backward closure. A tensor with
    `requires_grad=False` never receives a gradient and acts as a constant.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op: Optional[str] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.op or ("param" if self.requires_grad else "const")
        return f"Tensor(shape={self.shape}, op={tag!r})"

    # Small amount of operator sugar; the named functions below are the API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return multiply(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(data, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Create a trainable leaf tensor."""
    del rng
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    """Create a non-trainable leaf tensor."""
    return Tensor(data, requires_grad=False)


def _from_op(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _sum_to_suffix(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to a suffix-broadcast operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    nb = b.ndim
    if nb <= a.ndim and a.shape[a.ndim - nb:] == b.shape:
        return
    raise ShapeError(f"{op}: shape {b.shape} is not equal to or a suffix of {a.shape}")


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")

    def backward(g: np.ndarray):
        return g, _sum_to_suffix(g, b.shape)

    return _from_op(a.data + b.data, (a, b), backward, "add")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "subtract")

    def backward(g: np.ndarray):
        return g, -_sum_to_suffix(g, b.shape)

    return _from_op(a.data - b.data, (a, b), backward, "subtract")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; `b` may be a suffix-shaped operand."""
    _check_suffix(a, b, "multiply")
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray):
        return g * b_data, _sum_to_suffix(g * a_data, b.shape)

    return _from_op(a_data * b_data, (a, b), backward, "multiply")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a fixed python scalar (not a graph node)."""
    c = float(factor)

    def backward(g: np.ndarray):
        return (g * c,)

    return _from_op(x.data * c, (x,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def backward(g: np.ndarray):
        return (g * mask,)

    return _from_op(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def log(x: Tensor) -> Tensor:
    """Natural log; caller guarantees strictly positive input."""
    x_data = x.data

    def backward(g: np.ndarray):
        return (g / x_data,)

    return _from_op(np.log(x_data), (x,), backward, "log")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 dimensions, got shape {x.shape}")

    def backward(g: np.ndarray):
        return (np.swapaxes(g, -1, -2),)

    return _from_op(np.swapaxes(x.data, -1, -2).copy(), (x,), backward, "transpose")


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the final axis; all other axes must match."""
    if not tensors:
        raise ShapeError("concat_last_dim: empty input")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last_dim: leading shape {t.shape[:-1]} differs from {lead}"
            )
    sizes = [t.shape[-1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray):
        return tuple(g[..., offsets[i]: offsets[i + 1]] for i in range(len(sizes)))

    data = np.concatenate([t.data for t in tensors], axis=-1)
    return _from_op(data, tuple(tensors), backward, "concat_last_dim")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum(x: Tensor, axes: Optional[Iterable[int]] = None) -> Tensor:  # noqa: A001
    """Sum over the given axes (all axes when omitted, yielding a scalar)."""
    if axes is None:
        norm_axes = tuple(range(x.ndim))
    else:
        norm_axes = tuple(builtins.sorted(ax % x.ndim for ax in axes))
    in_shape = x.shape

    def backward(g: np.ndarray):
        expanded = g
        for ax in norm_axes:
            expanded = np.expand_dims(expanded, ax)
        return (np.broadcast_to(expanded, in_shape),)

    return _from_op(x.data.sum(axis=norm_axes), (x,), backward, "sum")


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, yielding a scalar."""
    n = x.data.size
    in_shape = x.shape

    def backward(g: np.ndarray):
        return (np.broadcast_to(g / n, in_shape).copy(),)

    return _from_op(x.data.mean(), (x,), backward, "mean_all")


# ---------------------------------------------------------------------------
# Matrix operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the last two axes, batched over leading axes.

    Accepted forms: (m, k) @ (k, n); (..., m, k) @ (k, n) with the right
    operand shared across the batch; and (..., m, k) @ (..., k, n) with
    identical leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ for shapes {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data

    if b.ndim == 2 and a.ndim > 2:
        # Batched-by-shared-matrix case: fold the batch into the row axis so
        # a single GEMM runs instead of one small GEMM per batch element.
        flat = a_data.reshape(-1, a_data.shape[-1])
        out_shape = a_data.shape[:-1] + (b_data.shape[-1],)

        def backward(g: np.ndarray):
            g_flat = g.reshape(-1, g.shape[-1])
            grad_a = (g_flat @ b_data.T).reshape(a_data.shape)
            grad_b = flat.T @ g_flat
            return grad_a, grad_b

        return _from_op((flat @ b_data).reshape(out_shape), (a, b), backward, "matmul")

    def backward(g: np.ndarray):
        grad_a = g @ np.swapaxes(b_data, -1, -2)
        grad_b = np.swapaxes(a_data, -1, -2) @ g
        if grad_b.ndim > b_data.ndim:
            grad_b = grad_b.sum(axis=tuple(range(grad_b.ndim - b_data.ndim)))
        return grad_a, grad_b

    return _from_op(a_data @ b_data, (a, b), backward, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _from_op(y, (x,), backward, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each row (last axis) to zero mean and unit variance, then
    apply a per-column gain and bias.

    The variance denominator uses epsilon 1e-5, so a constant row maps to
    all zeros (times gain, plus bias) instead of dividing by zero.
    """
    n = x.shape[-1]
    if n < 2:
        raise ShapeError(f"layer_norm: row length must be >= 2, got shape {x.shape}")
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match row length {n}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    normed = centered * inv_std
    gain_data = gain.data

    def backward(g: np.ndarray):
        gy = g * gain_data
        mean_gy = gy.mean(axis=-1, keepdims=True)
        mean_gy_normed = (gy * normed).mean(axis=-1, keepdims=True)
        dx = inv_std * (gy - mean_gy - normed * mean_gy_normed)
        lead = tuple(range(g.ndim - 1))
        dgain = (g * normed).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    return _from_op(normed * gain_data + bias.data, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    """Order every reachable grad-requiring node so parents precede children."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `grad` for every requires_grad tensor reachable from `loss`.

    `loss` must be a scalar produced by recorded operations. A second call
    on the same loss, or a call while any reachable leaf still holds a
    gradient, is rejected; call `reset_gradients` between passes.
    """
    if loss.data.ndim != 0:
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._backward_done:
        raise GraphError("backward: already called on this loss; reset gradients and rebuild")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any trainable tensor")
    order = _toposort(loss)
    for node in order:
        if node.is_leaf() and node.grad is not None:
            raise GraphError(
                "backward: a leaf already holds a gradient; call reset_gradients first"
            )
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(
                    f"backward: adjoint of {node.op} has shape {pg.shape}, "
                    f"expected {parent.shape}"
                )
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    loss._backward_done = True


def reset_gradients(tensors: Iterable[Tensor]) -> None:
    """Clear gradient buffers so a new backward pass may run."""
    for t in tensors:
        t.grad = None
