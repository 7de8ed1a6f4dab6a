"""Reverse-mode differentiable tensors over float64 numpy arrays."""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from services.errors import GraphError, ShapeError

GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Leaves created with ``requires_grad=True`` are parameters. Results of
    operations only record their parents when at least one parent requires a
    gradient, so frozen sub-networks never enter the graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "frozen", "name", "_parents", "_grad_fn", "_op", "_consumed")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.frozen = False
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._grad_fn: Optional[GradFn] = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Tuple["Tensor", ...], grad_fn: GradFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.frozen = False
        out.name = None
        out._consumed = False
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._grad_fn = grad_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._grad_fn = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(data, (a, b), grad_fn, "add")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")

    def grad_fn(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(data, (a, b), grad_fn, "mul")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: expected [n, m] @ [m, p], got {a.shape} @ {b.shape}")

    def grad_fn(g: np.ndarray):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), grad_fn, "matmul")


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def grad_fn(g: np.ndarray):
        return (g * mask,)

    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), grad_fn, "relu")


def tensor_sum(x: ArrayLike) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g: np.ndarray):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.array(x.data.sum()), (x,), grad_fn, "sum")


def tensor_mean(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def grad_fn(g: np.ndarray):
        return (np.full(x.shape, float(g) / n),)

    return Tensor._from_op(np.array(x.data.mean()), (x,), grad_fn, "mean")


def dense_forward(x: ArrayLike, W: Tensor, b: Tensor) -> Tensor:
    """y = xW + b for x [batch, in_dim], W [in_dim, out_dim], b [out_dim]."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"dense_forward: expected x of shape [batch, in_dim], got {x.shape}")
    if W.data.ndim != 2 or W.shape[0] != x.shape[1]:
        raise ShapeError(
            f"dense_forward: expected W of shape [{x.shape[1]}, out_dim], got {W.shape}"
        )
    if b.shape != (W.shape[1],):
        raise ShapeError(f"dense_forward: expected b of shape [{W.shape[1]}], got {b.shape}")

    def grad_fn(g: np.ndarray):
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.T @ g if W.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return Tensor._from_op(x.data @ W.data + b.data, (x, W, b), grad_fn, "dense")


@dataclass
class ComputeGraph:
    """Topologically ordered record of the nodes reachable from a loss."""

    loss: Tensor
    nodes: List[Tensor] = field(default_factory=list)
    parameters: Dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "ComputeGraph":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        params: Dict[str, Tensor] = {}
        for i, node in enumerate(order):
            if node.is_leaf:
                params[node.name or f"param{i}"] = node
        return cls(loss=loss, nodes=order, parameters=params)

    def reset(self) -> None:
        """Zero every parameter gradient and allow another backward pass."""
        for p in self.parameters.values():
            p.zero_grad()
        self.loss._consumed = False


def backward(loss: Tensor) -> ComputeGraph:
    """Populate ``grad`` on every parameter reachable from a scalar loss."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran for this loss; reset the graph first")
    graph = ComputeGraph.from_loss(loss)
    for p in graph.parameters.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        loss._consumed = True
        return graph

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg
    loss._consumed = True
    return graph
