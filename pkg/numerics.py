"""
Dense fp64 tensors (rank <= 3) with reverse-mode automatic differentiation.

Every op returns a new Tensor; when any input requires a gradient the result
remembers its parents and a backward rule. There is no global tape, so graphs
built on different threads never share state.
"""

import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    DomainError,
    NonFiniteError,
)

logger = logging.getLogger(__name__)

MAX_RANK = 3
NORM_EPS = 1e-12

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """fp64 array that can participate in reverse-mode differentiation"""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple["Tensor", ...] = (),
                 _backward: Optional[BackwardFn] = None, _op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by '{_op}'")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

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

    def __truediv__(self, other: Scalar):
        if isinstance(other, Tensor):
            raise ContractError("division is only supported by a python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor"""
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    track = any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)
    return Tensor(data, _op=op)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible "
                             f"(only scalar broadcasting is supported)")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# ======================================================
# Elementwise ops
# ======================================================

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: Scalar) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward, "scale")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), backward, "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")

    def backward(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward, "log")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch one of add/sub/mul/tanh/exp/log/scale by name"""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op '{op}'") from None
    return fn(*args)


# ======================================================
# Linear algebra and reductions
# ======================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m x k) @ (k x n), or (m x k) @ k-vector"""
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise DimensionError(f"matmul expects a matrix and a matrix/vector, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with the vector b added along the last axis of x"""
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match the last axis of {x.shape}")

    def backward(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _result(x.data + b.data, (x, b), backward, "add_bias")


def _parse_subscripts(subscripts: str) -> Tuple[str, str, str]:
    try:
        inputs, out = subscripts.replace(" ", "").split("->")
        left, right = inputs.split(",")
    except ValueError:
        raise ContractError(f"einsum expects 'ab,bc->ac' style subscripts, got {subscripts!r}") from None
    for term in (left, right, out):
        if len(set(term)) != len(term):
            raise ContractError(f"einsum: repeated index in {term!r}")
    if set(out) - set(left + right):
        raise ContractError(f"einsum: output indices {out!r} do not appear in the inputs")
    if set(left) - set(out + right) or set(right) - set(out + left):
        raise ContractError(f"einsum: every index must appear in the other operand or the output ({subscripts})")
    return left, right, out


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand contraction, e.g. 'tbh,bh->bt'"""
    left, right, out = _parse_subscripts(subscripts)
    if a.ndim != len(left) or b.ndim != len(right):
        raise DimensionError(f"einsum {subscripts}: operand ranks {a.ndim} and {b.ndim} do not match")
    try:
        data = np.einsum(f"{left},{right}->{out}", a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"einsum {subscripts}: {e}") from None

    def backward(g):
        return (np.einsum(f"{out},{right}->{left}", g, b.data),
                np.einsum(f"{out},{left}->{right}", g, a.data))

    return _result(data, (a, b), backward, "einsum")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")

    def backward(g):
        return (g.T,)

    return _result(a.data.T, (a,), backward, "transpose")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (np.full(a.shape, float(g)),)

    return _result(np.asarray(a.data.sum()), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return scale(sum(a), 1.0 / n)


def take(a: Tensor, index) -> Tensor:
    """Fancy-index a tensor (a[index]); gradients scatter-add back"""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), backward, "take")


def row(a: Tensor, i: int) -> Tensor:
    return take(a, int(i))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis"""
    if not tensors:
        raise ContractError("stack of an empty sequence")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"stack: shapes {shape} and {t.shape} differ")
    parents = tuple(tensors)

    def backward(g):
        return tuple(g[i] for i in range(len(parents)))

    return _result(np.stack([t.data for t in parents]), parents, backward, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate equal-rank tensors along `axis` (vectors by default)"""
    if not tensors:
        raise ContractError("concat of an empty sequence")
    first = tensors[0]
    if first.ndim == 0:
        raise DimensionError("concat of scalars")
    axis = axis % first.ndim
    for t in tensors:
        if t.ndim != first.ndim or t.shape[:axis] + t.shape[axis + 1:] != first.shape[:axis] + first.shape[axis + 1:]:
            raise DimensionError(f"concat along axis {axis}: shapes {first.shape} and {t.shape} differ")
    parents = tuple(tensors)
    bounds = np.cumsum([0] + [t.shape[axis] for t in parents])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parents)))

    return _result(np.concatenate([t.data for t in parents], axis=axis), parents, backward, "concat")


# ======================================================
# Log-softmax and normalization
# ======================================================

def log_softmax(logits: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-shifted log-softmax of a vector, or of each row of a matrix.

    `mask` (same shape, bool) restricts the normalization to the True entries;
    masked-out outputs are 0 and receive no gradient.
    """
    x = logits.data
    if x.ndim not in (1, 2):
        raise DimensionError(f"log_softmax expects a vector or matrix, got {x.shape}")
    if mask is None:
        allowed = np.ones(x.shape, dtype=bool)
    else:
        allowed = np.asarray(mask, dtype=bool)
        if allowed.shape != x.shape:
            raise DimensionError(f"mask shape {allowed.shape} differs from logits {x.shape}")
        if not np.all(allowed.any(axis=-1)):
            raise ContractError("log_softmax: a row has no unmasked entries")

    shifted_src = np.where(allowed, x, -np.inf)
    m = shifted_src.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(np.where(allowed, x - m, 0.0)), 0.0)
    lse = m + np.log(e.sum(axis=-1, keepdims=True))
    out = np.where(allowed, x - lse, 0.0)
    probs = np.where(allowed, np.exp(out), 0.0)

    def backward(g):
        g = np.where(allowed, g, 0.0)
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (logits,), backward, "log_softmax")


softmax_log = log_softmax


def l2_normalize(v: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Unit-normalize a vector, or each row of a matrix"""
    x = v.data
    if x.ndim not in (1, 2):
        raise DimensionError(f"l2_normalize expects a vector or matrix, got {x.shape}")
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateVectorError(f"cannot normalize a vector with norm <= {eps}")
    out = x / norm

    def backward(g):
        return ((g - out * (out * g).sum(axis=-1, keepdims=True)) / norm,)

    return _result(out, (v,), backward, "l2_normalize")


# ======================================================
# Graph traversal
# ======================================================

class Graph:
    """Topologically ordered view of the nodes reachable from a root"""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack_: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack_.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack_.append((parent, False))
        return cls(order)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if not n._parents]

    def backward(self, root: Tensor) -> Dict[Tensor, np.ndarray]:
        grads: Dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64).reshape(parent.shape)
        return {leaf: leaf.grad for leaf in self.leaves()}


def backward(root: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar root.

    Returns dRoot/dLeaf for every requires_grad leaf reached; when `leaves` is
    given, those leaves are reported too (exact zeros if not reached).
    """
    if root.ndim != 0:
        raise ContractError(f"backward root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        result: Dict[Tensor, np.ndarray] = {}
    else:
        graph = Graph.from_root(root)
        for leaf in graph.leaves():
            leaf.grad = None
        result = graph.backward(root)
    if leaves is not None:
        for leaf in leaves:
            if leaf not in result:
                leaf.grad = np.zeros(leaf.shape)
                result[leaf] = leaf.grad
    return result


def gradient_check(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = 1e-6) -> float:
    """Largest norm-wise relative error between analytic and central-difference gradients"""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    root = fn(*leaves)
    grads = backward(root, leaves)

    worst = 0.0
    for i, base in enumerate(arrays):
        base = np.array(base, dtype=np.float64)
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = [np.array(a, dtype=np.float64) for a in arrays]
            minus = [np.array(a, dtype=np.float64) for a in arrays]
            plus[i][idx] += step
            minus[i][idx] -= step
            f_plus = fn(*[Tensor(a) for a in plus]).item()
            f_minus = fn(*[Tensor(a) for a in minus]).item()
            numeric[idx] = (f_plus - f_minus) / (2.0 * step)
        analytic = grads[leaves[i]]
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if denom == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
