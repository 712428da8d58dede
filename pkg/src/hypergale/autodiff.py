"""Define-by-run reverse-mode differentiation over dense 2-D float64 matrices.

Every value is a ``rows x cols`` array. Operations append a node to an
implicit graph via their parents; :func:`backward` walks that graph once in
reverse topological order and returns a gradient map keyed by leaf tensors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, OracleError

BCE_CLAMP = 1e-12

Vjp = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def as_matrix(value, *, name: str = "value") -> np.ndarray:
    """Coerce external input to a finite 2-D float64 array."""
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries rejected")
    return arr


class Tensor:
    """A node in the computation graph.

    Leaves are created directly (``Tensor(data)``); interior nodes come from
    the op functions in this module. ``requires_grad`` marks leaves whose
    gradient should appear in the map returned by :func:`backward`.
    """

    __slots__ = ("value", "parents", "kind", "_vjp", "requires_grad")

    def __init__(self, value, requires_grad: bool = False, *, _validate: bool = True):
        self.value = as_matrix(value) if _validate else value
        self.parents: tuple[Tensor, ...] = ()
        self.kind = "leaf"
        self._vjp: Vjp | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(kind={self.kind!r}, shape={self.shape})"

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def constant(value) -> Tensor:
    return Tensor(value)


def custom_op(kind: str, value: np.ndarray, parents: Sequence[Tensor], vjp: Vjp) -> Tensor:
    """Create an interior node from a precomputed value and its vector-Jacobian product.

    ``vjp(adjoint)`` must return one array (or None) per parent.
    """
    out = Tensor(value, _validate=False)
    out.parents = tuple(parents)
    out.kind = kind
    out._vjp = vjp
    return out


def _check_same(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # Undo row/column broadcasting of a 1-wide operand.
    if grad.shape == shape:
        return grad
    if shape[0] == 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _broadcastable(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or y == 1 for x, y in zip(a, b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    return custom_op(
        "matmul", a.value @ b.value, (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a single row or column broadcast against ``a``."""
    if not _broadcastable(a.shape, b.shape):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} are not broadcast-compatible")
    bshape = b.shape
    return custom_op("add", a.value + b.value, (a, b), lambda g: (g, _reduce_to(g, bshape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return custom_op("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return custom_op("mul", a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def scale(a: Tensor, c: float) -> Tensor:
    return custom_op("scale", a.value * c, (a,), lambda g: (g * c,))


def _as_vector(kind: str, v: Tensor, length: int) -> np.ndarray:
    if 1 not in v.shape or v.value.size != length:
        raise DimensionError(f"{kind}: scale vector of shape {v.shape} does not have length {length}")
    return v.value.reshape(-1)


def row_scale(a: Tensor, v: Tensor) -> Tensor:
    """Multiply row ``i`` of ``a`` by ``v[i]`` (``v`` is a row or column vector)."""
    vec = _as_vector("row_scale", v, a.shape[0])
    vshape = v.shape

    def vjp(g):
        return g * vec[:, None], (g * a.value).sum(axis=1).reshape(vshape)

    return custom_op("row_scale", a.value * vec[:, None], (a, v), vjp)


def col_scale(a: Tensor, v: Tensor) -> Tensor:
    """Multiply column ``j`` of ``a`` by ``v[j]``."""
    vec = _as_vector("col_scale", v, a.shape[1])
    vshape = v.shape

    def vjp(g):
        return g * vec[None, :], (g * a.value).sum(axis=0).reshape(vshape)

    return custom_op("col_scale", a.value * vec[None, :], (a, v), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    # Branch-free stable form: exp of a non-positive argument only.
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return custom_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return custom_op("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return custom_op("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    x = a.value
    out = np.logaddexp(0.0, x)
    e = np.exp(-np.abs(x))
    slope = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return custom_op("softplus", out, (a,), lambda g: (g * slope,))


def softmax_rows(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return custom_op("softmax_rows", s, (a,), vjp)


def transpose(a: Tensor) -> Tensor:
    return custom_op("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def flatten(a: Tensor) -> Tensor:
    """Row-major flatten to a ``1 x rows*cols`` row vector."""
    shape = a.shape
    return custom_op("flatten", a.value.reshape(1, -1), (a,), lambda g: (g.reshape(shape),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return custom_op(
        "sum_all", np.array([[a.value.sum()]]), (a,),
        lambda g: (np.full(shape, g[0, 0]),),
    )


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.value == 0):
        raise ZeroDivisionError("reciprocal: zero entry")
    r = 1.0 / a.value
    return custom_op("reciprocal", r, (a,), lambda g: (-g * r * r,))


def col_max(a: Tensor) -> Tensor:
    """Column-wise maximum as a ``1 x cols`` row; ties route the adjoint to the first max."""
    idx = a.value.argmax(axis=0)
    cols = np.arange(a.shape[1])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[idx, cols] = g[0]
        return (out,)

    return custom_op("col_max", a.value[idx, cols][None, :], (a,), vjp)


def col_mean(a: Tensor) -> Tensor:
    n, shape = a.shape[0], a.shape
    return custom_op(
        "col_mean", a.value.mean(axis=0, keepdims=True), (a,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def bce(p: Tensor, y: Tensor) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against constant labels ``y``.

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]``; the clamp has zero
    derivative outside that band.
    """
    _check_same("bce", p, y)
    pc = np.clip(p.value, BCE_CLAMP, 1.0 - BCE_CLAMP)
    yv = y.value
    n = pc.size
    loss = -np.mean(yv * np.log(pc) + (1.0 - yv) * np.log1p(-pc))
    inside = (p.value >= BCE_CLAMP) & (p.value <= 1.0 - BCE_CLAMP)

    def vjp(g):
        dp = (-(yv / pc) + (1.0 - yv) / (1.0 - pc)) / n
        return g[0, 0] * dp * inside, None

    return custom_op("bce", np.array([[loss]]), (p, y), vjp)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "row_scale": row_scale,
    "col_scale": col_scale,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "softmax_rows": softmax_rows,
    "flatten": flatten,
    "sum_all": sum_all,
    "bce": bce,
    "transpose": transpose,
    "reciprocal": reciprocal,
    "col_max": col_max,
    "col_mean": col_mean,
}


def forward_op(kind: str, inputs: Sequence, *args) -> Tensor:
    """Apply the op named ``kind``; raw arrays in ``inputs`` become constants."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    nodes = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    return fn(*nodes, *args)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a ``1 x 1`` loss.

    Returns a map from every requested leaf (default: all reachable leaves with
    ``requires_grad``) to its gradient. Requested leaves that do not influence
    the loss map to zeros.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward: loss must be 1x1, got {loss.shape}")
    order = _topo_order(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = adjoint.pop(id(node), None) if node._vjp is not None else adjoint.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg
    if wrt is None:
        wrt = [n for n in order if n.requires_grad and n._vjp is None]
    grads = {}
    for leaf in wrt:
        g = adjoint.get(id(leaf))
        grads[leaf] = np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return grads


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    passed: bool
    worst: tuple[str, tuple[int, int]] | None
    n_checked: int


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckResult:
    """Compare reverse-mode gradients against central differences for every scalar entry."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = {name: as_matrix(v, name=name) for name, v in params.items()}

    def value_at(arrays) -> float:
        return float(loss_fn({k: Tensor(v) for k, v in arrays.items()}).value[0, 0])

    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    loss = loss_fn(leaves)
    grads = backward(loss, leaves.values())
    f0 = float(loss.value[0, 0])
    if value_at(base) != f0 or value_at(base) != f0:
        raise OracleError("loss_fn is not deterministic for fixed parameters")

    worst_err, worst_at, count = 0.0, None, 0
    for name, arr in base.items():
        analytic = grads[leaves[name]]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            f_plus = value_at(base)
            arr[idx] = orig - step
            f_minus = value_at(base)
            arr[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = relative_error(numeric, float(analytic[idx]))
            count += 1
            if worst_at is None or err > worst_err:
                worst_err, worst_at = err, (name, idx)
    return GradCheckResult(worst_err, worst_err < tolerance, worst_at, count)
