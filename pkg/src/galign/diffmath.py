"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Node` wraps an immutable numpy array together with a gradient
buffer and a record of the operation that produced it.  Calling
:func:`backward` on a scalar root walks the graph in reverse topological
order and accumulates gradients into every reachable node that requires
them.  The operation set is deliberately small: it is exactly the closure
needed to express the contrastive alignment losses and the two encoders.

All values are float64.  Gradients accumulate across repeated backward
passes; fresh leaves start with a zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ParameterError, ShapeError

Array = np.ndarray

# Columns with an L2 norm at or below this are rejected rather than
# silently renormalized; degenerate features are always a bug upstream.
ZERO_NORM_EPS = 1e-10


@dataclass
class OpRecord:
    """What produced a node: op name, parent nodes, and the vjp closure.

    ``backward`` maps the node's output gradient to one gradient per
    parent (``None`` for parents that do not require gradients).
    """

    name: str
    parents: tuple["Node", ...]
    backward: Callable[[Array], tuple[Array | None, ...]]


class Node:
    """A tensor in the computation graph.

    ``values`` is immutable after construction.  ``grad`` is a same-shaped
    float64 buffer, initially zero, written by :func:`backward`.
    """

    __slots__ = ("values", "grad", "op", "requires_grad")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        op: OpRecord | None = None,
    ) -> None:
        arr = np.array(values, dtype=np.float64)
        arr.flags.writeable = False
        self.values = arr
        self.grad = np.zeros_like(arr)
        self.op = op
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(
                f"item() requires a single-element node, got shape {self.shape}"
            )
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    # Light operator sugar over the functional API below.
    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return elementwise_mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Node":
        return scale(self, float(other))

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __neg__(self) -> "Node":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        tag = self.op.name if self.op is not None else "leaf"
        return f"Node(shape={self.shape}, op={tag}, requires_grad={self.requires_grad})"


def constant(values) -> Node:
    """A leaf that does not receive gradients."""
    return Node(values, requires_grad=False)


def parameter(values) -> Node:
    """A trainable leaf: gradients accumulate into it during backward."""
    return Node(values, requires_grad=True)


def _result(name: str, values: Array, parents: tuple[Node, ...], vjp) -> Node:
    needs = any(p.requires_grad for p in parents)
    record = OpRecord(name=name, parents=parents, backward=vjp)
    return Node(values, requires_grad=needs, op=record)


def _require_2d(name: str, *nodes: Node) -> None:
    for n in nodes:
        if n.ndim != 2:
            raise ShapeError(f"{name} requires 2-D inputs, got shape {n.shape}")


def _check_temperature(name: str, temperature: float) -> float:
    t = float(temperature)
    if not np.isfinite(t) or t <= 0.0:
        raise ParameterError(f"{name}: temperature must be finite and > 0, got {temperature}")
    return t


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def vjp(g: Array):
        return g @ b.values.T, a.values.T @ g

    return _result("matmul", out, (a, b), vjp)


def _broadcast_pair(name: str, a: Node, b: Node) -> tuple[int, ...]:
    """Shapes must match exactly, or one side may be a (n, 1) column bias."""
    if a.shape == b.shape:
        return a.shape
    if (
        a.ndim == 2
        and b.ndim == 2
        and a.shape[0] == b.shape[0]
        and 1 in (a.shape[1], b.shape[1])
    ):
        return (a.shape[0], max(a.shape[1], b.shape[1]))
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def add(a: Node, b: Node) -> Node:
    _broadcast_pair("add", a, b)
    out = a.values + b.values

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", out, (a, b), vjp)


def sub(a: Node, b: Node) -> Node:
    _broadcast_pair("sub", a, b)
    out = a.values - b.values

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", out, (a, b), vjp)


def scale(a: Node, factor: float) -> Node:
    c = float(factor)
    if not np.isfinite(c):
        raise ParameterError(f"scale: factor must be finite, got {factor}")
    out = a.values * c

    def vjp(g: Array):
        return (g * c,)

    return _result("scale", out, (a,), vjp)


def elementwise_mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: shapes differ, {a.shape} vs {b.shape}")
    out = a.values * b.values

    def vjp(g: Array):
        return g * b.values, g * a.values

    return _result("elementwise_mul", out, (a, b), vjp)


def exp(a: Node) -> Node:
    out = np.exp(a.values)

    def vjp(g: Array):
        return (g * out,)

    return _result("exp", out, (a,), vjp)


def log(a: Node) -> Node:
    if np.any(a.values <= 0.0):
        worst = float(a.values.min())
        raise DomainError(f"log: input must be strictly positive, min value {worst}")
    out = np.log(a.values)

    def vjp(g: Array):
        return (g / a.values,)

    return _result("log", out, (a,), vjp)


def _check_axis(name: str, a: Node, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{name}: axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def _expand_reduced(g: Array, shape: tuple[int, ...], axis: int, keepdims: bool) -> Array:
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def sum_axis(a: Node, axis: int, keepdims: bool = False) -> Node:
    axis = _check_axis("sum_axis", a, axis)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _result("sum_axis", out, (a,), vjp)


def mean_axis(a: Node, axis: int, keepdims: bool = False) -> Node:
    axis = _check_axis("mean_axis", a, axis)
    n = a.shape[axis]
    out = a.values.mean(axis=axis, keepdims=keepdims)

    def vjp(g: Array):
        return (_expand_reduced(g, a.shape, axis, keepdims) / n,)

    return _result("mean_axis", out, (a,), vjp)


def _rows_2d(a: Node, name: str) -> tuple[Array, bool]:
    if a.ndim == 1:
        return a.values.reshape(1, -1), True
    if a.ndim == 2:
        return a.values, False
    raise ShapeError(f"{name} requires a 1-D or 2-D input, got shape {a.shape}")


def softmax_rows(a: Node, temperature: float = 1.0) -> Node:
    """Row-wise softmax of ``a / temperature``, computed via logsumexp."""
    tau = _check_temperature("softmax_rows", temperature)
    x, squeezed = _rows_2d(a, "softmax_rows")
    z = x / tau
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    y = np.exp(z - lse)
    out = y[0] if squeezed else y

    def vjp(g: Array):
        g2 = g.reshape(1, -1) if squeezed else g
        gz = (g2 - (g2 * y).sum(axis=1, keepdims=True)) * y
        gx = gz / tau
        return (gx[0] if squeezed else gx,)

    return _result("softmax_rows", out, (a,), vjp)


def logsumexp_rows(a: Node, temperature: float = 1.0) -> Node:
    """Row-wise log-sum-exp of ``a / temperature`` with a max shift.

    A 2-D (n, m) input yields an (n, 1) column; a 1-D input yields a
    scalar.  A single-entry row reduces to exactly that entry when the
    temperature is 1.
    """
    tau = _check_temperature("logsumexp_rows", temperature)
    x, squeezed = _rows_2d(a, "logsumexp_rows")
    z = x / tau
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    soft = np.exp(z - lse)
    out = lse.reshape(()) if squeezed else lse

    def vjp(g: Array):
        g2 = g.reshape(1, 1) if squeezed else g
        gx = g2 * soft / tau
        return (gx[0] if squeezed else gx,)

    return _result("logsumexp_rows", out, (a,), vjp)


def _cols_2d(a: Node, name: str) -> tuple[Array, bool]:
    if a.ndim == 1:
        return a.values.reshape(-1, 1), True
    if a.ndim == 2:
        return a.values, False
    raise ShapeError(f"{name} requires a 1-D or 2-D input, got shape {a.shape}")


def l2_normalize_cols(a: Node) -> Node:
    """Normalize each column to unit L2 norm.

    Columns with norm at or below ``ZERO_NORM_EPS`` raise a
    :class:`DomainError` naming the offending column index.
    """
    x, squeezed = _cols_2d(a, "l2_normalize_cols")
    norms = np.sqrt((x * x).sum(axis=0, keepdims=True))
    bad = np.flatnonzero(norms[0] <= ZERO_NORM_EPS)
    if bad.size:
        j = int(bad[0])
        raise DomainError(
            f"l2_normalize_cols: column {j} has norm {float(norms[0, j]):.3e},"
            f" at or below {ZERO_NORM_EPS:.0e}"
        )
    y = x / norms
    out = y[:, 0] if squeezed else y

    def vjp(g: Array):
        g2 = g.reshape(-1, 1) if squeezed else g
        dots = (g2 * y).sum(axis=0, keepdims=True)
        gx = (g2 - y * dots) / norms
        return (gx[:, 0] if squeezed else gx,)

    return _result("l2_normalize_cols", out, (a,), vjp)


def transpose(a: Node) -> Node:
    _require_2d("transpose", a)
    out = a.values.T

    def vjp(g: Array):
        return (g.T,)

    return _result("transpose", out, (a,), vjp)


def concat_cols(nodes: Sequence[Node]) -> Node:
    """Concatenate columns; 1-D inputs are treated as single columns."""
    if len(nodes) == 0:
        raise ShapeError("concat_cols: need at least one input")
    mats: list[Array] = []
    for n in nodes:
        m, _ = _cols_2d(n, "concat_cols")
        mats.append(m)
    rows = mats[0].shape[0]
    for n, m in zip(nodes, mats):
        if m.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: row counts differ, {rows} vs {m.shape[0]} (shape {n.shape})"
            )
    out = np.concatenate(mats, axis=1)
    widths = [m.shape[1] for m in mats]
    offsets = np.cumsum([0] + widths)

    def vjp(g: Array):
        grads = []
        for node, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            piece = g[:, lo:hi]
            grads.append(piece[:, 0] if node.ndim == 1 else piece)
        return tuple(grads)

    return _result("concat_cols", out, tuple(nodes), vjp)


def relu(a: Node) -> Node:
    out = np.maximum(a.values, 0.0)
    mask = a.values > 0.0

    def vjp(g: Array):
        return (g * mask,)

    return _result("relu", out, (a,), vjp)


def gather_rows(a: Node, indices: Sequence[int]) -> Node:
    """Select rows of a 2-D table; backward scatter-adds into the table."""
    _require_2d("gather_rows", a)
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size == 0:
        raise ShapeError("gather_rows: need at least one index")
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise IndexError(
            f"gather_rows: index out of range for table with {a.shape[0]} rows"
        )
    out = a.values[idx]

    def vjp(g: Array):
        gt = np.zeros_like(a.values)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result("gather_rows", out, (a,), vjp)


# ---------------------------------------------------------------------------
# Single-entry dispatch
# ---------------------------------------------------------------------------

_UNARY = {
    "exp": exp,
    "log": log,
    "relu": relu,
    "transpose": transpose,
    "l2_normalize_cols": l2_normalize_cols,
}

TENSOR_OP_KINDS = (
    "matmul",
    "add",
    "sub",
    "scale",
    "elementwise_mul",
    "exp",
    "log",
    "sum_axis",
    "mean_axis",
    "softmax_rows",
    "logsumexp_rows",
    "l2_normalize_cols",
    "transpose",
    "concat_cols",
    "relu",
    "gather_rows",
)


def tensor_op(kind: str, inputs: Sequence[Node], **params) -> Node:
    """Apply one named operation to ``inputs``.

    This is a thin dispatcher over the module-level functions so callers
    (and tests) can enumerate the closed op set by name.
    """
    ins = list(inputs)

    def _arity(n: int) -> None:
        if len(ins) != n:
            raise ParameterError(f"{kind}: expected {n} input(s), got {len(ins)}")

    if kind in _UNARY:
        _arity(1)
        return _UNARY[kind](ins[0], **params)
    if kind in ("matmul", "add", "sub", "elementwise_mul"):
        _arity(2)
        fn = {"matmul": matmul, "add": add, "sub": sub, "elementwise_mul": elementwise_mul}[kind]
        return fn(ins[0], ins[1], **params)
    if kind == "scale":
        _arity(1)
        return scale(ins[0], **params)
    if kind == "sum_axis":
        _arity(1)
        return sum_axis(ins[0], **params)
    if kind == "mean_axis":
        _arity(1)
        return mean_axis(ins[0], **params)
    if kind == "softmax_rows":
        _arity(1)
        return softmax_rows(ins[0], **params)
    if kind == "logsumexp_rows":
        _arity(1)
        return logsumexp_rows(ins[0], **params)
    if kind == "concat_cols":
        return concat_cols(ins, **params)
    if kind == "gather_rows":
        _arity(1)
        return gather_rows(ins[0], **params)
    raise ParameterError(f"tensor_op: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Node) -> list[Node]:
    """Iterative post-order DFS; parents appear before their consumers."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.op is not None:
            for p in node.op.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate gradients of a scalar ``root`` into the graph.

    The root must hold exactly one element.  Each call computes one full
    reverse pass (seeded with a gradient of one at the root) and adds the
    result onto every reachable ``grad`` buffer, so two backward passes
    without a reset double the stored gradients.
    """
    if root.values.size != 1:
        raise ContractError(
            f"backward requires a scalar root, got shape {root.shape}"
        )
    order = _topological_order(root)
    flowing: dict[int, Array] = {id(root): np.ones_like(root.values)}
    for node in reversed(order):
        g_out = flowing.pop(id(node), None)
        if g_out is None:
            continue
        node.grad = node.grad + g_out
        if node.op is None:
            continue
        grads = node.op.backward(g_out)
        if len(grads) != len(node.op.parents):
            raise ContractError(
                f"{node.op.name}: backward produced {len(grads)} gradients"
                f" for {len(node.op.parents)} parents"
            )
        for parent, g in zip(node.op.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.shape:
                raise ContractError(
                    f"{node.op.name}: gradient shape {g.shape} does not match"
                    f" parent shape {parent.shape}"
                )
            if id(parent) in flowing:
                flowing[id(parent)] = flowing[id(parent)] + g
            else:
                flowing[id(parent)] = g


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    """Outcome of one finite-difference check of a scalar function."""

    op_name: str
    max_rel_err: float
    max_abs_err: float
    probe_count: int

    def __post_init__(self) -> None:
        if self.probe_count < 1:
            raise ContractError("GradReport: probe_count must be at least 1")
        if self.max_rel_err < 0.0 or self.max_abs_err < 0.0:
            raise ContractError("GradReport: error fields must be non-negative")


def grad_check(
    f: Callable[[Node], Node],
    x: Node,
    h: float = 1e-5,
    max_probes: int = 32,
    seed: int = 0,
    name: str | None = None,
) -> GradReport:
    """Compare analytic gradients of ``f`` at ``x`` against central differences.

    ``f`` must map a single leaf node to a scalar node.  Every coordinate
    of ``x`` is probed when there are at most ``max_probes`` of them;
    larger inputs are probed at a seeded random subset of coordinates.
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if not (np.isfinite(h) and h > 0.0):
        raise ParameterError(f"grad_check: step h must be finite and > 0, got {h}")
    if max_probes < 1:
        raise ParameterError(f"grad_check: max_probes must be >= 1, got {max_probes}")

    leaf = parameter(x.values)
    root = f(leaf)
    if root.values.size != 1:
        raise ContractError(
            f"grad_check: f must return a scalar, got shape {root.shape}"
        )
    backward(root)
    analytic = leaf.grad

    n = leaf.values.size
    if n <= max_probes:
        coords = np.arange(n)
    else:
        rng = np.random.default_rng(seed)
        coords = rng.choice(n, size=max_probes, replace=False)

    max_rel = 0.0
    max_abs = 0.0
    base = leaf.values
    for idx in coords:
        plus = base.copy()
        plus.flat[idx] += h
        minus = base.copy()
        minus.flat[idx] -= h
        numeric = (f(constant(plus)).item() - f(constant(minus)).item()) / (2.0 * h)
        a = float(analytic.flat[idx])
        abs_err = abs(a - numeric)
        rel_err = abs_err / max(abs(a), abs(numeric), 1e-8)
        max_abs = max(max_abs, abs_err)
        max_rel = max(max_rel, rel_err)

    if name is None:
        name = root.op.name if root.op is not None else "leaf"
    return GradReport(
        op_name=name,
        max_rel_err=max_rel,
        max_abs_err=max_abs,
        probe_count=len(coords),
    )
