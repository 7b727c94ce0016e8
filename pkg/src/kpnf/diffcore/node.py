"""Shape-carrying reverse-mode autodiff nodes.

The graph is a DAG of :class:`DiffNode` values built eagerly by the ops in
:mod:`kpnf.diffcore.ops`. Each op stores, per parent, a vector-Jacobian
product closure; :func:`backward` replays them in reverse topological order.

Gradients accumulate: calling :func:`backward` twice without
:func:`zero_grad` doubles every gradient. Within one backward call the
upstream signal is tracked separately per node, so fan-out sums correctly
regardless of what is already stored in ``.gradient``.

Every forward op verifies its output is finite; NaN/Inf raises
:class:`~kpnf.errors.NonFiniteValueError` at the op that produced it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from kpnf.errors import NonFiniteValueError, NonScalarRootError, ShapeMismatchError

# Dtypes supported by the engine: 64-bit for testing/grad-check, 32-bit for training.
FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracle passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class DiffNode:
    """One value in the computation graph.

    Attributes:
        values: numpy array (row-major), float32 or float64.
        gradient: same-shape array, allocated lazily by backward().
        requires_grad: True for trainable leaves and anything computed
            from one while grad recording is enabled.
    """

    __slots__ = ("values", "gradient", "requires_grad", "_parents", "_vjps", "_op")

    def __init__(
        self,
        values: np.ndarray,
        requires_grad: bool = False,
        parents: Sequence["DiffNode"] = (),
        vjps: Sequence[Callable[[np.ndarray], np.ndarray] | None] = (),
        op: str = "leaf",
    ):
        self.values = values
        self.gradient: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._vjps = tuple(vjps)
        self._op = op

    # -- introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"DiffNode(op={self._op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph management -------------------------------------------------

    def detach(self) -> "DiffNode":
        """A new leaf sharing this node's values, cut off from the graph."""
        return DiffNode(self.values, requires_grad=False, op="detach")

    def accumulate_gradient(self, g: np.ndarray) -> None:
        # g is owned by the caller's traversal and never mutated afterwards,
        # so the first accumulation can adopt it without copying
        if self.gradient is None:
            self.gradient = g
        else:
            self.gradient = self.gradient + g

    # -- operator sugar (thin wrappers over ops) --------------------------

    def __add__(self, other):
        from kpnf.diffcore import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from kpnf.diffcore import ops

        return ops.add(other, self)

    def __mul__(self, other):
        from kpnf.diffcore import ops

        return ops.multiply(self, other)

    def __rmul__(self, other):
        from kpnf.diffcore import ops

        return ops.multiply(other, self)

    def __sub__(self, other):
        from kpnf.diffcore import ops

        return ops.subtract(self, other)

    def __rsub__(self, other):
        from kpnf.diffcore import ops

        return ops.subtract(other, self)

    def __truediv__(self, other):
        from kpnf.diffcore import ops

        return ops.divide(self, other)

    def __matmul__(self, other):
        from kpnf.diffcore import ops

        return ops.matmul(self, other)

    def __neg__(self):
        from kpnf.diffcore import ops

        return ops.negate(self)


def constant(values, dtype=np.float64) -> DiffNode:
    """A non-trainable leaf."""
    arr = np.asarray(values, dtype=dtype)
    return DiffNode(arr, requires_grad=False, op="constant")


def parameter(values, dtype=np.float64) -> DiffNode:
    """A trainable leaf; gradients accumulate into ``.gradient``."""
    arr = np.array(values, dtype=dtype)
    return DiffNode(arr, requires_grad=True, op="parameter")


def as_node(x, dtype=None) -> DiffNode:
    """Coerce arrays/scalars to a constant node; pass DiffNodes through."""
    if isinstance(x, DiffNode):
        return x
    return constant(x, dtype=np.float64 if dtype is None else dtype)


def check_finite(values: np.ndarray, op: str) -> None:
    """Raise if ``values`` contains NaN or Inf (every op calls this).

    One-pass check: a sum is non-finite iff some element is (inf keeps its
    sign through pairwise summation, inf - inf and NaN both yield NaN).
    Activation magnitudes are orders of magnitude below sum overflow, and a
    float32 sum that does overflow still reports inf, which is an error
    state either way.
    """
    if values.size == 0:
        return
    if not math.isfinite(float(np.sum(values))):
        raise NonFiniteValueError(f"op {op!r} produced non-finite values")


def make_node(
    values: np.ndarray,
    parents: Sequence[DiffNode],
    vjps: Sequence[Callable[[np.ndarray], np.ndarray] | None],
    op: str,
) -> DiffNode:
    """Assemble an op result, honoring no_grad and the finiteness invariant."""
    check_finite(values, op)
    if not _grad_enabled:
        return DiffNode(values, requires_grad=False, op=op)
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return DiffNode(values, requires_grad=False, op=op)
    return DiffNode(values, requires_grad=True, parents=parents, vjps=vjps, op=op)


def _toposort(root: DiffNode) -> list[DiffNode]:
    """Forward topological order (dependencies first) of the requires_grad subgraph."""
    order: list[DiffNode] = []
    visited: set[int] = set()
    stack: list[tuple[DiffNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: DiffNode) -> None:
    """Accumulate d(root)/d(node) into every requires_grad node's gradient.

    ``root`` must be scalar (size 1). Fan-out sums; repeated calls accumulate.
    """
    if root.values.size != 1:
        raise NonScalarRootError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    # Per-call upstream signals; .gradient is only the cross-call accumulator.
    upstream: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    order = _toposort(root)
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.accumulate_gradient(g)
        for parent, vjp in zip(node._parents, node._vjps):
            if vjp is None or not parent.requires_grad:
                continue
            contrib = vjp(g)
            if contrib.shape != parent.shape:
                raise ShapeMismatchError(
                    f"vjp of {node._op!r} returned shape {contrib.shape} for parent shape {parent.shape}"
                )
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + contrib
            else:
                upstream[key] = contrib


def zero_grad(nodes: Iterable[DiffNode]) -> None:
    for node in nodes:
        node.gradient = None
