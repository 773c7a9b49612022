"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

The op vocabulary is deliberately small: it covers a dense encoder,
prototype averaging, distance-softmax likelihoods and the losses built on
them.  Every op records its parents and a backward closure on the output
tensor; :func:`backward` walks that record once and then consumes it.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's rules."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class GraphError(RuntimeError):
    """Misuse of a computation graph (non-scalar loss, reused graph)."""


class Tensor:
    """Dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        # no copy for float64 arrays: ops never write into their inputs
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the named ops below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("elementwise tensor products are outside the op set; use scale()")
        return scale(self, float(other))

    __rmul__ = __mul__

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_values: np.ndarray, op: str, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = out_values
    out.grad = None
    out._op = op
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(n, k) @ (k, m)."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values

    def fn(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _record(av @ bv, "matmul", (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        def fn(g):
            return g, g
    elif a.values.ndim == 2 and b.values.ndim == 1 and b.shape[0] == a.shape[1]:
        def fn(g):
            return g, (g.sum(axis=0) if b.requires_grad else None)
    elif b.values.ndim == 0:
        def fn(g):
            return g, (np.asarray(g.sum()) if b.requires_grad else None)
    else:
        raise ShapeError("add", a.shape, b.shape)
    return _record(a.values + b.values, "add", (a, b), fn)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ W + b with ``b`` broadcast across rows."""
    if weight.values.ndim != 2 or bias.shape != (weight.shape[1],):
        raise ShapeError("affine", weight.shape, bias.shape)
    return add(matmul(x, weight), bias)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.values * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    # maximum (not where) so NaN propagates instead of being zeroed
    return _record(np.maximum(a.values, 0.0), "relu", (a,), lambda g: (g * mask,))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    """Mean over one axis, or over everything when ``axis`` is None."""
    v = a.values
    if axis is None:
        n = v.size
        if n == 0:
            raise ShapeError("mean", a.shape)
        shape = v.shape
        return _record(np.asarray(v.mean()), "mean", (a,),
                       lambda g: (np.full(shape, float(g) / n),))
    if not -v.ndim <= axis < v.ndim or v.shape[axis] == 0:
        raise ShapeError("mean", a.shape)
    n = v.shape[axis]
    shape = v.shape

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _record(v.mean(axis=axis), "mean", (a,), fn)


def pairwise_sqdist(x: Tensor, c: Tensor) -> Tensor:
    """Squared Euclidean distances between rows of ``x`` (n, d) and ``c`` (k, d)."""
    if x.values.ndim != 2 or c.values.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ShapeError("pairwise_sqdist", x.shape, c.shape)
    xv, cv = x.values, c.values
    diff = xv[:, None, :] - cv[None, :, :]
    out = np.einsum("nkd,nkd->nk", diff, diff)

    def fn(g):
        w = 2.0 * g[:, :, None] * diff
        gx = w.sum(axis=1) if x.requires_grad else None
        gc = -w.sum(axis=0) if c.requires_grad else None
        return gx, gc

    return _record(out, "pairwise_sqdist", (x, c), fn)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Row-wise log-sum-exp, shifted by the row max for stability."""
    v = a.values
    if v.ndim == 0 or v.shape[axis] == 0:
        raise ShapeError("logsumexp", a.shape)
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def fn(g):
        return (np.expand_dims(g, axis) * soft,)

    return _record(out, "logsumexp", (a,), fn)


def gather(a: Tensor, index) -> Tensor:
    """Pick ``a[i, index[i]]`` for every row ``i``."""
    idx = np.asarray(index, dtype=np.intp)
    if a.values.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("gather", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"gather: class index out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _record(a.values[rows, idx], "gather", (a,), fn)


def take_rows(a: Tensor, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.intp)
    if a.values.ndim < 1:
        raise ShapeError("take_rows", a.shape)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return _record(a.values[rows], "take_rows", (a,), fn)


def nll_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of the target column: mean(lse(l) - l[y])."""
    return mean(add(logsumexp(logits, axis=1), scale(gather(logits, targets), -1.0)))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each after all of its inputs."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    The graph is consumed: calling this twice on the same loss raises.
    """
    if loss.values.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None and node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParameterVector:
    """Ordered, named collection of float64 parameter arrays.

    Values are plain arrays so the vector can be copied, interpolated and
    serialised freely; :meth:`leaves` wraps them as fresh graph leaves for a
    single forward/backward pass.
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._data: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in items:
            if name in self._data:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._data[name] = np.array(arr, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def items(self):
        return self._data.items()

    def names(self) -> list[str]:
        return list(self._data)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._data.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self._data.values())

    def copy(self) -> "ParameterVector":
        return ParameterVector((k, v.copy()) for k, v in self._data.items())

    def leaves(self) -> OrderedDict[str, Tensor]:
        return OrderedDict((k, Tensor(v, requires_grad=True)) for k, v in self._data.items())

    def flat(self) -> np.ndarray:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._data.values()])

    def with_flat(self, flat: np.ndarray) -> "ParameterVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ShapeError("with_flat", (self.size,), flat.shape)
        out, pos = [], 0
        for k, v in self._data.items():
            out.append((k, flat[pos:pos + v.size].reshape(v.shape).copy()))
            pos += v.size
        return ParameterVector(out)

    def check_aligned(self, other: "ParameterVector", op: str = "align") -> None:
        if self.shapes() != other.shapes() or self.names() != other.names():
            raise ShapeError(op, tuple(self.shapes().items()), tuple(other.shapes().items()))

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParameterVector":
        return ParameterVector((k, fn(k, v)) for k, v in self._data.items())

    def equals(self, other: "ParameterVector") -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._data.values(), other._data.values())
        )

    def __repr__(self):
        return f"ParameterVector({len(self)} entries, {self.size} scalars)"


def grads_of(leaves: Mapping[str, Tensor]) -> ParameterVector:
    """Gradients of leaf tensors as a ParameterVector (zeros where untouched)."""
    return ParameterVector(
        (k, t.grad if t.grad is not None else np.zeros_like(t.values)) for k, t in leaves.items()
    )


def value_and_grad(fn: Callable[[Mapping[str, Tensor]], Tensor], params: ParameterVector):
    """Evaluate ``fn`` on fresh leaves and return (loss value, gradient vector)."""
    leaves = params.leaves()
    loss = fn(leaves)
    backward(loss)
    return loss.item(), grads_of(leaves)


def finite_difference_check(
    fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParameterVector,
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between autodiff and central finite differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_coords`` limits the check to a random subset of coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    value, grads = value_and_grad(fn, params)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite function value {value}")
    analytic = grads.flat()
    base = params.flat()
    coords = np.arange(base.size)
    if max_coords is not None and max_coords < base.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(base.size, size=max_coords, replace=False))

    def evaluate(flat):
        leaves = params.with_flat(flat).leaves()
        out = fn(leaves).item()
        if not np.isfinite(out):
            raise FloatingPointError(f"non-finite function value {out}")
        return out

    worst = 0.0
    for i in coords:
        plus = base.copy()
        minus = base.copy()
        plus[i] += step
        minus[i] -= step
        numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
