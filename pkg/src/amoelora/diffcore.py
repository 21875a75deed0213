"""Dense 2-D float64 arrays with tape-based reverse-mode differentiation.

Values are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.  A
:class:`Node` wraps one value; every operation below returns a new Node and,
when a :class:`Tape` is active, records itself so :func:`backward` can replay
the graph in reverse creation order.  Outside a tape nothing is recorded,
which is what evaluation code relies on for speed.

Broadcasting is deliberately limited to scalar scaling, row-vector addition
and the explicit ``colscale`` op, so each backward rule stays short.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """A precondition of an operation is violated."""


def tensor2(data, *, check_finite: bool = True) -> np.ndarray:
    """Coerce ``data`` to a C-contiguous 2-D float64 array."""
    arr = np.array(data, dtype=np.float64, copy=True, order="C")
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got ndim={arr.ndim}")
    if check_finite and not np.all(np.isfinite(arr)):
        raise ContractError("tensor contains NaN or Inf")
    return arr


class Node:
    __slots__ = ("value", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, *,
                 op: str = "leaf", parents: tuple = (), name: str | None = None):
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.value) if self.grad is None else self.grad

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other: Node) -> Node:
        return add(self, other)

    def __sub__(self, other: Node) -> Node:
        return sub(self, other)

    def __mul__(self, other: Node) -> Node:
        return hadamard(self, other)

    def __matmul__(self, other: Node) -> Node:
        return matmul(self, other)


def parameter(data, name: str | None = None) -> Node:
    """Leaf node that accumulates gradient; rejects non-finite entries."""
    return Node(tensor2(data), requires_grad=True, name=name)


def constant(data) -> Node:
    """Leaf node that never accumulates gradient."""
    if isinstance(data, Node):
        return data
    return Node(tensor2(data, check_finite=False), requires_grad=False)


class Tape:
    """Ordered record of executed operations.

    Creation order is a valid topological order, since an op can only
    consume nodes that already exist.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Temporarily suspend recording (evaluation inside a training step)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _emit(value: np.ndarray, op: str, parents: tuple[Node, ...],
          backward_fn: Callable[[np.ndarray], None]) -> Node:
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Node(value, requires_grad=needs, op=op, parents=parents if needs else ())
    if needs:
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def _shape_str(n: Node) -> str:
    return f"{n.rows}x{n.cols}"


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {_shape_str(a)} and {_shape_str(b)} differ")


# ---------------------------------------------------------------- core ops

def matmul(a: Node, b: Node) -> Node:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: cannot multiply {_shape_str(a)} by {_shape_str(b)}")
    av, bv = a.value, b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ bv.T)
        if b.requires_grad:
            b._accumulate(av.T @ g)

    return _emit(av @ bv, "matmul", (a, b), bw)


def softmax_rows(a: Node) -> Node:
    if a.cols < 1:
        raise DimensionError("softmax_rows: need at least one column")
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        a._accumulate(s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _emit(s, "softmax_rows", (a,), bw)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may also be a 1×n row added to every row of ``a``."""
    if a.shape == b.shape:
        def bw(g):
            a._accumulate(g)
            b._accumulate(g)
        return _emit(a.value + b.value, "add", (a, b), bw)
    if b.rows == 1 and b.cols == a.cols:
        def bw_row(g):
            a._accumulate(g)
            b._accumulate(g.sum(axis=0, keepdims=True))
        return _emit(a.value + b.value, "add_row", (a, b), bw_row)
    raise DimensionError(f"add: shapes {_shape_str(a)} and {_shape_str(b)} do not conform")


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")

    def bw(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _emit(a.value - b.value, "sub", (a, b), bw)


def hadamard(a: Node, b: Node) -> Node:
    _same_shape(a, b, "hadamard")
    av, bv = a.value, b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * bv)
        if b.requires_grad:
            b._accumulate(g * av)

    return _emit(av * bv, "hadamard", (a, b), bw)


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def bw(g):
        a._accumulate(c * g)

    return _emit(c * a.value, "scale", (a,), bw)


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)

    def bw(g):
        a._accumulate(g * (1.0 - t * t))

    return _emit(t, "tanh", (a,), bw)


def relu(a: Node) -> Node:
    mask = a.value > 0

    def bw(g):
        a._accumulate(g * mask)

    return _emit(a.value * mask, "relu", (a,), bw)


def mean_rows(a: Node) -> Node:
    """m×n → 1×n column means."""
    m = a.rows

    def bw(g):
        a._accumulate(np.broadcast_to(g / m, a.shape))

    return _emit(a.value.mean(axis=0, keepdims=True), "mean_rows", (a,), bw)


def rowsum(a: Node) -> Node:
    """m×n → m×1."""
    def bw(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _emit(a.value.sum(axis=1, keepdims=True), "rowsum", (a,), bw)


def colscale(a: Node, s: Node) -> Node:
    """Multiply row i of ``a`` (m×n) by the scalar ``s[i]`` (s is m×1)."""
    if s.cols != 1 or s.rows != a.rows:
        raise DimensionError(f"colscale: {_shape_str(s)} cannot scale rows of {_shape_str(a)}")
    av, sv = a.value, s.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * sv)
        if s.requires_grad:
            s._accumulate((g * av).sum(axis=1, keepdims=True))

    return _emit(av * sv, "colscale", (a, s), bw)


def sum_all(a: Node) -> Node:
    def bw(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _emit(np.array([[a.value.sum()]]), "sum_all", (a,), bw)


def transpose(a: Node) -> Node:
    def bw(g):
        a._accumulate(g.T)

    return _emit(np.ascontiguousarray(a.value.T), "transpose", (a,), bw)


def slice_cols(a: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= a.cols:
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for {_shape_str(a)}")

    def bw(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        a._accumulate(full)

    return _emit(np.ascontiguousarray(a.value[:, start:stop]), "slice_cols", (a,), bw)


def concat_cols(parts: Sequence[Node]) -> Node:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError("concat_cols: parts have different row counts")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _emit(np.concatenate([p.value for p in parts], axis=1), "concat_cols", tuple(parts), bw)


def gather_rows(table: Node, ids: np.ndarray) -> Node:
    """Embedding lookup: row ``ids[t]`` of ``table`` for each t."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise ContractError(f"gather_rows: id out of range for table with {table.rows} rows")

    def bw(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _emit(table.value[ids], "gather_rows", (table,), bw)


def layernorm_rows(a: Node, eps: float = 1e-5) -> Node:
    """Normalize each row to zero mean and unit variance (no affine part)."""
    mu = a.value.mean(axis=1, keepdims=True)
    xc = a.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        a._accumulate(inv * (g - gm - y * gy))

    return _emit(y, "layernorm_rows", (a,), bw)


def cross_entropy_rows(logits: Node, targets: np.ndarray, mask: np.ndarray) -> Node:
    """Mean of -log softmax(logits)[t, targets[t]] over rows with mask[t] true."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != (logits.rows,) or mask.shape != (logits.rows,):
        raise DimensionError("cross_entropy: targets and mask need one entry per logits row")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("cross_entropy: mask selects no positions")
    rows = np.flatnonzero(mask)
    z = logits.value[rows]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = logp[np.arange(rows.size), targets[rows]]
    loss = -picked.sum() / count

    def bw(g):
        p = np.exp(logp)
        p[np.arange(rows.size), targets[rows]] -= 1.0
        full = np.zeros_like(logits.value)
        full[rows] = p * (g[0, 0] / count)
        logits._accumulate(full)

    return _emit(np.array([[loss]]), "cross_entropy", (logits,), bw)


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "scale": scale,
    "tanh": tanh,
    "mean_rows": mean_rows,
}


def elementwise(kind: str, *operands):
    """Dispatch by name: ``elementwise("scale", a, 2.0)``."""
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------- backward

def backward(tape: Tape, root: Node) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf with requires_grad."""
    if root.shape != (1, 1):
        raise ContractError(f"backward: root must be 1x1, got {_shape_str(root)}")
    if not root.requires_grad:
        return
    for n in tape.nodes:
        n.grad = None
    root.grad = np.ones((1, 1))
    for n in reversed(tape.nodes):
        if n.grad is not None and n._backward is not None:
            n._backward(n.grad)
            n.grad = None  # intermediates are not kept


def grad_check(loss_fn: Callable[[], Node], params: Iterable[Node], eps: float = 1e-6) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values on each
    call.  Relative error per entry is ``|ga-gn| / max(1e-8, |ga|+|gn|)``.
    """
    if not eps > 0:
        raise ContractError("grad_check: eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    analytic = [p.grad_or_zeros().copy() for p in params]
    worst = 0.0
    with no_tape():
        for p, ga in zip(params, analytic):
            flat = p.value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(loss_fn().value[0, 0])
                flat[i] = orig - eps
                fm = float(loss_fn().value[0, 0])
                flat[i] = orig
                gn = (fp - fm) / (2.0 * eps)
                g = ga.reshape(-1)[i]
                rel = abs(g - gn) / max(1e-8, abs(g) + abs(gn))
                worst = max(worst, rel)
    return worst
