"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every array is float64 and exactly two-dimensional. Batching is done by
stacking equally sized blocks of rows; operations that need the block
structure (grouped attention, row pooling) take the group size explicitly.

Differentiable operations are recorded on the active :class:`Tape`. Outside
of a ``with Tape():`` block nothing is recorded, which is what inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class TensorError(Exception):
    pass


class ShapeError(TensorError, ValueError):
    pass


class DegenerateMaskError(TensorError, ValueError):
    """A softmax row had no valid (finite) entry."""


class ProvenanceError(TensorError):
    pass


class EvaluationError(TensorError, ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got array of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

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

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable operations.

    Used as a context manager; while active, operations whose inputs require
    gradients are appended in execution order. ``backward`` replays them in
    exact reverse order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = ""
    out._node = None
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        node = _Node(op, tuple(inputs), out, backward_fn)
        out._node = node
        tape.nodes.append(node)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _reduce_to(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    if g.shape != shape:
        raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")
    return g


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf.

    Gradients of intermediate results live only for the duration of the call;
    repeated calls accumulate into leaves additively.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.shape}")
    node = loss._node
    if node is None or not any(n is node for n in reversed(tape.nodes)):
        if loss.requires_grad and node is None:
            # a leaf used directly as the loss
            _accumulate(loss, np.ones((1, 1)))
            return
        raise ProvenanceError("loss was not produced through this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for n in reversed(tape.nodes):
        g = grads.pop(id(n.output), None)
        if g is None:
            continue
        in_grads = n.backward_fn(g)
        for t, gi in zip(n.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                _accumulate(t, gi)
            else:
                if gi.shape != t.data.shape:
                    gi = _reduce_to(gi, t.data.shape)
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# elementwise and structural operations


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product with row/column broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def add_bias_rows(x: Tensor, b: Tensor) -> Tensor:
    """x + 1_m b without materializing the ones column."""
    if b.rows != 1 or b.cols != x.cols:
        raise ShapeError(f"add_bias_rows: bias {b.shape} does not fit {x.shape}")
    return _record("add_bias_rows", (x, b), x.data + b.data,
                   lambda g: (g, g.sum(axis=0, keepdims=True)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def identity(x: Tensor) -> Tensor:
    return x


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record("log", (x,), np.log(xd), lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record("square", (x,), xd * xd, lambda g: (2.0 * g * xd,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.array([[x.data.sum()]]),
                   lambda g: (np.full(shape, g[0, 0]),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def masked_fill(x: Tensor, mask) -> Tensor:
    """Set entries where ``mask`` is False to negative infinity.

    ``mask`` is a boolean validity grid of the same shape as ``x``; valid
    entries pass through unchanged.
    """
    valid = np.asarray(mask, dtype=bool)
    if valid.shape != x.shape:
        raise ShapeError(f"masked_fill: mask {valid.shape} does not match {x.shape}")
    out = np.where(valid, x.data, -np.inf)
    return _record("masked_fill", (x,), out, lambda g: (np.where(valid, g, 0.0),))


def _softmax_last(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateMaskError("softmax row has no finite entry (fully masked)")
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    y = _softmax_last(x.data)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", (x,), y, bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data
    m = z.max(axis=1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateMaskError("log-softmax row has no finite entry")
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _record("log_softmax_rows", (x,), y,
                   lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.cols
    if n < 2:
        raise ShapeError("layer_norm_rows needs at least two columns")
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise ShapeError(f"layer_norm_rows: affine {gain.shape}/{bias.shape} vs width {n}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return (dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True))

    return _record("layer_norm_rows", (x, gain, bias), out, bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    widths = [p.cols for p in parts]
    bounds = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record("concat_cols", tuple(parts), np.concatenate([p.data for p in parts], axis=1), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    heights = [p.rows for p in parts]
    bounds = np.cumsum([0] + heights)

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record("concat_rows", tuple(parts), np.concatenate([p.data for p in parts], axis=0), bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record("slice_rows", (x,), x.data[start:stop].copy(), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_cols", (x,), x.data[:, start:stop].copy(), bw)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` (embedding lookup); ids is a flat int array."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise IndexError(f"row id out of range for table with {table.rows} rows")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("gather_rows", (table,), table.data[idx], bw)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Each row repeated ``k`` times consecutively (row r -> rows r*k..r*k+k-1)."""
    m, n = x.shape

    def bw(g):
        return (g.reshape(m, k, n).sum(axis=1),)

    return _record("repeat_rows", (x,), np.repeat(x.data, k, axis=0), bw)


def pool_rows(y: Tensor, w: Tensor, group: int) -> Tensor:
    """Per block of ``group`` rows, the weighted row sum ``w @ block``.

    ``y`` is (G*group x d), ``w`` is (1 x group); result is (G x d).
    """
    if w.shape != (1, group) or y.rows % group:
        raise ShapeError(f"pool_rows: weights {w.shape}, input {y.shape}, group {group}")
    G = y.rows // group
    y3 = y.data.reshape(G, group, y.cols)
    wv = w.data[0]
    out = np.einsum("j,gjd->gd", wv, y3)

    def bw(g):
        dy = np.einsum("j,gd->gjd", wv, g).reshape(y.shape)
        dw = np.einsum("gd,gjd->j", g, y3).reshape(1, group)
        return (dy, dw)

    return _record("pool_rows", (y, w), out, bw)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def grouped_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, groups: int,
                      validity=None, scale_by: float = 1.0,
                      dropout_rate: float = 0.0, rng=None,
                      keep_weights: bool = False):
    """Block-diagonal multi-head attention core.

    ``q`` is (G*m x H*dk), ``k`` is (G*n x H*dk), ``v`` is (G*n x H*dv). Query
    block g attends to key block g only; head h uses column block h. Returns
    the concatenated per-head ``softmax(mask(q k^T / scale_by)) v``, shape
    (G*m x H*dv), and optionally the (G, H, m, n) weight array.

    ``validity`` broadcasts to (G, m, n); False entries get zero weight.
    """
    G, H = groups, heads
    if q.rows % G or k.rows % G or k.rows != v.rows or q.cols % H or v.cols % H or q.cols != k.cols:
        raise ShapeError(f"grouped_attention: q {q.shape} k {k.shape} v {v.shape} "
                         f"groups {G} heads {H}")
    m, n = q.rows // G, k.rows // G
    dk, dv = q.cols // H, v.cols // H
    q4 = q.data.reshape(G, m, H, dk).transpose(0, 2, 1, 3)
    k4 = k.data.reshape(G, n, H, dk).transpose(0, 2, 1, 3)
    v4 = v.data.reshape(G, n, H, dv).transpose(0, 2, 1, 3)
    logits = np.matmul(q4, k4.transpose(0, 1, 3, 2)) / scale_by
    valid = None
    if validity is not None:
        valid = np.broadcast_to(np.asarray(validity, dtype=bool), (G, m, n))[:, None, :, :]
        logits = np.where(valid, logits, -np.inf)
    a = _softmax_last(logits)
    keep = None
    if dropout_rate > 0.0 and rng is not None:
        keep = (rng.random(a.shape) >= dropout_rate) / (1.0 - dropout_rate)
        a_used = a * keep
    else:
        a_used = a
    o4 = np.matmul(a_used, v4)
    out = o4.transpose(0, 2, 1, 3).reshape(G * m, H * dv)

    def bw(g):
        g4 = g.reshape(G, m, H, dv).transpose(0, 2, 1, 3)
        dv4 = np.matmul(a_used.transpose(0, 1, 3, 2), g4)
        da = np.matmul(g4, v4.transpose(0, 1, 3, 2))
        if keep is not None:
            da = da * keep
        dz = a * (da - (da * a).sum(axis=-1, keepdims=True)) / scale_by
        dq4 = np.matmul(dz, k4)
        dk4 = np.matmul(dz.transpose(0, 1, 3, 2), q4)
        return (dq4.transpose(0, 2, 1, 3).reshape(G * m, H * dk),
                dk4.transpose(0, 2, 1, 3).reshape(G * n, H * dk),
                dv4.transpose(0, 2, 1, 3).reshape(G * n, H * dv))

    res = _record("grouped_attention", (q, k, v), out, bw)
    if keep_weights:
        return res, a
    return res


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      coords: Optional[Iterable[tuple[int, int]]] = None, floor: float = 1e-12) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps ``x`` to a 1x1 tensor. The error per coordinate is
    ``|analytic - central| / (|analytic| + |central| + floor)``. ``coords``
    restricts the sweep to a subset of coordinates; by default all are used.
    ``x`` is perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    was = x.requires_grad
    old_grad = x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
        if not np.isfinite(y.data).all():
            raise EvaluationError(f"f(x) is not finite: {y.data}")
        backward(y, tape)
        analytic = x.grad if x.grad is not None else np.zeros(x.shape)
    finally:
        x.requires_grad = was
        x.grad = old_grad
    if coords is None:
        coords = np.ndindex(*x.shape)
    worst = 0.0
    for (i, j) in coords:
        orig = x.data[i, j]
        x.data[i, j] = orig + h
        fp = f(x).item()
        x.data[i, j] = orig - h
        fm = f(x).item()
        x.data[i, j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite value of f near coordinate {(i, j)}")
        central = (fp - fm) / (2.0 * h)
        a = analytic[i, j]
        err = abs(a - central) / (abs(a) + abs(central) + floor)
        worst = max(worst, err)
    return worst


def named_parameters(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Walk dataclasses, lists and dicts and collect tensors with dotted names."""
    import dataclasses

    out: list[tuple[str, Tensor]] = []

    def walk(o, name):
        if isinstance(o, Tensor):
            out.append((name, o))
        elif dataclasses.is_dataclass(o) and not isinstance(o, type):
            for f in dataclasses.fields(o):
                walk(getattr(o, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(o, (list, tuple)):
            for i, item in enumerate(o):
                walk(item, f"{name}.{i}" if name else str(i))
        elif isinstance(o, dict):
            for k in sorted(o):
                walk(o[k], f"{name}.{k}" if name else str(k))

    walk(obj, prefix)
    return out
