"""Minimal define-by-run reverse-mode differentiation over float64 numpy arrays.

Every operation returns a new :class:`Tensor`.  When any input requires a
gradient the result records its op tag, its parents and whatever it needs for
the backward rule; that record is the tape.  Backward rules live in
``BACKWARD_RULES`` keyed by op tag, so a rule can be swapped out (useful for
negative-control tests of the gradient checker).
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "TapeError",
    "NondeterministicLossError",
    "RngStream",
    "draw",
    "add",
    "sub",
    "mul",
    "matmul",
    "concat",
    "stack",
    "slice_",
    "reshape",
    "broadcast",
    "sum_",
    "mean",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "log_softmax",
    "embedding_gather",
    "backward",
    "finite_difference_check",
    "BACKWARD_RULES",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NondeterministicLossError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array plus the tape record that produced it."""

    __slots__ = ("data", "requires_grad", "name", "op", "parents", "saved")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.saved: tuple = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" op={self.op}" if self.op else ""
        nm = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}{nm})"

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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def _raise_not_scalar(t: Tensor):
    raise ShapeError("item", t.shape, detail="tensor is not a scalar")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, op: str, parents: Sequence[Tensor], saved: tuple = ()) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out.saved = saved
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


class _IndexGrad:
    """Gradient that only touches ``parent[index]``; applied into a buffer."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value

    def apply(self, buf: np.ndarray) -> None:
        buf[self.index] += self.value


class _ScatterGrad:
    """Row-scatter gradient for gathers with possibly repeated ids."""

    __slots__ = ("ids", "value")

    def __init__(self, ids, value):
        self.ids = ids
        self.value = value

    def apply(self, buf: np.ndarray) -> None:
        np.add.at(buf, self.ids, self.value)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _record(a.data + b.data, "add", (a, b))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return _record(a.data - b.data, "sub", (a, b))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _record(a.data * b.data, "mul", (a, b))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _record(a.data @ b.data, "matmul", (a, b))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts), detail=f"axis={axis}") from None
    ax = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _record(data, "concat", ts, (ax, bounds))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in ts)) from None
    return _record(data, "stack", ts, (axis % data.ndim,))


def slice_(a: Tensor, index) -> Tensor:
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (slice, int, np.integer, type(Ellipsis), type(None))):
            raise TypeError("slice_ supports basic indexing only; use embedding_gather for ids")
    try:
        data = a.data[index]
    except IndexError:
        raise ShapeError("slice", a.shape, detail=f"index {index}") from None
    return _record(data, "slice", (a,), (index,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _record(data, "reshape", (a,))


def broadcast(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        data = np.broadcast_to(a.data, tuple(shape))
    except ValueError:
        raise ShapeError("broadcast", a.shape, tuple(shape)) from None
    return _record(np.array(data), "broadcast", (a,))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), (axis, keepdims))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return _record(np.mean(a.data, axis=axis, keepdims=keepdims), "mean", (a,), (axis, keepdims, n))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _record(y, "sigmoid", (a,), (y,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, "tanh", (a,), (y,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(y, "exp", (a,), (y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log: nonpositive input (min {a.data.min():.3g})")
    return _record(np.log(a.data), "log", (a,))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _record(y, "log_softmax", (a,), (y, axis))


def embedding_gather(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding_gather: ids must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding_gather", table.shape, detail="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_gather: id out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}"
        )
    return _record(table.data[ids], "embedding_gather", (table,), (ids,))


# ---------------------------------------------------------------------------
# backward rules: (g, node) -> tuple of parent gradients (None = no gradient)


def _bw_add(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_sub(g, node):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _bw_mul(g, node):
    a, b = node.parents
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def _bw_matmul(g, node):
    a, b = node.parents
    ga = g @ b.data.T if a.requires_grad else None
    gb = a.data.T @ g if b.requires_grad else None
    return ga, gb


def _bw_concat(g, node):
    ax, bounds = node.saved
    return tuple(np.split(g, bounds, axis=ax))


def _bw_stack(g, node):
    (ax,) = node.saved
    return tuple(np.take(g, i, axis=ax) for i in range(g.shape[ax]))


def _bw_slice(g, node):
    (index,) = node.saved
    return (_IndexGrad(index, g),)


def _bw_reshape(g, node):
    return (g.reshape(node.parents[0].shape),)


def _bw_broadcast(g, node):
    return (_unbroadcast(g, node.parents[0].shape),)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _bw_sum(g, node):
    axis, keepdims = node.saved
    return (_expand_reduced(g, node.parents[0].shape, axis, keepdims),)


def _bw_mean(g, node):
    axis, keepdims, n = node.saved
    return (_expand_reduced(g, node.parents[0].shape, axis, keepdims) / n,)


def _bw_sigmoid(g, node):
    (y,) = node.saved
    return (g * y * (1.0 - y),)


def _bw_tanh(g, node):
    (y,) = node.saved
    return (g * (1.0 - y * y),)


def _bw_exp(g, node):
    (y,) = node.saved
    return (g * y,)


def _bw_log(g, node):
    return (g / node.parents[0].data,)


def _bw_log_softmax(g, node):
    y, axis = node.saved
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


def _bw_embedding_gather(g, node):
    (ids,) = node.saved
    return (_ScatterGrad(ids, g),)


BACKWARD_RULES: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "matmul": _bw_matmul,
    "concat": _bw_concat,
    "stack": _bw_stack,
    "slice": _bw_slice,
    "reshape": _bw_reshape,
    "broadcast": _bw_broadcast,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "exp": _bw_exp,
    "log": _bw_log,
    "log_softmax": _bw_log_softmax,
    "embedding_gather": _bw_embedding_gather,
}


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def _params_items(params) -> list[tuple[str, Tensor]]:
    if params is None:
        return []
    if isinstance(params, Mapping):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def backward(root: Tensor, params=None) -> dict[str, np.ndarray]:
    """Gradients of scalar ``root`` w.r.t. every tensor in ``params``.

    ``params`` is a mapping name -> Tensor (a ParamSet) or a sequence of
    tensors (keys are then positional indices as strings).  Parameters not
    reachable from ``root`` get zero gradients.
    """
    if root.size != 1:
        raise TapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise TapeError("backward: root is not on the tape (no path to any differentiable tensor)")
    order = _topo_order(root)
    grads: dict[int, object] = {id(root): np.ones_like(root.data)}
    owned: set[int] = set()

    def accumulate(parent: Tensor, g) -> None:
        key = id(parent)
        cur = grads.get(key)
        if isinstance(g, (_IndexGrad, _ScatterGrad)):
            if cur is None:
                buf = np.zeros(parent.shape)
            elif key in owned:
                buf = cur
            else:
                buf = np.array(cur, dtype=np.float64)
            g.apply(buf)
            grads[key] = buf
            owned.add(key)
        elif cur is None:
            grads[key] = g
        elif key in owned:
            cur += g
        else:
            grads[key] = cur + g
            owned.add(key)

    for node in reversed(order):
        if node.op is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        owned.discard(id(node))
        pgs = BACKWARD_RULES[node.op](g, node)
        for parent, pg in zip(node.parents, pgs):
            if pg is not None and parent.requires_grad:
                accumulate(parent, pg)

    out: dict[str, np.ndarray] = {}
    for name, p in _params_items(params):
        g = grads.get(id(p))
        out[name] = np.zeros(p.shape) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)
    return out


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params,
    eps: float = 1e-5,
    n_coords: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between backward and central differences.

    ``loss_fn`` is called repeatedly and must rebuild the graph with identical
    noise each time.  Up to ``n_coords`` coordinates per tensor are probed;
    error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    items = _params_items(params)
    root = loss_fn()
    if loss_fn().item() != root.item():
        raise NondeterministicLossError("loss_fn gives different values on repeated calls; freeze its noise")
    grads = backward(root, dict(items))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in items:
        flat = p.data.reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False) if k < flat.size else np.arange(flat.size)
        analytic = grads[name].reshape(-1)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
            num = (up - down) / (2 * eps)
            a = analytic[j]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# randomness


class RngStream:
    """Seeded random stream; ``child(key)`` derives an independent stream.

    Streams are keyed by ``(seed, key path)`` through numpy's SeedSequence, so
    the same path always yields the same draws regardless of what else ran.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self.counter = 0
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape) -> np.ndarray:
        self.counter += 1
        return self._gen.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        self.counter += 1
        return self._gen.random(shape)

    def bernoulli(self, r: float, shape) -> np.ndarray:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"bernoulli rate must be in [0, 1], got {r}")
        return (self.uniform(shape) < r).astype(np.int64)

    def categorical(self, p) -> np.ndarray | int:
        """One index per row of ``p`` (a scalar index for a 1-D ``p``)."""
        p = np.asarray(p, dtype=np.float64)
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
            raise ValueError("categorical: probabilities must be nonnegative and sum to 1")
        rows = p.reshape(-1, p.shape[-1])
        u = self.uniform(rows.shape[0])
        cdf = np.cumsum(rows, axis=1)
        cdf[:, -1] = 1.0
        idx = (cdf <= u[:, None]).sum(axis=1)
        # zero-probability trailing classes can never be selected
        idx = np.minimum(idx, rows.shape[1] - 1)
        if p.ndim == 1:
            return int(idx[0])
        return idx.reshape(p.shape[:-1])

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        self.counter += 1
        return self._gen.choice(n, size=size, replace=replace)


def draw(stream: RngStream, kind: str, shape=None, p=None, r: float | None = None):
    """Functional front end: ``kind`` is standard-normal, categorical or bernoulli."""
    if kind == "standard-normal":
        return Tensor(stream.normal(shape))
    if kind == "categorical":
        return stream.categorical(p)
    if kind == "bernoulli":
        return Tensor(stream.bernoulli(r, shape))
    raise ValueError(f"unknown draw kind {kind!r}")

