"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every primitive computes its forward value eagerly. When a :class:`Tape` is
active on the current thread, the primitive also appends a node holding a
closure that maps the output gradient to input gradients. ``backward`` walks
the tape once in reverse node order, so gradient accumulation is
deterministic.

Parameters are named :class:`Tensor` objects living in a :class:`ParamStore`.
They enter a tape lazily as leaf nodes the first time a primitive touches
them while recording. Unnamed tensors that were not produced on the active
tape are constants.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor", "Tape", "ParamStore", "ShapeError", "CheckpointFormatError",
    "recording", "no_record", "backward", "default_dtype", "get_dtype", "const",
    "matmul", "add", "sub", "mul", "div", "neg", "scale", "tanh", "sigmoid",
    "exp", "log", "softmax", "concat", "stack", "gather_rows",
    "scatter_add_rows", "scatter_add", "pick", "select", "slice_last",
    "reshape", "sum", "mean", "minimum", "clamp_min", "stop_gradient",
    "apply_primitive", "finite_difference_check",
]

_local = threading.local()


class ShapeError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


def get_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for constants created by primitives."""
    prev = get_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    __slots__ = ("data", "name", "_tape", "_idx")

    def __init__(self, data, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.name = name
        self._tape: Tape | None = None
        self._idx = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def const(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


class Tape:
    """Append-only computation record; single use per training step."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, tuple[int, Tensor]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def node_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._idx
        if t.name is None:
            return None
        key = id(t)
        if key not in self.leaves:
            self.leaves[key] = (len(self.nodes), t)
            self.nodes.append(_Node("leaf", (), None, t.shape))
        return self.leaves[key][0]

    def clear(self) -> None:
        self.nodes.clear()
        self.leaves.clear()


def _current_tape() -> Tape | None:
    return getattr(_local, "tape", None)


@contextlib.contextmanager
def recording() -> Iterator[Tape]:
    """Activate a fresh tape on this thread for the duration of the block."""
    prev = _current_tape()
    tape = Tape()
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    prev = _current_tape()
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = prev


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._tape = None
    out._idx = -1
    tape = _current_tape()
    if tape is not None:
        idxs = tuple(tape.node_of(t) for t in inputs)
        if any(i is not None for i in idxs):
            out._tape = tape
            out._idx = len(tape.nodes)
            tape.nodes.append(_Node(kind, idxs, grad_fn, data.shape))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = const(a), const(b)
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[0 if b.data.ndim == 1 else -2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    out = np.matmul(A, B)

    def grad_fn(g):
        b2 = B[:, None] if B.ndim == 1 else B
        a2 = A[None, :] if A.ndim == 1 else A
        g2 = g
        if B.ndim == 1:
            g2 = g2[..., None]
        if A.ndim == 1:
            g2 = g2[..., None, :]
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if A.ndim == 1:
            ga = ga[..., 0, :]
        if B.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _emit("matmul", out, (a, b), grad_fn)


def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    _broadcast_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _emit("subtract", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    _broadcast_shape("multiply", a, b)
    A, B = a.data, b.data
    return _emit("multiply", A * B, (a, b),
                 lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def div(a, b) -> Tensor:
    a, b = const(a), const(b)
    _broadcast_shape("divide", a, b)
    A, B = a.data, b.data
    if np.any(B == 0):
        raise ValueError("divide: division by zero")
    out = A / B
    return _emit("divide", out, (a, b),
                 lambda g: (_unbroadcast(g / B, A.shape), _unbroadcast(-g * out / B, B.shape)))


def neg(x) -> Tensor:
    x = const(x)
    return _emit("negate", -x.data, (x,), lambda g: (-g,))


def scale(x, c: float) -> Tensor:
    x = const(x)
    c = x.data.dtype.type(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def tanh(x) -> Tensor:
    x = const(x)
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x) -> Tensor:
    x = const(x)
    d = x.data
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype, copy=False)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def exp(x) -> Tensor:
    x = const(x)
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = const(x)
    d = x.data
    if np.any(d <= 0):
        raise ValueError(f"log: non-positive input (min {d.min()})")
    return _emit("log", np.log(d), (x,), lambda g: (g / d,))


def softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis. ``mask`` (0/1, broadcastable) zeroes excluded entries."""
    x = const(x)
    d = x.data
    if mask is None:
        z = d - d.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        m = np.asarray(mask, dtype=bool)
        z = np.where(m, d, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.where(m, np.exp(z), 0).astype(d.dtype, copy=False)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _emit("softmax-lastdim", y, (x,), grad_fn)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [const(t) for t in xs]
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat-lastdim: incompatible shapes {[t.shape for t in xs]}") from None
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _emit("concat-lastdim", out, xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [const(t) for t in xs]
    try:
        out = np.stack([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in xs]}") from None
    n = len(xs)
    return _emit("stack", out, xs,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def gather_rows(table: Tensor, ids) -> Tensor:
    """``table[ids]`` for an integer array ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"gather-rows: id {int(ids.max())} out of range for {n} rows")
    shape = table.shape

    def grad_fn(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, *shape[1:]))
        return (out,)

    return _emit("gather-rows", table.data[ids], (table,), grad_fn)


def scatter_add_rows(src: Tensor, ids, n_rows: int) -> Tensor:
    """Sum rows of ``src`` into an ``n_rows``-row result at positions ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != src.shape[:1]:
        raise ShapeError(f"scatter-add-rows: ids {ids.shape} vs src {src.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise IndexError(f"scatter-add-rows: id {int(ids.max())} out of range for {n_rows} rows")
    out = np.zeros((n_rows, *src.shape[1:]), dtype=src.data.dtype)
    np.add.at(out, ids, src.data)
    return _emit("scatter-add-rows", out, (src,), lambda g: (g[ids],))


def scatter_add(base: Tensor, index, src: Tensor) -> Tensor:
    """``out = base; out[..., index[..., j]] += src[..., j]`` along the last axis."""
    base, src = const(base), const(src)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != src.shape or base.shape[:-1] != src.shape[:-1]:
        raise ShapeError(f"scatter-add: base {base.shape}, index {index.shape}, src {src.shape}")
    width = base.shape[-1]
    if index.size and (index.min() < 0 or index.max() >= width):
        raise IndexError(f"scatter-add: index {int(index.max())} out of range for width {width}")
    out = base.data.copy()
    lead = np.indices(index.shape)[:-1]
    np.add.at(out, (*lead, index), src.data)

    def grad_fn(g):
        return g, np.take_along_axis(g, index, axis=-1)

    return _emit("scatter-add", out, (base, src), grad_fn)


def pick(x: Tensor, index) -> Tensor:
    """Select one entry per row along the last axis: ``x[..., index[...]]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index {index.shape} vs input {x.shape}")
    width = x.shape[-1]
    if index.size and (index.min() < 0 or index.max() >= width):
        raise IndexError(f"pick: index {int(index.max())} out of range for width {width}")
    out = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]
    shape, dtype = x.shape, x.data.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _emit("pick", out, (x,), grad_fn)


def select(x: Tensor, axis: int, i: int) -> Tensor:
    """``x`` indexed at position ``i`` of ``axis`` (the axis is dropped)."""
    shape, dtype = x.shape, x.data.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        idx = [slice(None)] * len(shape)
        idx[axis] = i
        full[tuple(idx)] = g
        return (full,)

    return _emit("select", np.take(x.data, i, axis=axis), (x,), grad_fn)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice", x.data[..., start:stop], (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = const(x)
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", out, (x,), grad_fn)


def mean(x, axis=None) -> Tensor:
    x = const(x)
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]
    out = np.asarray(x.data.mean(axis=axis))

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("mean", out, (x,), grad_fn)


def minimum(a, b) -> Tensor:
    a, b = const(a), const(b)
    _broadcast_shape("minimum", a, b)
    A, B = a.data, b.data
    take_a = A <= B
    return _emit("minimum", np.minimum(A, B), (a, b),
                 lambda g: (_unbroadcast(g * take_a, A.shape), _unbroadcast(g * ~take_a, B.shape)))


def clamp_min(x, lo: float) -> Tensor:
    x = const(x)
    keep = x.data >= lo
    out = np.where(keep, x.data, x.data.dtype.type(lo))
    return _emit("clamp-min", out, (x,), lambda g: (g * keep,))


def stop_gradient(x: Tensor) -> Tensor:
    """Same value, no dataflow edge back to ``x``."""
    return Tensor(x.data)


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "multiply-elementwise": mul,
    "subtract": sub,
    "divide": div,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "softmax-lastdim": softmax,
    "concat-lastdim": lambda *xs: concat(xs),
    "gather-rows": gather_rows,
    "scatter-add-rows": scatter_add_rows,
    "sum": sum,
    "mean": mean,
    "log": log,
    "negate": neg,
    "scale": scale,
    "stack": lambda *xs: stack(xs),
    "minimum": minimum,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by its kind name."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------------


def backward(loss: Tensor, params: ParamStore | None = None, clear: bool = True) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` keyed by parameter name.

    With ``params`` given, every stored parameter gets an entry; those not
    reachable from ``loss`` receive zeros.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads_by_name: dict[str, np.ndarray] = {}
    tape = loss._tape
    if tape is not None:
        grads: list[np.ndarray | None] = [None] * len(tape.nodes)
        grads[loss._idx] = np.ones_like(loss.data)
        nodes = tape.nodes
        for i in range(loss._idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = nodes[i]
            if node.grad_fn is None:
                continue
            for j, gj in zip(node.inputs, node.grad_fn(g)):
                if j is None or gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
            grads[i] = None  # intermediate no longer needed
        for idx, t in tape.leaves.values():
            g = grads[idx]
            if g is not None:
                grads_by_name[t.name] = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        if clear:
            tape.clear()
    if params is not None:
        for name, t in params.items():
            if name not in grads_by_name:
                grads_by_name[name] = np.zeros_like(t.data)
    return grads_by_name


# ----------------------------------------------------------------------------
# parameters and checkpoint files
# ----------------------------------------------------------------------------

MAGIC = b"CBDC"
FORMAT_VERSION = 1


class ParamStore:
    """Ordered mapping of unique parameter names to tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=get_dtype()), name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def with_prefix(self, prefix: str) -> list[str]:
        return [n for n in self._params if n == prefix or n.startswith(prefix + ".")]

    def size(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()]))

    def copy(self, dtype=None) -> ParamStore:
        out = ParamStore()
        for name, t in self._params.items():
            dt = dtype or t.data.dtype
            out._params[name] = Tensor(np.array(t.data, dtype=dt), name=name, dtype=dt)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def assign(self, name: str, data) -> None:
        t = self._params[name]
        data = np.asarray(data, dtype=t.data.dtype)
        if data.shape != t.shape:
            raise ShapeError(f"assign {name}: shape {data.shape} != {t.shape}")
        t.data = data

    def save(self, path) -> None:
        write_tensor_file(path, self.state())

    @classmethod
    def load(cls, path) -> ParamStore:
        store = cls()
        for name, arr in read_tensor_file(path).items():
            store._params[name] = Tensor(arr, name=name, dtype=np.float32)
        return store


def write_tensor_file(path, arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_tensor_file(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise CheckpointFormatError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointFormatError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated file ({exc})") from None
    return out


# ----------------------------------------------------------------------------
# gradient verification
# ----------------------------------------------------------------------------


def finite_difference_check(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-3,
    dtype=np.float64,
    names: Sequence[str] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The check runs on a copy of ``params`` cast to ``dtype``; pass
    ``dtype=None`` to evaluate at the parameters' own precision.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = params.copy(dtype=dtype)
    ctx = default_dtype(dtype) if dtype is not None else contextlib.nullcontext()
    with ctx:
        with recording():
            loss = loss_fn(work)
            analytic = backward(loss, work)
        with no_record():
            base = float(loss_fn(work).item())
            if base != float(loss.item()):
                raise RuntimeError("loss_fn is not deterministic: two identical forward passes disagree")
            worst = 0.0
            for name in names or work.names():
                t = work[name]
                flat = t.data.reshape(-1)
                g = analytic[name].reshape(-1)
                for k in range(flat.size):
                    orig = flat[k]
                    flat[k] = orig + eps
                    up = float(loss_fn(work).item())
                    flat[k] = orig - eps
                    down = float(loss_fn(work).item())
                    flat[k] = orig
                    numeric = (up - down) / (2 * eps)
                    a = float(g[k])
                    denom = max(abs(a), abs(numeric), 1e-8)
                    worst = max(worst, abs(a - numeric) / denom)
    return worst
