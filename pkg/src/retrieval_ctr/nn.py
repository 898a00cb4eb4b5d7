"""Small float64 reverse-mode autodiff over numpy arrays.

Only the handful of ops the selector and predictor networks need are
provided.  Each op returns a new :class:`Tensor` remembering its parents and a
closure that pushes the output gradient back to them; :meth:`Tensor.backward`
walks the graph in reverse topological order.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"UBRCKPT1"
PROB_EPS = 1e-6


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    def __init__(self, data, parents: tuple["Tensor", ...] = (), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Back-propagate from this tensor.  Leaf grads accumulate across calls."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {
            id(self): np.broadcast_to(
                np.asarray(1.0 if grad is None else grad, dtype=np.float64), self.shape
            ).copy()
        }
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if b.data.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(ga, a.shape), gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.data @ b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return Tensor(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    """``log(sigmoid(x))`` computed without overflow."""
    z = x.data
    val = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid(z)
    return Tensor(val, (x,), lambda g: (g * (1.0 - s),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def softmax_array(x: np.ndarray, axis: int = -1, mask: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax; masked-out entries get exactly zero weight."""
    if mask is not None and not np.all(np.any(mask, axis=axis)):
        raise ValueError("softmax over a fully masked slice")
    s = softmax_array(x.data, axis, mask)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return Tensor(s, (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return Tensor(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert ``axis`` and repeat ``n`` times along it."""
    data = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return Tensor(data, (x,), lambda g: (g.sum(axis=axis),))


def tsum(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor(np.sum(x.data, axis=axis), (x,), backward)


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.data.size)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather; gradients scatter-add into the looked-up rows only."""
    ids = np.asarray(ids, dtype=np.int64)
    ids = np.where((ids >= 0) & (ids < table.shape[0]), ids, 0)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor(table.data[ids], (table,), backward)


def bce_with_logits(z: Tensor, y: np.ndarray) -> Tensor:
    """Per-element ``-[y log σ(z) + (1-y) log(1-σ(z))]``."""
    y = np.asarray(y, dtype=np.float64)
    val = np.maximum(z.data, 0.0) - z.data * y + np.log1p(np.exp(-np.abs(z.data)))
    s = _sigmoid(z.data)
    return Tensor(val, (z,), lambda g: (g * (s - y),))


# --------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named trainable tensors plus optimizer state.

    Shapes are fixed once a tensor is added.  ``sgd_step`` is the only place
    parameters change during training.
    """

    def __init__(self) -> None:
        self.tensors: OrderedDict[str, Tensor] = OrderedDict()
        self.hparams: dict[str, float] = {}
        self._velocity: dict[str, np.ndarray] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def zero_grad(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            self.tensors[n].grad = None

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: self.tensors[n].data.copy() for n in self.names(prefix)}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            if arr.shape != self.tensors[n].shape:
                raise ValueError(f"shape mismatch restoring {n!r}")
            self.tensors[n].data = arr.copy()

    def assert_finite(self, prefix: str = "") -> None:
        for n in self.names(prefix):
            if not np.all(np.isfinite(self.tensors[n].data)):
                raise FloatingPointError(f"parameter {n!r} is not finite")


def embed_lookup(store: ParamStore, name: str, ids) -> Tensor:
    return embedding(store[name], np.asarray(ids, dtype=np.int64))


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "none": lambda x: x,
}


def dense(store: ParamStore, layer: str, x: Tensor, activation: str = "none") -> Tensor:
    """``act(x @ W + b)`` with ``layer.W`` / ``layer.b`` from the store."""
    W, bias = store[f"{layer}.W"], store[f"{layer}.b"]
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"{layer}: input dim {x.shape[-1]} != weight rows {W.shape[0]}")
    return _ACTIVATIONS[activation](add(matmul(x, W), bias))


def init_dense(store: ParamStore, layer: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    limit = math.sqrt(6.0 / n_in)
    store.add(f"{layer}.W", rng.uniform(-limit, limit, size=(n_in, n_out)))
    store.add(f"{layer}.b", np.zeros(n_out))


def init_matrix(store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator) -> None:
    limit = math.sqrt(3.0 / n_in)
    store.add(name, rng.uniform(-limit, limit, size=(n_in, n_out)))


def init_embedding(store: ParamStore, name: str, vocab: int, dim: int, rng: np.random.Generator) -> None:
    table = rng.uniform(-0.05, 0.05, size=(vocab, dim))
    table[0] = 0.0
    store.add(name, table)


def sgd_step(
    store: ParamStore,
    lr: float,
    direction: str = "minimize",
    prefix: str = "",
    momentum: float = 0.0,
) -> None:
    """Apply ``p -= lr * grad`` (or ``+=`` when maximizing) and clear grads.

    Tensors without a gradient are left untouched.  Any non-finite gradient
    aborts the whole step before anything is written.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    sign = {"minimize": -1.0, "maximize": 1.0}[direction]
    names = [n for n in store.names(prefix) if store[n].grad is not None]
    for n in names:
        if not np.all(np.isfinite(store[n].grad)):
            raise FloatingPointError(f"non-finite gradient in {n!r}")
    for n in names:
        t = store[n]
        step = t.grad
        if momentum:
            prev = store._velocity.get(n)
            step = step.copy() if prev is None else momentum * prev + step
            store._velocity[n] = step
        t.data = t.data + sign * lr * step
        t.grad = None


# --------------------------------------------------------------------------
# verification


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-3,
    floor: float = 1e-6,
) -> float:
    """Max elementwise relative error between backprop and central differences.

    ``fn`` must rebuild the graph from the current values of ``params`` and
    return a scalar tensor.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float(fn().data)
            flat[i] = old - eps
            down = float(fn().data)
            flat[i] = old
            num = (up - down) / (2 * eps)
            ai = a.reshape(-1)[i]
            err = abs(ai - num) / max(abs(ai), abs(num), floor)
            worst = max(worst, err)
        p.grad = None
    return worst


# --------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(store: ParamStore, path: str | Path) -> None:
    """Binary container: magic, count, then per tensor name/shape/little-endian f64."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", len(store.tensors))
    for name, t in store.tensors.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", t.data.ndim)
        buf += struct.pack(f"<{t.data.ndim}Q", *t.data.shape)
        buf += t.data.astype("<f8").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    off = 8
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out
