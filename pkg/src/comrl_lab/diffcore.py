"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Every network in the package (encoders, decoders, classifiers, actors,
critics) is built from the ops in this module. Elementwise binary ops
require identical shapes; the only implicit broadcast is the bias term of
:func:`affine`. Row replication is done explicitly with :func:`gather_rows`.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "DomainError", "NumericalError",
    "constant", "parameter", "affine", "tanh", "relu", "exp", "log", "square",
    "power", "scale", "shift", "add", "sub", "mul", "div", "sq_dist",
    "sum_", "mean", "softmax", "log_softmax", "logsumexp", "concat",
    "gather_rows", "reshape", "slice_cols", "backward", "grad_check",
    "MLP", "Adam", "save_weights", "load_weights",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


class Tensor:
    """A node in the computation graph.

    Leaves are created with :func:`parameter` (trainable) or :func:`constant`.
    ``grad`` is filled by :func:`backward` and always matches ``data.shape``.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "name", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf", vjp=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.op = op
        self.name = name
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    def __radd__(self, other):
        return shift(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _node(value, parents, op, vjp) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=rg, parents=parents if rg else (), op=op, vjp=vjp if rg else None)


def _same_shape(op, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.data.shape} vs {b.data.shape} "
                         "(no implicit broadcasting; use gather_rows to replicate rows)")


# ---------------------------------------------------------------- ops

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x of shape (batch, fan_in)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(f"affine: expected x (B,i), w (i,o), b (o,); got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine: incompatible shapes x {x.shape}, w {w.shape}, b {b.shape}")
    xv, wv = x.data, w.data

    def vjp(g):
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb
    return _node(xv @ wv + b.data, (x, w, b), "affine", vjp)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), "tanh", lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.maximum(x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), "exp", lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        bad = float(np.min(x.data))
        raise DomainError(f"log: non-positive input (min value {bad!r})")
    xv = x.data
    return _node(np.log(xv), (x,), "log", lambda g: (g / xv,))


def square(x: Tensor) -> Tensor:
    xv = x.data
    return _node(xv * xv, (x,), "square", lambda g: (2.0 * g * xv,))


def power(x: Tensor, p: float) -> Tensor:
    xv = x.data
    if p != int(p) and np.any(xv < 0):
        raise DomainError("power: fractional exponent of a negative value")
    return _node(xv ** p, (x,), "power", lambda g: (g * p * xv ** (p - 1),))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), "scale", lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _node(x.data + float(c), (x,), "shift", lambda g: (g,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _node(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    av, bv = a.data, b.data
    return _node(av / bv, (a, b), "div", lambda g: (g / bv, -g * av / (bv * bv)))


def sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Squared L2 distance along the last axis: (B,k),(B,k) -> (B,); (k,),(k,) -> ()."""
    _same_shape("sq_dist", a, b)
    d = a.data - b.data

    def vjp(g):
        gd = 2.0 * np.expand_dims(g, -1) * d
        return gd, -gd
    return _node(np.sum(d * d, axis=-1), (a, b), "sq_dist", vjp)


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return _node(np.sum(x.data, axis=axis), (x,), "sum", vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    if n == 0:
        raise ShapeError("mean: empty reduction")
    return scale(sum_(x, axis), 1.0 / n)


def logsumexp(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp over the last axis, max-shifted."""
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=-1, keepdims=True)
    p = e / s
    return _node(np.squeeze(m + np.log(s), -1), (x,), "logsumexp",
                 lambda g: (np.expand_dims(g, -1) * p,))


def log_softmax(x: Tensor) -> Tensor:
    m = np.max(x.data, axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * np.sum(g, axis=-1, keepdims=True),)
    return _node(y, (x,), "log_softmax", vjp)


def softmax(x: Tensor) -> Tensor:
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)
    return _node(p, (x,), "softmax", vjp)


def concat(xs: Sequence[Tensor], axis=-1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    ax = axis % xs[0].data.ndim
    for t in xs[1:]:
        if t.data.ndim != xs[0].data.ndim or any(
                t.shape[i] != xs[0].shape[i] for i in range(t.data.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} along axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=ax))
    return _node(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), "concat", vjp)


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: index must be 1-D")
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
    shape = x.data.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)
    return _node(x.data[idx], (x,), "gather_rows", vjp)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _node(y, (x,), "reshape", lambda g: (g.reshape(old),))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.data.shape

    def vjp(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)
    return _node(x.data[..., start:stop], (x,), "slice_cols", vjp)


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor) -> dict:
    """Accumulate d(root)/d(leaf) into ``leaf.grad``; return {leaf: grad}.

    Leaf gradients are overwritten, not accumulated across calls.
    """
    if root.data.size != 1 or root.data.ndim > 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    grads = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                node.grad = g
                leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step=1e-5, tol=1e-4,
               floor=1e-6) -> dict:
    """Compare analytic gradients of ``f()`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; the
    report holds the per-tensor maximum under ``errors`` and ``passed``.
    """
    if not 0 < step <= 1e-2:
        raise ValueError(f"grad_check: step must be in (0, 1e-2], got {step}")
    params = list(params)
    v1, v2 = f().item(), f().item()
    if v1 != v2:
        raise ValueError("grad_check: f is non-deterministic (two forward passes disagree)")
    for p in params:
        p.grad = None
    backward(f())
    errors = {}
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        rel = np.abs(analytic - numeric) / denom
        errors[p.name or f"param{k}"] = float(rel.max()) if rel.size else 0.0
    return {"errors": errors, "max_error": max(errors.values(), default=0.0),
            "passed": all(e <= tol for e in errors.values())}


# ---------------------------------------------------------------- networks

class MLP:
    """Fully connected network with a shared hidden activation and linear output."""

    def __init__(self, widths, activation="relu", seed=0, name="mlp"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"MLP widths must be >=2 positive ints, got {widths}")
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.seed = seed
        self.name = name
        rng = np.random.default_rng(seed)
        self.layers = []
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            bound = math.sqrt(6.0 / (fi + fo))
            w = parameter(rng.uniform(-bound, bound, size=(fi, fo)), name=f"{name}.{i}.w")
            b = parameter(np.zeros(fo), name=f"{name}.{i}.b")
            self.layers.append((w, b))

    def __call__(self, x: Tensor, frozen=False) -> Tensor:
        """Graph forward pass; ``frozen`` treats the weights as constants."""
        act = tanh if self.activation == "tanh" else relu
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            if frozen:
                w, b = constant(w.data), constant(b.data)
            h = affine(h, w, b)
            if i < last:
                h = act(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass used for rollouts and evaluation."""
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.data + b.data
            if i < last:
                h = np.tanh(h) if self.activation == "tanh" else np.maximum(h, 0.0)
        return h

    def parameters(self) -> list:
        return [t for layer in self.layers for t in layer]

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict):
        for p in self.parameters():
            if state[p.name].shape != p.data.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {state[p.name].shape} != {p.data.shape}")
            p.data[...] = state[p.name]

    def copy_from(self, other: "MLP"):
        for p, q in zip(self.parameters(), other.parameters()):
            p.data[...] = q.data


class Adam:
    """Adaptive-moment optimizer (decays 0.9/0.999, eps 1e-8) over a fixed parameter list.

    Moments live in one flat vector so the update is a handful of array ops.
    """

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        sizes = [p.data.size for p in self.params]
        self._bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.m = np.zeros(int(self._bounds[-1]))
        self.v = np.zeros(int(self._bounds[-1]))
        self.t = 0

    def step(self, grads: dict | None = None):
        """Apply one update; missing gradients count as zero."""
        g = np.zeros_like(self.m)
        for p, lo, hi in zip(self.params, self._bounds[:-1], self._bounds[1:]):
            gp = grads.get(p) if grads is not None else p.grad
            if gp is None:
                continue
            if gp.shape != p.data.shape:
                raise ShapeError(f"{p.name}: gradient shape {gp.shape} != parameter shape {p.data.shape}")
            g[lo:hi] = gp.ravel()
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            p = self.params[int(np.searchsorted(self._bounds, bad, side="right")) - 1]
            raise NumericalError(f"non-finite gradient in tensor {p.name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * (g * g)
        if not self.lr:
            return
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        upd = self.lr * (self.m / c1) / (np.sqrt(self.v / c2) + self.eps)
        for p, lo, hi in zip(self.params, self._bounds[:-1], self._bounds[1:]):
            p.data -= upd[lo:hi].reshape(p.data.shape)


# ---------------------------------------------------------------- checkpoints

WEIGHTS_MAGIC = b"CMRLW001"


def save_weights(path, tensors: dict):
    """Write named arrays in the CMRLW001 layout, in the dict's order."""
    chunks = [WEIGHTS_MAGIC]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: bad magic at offset 0")
    out, pos = {}, 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
    return out
