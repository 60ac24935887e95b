"""Minimal reverse-mode differentiation over rank <= 2 float64 arrays.

Graphs are rebuilt every step; nothing is retained between calls to
:func:`backward`. Values are float64 throughout; checkpoints store float32.
"""

from __future__ import annotations

import contextlib
import json
import threading
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Node", "ParamStore", "ShapeError", "NonFiniteError", "NotScalarError",
    "const", "no_grad", "backward", "grad_check", "adam_step",
    "add", "sub", "mul", "scale", "matmul", "transpose", "concat", "take_rows",
    "slice_rows", "logistic", "tanh", "relu", "gelu", "log", "clamp", "absolute",
    "log_softmax", "pick", "reduce_sum", "reduce_mean", "layer_norm",
    "causal_attention", "bernoulli_loglik", "softplus", "sign_flip_canary",
]

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class NotScalarError(ValueError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


def _canary() -> bool:
    return getattr(_state, "canary", False)


@contextlib.contextmanager
def no_grad():
    """Build values only; no backward closures are recorded."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def sign_flip_canary():
    """Test hook: flips the sign of the logistic derivative.

    Exists so that the gradient checker can be shown to catch a broken rule.
    """
    prev = _canary()
    _state.canary = True
    try:
        yield
    finally:
        _state.canary = prev


class Node:
    __slots__ = ("value", "_grad", "op", "parents", "_backward", "requires_grad")

    def __init__(self, value, parents: tuple = (), op: str = "leaf", backward=None,
                 requires_grad: bool = False):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise ShapeError(f"rank {value.ndim} > 2 is not supported")
        if value.ndim < 2:
            value = value.reshape(1, -1) if value.ndim == 1 else value.reshape(1, 1)
        self.value = value
        self._grad = None
        self.op = op
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = np.asarray(g, dtype=np.float64).reshape(self.value.shape)

    def zero_grad(self):
        self._grad = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise NotScalarError(f"shape {self.shape} is not scalar")
        return float(self.value.reshape(()))

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def const(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _acc(node: Node, delta: np.ndarray):
    if not node.requires_grad:
        return
    if node._grad is None:
        node._grad = np.array(delta, dtype=np.float64, copy=True).reshape(node.value.shape)
    else:
        node._grad += delta


def _make(value: np.ndarray, parents: Sequence[Node], op: str, backward) -> Node:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), op, backward, requires_grad=True)
    return Node(value, (), op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _bshape(a: Node, b: Node, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = const(a), const(b)
    _bshape(a, b, "add")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), "add", bw)


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    _bshape(a, b, "sub")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, -_unbroadcast(g, b.shape))

    return _make(a.value - b.value, (a, b), "sub", bw)


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    _bshape(a, b, "mul")

    def bw(g):
        _acc(a, _unbroadcast(g * b.value, a.shape))
        _acc(b, _unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), "mul", bw)


def scale(a: Node, c: float) -> Node:
    a = const(a)
    return _make(a.value * c, (a,), "scale", lambda g: _acc(a, g * c))


_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny


def logistic(a: Node) -> Node:
    a = const(a)
    x = a.value
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = np.clip(out, _TINY, _ONE_MINUS)

    def bw(g):
        d = out * (1.0 - out)
        _acc(a, -g * d if _canary() else g * d)

    return _make(out, (a,), "logistic", bw)


def softplus(a: Node) -> Node:
    """ln(1 + e^x), computed without overflow."""
    a = const(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        _acc(a, g * sig)

    return _make(out, (a,), "softplus", bw)


def tanh(a: Node) -> Node:
    a = const(a)
    out = np.tanh(a.value)
    return _make(out, (a,), "tanh", lambda g: _acc(a, g * (1.0 - out * out)))


def relu(a: Node) -> Node:
    a = const(a)
    out = np.maximum(a.value, 0.0)
    return _make(out, (a,), "relu", lambda g: _acc(a, g * (a.value > 0)))


def gelu(a: Node) -> Node:
    """Smooth rectifier, tanh form: 0.5 x (1 + tanh(k (x + 0.044715 x^3)))."""
    a = const(a)
    x = np.ascontiguousarray(a.value)
    out, th = _kernels.gelu_forward(x)
    return _make(out, (a,), "gelu", lambda g: _acc(a, _kernels.gelu_backward(np.ascontiguousarray(g), x, th)))


def log(a: Node) -> Node:
    a = const(a)
    if (a.value <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(a.value), (a,), "log", lambda g: _acc(a, g / a.value))


def clamp(a: Node, lo: float, hi: float) -> Node:
    """Clip to [lo, hi]; the derivative is zero where clipping is active."""
    a = const(a)
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), "clamp", lambda g: _acc(a, g * inside))


def absolute(a: Node) -> Node:
    # np.sign(0) == 0 fixes the subgradient at the kink
    a = const(a)
    return _make(np.abs(a.value), (a,), "abs", lambda g: _acc(a, g * np.sign(a.value)))


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.value.T)
        if b.requires_grad:
            _acc(b, a.value.T @ g)

    return _make(a.value @ b.value, (a, b), "matmul", bw)


def transpose(a: Node) -> Node:
    a = const(a)
    return _make(np.ascontiguousarray(a.value.T), (a,), "transpose", lambda g: _acc(a, g.T))


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [const(n) for n in nodes]
    other = 1 - axis
    if len({n.shape[other] for n in nodes}) != 1:
        raise ShapeError(f"concat: mismatched shapes {[n.shape for n in nodes]}")
    out = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def bw(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            _acc(n, g[lo:hi] if axis == 0 else g[:, lo:hi])

    return _make(out, nodes, "concat", bw)


def take_rows(a: Node, index) -> Node:
    """Gather rows (repeats allowed); the embedding-lookup primitive."""
    a = const(a)
    index = np.asarray(index, dtype=np.intp).reshape(-1)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {a.shape}")

    def bw(g):
        if a.requires_grad:
            acc = np.zeros_like(a.value)
            np.add.at(acc, index, g)
            _acc(a, acc)

    return _make(a.value[index], (a,), "take_rows", bw)


def slice_rows(a: Node, start: int, stop: int) -> Node:
    a = const(a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")

    def bw(g):
        if a.requires_grad:
            acc = np.zeros_like(a.value)
            acc[start:stop] = g
            _acc(a, acc)

    return _make(a.value[start:stop].copy(), (a,), "slice", bw)


# ---------------------------------------------------------------- reductions

def reduce_sum(a: Node, axis: int | None = None) -> Node:
    a = const(a)
    if axis is None:
        out = np.array([[a.value.sum()]])
    else:
        out = a.value.sum(axis=axis, keepdims=True)
    return _make(out, (a,), "sum", lambda g: _acc(a, np.broadcast_to(g, a.shape)))


def reduce_mean(a: Node, axis: int | None = None) -> Node:
    a = const(a)
    n = a.value.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("reduce_mean over an empty axis")
    if axis is None:
        out = np.array([[a.value.mean()]])
    else:
        out = a.value.mean(axis=axis, keepdims=True)
    return _make(out, (a,), "mean", lambda g: _acc(a, np.broadcast_to(g / n, a.shape)))


def log_softmax(a: Node) -> Node:
    """Row-wise log-probabilities."""
    a = const(a)
    out = _kernels.log_softmax_forward(np.ascontiguousarray(a.value))
    return _make(out, (a,), "log_softmax",
                 lambda g: _acc(a, _kernels.log_softmax_backward(np.ascontiguousarray(g), out)))


def pick(a: Node, index) -> Node:
    """Select a[i, index[i]] for every row; returns a column."""
    a = const(a)
    index = np.asarray(index, dtype=np.intp).reshape(-1)
    if index.shape[0] != a.shape[0]:
        raise ShapeError(f"pick: {index.shape[0]} indices for {a.shape[0]} rows")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise ShapeError("pick: column index out of range")
    rows = np.arange(a.shape[0])

    def bw(g):
        if a.requires_grad:
            acc = np.zeros_like(a.value)
            acc[rows, index] = g[:, 0]
            _acc(a, acc)

    return _make(a.value[rows, index].reshape(-1, 1), (a,), "pick", bw)


# ---------------------------------------------------------------- fused layers

def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    x, gain, bias = const(x), const(gain), const(bias)
    if gain.shape != (1, x.shape[1]) or bias.shape != (1, x.shape[1]):
        raise ShapeError("layer_norm: gain/bias must be (1, C)")
    out, xhat, rstd = _kernels.layer_norm_forward(
        np.ascontiguousarray(x.value), gain.value, bias.value, eps)

    def bw(g):
        dx, dg, db = _kernels.layer_norm_backward(np.ascontiguousarray(g), xhat, rstd, gain.value)
        _acc(x, dx)
        _acc(gain, dg)
        _acc(bias, db)

    return _make(out, (x, gain, bias), "layer_norm", bw)


def causal_attention(qkv: Node, heads: int) -> Node:
    """Causal multi-head attention on a packed (L, 3C) query/key/value block."""
    qkv = const(qkv)
    L, c3 = qkv.shape
    if c3 % 3 or (c3 // 3) % heads:
        raise ShapeError(f"causal_attention: width {c3} incompatible with {heads} heads")
    x = np.ascontiguousarray(qkv.value)
    out, probs = _kernels.attention_forward(x, heads)

    def bw(g):
        _acc(qkv, _kernels.attention_backward(np.ascontiguousarray(g), x, probs, heads))

    return _make(out, (qkv,), "attention", bw)


def bernoulli_loglik(sims: Node, targets, eps: float = 1e-7) -> Node:
    """Row sums of y*ln(s) + (1-y)*ln(1-s), with s clamped to [eps, 1-eps].

    Returns a column with one log-likelihood per row of ``sims``.
    """
    sims = const(sims)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != sims.shape:
        raise ShapeError(f"bernoulli_loglik: targets {y.shape} vs sims {sims.shape}")
    ll, dll = _kernels.bernoulli_loglik(np.ascontiguousarray(sims.value), np.ascontiguousarray(y), eps)
    return _make(ll.reshape(-1, 1), (sims,), "bernoulli_loglik", lambda g: _acc(sims, g * dll))


# ---------------------------------------------------------------- backward

def _topo(root: Node) -> list[Node]:
    order, seen, stack = [], set(), [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(value) into every reachable node's grad.

    Intermediate grads are recomputed on each call; leaf grads accumulate
    across calls until zeroed.
    """
    if root.value.size != 1:
        raise NotScalarError(f"backward needs a scalar root, got {root.shape}")
    if not root.requires_grad:
        return
    order = _topo(root)
    for n in order:
        if n.parents:
            n._grad = None
    _acc(root, np.ones_like(root.value))
    for n in reversed(order):
        if n._backward is not None and n._grad is not None:
            n._backward(n._grad)


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named trainable parameters with Adam moments and a step counter."""

    def __init__(self):
        self.params: dict[str, Node] = {}
        self.step = 0
        # updates since the moments were created; checkpoints do not carry moments
        self.moment_step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        node = Node(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for name, p in self.params.items():
            new.add(name, p.value.copy())
        new.step = self.step
        new.moment_step = self.moment_step
        new.m = {k: v.copy() for k, v in self.m.items()}
        new.v = {k: v.copy() for k, v in self.v.items()}
        return new

    def frozen(self) -> "ParamStore":
        """A gradient-free copy, e.g. for a reference policy."""
        new = self.copy()
        for p in new.params.values():
            p.requires_grad = False
        return new

    def flat(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params.values()])

    def save(self, path, meta: dict | None = None) -> None:
        header = {
            "format_version": CHECKPOINT_VERSION,
            "names": self.names(),
            "shapes": [list(p.shape) for p in self.params.values()],
            "step": self.step,
        }
        if meta:
            header["meta"] = meta
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for p in self.params.values():
                f.write(p.value.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        store, _ = cls.load_with_meta(path)
        return store

    @classmethod
    def load_with_meta(cls, path) -> tuple["ParamStore", dict]:
        data = Path(path).read_bytes()
        nl = data.index(b"\n")
        header = json.loads(data[:nl].decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        store = cls()
        offset = nl + 1
        for name, shape in zip(header["names"], header["shapes"]):
            n = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
            store.add(name, arr.astype(np.float64))
            offset += 4 * n
        if offset != len(data):
            raise ValueError("checkpoint payload size does not match header")
        store.step = int(header["step"])
        return store, header.get("meta", {})


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    store.step += 1
    if not store.m:
        store.moment_step = 0
    store.moment_step += 1
    t = store.moment_step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = p.grad
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(p.value)
            store.v[name] = np.zeros_like(p.value)
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr:
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.zero_grad()


def grad_check(loss_fn: Callable[[ParamStore], Node], params: ParamStore, h: float = 1e-5,
               seed: int = 0, n_coords: int = 64) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes a random subsample of at least ``n_coords`` coordinates (all of
    them when there are fewer). Relative error is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params.zero_grad()
    loss = loss_fn(params)
    if not np.isfinite(loss.value).all():
        raise NonFiniteError("loss is non-finite")
    backward(loss)
    names = params.names()
    analytic = {n: params[n].grad.copy() for n in names}
    params.zero_grad()

    coords = [(n, i) for n in names for i in range(params[n].value.size)]
    rng = np.random.default_rng(seed)
    k = min(len(coords), max(64, n_coords))
    chosen = rng.choice(len(coords), size=k, replace=False)

    worst = 0.0
    with no_grad():
        for c in sorted(chosen):
            name, i = coords[c]
            flat = params[name].value.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn(params).item()
            flat[i] = orig - h
            fm = loss_fn(params).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"loss non-finite probing {name}[{i}]")
            num = (fp - fm) / (2.0 * h)
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst

