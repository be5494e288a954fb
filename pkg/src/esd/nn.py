"""Dense-matrix reverse-mode differentiation on an explicit tape.

Every value is a 2-D float64 numpy array. Scalars are 1x1. Operations take
and return :class:`Node` objects; each node remembers its parents and a
vector-Jacobian closure, and :meth:`Tape.backward` replays those closures in
reverse recording order.

Parameters live in :class:`ParamGroup` objects. A group enters a tape through
:meth:`Tape.param`, either as a trainable leaf (gradients land in
``group.grads``) or as a constant (gradients flow *through* it to earlier
nodes but never into the group). That per-leaf switch is what lets a single
backward pass apply different freeze masks to different loss terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, StateError

Matrix = np.ndarray
VJP = Callable[[np.ndarray], tuple]


def as_matrix(x) -> Matrix:
    """Coerce scalars, 1-D rows and nested lists into a 2-D float64 array."""
    a = np.array(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


@dataclass
class ParamGroup:
    name: str
    tensors: list[Matrix]
    grads: list[Matrix] = field(default_factory=list)
    frozen: bool = False

    def __post_init__(self):
        self.tensors = [as_matrix(t) for t in self.tensors]
        if not self.grads:
            self.grads = [np.zeros_like(t) for t in self.tensors]
        if [g.shape for g in self.grads] != [t.shape for t in self.tensors]:
            raise DimensionError(f"group {self.name!r}: grads do not match tensor shapes")

    def zero_grad(self) -> None:
        self.grads = [np.zeros_like(t) for t in self.tensors]

    def size(self) -> int:
        return sum(t.size for t in self.tensors)


class Node:
    __slots__ = ("tape", "value", "parents", "vjp", "index", "param", "needs_grad")

    def __init__(self, tape, value, parents=(), vjp=None, param=None, needs_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.param = param
        self.needs_grad = needs_grad
        self.index = -1

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


class Tape:
    """Ordered record of the operations executed in one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._push(Node(self, as_matrix(value)))

    def param(self, group: ParamGroup, i: int, trainable: bool = True) -> Node:
        value = group.tensors[i]
        if not trainable:
            return self._push(Node(self, value))
        return self._push(Node(self, value, param=(group, i), needs_grad=not group.frozen))

    def params(self, group: ParamGroup, trainable: bool = True) -> list[Node]:
        return [self.param(group, i, trainable) for i in range(len(group.tensors))]

    def record(self, value: Matrix, parents: Sequence[Node], vjp: VJP) -> Node:
        for p in parents:
            if p.tape is not self:
                raise StateError("operands were recorded on different tapes")
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite value produced by {getattr(vjp, '__qualname__', 'op')}")
        needs = any(p.needs_grad for p in parents)
        return self._push(Node(self, value, tuple(parents), vjp, needs_grad=needs))

    def backward(self, out: Node | None = None, seed_grad=None, accumulate: bool = False) -> None:
        """Propagate ``seed_grad`` from ``out`` back to every trainable leaf.

        With ``accumulate=False`` the grads of every group seen on this tape
        are reset first, so repeated calls give identical results. Frozen
        groups end up with zero grads.
        """
        if not self.nodes:
            raise StateError("backward called before any forward pass was recorded")
        if out is None:
            out = self.nodes[-1]
        if out.tape is not self:
            raise StateError("output node belongs to a different tape")
        seed = np.ones_like(out.value) if seed_grad is None else as_matrix(seed_grad)
        if seed.shape != out.value.shape:
            raise DimensionError(f"seed grad shape {seed.shape} does not match output {out.value.shape}")

        if not accumulate:
            for group in {id(n.param[0]): n.param[0] for n in self.nodes if n.param}.values():
                group.zero_grad()

        grads: dict[int, np.ndarray] = {out.index: seed}
        for node in reversed(self.nodes[: out.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or not node.needs_grad:
                continue
            if node.param is not None:
                group, i = node.param
                if not group.frozen:
                    group.grads[i] = group.grads[i] + g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.needs_grad:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Node, b: Node, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


# ---- structural ops ----

def linear(x: Node, W: Node, b: Node) -> Node:
    """``x @ W + b`` with ``b`` a single row broadcast over samples."""
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b.shape != (1, W.shape[1]):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
    xv, Wv = x.value, W.value

    def vjp(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)

    return x.tape.record(xv @ Wv + b.value, (x, W, b), vjp)


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value
    return a.tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def concat_cols(a: Node, b: Node) -> Node:
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    k = a.shape[1]
    return a.tape.record(np.hstack([a.value, b.value]), (a, b), lambda g: (g[:, :k], g[:, k:]))


def pick(a: Node, index: Sequence[int]) -> Node:
    """Column ``index[i]`` of row ``i``, as an n x 1 node."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (a.shape[0],):
        raise DimensionError(f"pick: {len(idx)} indices for {a.shape[0]} rows")
    rows = np.arange(a.shape[0])

    def vjp(g):
        out = np.zeros_like(a.value)
        out[rows, idx] = g[:, 0]
        return (out,)

    return a.tape.record(a.value[rows, idx].reshape(-1, 1), (a,), vjp)


# ---- elementwise arithmetic ----

def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return a.tape.record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return a.tape.record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape.record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return a.tape.record(
        out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    )


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def add_const(a: Node, c: float) -> Node:
    return a.tape.record(a.value + float(c), (a,), lambda g: (g,))


def square(a: Node) -> Node:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * av * g,))


def absolute(a: Node) -> Node:
    av = a.value
    return a.tape.record(np.abs(av), (a,), lambda g: (np.sign(av) * g,))


def log(a: Node) -> Node:
    av = a.value
    if np.any(av <= 0):
        raise NumericError("log of a non-positive value")
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp into ``[lo, hi]``; the gradient is zero where clamping was active."""
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return a.tape.record(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# ---- reductions ----

def sum_all(a: Node) -> Node:
    shape = a.shape
    return a.tape.record(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Node) -> Node:
    shape, n = a.shape, a.value.size
    return a.tape.record(np.array([[a.value.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),))


def sum_rows(a: Node) -> Node:
    """Per-row sum, n x 1."""
    shape = a.shape
    return a.tape.record(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---- activations ----

def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.tape.record(x.value * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Node) -> Node:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return x.tape.record(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax_rows(x: Node) -> Node:
    if x.shape[1] < 1:
        raise DimensionError("softmax_rows needs at least one column")
    e = np.exp(x.value - x.value.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    return x.tape.record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def log_softmax_rows(x: Node) -> Node:
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return x.tape.record(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax_rows": softmax_rows}


def activation(kind: str, x: Node) -> Node:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# ---- layers, optimizer, checking ----

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Matrix:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def linear_params(rng: np.random.Generator, fan_in: int, fan_out: int) -> list[Matrix]:
    return [glorot_uniform(rng, fan_in, fan_out), np.zeros((1, fan_out))]


def sgd_step(groups: Iterable[ParamGroup], lr: float) -> None:
    """Plain SGD. Frozen groups are left untouched; every group's grads are zeroed."""
    if not math.isfinite(lr) or lr < 0:
        raise ConfigError(f"learning rate must be a finite non-negative number, got {lr}")
    for group in groups:
        if not group.frozen and lr > 0:
            group.tensors = [t - lr * g for t, g in zip(group.tensors, group.grads)]
        group.zero_grad()


def grad_check(
    loss_fn: Callable[[Tape], Node],
    params: ParamGroup,
    eps: float = 1e-5,
    floor: float = 1e-6,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
    numeric_fn: Callable[[Tape], Node] | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn`` builds the scalar loss on the tape it is given, pulling
    ``params`` in via ``tape.param``. The relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; ``floor``
    keeps coordinates whose true gradient is ~0 from dividing noise by noise.
    ``coords`` limits the check to a random sample of coordinates.

    ``numeric_fn``, when given, is the function differenced numerically
    instead of ``loss_fn``. Use it when ``loss_fn`` routes gradients through
    stop-gradient leaves: the routed gradient should equal the true gradient
    of the sub-objective made of only the terms routed to ``params``.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")

    numeric_fn = numeric_fn or loss_fn

    def evaluate() -> float:
        value = numeric_fn(Tape()).item()
        if not math.isfinite(value):
            raise NumericError(f"loss is not finite ({value})")
        return value

    tape = Tape()
    out = loss_fn(tape)
    if not math.isfinite(out.item()):
        raise NumericError(f"loss is not finite ({out.item()})")
    params.zero_grad()
    tape.backward(out)
    analytic = [g.copy() for g in params.grads]

    locations = [(i, idx) for i, t in enumerate(params.tensors) for idx in np.ndindex(t.shape)]
    if coords is not None and coords < len(locations):
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(len(locations), size=coords, replace=False)
        locations = [locations[j] for j in sorted(chosen)]

    originals = list(params.tensors)
    worst = 0.0
    try:
        params.tensors = [t.copy() for t in originals]
        for i, idx in locations:
            t = params.tensors[i]
            base = t[idx]
            t[idx] = base + eps
            plus = evaluate()
            t[idx] = base - eps
            minus = evaluate()
            t[idx] = base
            numeric = (plus - minus) / (2.0 * eps)
            a = analytic[i][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    finally:
        params.tensors = originals
    return worst
