"""Small tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records primitive operations as they execute (define by run).
The record can be replayed with :func:`evaluate` and differentiated with
:func:`gradients`.  Everything else used by the models (linear layers,
attention, cross-entropy) is composed from the primitives registered here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Raised when a primitive receives inputs of incompatible shape."""


class FrozenParameterError(AutodiffError):
    """A gradient was requested for a parameter flagged as not trainable."""


@dataclass
class Param:
    name: str
    values: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)


@dataclass
class Node:
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)


class Var:
    """Handle to a value produced on a tape."""

    __slots__ = ("tape", "idx", "value")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def _wrap(self, other) -> "Var":
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._wrap(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.apply("scale", self, factor=float(other))
        return self.tape.apply("mul", self, self._wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.apply("scale", self, factor=-1.0)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._wrap(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.apply("reshape", self, shape=tuple(shape))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return self.tape.apply("transpose", self, axes=tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def __getitem__(self, key):
        return self.tape.apply("slice", self, key=key)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.value.shape})"


# ---------------------------------------------------------------------------
# primitive registry: forward(attrs, *xs) -> out, backward(attrs, g, out, *xs)


_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def _primitive(name):
    def register(pair):
        fwd, bwd = pair()
        _FORWARD[name] = fwd
        _BACKWARD[name] = bwd
        return pair

    return register


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


@_primitive("add")
def _add():
    return (lambda a, x, y: x + y,
            lambda a, g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


@_primitive("sub")
def _sub():
    return (lambda a, x, y: x - y,
            lambda a, g, out, x, y: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)))


@_primitive("mul")
def _mul():
    return (lambda a, x, y: x * y,
            lambda a, g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


@_primitive("scale")
def _scale():
    return (lambda a, x: x * a["factor"],
            lambda a, g, out, x: (g * a["factor"],))


@_primitive("matmul")
def _matmul():
    def fwd(a, x, y):
        if x.ndim < 2 or y.ndim < 2:
            raise ShapeError("matmul needs operands of rank >= 2")
        return np.matmul(x, y)

    def bwd(a, g, out, x, y):
        if y.ndim == 2:
            # common case: activations [..., k] @ weight [k, n]
            gx = g @ y.T
            gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(gx, x.shape), gy
        gx = np.matmul(g, np.swapaxes(y, -1, -2))
        gy = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return fwd, bwd


@_primitive("relu")
def _relu():
    return (lambda a, x: np.maximum(x, 0.0),
            lambda a, g, out, x: (g * (x > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


@_primitive("gelu")
def _gelu():
    # tanh approximation
    def fwd(a, x):
        return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))

    def bwd(a, g, out, x):
        u = _GELU_C * (x + 0.044715 * x**3)
        th = np.tanh(u)
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return fwd, bwd


@_primitive("layer_norm")
def _layer_norm():
    # normalisation only; gain and bias are composed with mul/add
    def fwd(a, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + a["eps"])

    def bwd(a, g, out, x):
        var = ((x - x.mean(axis=-1, keepdims=True)) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + a["eps"])
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return fwd, bwd


def _softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@_primitive("softmax")
def _softmax():
    return (lambda a, x: _softmax_np(x),
            lambda a, g, out, x: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


@_primitive("log_softmax")
def _log_softmax():
    return (lambda a, x: _log_softmax_np(x),
            lambda a, g, out, x: (g - np.exp(out) * g.sum(axis=-1, keepdims=True),))


@_primitive("embedding")
def _embedding():
    def fwd(a, table):
        ids = a["ids"]
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")
        return table[ids]

    def bwd(a, g, out, table):
        gt = np.zeros_like(table)
        np.add.at(gt, a["ids"].reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return fwd, bwd


@_primitive("gather")
def _gather():
    # picks x[..., idx[...]] along the last axis
    def fwd(a, x):
        idx = a["index"]
        if idx.shape != x.shape[:-1]:
            raise ShapeError(f"gather index shape {idx.shape} vs {x.shape[:-1]}")
        return np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]

    def bwd(a, g, out, x):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, a["index"][..., None], g[..., None], axis=-1)
        return (gx,)

    return fwd, bwd


@_primitive("concat")
def _concat():
    def fwd(a, *xs):
        return np.concatenate(xs, axis=a["axis"])

    def bwd(a, g, out, *xs):
        cuts = np.cumsum([x.shape[a["axis"]] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=a["axis"]))

    return fwd, bwd


@_primitive("slice")
def _slice():
    def bwd(a, g, out, x):
        gx = np.zeros_like(x)
        gx[a["key"]] += g
        return (gx,)

    return (lambda a, x: np.array(x[a["key"]]), bwd)


@_primitive("reshape")
def _reshape():
    return (lambda a, x: x.reshape(a["shape"]),
            lambda a, g, out, x: (g.reshape(x.shape),))


@_primitive("transpose")
def _transpose():
    return (lambda a, x: np.transpose(x, a["axes"]),
            lambda a, g, out, x: (np.transpose(g, np.argsort(a["axes"])),))


@_primitive("sum")
def _sum():
    def fwd(a, x):
        return np.asarray(x.sum(axis=a["axis"], keepdims=a["keepdims"]))

    def bwd(a, g, out, x):
        axis = a["axis"]
        if axis is not None and not a["keepdims"]:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return fwd, bwd


@_primitive("ctc_loss")
def _ctc_loss_prim():
    # negative log-likelihood of a label sequence given [T, C] log-probs
    def fwd(a, lp):
        from ilmfusion.ctc import ctc_forward_backward

        nll, occ = ctc_forward_backward(lp, a["labels"], a["blank"])
        a["_occupancy"] = occ
        return np.asarray(nll)

    def bwd(a, g, out, lp):
        return (-g * a["_occupancy"],)

    return fwd, bwd


# ---------------------------------------------------------------------------


class Tape:
    """Ordered record of primitive applications.

    With ``record=False`` values are computed eagerly but nothing is kept,
    which is what the scoring paths use.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.input_names: dict[str, int] = {}
        self.param_nodes: dict[str, int] = {}
        self.params: dict[str, Param] = {}
        self.outputs: dict[str, int] = {}
        self._count = 0

    def _push(self, node: Node, value: np.ndarray) -> Var:
        idx = self._count
        self._count += 1
        if self.record:
            self.nodes.append(node)
            self.values.append(value)
        return Var(self, idx, value)

    def input(self, name: str, value) -> Var:
        if name in self.input_names:
            raise AutodiffError(f"duplicate input {name!r}")
        var = self._push(Node("input", (), {"name": name}), np.asarray(value, dtype=DTYPE))
        self.input_names[name] = var.idx
        return var

    def param(self, p: Param) -> Var:
        idx = self.param_nodes.get(p.name)
        if idx is not None:
            if self.params[p.name] is not p:
                raise AutodiffError(f"two parameters named {p.name!r} on one tape")
            return Var(self, idx, self.values[idx] if self.record else p.values)
        var = self._push(Node("param", (), {"name": p.name}), p.values)
        self.param_nodes[p.name] = var.idx
        self.params[p.name] = p
        return var

    def const(self, value) -> Var:
        return self._push(Node("const", (), {"value": np.asarray(value, dtype=DTYPE)}),
                          np.asarray(value, dtype=DTYPE))

    def apply(self, op: str, *args: Var, **attrs) -> Var:
        for v in args:
            if v.tape is not self:
                raise AutodiffError(f"{op}: operand belongs to another tape")
        xs = [v.value for v in args]
        try:
            out = _FORWARD[op](attrs, *xs)
        except (ValueError, IndexError) as exc:
            shapes = ", ".join(str(x.shape) for x in xs)
            raise ShapeError(f"op {op!r} (node {self._count}) with input shapes {shapes}: {exc}") from exc
        return self._push(Node(op, tuple(v.idx for v in args), attrs), out)

    def mark_output(self, name: str, var: Var) -> Var:
        self.outputs[name] = var.idx
        return var

    def __len__(self):
        return len(self.nodes)


# thin functional wrappers used by model code


def relu(x: Var) -> Var:
    return x.tape.apply("relu", x)


def gelu(x: Var) -> Var:
    return x.tape.apply("gelu", x)


def layer_norm(x: Var, eps: float = 1e-5) -> Var:
    return x.tape.apply("layer_norm", x, eps=eps)


def softmax(x: Var) -> Var:
    return x.tape.apply("softmax", x)


def log_softmax(x: Var) -> Var:
    return x.tape.apply("log_softmax", x)


def embedding(table: Var, ids) -> Var:
    return table.tape.apply("embedding", table, ids=np.asarray(ids, dtype=np.int64))


def gather(x: Var, index) -> Var:
    return x.tape.apply("gather", x, index=np.asarray(index, dtype=np.int64))


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    return xs[0].tape.apply("concat", *xs, axis=axis)


def ctc_loss(log_probs: Var, labels, blank: int = 0) -> Var:
    return log_probs.tape.apply("ctc_loss", log_probs,
                                labels=np.asarray(labels, dtype=np.int64), blank=blank)


# ---------------------------------------------------------------------------


def evaluate(tape: Tape, inputs: dict | None = None, outputs: Iterable[str] | None = None) -> dict:
    """Replay ``tape`` with (possibly new) named inputs.

    Parameters are read from their current values unless overridden by name in
    ``inputs``.  Returns the marked outputs (or those listed in ``outputs``).
    """
    inputs = dict(inputs or {})
    if not tape.record:
        raise AutodiffError("tape was created with record=False")
    missing = [n for n in tape.input_names if n not in inputs]
    if missing:
        raise AutodiffError(f"missing inputs: {missing}")
    wanted = list(outputs) if outputs is not None else list(tape.outputs)
    for name in wanted:
        if name not in tape.outputs:
            raise AutodiffError(f"unknown output {name!r}")
    vals: list = [None] * len(tape.nodes)
    for i, node in enumerate(tape.nodes):
        if node.op == "input":
            vals[i] = np.asarray(inputs[node.attrs["name"]], dtype=DTYPE)
        elif node.op == "param":
            name = node.attrs["name"]
            vals[i] = np.asarray(inputs[name], dtype=DTYPE) if name in inputs else tape.params[name].values
        elif node.op == "const":
            vals[i] = node.attrs["value"]
        else:
            xs = [vals[j] for j in node.inputs]
            try:
                vals[i] = _FORWARD[node.op](node.attrs, *xs)
            except (ValueError, IndexError) as exc:
                shapes = ", ".join(str(x.shape) for x in xs)
                raise ShapeError(f"op {node.op!r} (node {i}) with input shapes {shapes}: {exc}") from exc
    return {name: vals[tape.outputs[name]] for name in wanted}


def gradients(tape: Tape, loss: Var, params: Iterable[Param], strict: bool = True) -> dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` with respect to each of ``params``.

    Only the requested parameters receive gradients.  With ``strict`` a
    request for a non-trainable parameter raises :class:`FrozenParameterError`.
    """
    if not tape.record:
        raise AutodiffError("cannot differentiate a tape created with record=False")
    if loss.tape is not tape:
        raise AutodiffError("loss is not on this tape")
    if np.size(loss.value) != 1:
        raise AutodiffError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    params = list(params)
    leaf_of: dict[int, str] = {}
    for p in params:
        if p.name not in tape.param_nodes:
            raise AutodiffError(f"parameter {p.name!r} is not on the tape")
        if strict and not p.trainable:
            raise FrozenParameterError(f"gradient requested for frozen parameter {p.name!r}")
        leaf_of[tape.param_nodes[p.name]] = p.name

    n = loss.idx + 1
    needs = np.zeros(n, dtype=bool)
    for i in range(n):
        node = tape.nodes[i]
        needs[i] = i in leaf_of or any(needs[j] for j in node.inputs)
    if not needs[loss.idx]:
        return {p.name: np.zeros_like(p.values) for p in params}

    grads: dict[int, np.ndarray] = {loss.idx: np.ones_like(tape.values[loss.idx])}
    for i in range(loss.idx, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        if not node.inputs:
            grads[i] = g  # leaf, kept for extraction below
            continue
        xs = [tape.values[j] for j in node.inputs]
        gin = _BACKWARD[node.op](node.attrs, g, tape.values[i], *xs)
        for j, gj in zip(node.inputs, gin):
            if not needs[j] or gj is None:
                continue
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = gj
    return {name: np.asarray(grads.get(idx, np.zeros_like(tape.values[idx])), dtype=DTYPE).reshape(tape.values[idx].shape)
            for idx, name in leaf_of.items()}


def finite_difference_check(loss_fn: Callable[[Tape], Var], params: Iterable[Param],
                            epsilon: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` builds the scalar loss on the tape it is given, reading the
    current values of ``params``.  Relative error is
    ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    params = list(params)
    tape = Tape()
    loss = loss_fn(tape)
    if not np.all(np.isfinite(loss.value)):
        raise AutodiffError("loss is not finite")
    analytic = gradients(tape, loss, params, strict=False)

    def value() -> float:
        v = float(loss_fn(Tape(record=False)).value)
        if not math.isfinite(v):
            raise AutodiffError("loss is not finite under perturbation")
        return v

    worst = 0.0
    for p in params:
        flat = p.values.reshape(-1)
        ga = analytic[p.name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = value()
            flat[k] = orig - epsilon
            down = value()
            flat[k] = orig
            num = (up - down) / (2.0 * epsilon)
            err = abs(num - ga[k]) / max(abs(num), abs(ga[k]), 1e-8)
            worst = max(worst, err)
    return worst
