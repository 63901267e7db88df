"""Reverse-mode automatic differentiation on numpy arrays, plus Adam.

The engine is tape based: every primitive applied to at least one
differentiable operand appends a node recording the forward callable,
the input node ids and the produced value. ``backward`` walks the tape
once in reverse, accumulating adjoints in a fixed order so training
runs are bit-for-bit reproducible.

Operations where every operand is a plain constant never touch the
tape; the same graph-building code therefore doubles as the inference
path at zero recording cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InvalidInputError, NumericalError

ArrayLike = "np.ndarray | float | int | Var"


@dataclass
class Node:
    op: str
    input_ids: tuple[int, ...]
    value: np.ndarray
    # backward(out_grad, input_values, value) -> per-input gradients (None for constants)
    backward: Callable
    # forward(input_values) -> value, kept so the tape can be replayed
    forward: Callable


class Tape:
    """Record of primitive operations for one differentiable computation."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaf_ids: list[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value: np.ndarray, name: str = "leaf") -> "Var":
        """Register a differentiable input (a parameter tensor)."""
        value = np.asarray(value)
        node = Node(op=f"leaf:{name}", input_ids=(), value=value,
                    backward=lambda g, ins, out: (), forward=lambda ins: value)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        self.leaf_ids.append(nid)
        return Var(value, self, nid)

    def _record(self, op: str, inputs: Sequence["Var"], value: np.ndarray,
                backward: Callable, forward: Callable) -> "Var":
        ids = tuple(v.node_id if v.node_id is not None else -1 for v in inputs)
        self.nodes.append(Node(op, ids, value, backward, forward))
        return Var(value, self, len(self.nodes) - 1)

    def replay(self) -> bool:
        """Re-run every recorded forward and compare bit-for-bit."""
        values = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            ins = [values[j] if j >= 0 else None for j in node.input_ids]
            values[i] = node.forward(ins)
            if not np.array_equal(np.asarray(values[i]), node.value):
                return False
        return True


class Var:
    """A value in the computation graph.

    ``node_id is None`` marks a constant: operations between constants
    are evaluated eagerly in numpy and produce another constant.
    """

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value, tape: Optional[Tape] = None, node_id: Optional[int] = None):
        self.value = np.asarray(value)
        self.tape = tape
        self.node_id = node_id

    @property
    def is_const(self) -> bool:
        return self.node_id is None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self) -> str:
        kind = "const" if self.is_const else f"node {self.node_id}"
        return f"Var({kind}, shape={self.value.shape}, dtype={self.value.dtype})"

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_var(x, dtype=None) -> Var:
    if isinstance(x, Var):
        return x
    a = np.asarray(x)
    if dtype is not None and a.dtype != dtype:
        a = a.astype(dtype)
    return Var(a)


def constant(x, dtype=None) -> Var:
    return as_var(x, dtype=dtype)


def _coerce_pair(a, b) -> tuple[Var, Var]:
    """Wrap operands, casting bare python scalars to the array operand's dtype."""
    if isinstance(a, Var) and not isinstance(b, Var):
        return a, as_var(b, dtype=a.dtype if np.isscalar(b) else None)
    if isinstance(b, Var) and not isinstance(a, Var):
        return as_var(a, dtype=b.dtype if np.isscalar(a) else None), b
    return as_var(a), as_var(b)


def _tape_of(*vars_: Var) -> Optional[Tape]:
    tape = None
    for v in vars_:
        if v.node_id is not None:
            if tape is None:
                tape = v.tape
            elif tape is not v.tape:
                raise InvalidInputError("operands recorded on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(op_name: str, a, b, fwd: Callable, bwd: Callable) -> Var:
    """`bwd(g, x, y, out, needs)` returns (dx, dy) with None where needs[i] is False."""
    a, b = _coerce_pair(a, b)
    tape = _tape_of(a, b)
    value = fwd(a.value, b.value)
    if tape is None:
        return Var(value)
    needs = (a.node_id is not None, b.node_id is not None)
    return tape._record(
        op_name, (a, b), value,
        backward=lambda g, ins, out: bwd(g, ins[0] if ins[0] is not None else a.value,
                                         ins[1] if ins[1] is not None else b.value, out, needs),
        forward=lambda ins: fwd(ins[0] if ins[0] is not None else a.value,
                                ins[1] if ins[1] is not None else b.value))


def _unary(op_name: str, a, fwd: Callable, bwd: Callable) -> Var:
    a = as_var(a)
    tape = _tape_of(a)
    value = fwd(a.value)
    if tape is None:
        return Var(value)
    return tape._record(
        op_name, (a,), value,
        backward=lambda g, ins, out: bwd(g, ins[0] if ins[0] is not None else a.value, out),
        forward=lambda ins: fwd(ins[0] if ins[0] is not None else a.value))


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Var:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, out, needs: (
                       _unbroadcast(g, x.shape) if needs[0] else None,
                       _unbroadcast(g, y.shape) if needs[1] else None))


def sub(a, b) -> Var:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, out, needs: (
                       _unbroadcast(g, x.shape) if needs[0] else None,
                       _unbroadcast(-g, y.shape) if needs[1] else None))


def mul(a, b) -> Var:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, out, needs: (
                       _unbroadcast(g * y, x.shape) if needs[0] else None,
                       _unbroadcast(g * x, y.shape) if needs[1] else None))


def neg(a) -> Var:
    return _unary("neg", a, lambda x: -x, lambda g, x, out: (-g,))


def matmul(a, b) -> Var:
    return _binary("matmul", a, b, lambda x, y: x @ y,
                   lambda g, x, y, out, needs: (
                       g @ y.T if needs[0] else None,
                       x.T @ g if needs[1] else None))


def exp(a) -> Var:
    return _unary("exp", a, np.exp, lambda g, x, out: (g * out,))


def softplus(a) -> Var:
    """log(1 + e^x), computed overflow-free; derivative is the logistic."""
    return _unary("softplus", a,
                  lambda x: np.logaddexp(x.dtype.type(0), x),
                  lambda g, x, out: (g * (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype),))


def relu(a) -> Var:
    return _unary("relu", a, lambda x: np.maximum(x, 0),
                  lambda g, x, out: (g * (x > 0),))


def sin(a) -> Var:
    return _unary("sin", a, np.sin, lambda g, x, out: (g * np.cos(x),))


def cos(a) -> Var:
    return _unary("cos", a, np.cos, lambda g, x, out: (-g * np.sin(x),))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)

    def bwd(g, x, out):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _unary(f"sum[axis={axis}]", a,
                  lambda x: x.sum(axis=axis, keepdims=keepdims), bwd)


def cumsum_exclusive(a, axis: int) -> Var:
    """out[..., i, ...] = sum of entries strictly before i along `axis`."""

    def fwd(x):
        out = np.zeros_like(x)
        src = np.cumsum(x, axis=axis)
        dst = [slice(None)] * x.ndim
        dst[axis] = slice(1, None)
        srcs = [slice(None)] * x.ndim
        srcs[axis] = slice(0, -1)
        out[tuple(dst)] = src[tuple(srcs)]
        return out

    def bwd(g, x, out):
        return (np.flip(fwd(np.flip(g, axis=axis)), axis=axis),)

    return _unary(f"cumsum_excl[axis={axis}]", a, fwd, bwd)


def reshape(a, shape) -> Var:
    a = as_var(a)
    shape = tuple(shape)
    return _unary(f"reshape{shape}", a,
                  lambda x: x.reshape(shape),
                  lambda g, x, out: (g.reshape(x.shape),))


def concat(parts: Sequence, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    tape = _tape_of(*parts)
    value = np.concatenate([p.value for p in parts], axis=axis)
    if tape is None:
        return Var(value)
    sizes = [p.value.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    shapes = [p.value.shape for p in parts]

    def bwd(g, ins, out):
        grads = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    def fwd(ins):
        vals = [ins[i] if ins[i] is not None else parts[i].value for i in range(len(parts))]
        return np.concatenate(vals, axis=axis)

    return tape._record(f"concat[axis={axis}]", parts, value, bwd, fwd)


def stop_gradient(a) -> Var:
    """Detach: the value flows forward, nothing flows back."""
    a = as_var(a)
    return Var(a.value)


def linear(x, w, b, activation: Optional[str] = None) -> Var:
    """Fused affine layer: activation(x @ w + b), activation in
    (None, "relu"). One tape node instead of three keeps the training
    loop memory-bound work down."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    tape = _tape_of(x, w, b)

    def fwd(xv, wv, bv):
        out = xv @ wv
        out += bv
        if activation == "relu":
            np.maximum(out, 0, out=out)
        return out

    value = fwd(x.value, w.value, b.value)
    if tape is None:
        return Var(value)
    needs = (x.node_id is not None, w.node_id is not None, b.node_id is not None)

    def bwd(g, ins, out):
        xv = ins[0] if ins[0] is not None else x.value
        wv = ins[1] if ins[1] is not None else w.value
        if activation == "relu":
            g = g * (out > 0)
        return (g @ wv.T if needs[0] else None,
                xv.T @ g if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return tape._record(
        f"linear[{activation}]", (x, w, b), value, bwd,
        lambda ins: fwd(ins[0] if ins[0] is not None else x.value,
                        ins[1] if ins[1] is not None else w.value,
                        ins[2] if ins[2] is not None else b.value))


def linear2(x1, x2, w, b, activation: Optional[str] = None) -> Var:
    """Fused affine layer over two concatenated inputs without building the
    concatenation: activation(x1 @ w[:d1] + x2 @ w[d1:] + b)."""
    x1, x2, w, b = as_var(x1), as_var(x2), as_var(w), as_var(b)
    tape = _tape_of(x1, x2, w, b)
    d1 = x1.value.shape[1]

    def fwd(v1, v2, wv, bv):
        out = v1 @ wv[:d1]
        out += v2 @ wv[d1:]
        out += bv
        if activation == "relu":
            np.maximum(out, 0, out=out)
        return out

    value = fwd(x1.value, x2.value, w.value, b.value)
    if tape is None:
        return Var(value)
    needs = tuple(v.node_id is not None for v in (x1, x2, w, b))

    def bwd(g, ins, out):
        v1 = ins[0] if ins[0] is not None else x1.value
        v2 = ins[1] if ins[1] is not None else x2.value
        wv = ins[2] if ins[2] is not None else w.value
        if activation == "relu":
            g = g * (out > 0)
        dw = None
        if needs[2]:
            dw = np.empty_like(wv)
            dw[:d1] = v1.T @ g
            dw[d1:] = v2.T @ g
        return (g @ wv[:d1].T if needs[0] else None,
                g @ wv[d1:].T if needs[1] else None,
                dw,
                g.sum(axis=0) if needs[3] else None)

    return tape._record(
        f"linear2[{activation}]", (x1, x2, w, b), value, bwd,
        lambda ins: fwd(ins[0] if ins[0] is not None else x1.value,
                        ins[1] if ins[1] is not None else x2.value,
                        ins[2] if ins[2] is not None else w.value,
                        ins[3] if ins[3] is not None else b.value))


def backward(tape: Tape, loss: Var, check_finite: bool = False) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss node.

    Returns adjoints for every leaf node id. Accumulation order is the
    reversed recording order, which is fixed, so results are reproducible.
    """
    if loss.node_id is None or loss.tape is not tape:
        raise InvalidInputError("loss is not a recorded node of this tape")
    if np.asarray(loss.value).size != 1:
        raise InvalidInputError(f"loss must be scalar, got shape {loss.value.shape}")
    adjoints: dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(loss.value)
    }
    for nid in range(loss.node_id, -1, -1):
        g = adjoints.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.op.startswith("leaf:"):
            adjoints[nid] = g  # keep leaf grads
            continue
        ins = [tape.nodes[j].value if j >= 0 else None for j in node.input_ids]
        grads = node.backward(g, ins, node.value)
        if check_finite:
            for gi in grads:
                if gi is not None and not np.all(np.isfinite(gi)):
                    raise NumericalError(f"non-finite gradient produced by op '{node.op}' (node {nid})")
        for j, gi in zip(node.input_ids, grads):
            if j < 0 or gi is None:
                continue
            if j in adjoints:
                adjoints[j] = adjoints[j] + gi
            else:
                adjoints[j] = gi
    out = {}
    for lid in tape.leaf_ids:
        if lid <= loss.node_id and lid in adjoints:
            out[lid] = adjoints[lid]
        else:
            out[lid] = np.zeros_like(tape.nodes[lid].value)
    return out


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters for Adam."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float = 5e-4,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr: Optional[float] = None
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with bias correction. Mutates params/state in place
    and returns them; iteration order is the params dict order (fixed)."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise InvalidInputError(
                f"gradient shape {g.shape} does not match parameter '{name}' shape {p.shape}")
    state.step += 1
    t = state.step
    lr_t = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr_t / c1) * m / (np.sqrt(v / c2) + state.eps)
    return params, state
