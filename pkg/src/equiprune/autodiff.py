"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tape` records a DAG of array operations while computing values
eagerly, so the taped forward is bit-identical to the equivalent plain
numpy evaluation. ``backward`` walks the graph in reverse and *emits the
adjoint computation as new tape nodes*; gradients are therefore themselves
differentiable, which is how force-weighted losses are trained (the force
is a gradient inside the loss graph).

Determinism: nodes are processed in fixed reverse construction order and
scatter reductions use numpy's sequential ``add.at``, so identical inputs
give bit-identical gradients.

The operation set is deliberately small: arithmetic, restricted einsum
(no index may appear twice in one operand, and every operand index must
occur in the output or another operand), axis-0 gather/scatter, sum,
broadcast, concat/narrow/reshape, and a few smooth elementwise maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = ["Tape", "Var", "ArrayOps", "backward", "silu"]


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    ctx: tuple
    requires_grad: bool


class Var:
    """Handle to one tape node. Supports +, -, * and scalar arithmetic."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape.add(self, other)
        return self.tape.shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return self.tape.add(self, self.tape.scale(other, -1.0))
        return self.tape.shift(self, -float(other))

    def __rsub__(self, other):
        return self.tape.shift(self.tape.scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape.mul(self, other)
        if isinstance(other, np.ndarray):
            return self.tape.mul(self, self.tape.constant(other))
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return self.tape.mul(self, self.tape.pow_const(other, -1.0))
        return self.tape.scale(self, 1.0 / float(other))

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __pow__(self, p):
        return self.tape.pow_const(self, float(p))


class Tape:
    """Computation graph with eager values."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []

    # -- node construction -------------------------------------------------

    def _push(self, op, inputs: tuple[Var, ...], value, ctx=()) -> Var:
        value = np.asarray(value)
        requires = any(self.nodes[v.idx].requires_grad for v in inputs)
        self.nodes.append(Node(op, tuple(v.idx for v in inputs), value, ctx, requires))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        value = np.asarray(value, dtype=self.dtype)
        self.nodes.append(Node("leaf", (), value, (), requires_grad))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def _as_var(self, x) -> Var:
        return x if isinstance(x, Var) else self.constant(x)

    # -- arithmetic ---------------------------------------------------------

    def add(self, a: Var, b: Var) -> Var:
        return self._push("add", (a, b), a.value + b.value)

    def mul(self, a: Var, b: Var) -> Var:
        return self._push("mul", (a, b), a.value * b.value)

    def scale(self, a: Var, c: float) -> Var:
        return self._push("scale", (a,), a.value * c, (c,))

    def shift(self, a: Var, c: float) -> Var:
        return self._push("shift", (a,), a.value + c, (c,))

    def pow_const(self, a: Var, p: float) -> Var:
        return self._push("pow", (a,), a.value**p, (p,))

    def exp(self, a: Var) -> Var:
        return self._push("exp", (a,), np.exp(a.value))

    def tanh(self, a: Var) -> Var:
        return self._push("tanh", (a,), np.tanh(a.value))

    def sigmoid(self, a: Var) -> Var:
        v = a.value
        out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
        return self._push("sigmoid", (a,), out)

    # -- structure ----------------------------------------------------------

    def einsum(self, spec: str, *args) -> Var:
        ops = tuple(self._as_var(a) for a in args)
        in_specs, out_spec = _parse_einsum(spec, len(ops))
        value = np.einsum(spec, *(o.value for o in ops))
        return self._push("einsum", ops, value, (in_specs, out_spec))

    def reduce_sum(self, a: Var, axis=None) -> Var:
        if axis is not None and not isinstance(axis, tuple):
            axis = (axis,)
        return self._push("sum", (a,), a.value.sum(axis=axis), (axis, a.shape))

    def broadcast_to(self, a: Var, shape: tuple[int, ...]) -> Var:
        return self._push(
            "broadcast", (a,), np.broadcast_to(a.value, shape).copy(), (a.shape,)
        )

    def gather(self, a: Var, index: np.ndarray) -> Var:
        index = np.asarray(index, dtype=np.intp)
        return self._push("gather", (a,), a.value[index], (index, a.shape[0]))

    def scatter_add(self, a: Var, index: np.ndarray, size: int) -> Var:
        index = np.asarray(index, dtype=np.intp)
        out = np.zeros((size,) + a.shape[1:], dtype=a.value.dtype)
        np.add.at(out, index, a.value)
        return self._push("scatter", (a,), out, (index,))

    def concat(self, parts: Sequence[Var], axis: int) -> Var:
        parts = tuple(parts)
        if len(parts) == 1:
            return parts[0]
        value = np.concatenate([p.value for p in parts], axis=axis)
        sizes = tuple(p.shape[axis] for p in parts)
        return self._push("concat", parts, value, (axis, sizes))

    def narrow(self, a: Var, axis: int, start: int, length: int) -> Var:
        sl = [slice(None)] * a.value.ndim
        sl[axis] = slice(start, start + length)
        return self._push("narrow", (a,), a.value[tuple(sl)].copy(), (axis, start, a.shape[axis]))

    def pad_axis(self, a: Var, axis: int, start: int, total: int) -> Var:
        shape = list(a.shape)
        shape[axis] = total
        out = np.zeros(shape, dtype=a.value.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = slice(start, start + a.shape[axis])
        out[tuple(sl)] = a.value
        return self._push("pad", (a,), out, (axis, start, a.shape[axis]))

    def reshape(self, a: Var, shape: tuple[int, ...]) -> Var:
        return self._push("reshape", (a,), a.value.reshape(shape), (a.shape,))

    # -- gradient helpers ----------------------------------------------------

    def _unbroadcast(self, g: Var, shape: tuple[int, ...]) -> Var:
        """Reduce a gradient back to the shape of a broadcast operand."""
        if g.shape == shape:
            return g
        extra = len(g.shape) - len(shape)
        axes = tuple(range(extra)) + tuple(
            i + extra for i, n in enumerate(shape) if n == 1 and g.shape[i + extra] != 1
        )
        g = self.reduce_sum(g, axis=axes)
        if g.shape != shape:
            g = self.reshape(g, shape)
        return g


def _parse_einsum(spec: str, n_ops: int) -> tuple[list[str], str]:
    if "..." in spec:
        raise ValueError("ellipsis einsum is not supported")
    lhs, _, out = spec.partition("->")
    if not _:
        raise ValueError("einsum spec must be explicit (contain '->')")
    in_specs = lhs.split(",")
    if len(in_specs) != n_ops:
        raise ValueError(f"spec names {len(in_specs)} operands, got {n_ops}")
    seen = set("".join(in_specs))
    for s in in_specs:
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index within one operand: {s!r}")
        for ch in s:
            appears = out.count(ch) + sum(o.count(ch) for o in in_specs) - s.count(ch)
            if appears == 0:
                raise ValueError(
                    f"index {ch!r} appears only in one operand; its adjoint is not expressible"
                )
    if any(ch not in seen for ch in out):
        raise ValueError("output index missing from inputs")
    return in_specs, out


def _vjp(tape: Tape, node: Node, out: Var, g: Var) -> list[Var | None]:
    """Adjoints of a node's inputs, built as new tape nodes."""
    op = node.op
    ivars = [Var(tape, i) for i in node.inputs]
    if op == "add":
        a, b = ivars
        return [tape._unbroadcast(g, a.shape), tape._unbroadcast(g, b.shape)]
    if op == "mul":
        a, b = ivars
        return [
            tape._unbroadcast(tape.mul(g, b), a.shape),
            tape._unbroadcast(tape.mul(g, a), b.shape),
        ]
    if op == "scale":
        return [tape.scale(g, node.ctx[0])]
    if op == "shift":
        return [g]
    if op == "pow":
        (p,) = node.ctx
        (a,) = ivars
        return [tape.mul(g, tape.scale(tape.pow_const(a, p - 1.0), p))]
    if op == "exp":
        return [tape.mul(g, out)]
    if op == "tanh":
        one_minus = tape.shift(tape.scale(tape.mul(out, out), -1.0), 1.0)
        return [tape.mul(g, one_minus)]
    if op == "sigmoid":
        one_minus = tape.shift(tape.scale(out, -1.0), 1.0)
        return [tape.mul(g, tape.mul(out, one_minus))]
    if op == "einsum":
        in_specs, out_spec = node.ctx
        grads: list[Var | None] = []
        for i, spec_i in enumerate(in_specs):
            others = [(in_specs[j], ivars[j]) for j in range(len(ivars)) if j != i]
            sub = ",".join([out_spec] + [s for s, _ in others]) + "->" + spec_i
            grads.append(tape.einsum(sub, g, *[v for _, v in others]))
        return grads
    if op == "sum":
        axis, in_shape = node.ctx
        if axis is None:
            keep = (1,) * len(in_shape)
        else:
            keep = tuple(1 if i in axis else n for i, n in enumerate(in_shape))
        return [tape.broadcast_to(tape.reshape(g, keep), in_shape)]
    if op == "broadcast":
        (in_shape,) = node.ctx
        return [tape._unbroadcast(g, in_shape)]
    if op == "gather":
        index, size = node.ctx
        return [tape.scatter_add(g, index, size)]
    if op == "scatter":
        (index,) = node.ctx
        return [tape.gather(g, index)]
    if op == "concat":
        axis, sizes = node.ctx
        grads = []
        start = 0
        for n in sizes:
            grads.append(tape.narrow(g, axis, start, n))
            start += n
        return grads
    if op == "narrow":
        axis, start, total = node.ctx
        return [tape.pad_axis(g, axis, start, total)]
    if op == "pad":
        axis, start, length = node.ctx
        return [tape.narrow(g, axis, start, length)]
    if op == "reshape":
        (in_shape,) = node.ctx
        return [tape.reshape(g, in_shape)]
    raise AssertionError(f"no vjp for op {op!r}")


def backward(root: Var, wanted: Sequence[Var]) -> list[Var]:
    """Reverse-mode gradients of a scalar root for the wanted nodes.

    The wanted nodes may be leaves or tagged intermediates. Returns one Var
    per request (zeros when the root does not depend on it). The adjoints
    are tape nodes, so they can be differentiated again.
    """
    tape = root.tape
    if root.value.shape != ():
        raise ValueError("backward root must be a scalar")
    wanted_idx = {w.idx for w in wanted}
    # Adjoints must flow into every node that can reach a wanted one, even
    # through constant subtrees (tagged intermediates of inference graphs).
    reach = np.zeros(root.idx + 1, dtype=bool)
    for w in wanted_idx:
        if w <= root.idx:
            reach[w] = True
    for i in range(root.idx + 1):
        if not reach[i]:
            node = tape.nodes[i]
            reach[i] = any(reach[j] for j in node.inputs)

    def _active(i: int) -> bool:
        return tape.nodes[i].requires_grad or reach[i]

    adjoint: dict[int, Var] = {root.idx: tape.constant(np.ones((), dtype=tape.dtype))}
    results: dict[int, Var] = {}
    for i in range(root.idx, -1, -1):
        g = adjoint.pop(i, None)
        if g is None:
            continue
        if i in wanted_idx:
            results[i] = g
        node = tape.nodes[i]
        if node.op == "leaf" or not _active(i):
            continue
        for inp, gvar in zip(node.inputs, _vjp(tape, node, Var(tape, i), g)):
            if gvar is None or not _active(inp):
                continue
            prev = adjoint.get(inp)
            adjoint[inp] = gvar if prev is None else tape.add(prev, gvar)
    out = []
    for w in wanted:
        got = results.get(w.idx)
        if got is None:
            got = tape.constant(np.zeros(w.shape, dtype=tape.dtype))
        out.append(got)
    return out


def silu(ops, x):
    """x * sigmoid(x), built from primitives so it works on any backend."""
    return ops.mul(x, ops.sigmoid(x))


class ArrayOps:
    """Plain-numpy twin of the Tape op set, for untaped re-evaluation.

    The model forward is written against this interface; running it with a
    Tape or with ArrayOps executes the same numpy kernels in the same
    order, so the results agree bitwise.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)

    def leaf(self, value, requires_grad: bool = True):
        return np.asarray(value, dtype=self.dtype)

    def constant(self, value):
        return np.asarray(value, dtype=self.dtype)

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def scale(a, c):
        return a * c

    @staticmethod
    def shift(a, c):
        return a + c

    @staticmethod
    def pow_const(a, p):
        return a**p

    @staticmethod
    def exp(a):
        return np.exp(a)

    @staticmethod
    def tanh(a):
        return np.tanh(a)

    @staticmethod
    def sigmoid(a):
        return np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))), np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a))))

    @staticmethod
    def einsum(spec, *args):
        return np.einsum(spec, *args)

    @staticmethod
    def reduce_sum(a, axis=None):
        return a.sum(axis=axis)

    @staticmethod
    def broadcast_to(a, shape):
        return np.broadcast_to(a, shape).copy()

    @staticmethod
    def gather(a, index):
        return a[np.asarray(index, dtype=np.intp)]

    @staticmethod
    def scatter_add(a, index, size):
        out = np.zeros((size,) + a.shape[1:], dtype=a.dtype)
        np.add.at(out, np.asarray(index, dtype=np.intp), a)
        return out

    @staticmethod
    def concat(parts, axis):
        parts = list(parts)
        if len(parts) == 1:
            return parts[0]
        return np.concatenate(parts, axis=axis)

    @staticmethod
    def narrow(a, axis, start, length):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + length)
        return a[tuple(sl)].copy()

    @staticmethod
    def reshape(a, shape):
        return a.reshape(shape)
