"""Tape-based reverse-mode differentiation.

Operations are registered by name with a forward and a backward rule that
both work on raw numpy arrays. A :class:`Tape` records one node per call
and :meth:`Tape.backward` walks the nodes in reverse, accumulating
gradients where a value fans out to several consumers.

Example::

    tape = Tape()
    x = tape.leaf(Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 1, 2)))
    y = tape.record("mul", [x, x])
    loss = tape.record("sum", [y])
    grads = tape.backward(loss)          # grads[x] == [2, 4]
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .tensor import Tensor, fold_sum


@dataclass(frozen=True)
class OpRule:
    # forward(arrays, ctx) -> (out, saved)
    forward: Callable[..., tuple[np.ndarray, Any]]
    # backward(grad_out, arrays, out, saved, ctx, needs) -> sequence of grads or None
    backward: Callable[..., tuple]


OPS: dict[str, OpRule] = {}


def register_op(name: str, forward, backward) -> None:
    OPS[name] = OpRule(forward, backward)


@dataclass
class Node:
    id: int
    kind: str | None
    inputs: tuple[int, ...]
    value: Tensor
    saved: Any = None
    ctx: dict = field(default_factory=dict)
    requires_grad: bool = False


class Tape:
    """Ordered record of operations. Single writer; not thread-safe."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value: Tensor, requires_grad: bool = True) -> int:
        if not isinstance(value, Tensor):
            value = Tensor(value)
        nid = len(self.nodes)
        self.nodes.append(Node(nid, None, (), value, requires_grad=requires_grad))
        return nid

    def constant(self, value: Tensor) -> int:
        return self.leaf(value, requires_grad=False)

    def value(self, nid: int) -> Tensor:
        return self.nodes[nid].value

    def record(self, kind: str, inputs, **ctx) -> int:
        try:
            rule = OPS[kind]
        except KeyError:
            raise ValueError(f"unknown op kind {kind!r}") from None
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"input node {i} is not on the tape")
        arrays = [self.nodes[i].value.data for i in inputs]
        out, saved = rule.forward(arrays, ctx)
        nid = len(self.nodes)
        needs = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(nid, kind, inputs, Tensor(out), saved, ctx, needs))
        return nid

    def backward(self, loss: int) -> dict[int, Tensor]:
        """Gradients of the scalar node ``loss`` w.r.t. every grad-requiring leaf."""
        root = self.nodes[loss]
        if root.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {root.value.shape}")
        grads: dict[int, np.ndarray] = {loss: np.ones_like(root.value.data)}
        for node in reversed(self.nodes[: loss + 1]):
            g = grads.get(node.id)
            if g is None or node.kind is None or not node.requires_grad:
                continue
            arrays = [self.nodes[i].value.data for i in node.inputs]
            needs = [self.nodes[i].requires_grad for i in node.inputs]
            in_grads = OPS[node.kind].backward(g, arrays, node.value.data, node.saved, node.ctx, needs)
            for i, need, gi in zip(node.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
            if node.id != loss:
                del grads[node.id]
        result = {}
        for n in self.nodes[: loss + 1]:
            if n.kind is not None or not n.requires_grad:
                continue
            g = grads.get(n.id)
            if g is None:
                g = np.zeros_like(n.value.data)
            result[n.id] = Tensor(np.asarray(g, dtype=n.value.dtype).reshape(n.value.shape))
        return result


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences."""
    base = np.array(x, dtype=np.float64)
    flat = base.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(base)
        flat[i] = orig - eps
        fm = fn(base)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("function output is not finite")
        numeric[i] = (fp - fm) / (2 * eps)
    return numeric.reshape(base.shape)


def max_relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    c = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(c)), 1e-8)
    return float(np.max(np.abs(a - c) / denom))


def gradcheck(f: Callable[[Tape, int], int], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f(tape, x_id)`` records a scalar function of leaf ``x_id`` and returns
    the loss node. Must be run in double precision.
    """
    if x.dtype != np.float64:
        raise TypeError("gradcheck needs float64 input")

    def evaluate(arr):
        tape = Tape()
        return tape.value(f(tape, tape.leaf(Tensor(arr)))).item()

    tape = Tape()
    xid = tape.leaf(x)
    analytic = tape.backward(f(tape, xid))[xid].data
    return max_relative_error(analytic, central_difference(evaluate, x.data, eps))


# ---------------------------------------------------------------------------
# elementary ops


def _add_fwd(a, ctx):
    return a[0] + a[1], None


def _add_bwd(g, a, out, saved, ctx, needs):
    return g, g


def _sub_fwd(a, ctx):
    return a[0] - a[1], None


def _sub_bwd(g, a, out, saved, ctx, needs):
    return g, -g


def _mul_fwd(a, ctx):
    return a[0] * a[1], None


def _mul_bwd(g, a, out, saved, ctx, needs):
    return g * a[1], g * a[0]


def _sum_fwd(a, ctx):
    return fold_sum(a[0]), None


def _sum_bwd(g, a, out, saved, ctx, needs):
    return (np.broadcast_to(g.reshape(()), a[0].shape).copy(),)


def _scale_fwd(a, ctx):
    return a[0] * ctx["factor"], None


def _scale_bwd(g, a, out, saved, ctx, needs):
    return (g * ctx["factor"],)


register_op("add", _add_fwd, _add_bwd)
register_op("sub", _sub_fwd, _sub_bwd)
register_op("mul", _mul_fwd, _mul_bwd)
register_op("sum", _sum_fwd, _sum_bwd)
register_op("scale", _scale_fwd, _scale_bwd)
