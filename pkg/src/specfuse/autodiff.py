"""Minimal reverse-mode differentiation over dense float64 matrices.

A :class:`Tape` is an append-only list of nodes; every node's inputs have
smaller ids, so :func:`backward` is a single descending pass.  Gradients are
allocated lazily: a node whose gradient is never touched stays at ``None``,
and a :class:`Param` outside the ancestor set of the loss therefore receives
an exactly-zero gradient.  That reachability property is what makes late
fusion isolate branch failures, so it is load-bearing, not an optimization.

Non-finite values are deliberately never sanitized here.  NaN and inf flow
through forward and backward untouched; detecting and guarding them is the
caller's job.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .linalg import CsrMatrix, as_dense, spmm

__all__ = ["Node", "Param", "Tape", "backward", "grad_check"]


class Param:
    """A trainable matrix with accumulated gradient and Adam state."""

    __slots__ = ("name", "value", "grad", "m", "v", "step")

    def __init__(self, name: str, value):
        self.name = name
        self.value = as_dense(value)
        self.grad: np.ndarray | None = None
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Node:
    __slots__ = ("idx", "value", "grad", "_backward")

    def __init__(self, idx: int, value: np.ndarray, backward: Callable | None):
        self.idx = idx
        self.value = value
        self.grad: np.ndarray | None = None
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


class Tape:
    """Records the forward computation; ops are methods returning new nodes."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_nodes: list[tuple[Param, Node]] = []

    def _push(self, value: np.ndarray, backward: Callable | None) -> Node:
        node = Node(len(self.nodes), value, backward)
        self.nodes.append(node)
        return node

    # -- leaves ------------------------------------------------------------

    def leaf(self, value) -> Node:
        """Constant input; receives gradient but owns no parameter."""
        return self._push(as_dense(value), None)

    def param(self, p: Param) -> Node:
        node = self._push(p.value, None)
        self.param_nodes.append((p, node))
        return node

    # -- linear ops ----------------------------------------------------------

    def spmm(self, a: CsrMatrix, x: Node) -> Node:
        at = a if a.symmetric else a.transpose()
        value = spmm(a, x.value)

        def bwd(g):
            x.accumulate(spmm(at, g))

        return self._push(value, bwd)

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        with np.errstate(all="ignore"):
            value = a.value @ b.value

        def bwd(g):
            with np.errstate(all="ignore"):
                a.accumulate(g @ b.value.T)
                b.accumulate(a.value.T @ g)

        return self._push(value, bwd)

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
        with np.errstate(all="ignore"):
            value = a.value + b.value

        def bwd(g):
            a.accumulate(g)
            b.accumulate(g)

        return self._push(value, bwd)

    def scale(self, a: Node, alpha: float) -> Node:
        with np.errstate(all="ignore"):
            value = alpha * a.value

        def bwd(g):
            with np.errstate(all="ignore"):
                a.accumulate(alpha * g)

        return self._push(value, bwd)

    def affine(self, a: Node, alpha: float, beta: float) -> Node:
        """Elementwise ``alpha * a + beta``."""
        with np.errstate(all="ignore"):
            value = alpha * a.value + beta

        def bwd(g):
            with np.errstate(all="ignore"):
                a.accumulate(alpha * g)

        return self._push(value, bwd)

    def scale_by(self, a: Node, s: Node) -> Node:
        """Matrix times a 1x1 scalar node."""
        if s.shape != (1, 1):
            raise ValueError("scale_by expects a 1x1 scalar node")
        with np.errstate(all="ignore"):
            value = a.value * s.value[0, 0]

        def bwd(g):
            with np.errstate(all="ignore"):
                a.accumulate(g * s.value[0, 0])
                s.accumulate(np.array([[np.sum(g * a.value)]]))

        return self._push(value, bwd)

    def reciprocal(self, a: Node) -> Node:
        with np.errstate(all="ignore"):
            value = 1.0 / a.value

        def bwd(g):
            with np.errstate(all="ignore"):
                a.accumulate(-g * value * value)

        return self._push(value, bwd)

    def concat_cols(self, a: Node, b: Node) -> Node:
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"concat_cols row mismatch: {a.shape} vs {b.shape}")
        split = a.shape[1]
        value = np.concatenate([a.value, b.value], axis=1)

        def bwd(g):
            a.accumulate(g[:, :split])
            b.accumulate(g[:, split:])

        return self._push(value, bwd)

    def mean_pair(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ValueError(f"mean_pair shape mismatch: {a.shape} vs {b.shape}")
        with np.errstate(all="ignore"):
            value = 0.5 * (a.value + b.value)

        def bwd(g):
            with np.errstate(all="ignore"):
                a.accumulate(0.5 * g)
                b.accumulate(0.5 * g)

        return self._push(value, bwd)

    def sum_all(self, a: Node) -> Node:
        value = np.array([[np.sum(a.value)]])

        def bwd(g):
            a.accumulate(np.full(a.shape, g[0, 0]))

        return self._push(value, bwd)

    # -- nonlinear ops -------------------------------------------------------

    def relu(self, a: Node) -> Node:
        with np.errstate(all="ignore"):
            value = np.maximum(a.value, 0.0)
        mask = a.value > 0

        def bwd(g):
            with np.errstate(all="ignore"):
                a.accumulate(g * mask)

        return self._push(value, bwd)

    def dropout(self, a: Node, rate: float, rng: np.random.Generator | None, train: bool) -> Node:
        """Inverted dropout: kept entries scaled by 1/(1-rate).

        In eval mode this is the identity and consumes no randomness (the
        input node is returned unchanged).
        """
        if not (0.0 <= rate < 1.0):
            raise ValueError("dropout rate must be in [0, 1)")
        if not train or rate == 0.0:
            return a
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = rng.random(a.shape) >= rate
        factor = keep / (1.0 - rate)
        with np.errstate(all="ignore"):
            value = a.value * factor

        def bwd(g):
            with np.errstate(all="ignore"):
                a.accumulate(g * factor)

        return self._push(value, bwd)

    def sigmoid(self, a: Node) -> Node:
        x = a.value
        with np.errstate(all="ignore"):
            value = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

        def bwd(g):
            with np.errstate(all="ignore"):
                a.accumulate(g * value * (1.0 - value))

        return self._push(value, bwd)

    def log_softmax_rows(self, a: Node) -> Node:
        """Row-wise log-softmax with max-subtraction stabilization.

        A NaN or inf anywhere in a row makes that whole row non-finite, which
        is exactly the propagation behavior the instrumentation watches for.
        """
        x = a.value
        with np.errstate(all="ignore"):
            shifted = x - np.max(x, axis=1, keepdims=True)
            lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
            value = shifted - lse

        def bwd(g):
            with np.errstate(all="ignore"):
                a.accumulate(g - np.exp(value) * np.sum(g, axis=1, keepdims=True))

        return self._push(value, bwd)

    # -- objectives ------------------------------------------------------------

    def nll_loss(self, logp: Node, labels: np.ndarray, mask: np.ndarray) -> Node:
        """Mean negative log-probability of the true class over masked rows."""
        labels = np.asarray(labels, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            raise ValueError("nll_loss needs a nonempty mask")
        with np.errstate(all="ignore"):
            value = np.array([[-np.mean(logp.value[idx, labels[idx]])]])

        def bwd(g):
            grad = np.zeros(logp.shape)
            grad[idx, labels[idx]] = -g[0, 0] / idx.size
            logp.accumulate(grad)

        return self._push(value, bwd)


def backward(loss: Node, tape: Tape) -> None:
    """Reverse pass from a scalar loss; fills ``Param.grad`` for reachable
    parameters and leaves unreachable ones at ``None``."""
    if loss.shape != (1, 1):
        raise ValueError("backward expects a scalar (1x1) loss node")
    loss.grad = np.ones((1, 1))
    for node in reversed(tape.nodes[: loss.idx + 1]):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    # a Param may appear as several tape nodes; its gradients accumulate
    for p, _ in tape.param_nodes:
        p.grad = None
    for p, node in tape.param_nodes:
        if node.grad is not None:
            p.grad = node.grad if p.grad is None else p.grad + node.grad


def grad_check(
    build: Callable[[Tape], Node],
    params: list[Param],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` must be deterministic (eval-mode dropout or a fixed mask).
    Raises if the forward value is non-finite, since finite differencing is
    meaningless there.
    """

    def forward_value() -> float:
        tape = Tape()
        loss = build(tape)
        if loss.shape != (1, 1):
            raise ValueError("grad_check target must be scalar")
        return float(loss.value[0, 0])

    tape = Tape()
    loss = build(tape)
    if not np.isfinite(loss.value[0, 0]):
        raise ValueError("grad_check requires a finite forward value")
    backward(loss, tape)
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value)) for p in params}

    worst = 0.0
    for p in params:
        flat = p.value.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = forward_value()
            flat[i] = orig - eps
            down = forward_value()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("grad_check hit a non-finite perturbed value")
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[p.name].ravel()[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
