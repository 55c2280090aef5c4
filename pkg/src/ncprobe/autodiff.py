"""Minimal reverse-mode differentiation on a tape of batched numpy primitives.

All values are float64 numpy arrays: scalars (shape ()), vectors (n,) or
matrices (m, n).  Operations are methods on :class:`Tape`; each call appends a
:class:`Node` holding the forward value and a closure that accumulates parent
adjoints.  Nodes are created in topological order, so :func:`backward` is a
single reverse pass over the tape.

Shapes are checked on every operation; there is no implicit broadcasting.
The only broadcasts are the explicit ops ``affine`` (bias over batch rows),
``sub_rows`` (row vector over batch rows) and ``sub_scalar``.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Node:
    __slots__ = ("value", "parents", "grad", "_pull")

    def __init__(self, value, parents=(), pull=None):
        self.value = value
        self.parents = parents
        self.grad = None
        self._pull = pull

    @property
    def shape(self):
        return self.value.shape


def _as_f64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _check_same_shape(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


class Tape:
    """Ordered record of primitive operations.

    Replaying the recorded nodes forward reproduces the stored values exactly;
    :func:`backward` visits them once in reverse order.  A tape is a
    single-owner, single-threaded object.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, value, parents, pull) -> Node:
        node = Node(value, parents, pull)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """Register an input (leaf) value; gradients accumulate on leaves."""
        return self._record(_as_f64(value), (), None)

    # -- arithmetic ---------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        _check_same_shape(a, b, "add")

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + g
            grads[b] = grads.get(b, 0.0) + g

        return self._record(a.value + b.value, (a, b), pull)

    def sub(self, a: Node, b: Node) -> Node:
        _check_same_shape(a, b, "sub")

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + g
            grads[b] = grads.get(b, 0.0) - g

        return self._record(a.value - b.value, (a, b), pull)

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product of same-shape operands."""
        _check_same_shape(a, b, "mul")

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + g * b.value
            grads[b] = grads.get(b, 0.0) + g * a.value

        return self._record(a.value * b.value, (a, b), pull)

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + c * g

        return self._record(c * a.value, (a,), pull)

    def add_const(self, a: Node, c: float) -> Node:
        c = float(c)

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + g

        return self._record(a.value + c, (a,), pull)

    def div(self, a: Node, b: Node) -> Node:
        """Scalar division a / b."""
        if a.value.shape != () or b.value.shape != ():
            raise DimensionError("div: expects scalar operands")

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + g / b.value
            grads[b] = grads.get(b, 0.0) - g * a.value / (b.value * b.value)

        return self._record(a.value / b.value, (a, b), pull)

    def sqrt(self, a: Node) -> Node:
        if a.value.shape != ():
            raise DimensionError("sqrt: expects a scalar")
        y = np.sqrt(a.value)

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + g / (2.0 * y)

        return self._record(y, (a,), pull)

    # -- nonlinearities -----------------------------------------------------

    def relu(self, a: Node) -> Node:
        """Elementwise max with zero."""
        mask = a.value > 0

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + g * mask

        return self._record(np.where(mask, a.value, 0.0), (a,), pull)

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + g * (1.0 - y * y)

        return self._record(y, (a,), pull)

    # -- linear algebra -----------------------------------------------------

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        """x @ w.T + b for a batch x of shape (B, n), w (m, n), b (m,)."""
        if x.value.ndim != 2 or w.value.ndim != 2 or b.value.ndim != 1:
            raise DimensionError("affine: expects x (B,n), w (m,n), b (m,)")
        if x.value.shape[1] != w.value.shape[1] or w.value.shape[0] != b.value.shape[0]:
            raise DimensionError(
                f"affine: incompatible shapes x{x.value.shape} w{w.value.shape} b{b.value.shape}"
            )

        def pull(g, grads):
            grads[x] = grads.get(x, 0.0) + g @ w.value
            grads[w] = grads.get(w, 0.0) + g.T @ x.value
            grads[b] = grads.get(b, 0.0) + g.sum(axis=0)

        return self._record(x.value @ w.value.T + b.value, (x, w, b), pull)

    def dot(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 1 or a.value.shape != b.value.shape:
            raise DimensionError("dot: expects equal-length vectors")

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + g * b.value
            grads[b] = grads.get(b, 0.0) + g * a.value

        return self._record(a.value @ b.value, (a, b), pull)

    # -- reductions and reshaping -------------------------------------------

    def sum_all(self, a: Node) -> Node:
        shape = a.value.shape

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + g * np.ones(shape)

        return self._record(np.asarray(a.value.sum()), (a,), pull)

    def mean_all(self, a: Node) -> Node:
        n = a.value.size
        shape = a.value.shape

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + (g / n) * np.ones(shape)

        return self._record(np.asarray(a.value.mean()), (a,), pull)

    def mean_rows(self, a: Node) -> Node:
        """Column means of a (B, D) matrix, shape (D,)."""
        if a.value.ndim != 2:
            raise DimensionError("mean_rows: expects a matrix")
        n = a.value.shape[0]

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + np.tile(g / n, (n, 1))

        return self._record(a.value.mean(axis=0), (a,), pull)

    def sqnorm(self, a: Node) -> Node:
        """Sum of squared entries, a scalar."""

        def pull(g, grads):
            grads[a] = grads.get(a, 0.0) + 2.0 * g * a.value

        return self._record(np.asarray((a.value * a.value).sum()), (a,), pull)

    def sub_rows(self, x: Node, v: Node) -> Node:
        """Subtract a (D,) row vector from every row of a (B, D) matrix."""
        if x.value.ndim != 2 or v.value.ndim != 1 or x.value.shape[1] != v.value.shape[0]:
            raise DimensionError(f"sub_rows: shapes {x.value.shape} vs {v.value.shape}")

        def pull(g, grads):
            grads[x] = grads.get(x, 0.0) + g
            grads[v] = grads.get(v, 0.0) - g.sum(axis=0)

        return self._record(x.value - v.value, (x, v), pull)

    def sub_scalar(self, x: Node, s: Node) -> Node:
        """Subtract a scalar node from every entry."""
        if s.value.shape != ():
            raise DimensionError("sub_scalar: second operand must be scalar")

        def pull(g, grads):
            grads[x] = grads.get(x, 0.0) + g
            grads[s] = grads.get(s, 0.0) - g.sum()

        return self._record(x.value - s.value, (x, s), pull)

    def take_rows(self, x: Node, idx: np.ndarray) -> Node:
        """Gather rows of a (B, D) matrix by integer index."""
        if x.value.ndim != 2:
            raise DimensionError("take_rows: expects a matrix")
        idx = np.asarray(idx, dtype=np.intp)
        shape = x.value.shape

        def pull(g, grads):
            gx = np.zeros(shape)
            np.add.at(gx, idx, g)
            grads[x] = grads.get(x, 0.0) + gx

        return self._record(x.value[idx], (x,), pull)

    def stack(self, items: list[Node]) -> Node:
        """Stack scalar nodes into a vector."""
        for it in items:
            if it.value.shape != ():
                raise DimensionError("stack: expects scalar nodes")
        items = tuple(items)

        def pull(g, grads):
            for i, it in enumerate(items):
                grads[it] = grads.get(it, 0.0) + g[i]

        return self._record(np.array([it.value for it in items]), items, pull)

    # -- losses --------------------------------------------------------------

    def softmax_cross_entropy_mean(self, logits: Node, labels: np.ndarray) -> Node:
        """Mean softmax cross-entropy of a (B, C) batch, fused for stability.

        Computed with max-subtraction: loss_i = logsumexp(z_i) - z_i[label_i].
        """
        z = logits.value
        if z.ndim != 2:
            raise DimensionError("softmax_cross_entropy_mean: expects (B, C) logits")
        labels = np.asarray(labels, dtype=np.intp)
        if labels.ndim != 1 or labels.shape[0] != z.shape[0]:
            raise DimensionError("softmax_cross_entropy_mean: labels misaligned with logits")
        if labels.min() < 0 or labels.max() >= z.shape[1]:
            raise ValueError("softmax_cross_entropy_mean: label out of range")
        zmax = z.max(axis=1, keepdims=True)
        ez = np.exp(z - zmax)
        sez = ez.sum(axis=1, keepdims=True)
        logp = (z - zmax) - np.log(sez)
        b = z.shape[0]
        loss = -logp[np.arange(b), labels].mean()
        probs = ez / sez

        def pull(g, grads):
            gz = probs.copy()
            gz[np.arange(b), labels] -= 1.0
            grads[logits] = grads.get(logits, 0.0) + (g / b) * gz

        return self._record(np.asarray(loss), (logits,), pull)

    def mse_mean(self, pred: Node, target: np.ndarray) -> Node:
        """Mean squared error against a constant target, over all entries."""
        t = _as_f64(target)
        if pred.value.shape != t.shape:
            raise DimensionError(f"mse_mean: shape mismatch {pred.value.shape} vs {t.shape}")
        diff = pred.value - t
        n = diff.size

        def pull(g, grads):
            grads[pred] = grads.get(pred, 0.0) + (2.0 * g / n) * diff

        return self._record(np.asarray((diff * diff).mean()), (pred,), pull)


def backward(tape: Tape, output: Node) -> None:
    """Accumulate gradients of a scalar output into ``.grad`` of every node.

    Visits nodes in reverse creation order (reverse topological order) exactly
    once; leaves end up with the gradient of ``output`` with respect to them.
    """
    if output.value.shape != ():
        raise DimensionError("backward: output must be scalar")
    grads: dict[Node, np.ndarray] = {output: np.asarray(1.0)}
    seen = False
    for node in reversed(tape.nodes):
        if node is output:
            seen = True
        if not seen:
            continue
        g = grads.get(node)
        if g is None:
            continue
        node.grad = g
        if node._pull is not None:
            node._pull(g, grads)


def grad(tape: Tape, output: Node, wrt: list[Node]) -> list[np.ndarray]:
    """Convenience wrapper: run backward and collect leaf gradients."""
    backward(tape, output)
    return [np.zeros_like(w.value) if w.grad is None else np.asarray(w.grad) for w in wrt]


def softmax_cross_entropy(logits: np.ndarray, label: int) -> float:
    """Stable cross-entropy -log softmax(logits)[label] for a single vector."""
    z = _as_f64(logits)
    if z.ndim != 1:
        raise DimensionError("softmax_cross_entropy: expects a vector of logits")
    if not 0 <= label < z.shape[0]:
        raise ValueError(f"label {label} out of range for {z.shape[0]} logits")
    zmax = z.max()
    return float(np.log(np.exp(z - zmax).sum()) - (z[label] - zmax))


def finite_difference_gradient(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, the test oracle."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = _as_f64(x).copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g
