"""A small reverse-mode tape with exactly the primitives the model needs.

Values are float64 numpy arrays. Most primitives are batched over a leading
axis of size B so a whole training batch is one graph; per-item losses are
reduced with :meth:`Tape.mean` at the end.

Typical use::

    tape = Tape()
    W = tape.param("W", w0)
    x = tape.const(x0)
    loss = tape.mean(tape.sq_dist(tape.affine(x, W), tape.const(y0)))
    grads = tape.backward(loss)      # {"W": dloss/dW}
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericalError

KL_CLAMP = 1e-12
COSINE_EPS = 1e-8


class Node:
    __slots__ = ("index", "op", "value", "grad", "parents", "backward_fn", "name")

    def __init__(self, index, op, value, parents, backward_fn, name=None):
        self.index = index
        self.op = op
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.index} {self.op}{label} shape={np.shape(self.value)}>"

    @property
    def shape(self):
        return np.shape(self.value)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g


def stable_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cosine_matrix(q, slots, eps=COSINE_EPS):
    """Cosine similarity of each row of ``q`` (B, D) with each slot (M, D)."""
    nq = np.linalg.norm(q, axis=-1)
    ns = np.linalg.norm(slots, axis=-1)
    return (q @ slots.T) / np.multiply.outer(nq + eps, ns + eps)


def _kl_rows(p, q):
    pc = np.maximum(p, KL_CLAMP)
    qc = np.maximum(q, KL_CLAMP)
    return np.sum(p * (np.log(pc) - np.log(qc)), axis=-1)


class Tape:
    """Records primitive operations in execution order.

    Every recorded value is checked for NaN/inf; the first offending node
    raises :class:`NumericalError` naming the node.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.check_finite = check_finite

    def _push(self, op, value, parents=(), backward_fn=None, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        node = Node(len(self.nodes), op, value, tuple(parents), backward_fn, name)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite value produced at {node!r}")
        self.nodes.append(node)
        return node

    # -- leaves ---------------------------------------------------------------

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        node = self._push("param", np.array(value, dtype=np.float64), name=name)
        self.params[name] = node
        return node

    def const(self, value, name=None) -> Node:
        return self._push("const", np.array(value, dtype=np.float64), name=name)

    # -- primitives ----------------------------------------------------------

    def gather(self, table: Node, ids) -> Node:
        """Row lookup ``table[ids]`` (embedding layer)."""
        ids = np.asarray(ids, dtype=np.int64)

        def back(g):
            gt = np.zeros_like(table.value)
            np.add.at(gt, ids, g)
            table._accum(gt)

        return self._push("gather", table.value[ids], (table,), back)

    def affine(self, x: Node, W: Node, b: Node | None = None) -> Node:
        """Batched matrix-vector product ``x @ W.T (+ b)``."""
        out = x.value @ W.value.T
        if b is not None:
            out = out + b.value

        def back(g):
            x._accum(g @ W.value)
            W._accum(g.T @ x.value)
            if b is not None:
                b._accum(g.sum(axis=0))

        parents = (x, W) if b is None else (x, W, b)
        return self._push("affine", out, parents, back)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0  # subgradient 0 at 0
        return self._push("relu", np.where(mask, x.value, 0.0), (x,), lambda g: x._accum(g * mask))

    def sigmoid(self, x: Node) -> Node:
        y = stable_sigmoid(x.value)
        return self._push("sigmoid", y, (x,), lambda g: x._accum(g * y * (1.0 - y)))

    def concat(self, parts: list[Node]) -> Node:
        widths = [p.value.shape[-1] for p in parts]
        cuts = np.cumsum(widths)[:-1]

        def back(g):
            for p, gp in zip(parts, np.split(g, cuts, axis=-1)):
                p._accum(gp)

        return self._push("concat", np.concatenate([p.value for p in parts], axis=-1), parts, back)

    def cosine(self, q: Node, slots: Node, eps: float = COSINE_EPS) -> Node:
        """(B, M) cosine similarities, with ``eps`` added to every norm."""
        nq = np.linalg.norm(q.value, axis=-1)
        ns = np.linalg.norm(slots.value, axis=-1)
        den = np.multiply.outer(nq + eps, ns + eps)
        c = (q.value @ slots.value.T) / den
        with np.errstate(divide="ignore", invalid="ignore"):
            rq = np.where(nq > 0, 1.0 / (nq * (nq + eps)), 0.0)
            rs = np.where(ns > 0, 1.0 / (ns * (ns + eps)), 0.0)

        def back(g):
            gd = g / den
            q._accum(gd @ slots.value - ((g * c).sum(axis=1) * rq)[:, None] * q.value)
            slots._accum(gd.T @ q.value - ((g * c).sum(axis=0) * rs)[:, None] * slots.value)

        return self._push("cosine", c, (q, slots), back)

    def softmax(self, x: Node, scale: float = 1.0) -> Node:
        """Row-wise softmax of ``scale * x``."""
        y = softmax(scale * x.value)

        def back(g):
            x._accum(scale * y * (g - (g * y).sum(axis=-1, keepdims=True)))

        return self._push("softmax", y, (x,), back)

    def slot_sum(self, w: Node, slots: Node) -> Node:
        """Weighted slot recall ``w @ slots`` for weights (B, M) and slots (M, D)."""

        def back(g):
            w._accum(g @ slots.value.T)
            slots._accum(w.value.T @ g)

        return self._push("slot_sum", w.value @ slots.value, (w, slots), back)

    def add(self, a: Node, b: Node) -> Node:
        def back(g):
            a._accum(g)
            b._accum(g)

        return self._push("add", a.value + b.value, (a, b), back)

    def mix(self, alpha: Node, a: Node, b: Node) -> Node:
        """``alpha * a + (1 - alpha) * b`` with per-row weights ``alpha`` of shape (B, 1)."""

        def back(g):
            alpha._accum((g * (a.value - b.value)).sum(axis=-1, keepdims=True))
            a._accum(alpha.value * g)
            b._accum((1.0 - alpha.value) * g)

        out = alpha.value * a.value + (1.0 - alpha.value) * b.value
        return self._push("mix", out, (alpha, a, b), back)

    def lincomb(self, coeffs, parts: list[Node]) -> Node:
        """Constant-coefficient combination ``sum_i coeffs[i] * parts[i]``."""
        coeffs = [float(c) for c in coeffs]
        out = coeffs[0] * parts[0].value
        for c, p in zip(coeffs[1:], parts[1:]):
            out = out + c * p.value

        def back(g):
            for c, p in zip(coeffs, parts):
                p._accum(c * g)

        return self._push("lincomb", out, parts, back)

    def sq_dist(self, a: Node, b: Node) -> Node:
        """Row-wise squared L2 distance, shape (B,)."""
        diff = a.value - b.value

        def back(g):
            ga = 2.0 * diff * g[..., None]
            a._accum(ga)
            b._accum(-ga)

        return self._push("sq_dist", np.sum(diff * diff, axis=-1), (a, b), back)

    def kl(self, p: Node, q: Node) -> Node:
        """Row-wise KL(p || q) with probabilities clamped at 1e-12 inside the logs."""
        pc = np.maximum(p.value, KL_CLAMP)
        qc = np.maximum(q.value, KL_CLAMP)

        def back(g):
            gp = np.log(pc) - np.log(qc) + (p.value > KL_CLAMP)
            gq = -np.where(q.value > KL_CLAMP, p.value / qc, 0.0)
            p._accum(gp * g[..., None])
            q._accum(gq * g[..., None])

        return self._push("kl", _kl_rows(p.value, q.value), (p, q), back)

    def reparam(self, mu: Node, logvar: Node, eps) -> Node:
        """Gaussian sample ``mu + exp(logvar / 2) * eps`` with ``eps`` fixed."""
        eps = np.asarray(eps, dtype=np.float64)
        sd = np.exp(0.5 * logvar.value)

        def back(g):
            mu._accum(g)
            logvar._accum(g * 0.5 * sd * eps)

        return self._push("reparam", mu.value + sd * eps, (mu, logvar), back)

    def mean(self, x: Node) -> Node:
        n = x.value.size
        return self._push("mean", x.value.mean(), (x,), lambda g: x._accum(np.full(x.value.shape, g / n)))

    # -- reverse pass ----------------------------------------------------------

    def backward(self, out: Node) -> dict[str, np.ndarray]:
        """Propagate d(out)/d(node) in exact reverse recording order.

        ``out`` must be a scalar. Returns gradients for every registered
        parameter (zeros for parameters that do not influence ``out``).
        """
        if out.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        for n in self.nodes:
            n.grad = None
        out.grad = np.ones_like(out.value)
        for n in reversed(self.nodes[: out.index + 1]):
            if n.grad is None or n.backward_fn is None:
                continue
            n.backward_fn(n.grad)
            if self.check_finite and any(
                p.grad is not None and not np.all(np.isfinite(p.grad)) for p in n.parents
            ):
                raise NumericalError(f"non-finite gradient flowing out of {n!r}")
        return {
            name: (node.grad if node.grad is not None else np.zeros_like(node.value))
            for name, node in self.params.items()
        }


GraphBuilder = Callable[[Tape, dict], Node]


def forward_backward(build: GraphBuilder, params: dict[str, np.ndarray]):
    """Evaluate ``build`` on a fresh tape and return ``(loss, grads)``."""
    tape = Tape()
    nodes = {k: tape.param(k, v) for k, v in params.items()}
    out = build(tape, nodes)
    return float(out.value), tape.backward(out)


def evaluate(build: GraphBuilder, params: dict[str, np.ndarray]) -> float:
    tape = Tape()
    nodes = {k: tape.param(k, v) for k, v in params.items()}
    return float(build(tape, nodes).value)


# -- finite-difference oracle --------------------------------------------------

def finite_difference(fn: Callable[[dict], float], params: dict[str, np.ndarray], h: float = 1e-5):
    """Central-difference gradient of ``fn(params)`` for every coordinate.

    ``params`` is not modified; perturbations are applied to copies.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(work)
            flat[i] = orig - h
            fm = fn(work)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradReport:
    errors: dict[str, float]  # block -> max relative error
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def format(self) -> str:
        lines = [f"{k:<14} {v:.3e}" for k, v in self.errors.items()]
        lines.append(f"max relative error {self.max_error:.3e} ({'PASS' if self.passed else 'FAIL'} at {self.tolerance:g})")
        return "\n".join(lines)


def check_gradients(build: GraphBuilder, params: dict[str, np.ndarray], h: float = 1e-5, tol: float = 1e-4,
                    oracle: Callable[[dict], float] | None = None) -> GradReport:
    """Compare tape gradients of ``build`` against central differences.

    ``oracle`` replaces the tape's own forward pass as the function being
    differenced; it must compute the same scalar.
    """
    _, analytic = forward_backward(build, params)
    fn = oracle if oracle is not None else (lambda p: evaluate(build, p))
    numeric = finite_difference(fn, params, h)
    errors = {k: float(relative_error(analytic[k], numeric[k]).max(initial=0.0)) for k in params}
    return GradReport(errors, tol)
