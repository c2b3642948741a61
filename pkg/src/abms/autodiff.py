"""Reverse-mode differentiation over a closed set of primitives.

Pipelines are plain Python callables that take the root :class:`Node` and
combine it using only the primitives below (plus ``+``, ``-`` and scalar
``*``/``/``).  Anything else raises :class:`UnsupportedPrimitiveError`.

Values may carry leading batch dimensions.  A pipeline whose output has shape
``B`` (one scalar per batch row) yields per-row gradients of shape ``B + (n,)``,
since rows never interact.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from numbers import Real
from typing import Callable

import numpy as np

from .errors import NumericalError, UnsupportedPrimitiveError


@dataclass(frozen=True)
class DualGradient:
    value: np.ndarray | float
    grad: np.ndarray
    #: per-sample loss values when the pipeline averages over samples
    samples: np.ndarray | None = None


class Node:
    """One tape entry: a value, the op that made it and (parent, vjp) pairs."""

    __slots__ = ("value", "op", "parents")

    def __init__(self, value, op: str, parents=()):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericalError("non-finite intermediate", node=op)
        self.value = value
        self.op = op
        self.parents = tuple(parents)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Node) else -np.asarray(other))

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, c):
        if isinstance(c, Node):
            raise UnsupportedPrimitiveError("Node * Node is not a primitive; use dot_const/sq_norm")
        return scale(self, c)

    __rmul__ = __mul__

    def __truediv__(self, c):
        if isinstance(c, Node):
            raise UnsupportedPrimitiveError("division by a Node is not a primitive")
        return scale(self, 1.0 / c)

    def __neg__(self):
        return scale(self, -1.0)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        # array (op) Node lands here; route plain arithmetic back to the primitives
        if method == "__call__" and not kwargs and len(inputs) == 2:
            a, b = inputs
            if ufunc is np.add:
                return add(a, b)
            if ufunc is np.subtract:
                return a.__sub__(b) if isinstance(a, Node) else b.__rsub__(a)
            if ufunc is np.multiply and np.ndim(a if isinstance(b, Node) else b) == 0:
                return scale(b, float(a)) if isinstance(b, Node) else scale(a, float(b))
        raise UnsupportedPrimitiveError(f"numpy {ufunc.__name__} is not a tape primitive")

    def __array__(self, *args, **kwargs):
        raise UnsupportedPrimitiveError(f"numpy operation applied to tape node {self.op!r}")

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape})"


def _require_node(x, op):
    if not isinstance(x, Node):
        raise UnsupportedPrimitiveError(f"{op} expects a tape Node, got {type(x).__name__}")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- primitives ---------------------------------------------------------------

def variable(x) -> Node:
    return Node(x, "input")


def add(a, b) -> Node:
    if isinstance(a, Node) and isinstance(b, Node):
        sa, sb = a.shape, b.shape
        return Node(a.value + b.value, "add",
                    [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))])
    node, const = (a, b) if isinstance(a, Node) else (b, a)
    _require_node(node, "add")
    if isinstance(const, Node) or not isinstance(const, (Real, np.ndarray)):
        raise UnsupportedPrimitiveError(f"cannot add {type(const).__name__} to a Node")
    s = node.shape
    return Node(node.value + const, "add_const", [(node, lambda g: _unbroadcast(g, s))])


def scale(x: Node, c: float) -> Node:
    _require_node(x, "scale")
    if not isinstance(c, Real):
        raise UnsupportedPrimitiveError("scale factor must be a real scalar")
    c = float(c)
    return Node(c * x.value, "scale", [(x, lambda g: c * g)])


def affine(x: Node, matrix=None, shift=0.0) -> Node:
    """x -> x @ matrix.T + shift (matrix optional)."""
    _require_node(x, "affine")
    if matrix is None:
        return add(x, np.asarray(shift, dtype=np.float64)) if np.any(shift) else x
    M = np.asarray(matrix, dtype=np.float64)
    out = x.value @ M.T + shift
    return Node(out, "affine", [(x, lambda g: g @ M)])


def sq_norm(x: Node) -> Node:
    _require_node(x, "sq_norm")
    v = x.value
    return Node(np.sum(v * v, axis=-1), "sq_norm", [(x, lambda g: 2.0 * g[..., None] * v)])


def dot_const(x: Node, c) -> Node:
    _require_node(x, "dot_const")
    c = np.asarray(c, dtype=np.float64)
    return Node(np.sum(x.value * c, axis=-1), "dot_const", [(x, lambda g: g[..., None] * c)])


def mean(x: Node, axis: int = -1) -> Node:
    _require_node(x, "mean")
    shape = x.shape
    ax = axis % len(shape)
    n = shape[ax]
    return Node(x.value.mean(axis=ax), "mean",
                [(x, lambda g: np.broadcast_to(np.expand_dims(g, ax), shape) / n)])


def lincomb(terms) -> Node:
    """sum_i a_i * node_i for (a_i, node_i) pairs."""
    terms = list(terms)
    out = scale(terms[0][1], terms[0][0])
    for a, node in terms[1:]:
        out = add(out, scale(node, a))
    return out


def expand_samples(x: Node, noise, sigma: float) -> Node:
    """x (..., n) -> x[..., None, :] + sigma * noise, noise (..., M, n) held fixed."""
    _require_node(x, "expand_samples")
    noise = np.asarray(noise, dtype=np.float64)
    out = x.value[..., None, :] + sigma * noise
    return Node(out, "expand_samples", [(x, lambda g: g.sum(axis=-2))])


def tweedie(x: Node, t: int, denoiser) -> Node:
    """x_0-hat = (x + (1 - a_t) score(x, t)) / sqrt(a_t); identity at t = 0."""
    _require_node(x, "tweedie")
    if t == 0:
        return Node(x.value, "tweedie", [(x, lambda g: g)])
    ab = denoiser.schedule.alpha_bar[t]
    xv = x.value
    s = denoiser.score(xv, t)
    c, r = 1.0 - ab, 1.0 / math.sqrt(ab)
    return Node((xv + c * s) * r, "tweedie",
                [(x, lambda g: (g + c * denoiser.score_vjp(xv, t, g)) * r)])


def reverse_mean(x: Node, t: int, denoiser) -> Node:
    """mu(x) = (x + beta_t score(x, t)) / sqrt(1 - beta_t)."""
    _require_node(x, "reverse_mean")
    beta = denoiser.schedule.beta[t]
    xv = x.value
    s = denoiser.score(xv, t)
    r = 1.0 / math.sqrt(1.0 - beta)
    return Node((xv + beta * s) * r, "reverse_mean",
                [(x, lambda g: (g + beta * denoiser.score_vjp(xv, t, g)) * r)])


def loss(x: Node, f) -> Node:
    """Apply a condition ``f`` exposing ``f(x)`` and ``f.grad(x)``."""
    _require_node(x, "loss")
    if not hasattr(f, "grad"):
        raise UnsupportedPrimitiveError(f"{type(f).__name__} does not expose an analytic grad")
    xv = x.value
    return Node(f(xv), f"loss:{type(f).__name__}", [(x, lambda g: g[..., None] * f.grad(xv))])


PRIMITIVES = ("input", "add", "add_const", "scale", "affine", "sq_norm", "dot_const", "mean",
              "expand_samples", "tweedie", "reverse_mean", "loss")


# -- backward pass ------------------------------------------------------------

def backward(out: Node, root: Node) -> np.ndarray:
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    grads = {id(out): np.ones_like(out.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node is root:
            if node is root:
                grads[id(root)] = g
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            if not np.all(np.isfinite(pg)):
                raise NumericalError("non-finite gradient", node=node.op)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    g = grads.get(id(root))
    return np.zeros_like(root.value) if g is None else g


def grad_of_pipeline(pipeline: Callable[[Node], Node], xt) -> DualGradient:
    root = variable(np.asarray(xt, dtype=np.float64))
    out = pipeline(root)
    if not isinstance(out, Node):
        raise UnsupportedPrimitiveError("pipeline must return a tape Node")
    if out.shape != root.shape[:-1]:
        raise ValueError(f"pipeline output shape {out.shape} != batch shape {root.shape[:-1]}")
    grad = backward(out, root)
    value = out.value if out.value.ndim else float(out.value)
    return DualGradient(value, grad)


# -- gradients through the additional backward step -------------------------

def lookahead_pipeline(t: int, eps_set, f, denoiser, sigma: float | None = None, capture=None):
    """x_t -> mean_m f(x0_hat(mu(x_t) + sigma eps_m, t - 1)) with eps frozen.

    When ``capture`` is a dict, the per-sample losses are stored under "losses".
    """
    sig = denoiser.schedule.sigma[t] if sigma is None else sigma

    def pipeline(x):
        mu = reverse_mean(x, t, denoiser)
        xs = expand_samples(mu, eps_set, sig)
        per_sample = loss(tweedie(xs, t - 1, denoiser), f)
        if capture is not None:
            capture["losses"] = per_sample.value
        return mean(per_sample, axis=-1)

    return pipeline


def pathwise_grad_through_step(xt, t: int, eps_set, f, denoiser, sigma: float | None = None,
                               workers: int | None = None) -> DualGradient:
    """Gradient of the M-sample lookahead average w.r.t. x_t, noise held fixed.

    ``eps_set`` has shape (M, n) or (batch..., M, n).  With ``workers=None`` the
    M samples share one tape; otherwise each sample gets its own tape (run on a
    thread pool when ``workers > 1``) and results are summed in sample order, so
    the output does not depend on ``workers``.
    """
    eps_set = np.asarray(eps_set, dtype=np.float64)
    if eps_set.ndim < 2 or eps_set.shape[-2] == 0:
        raise ValueError("eps_set must hold at least one draw, shape (..., M, n)")
    if workers is None:
        cap = {}
        dg = grad_of_pipeline(lookahead_pipeline(t, eps_set, f, denoiser, sigma, cap), xt)
        return DualGradient(dg.value, dg.grad, cap["losses"])
    M = eps_set.shape[-2]
    jobs = [eps_set[..., m : m + 1, :] for m in range(M)]

    def one(e):
        cap = {}
        dg = grad_of_pipeline(lookahead_pipeline(t, e, f, denoiser, sigma, cap), xt)
        return DualGradient(dg.value, dg.grad, cap["losses"])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(e) for e in jobs]
    values = np.stack([np.asarray(p.value) for p in parts])
    grads = np.stack([p.grad for p in parts])
    value = values.sum(axis=0) / M
    samples = np.concatenate([p.samples for p in parts], axis=-1)
    return DualGradient(value if value.ndim else float(value), grads.sum(axis=0) / M, samples)


def score_function_grad_through_step(xt, t: int, eps_set, f, denoiser, sigma: float | None = None) -> DualGradient:
    """Likelihood-ratio alternative: J_mu^T mean_m (f_m - mean f) eps_m / sigma.

    Unbiased for the same gradient as the pathwise estimator when sigma > 0;
    the leave-in mean baseline only reduces variance.
    """
    sig = denoiser.schedule.sigma[t] if sigma is None else sigma
    if sig <= 0:
        raise ValueError("score-function estimator needs sigma > 0")
    eps_set = np.asarray(eps_set, dtype=np.float64)
    M = eps_set.shape[-2]
    x = np.asarray(xt, dtype=np.float64)
    mu = reverse_mean(variable(x), t, denoiser).value
    xs = mu[..., None, :] + sig * eps_set
    vals = f(tweedie(variable(xs), t - 1, denoiser).value)
    base = vals.mean(axis=-1, keepdims=True)
    weight = (vals - base) * (M / max(M - 1, 1)) if M > 1 else vals
    direction = np.einsum("...m,...mi->...i", weight, eps_set) / (M * sig)
    grad = grad_of_pipeline(lambda node: dot_const(reverse_mean(node, t, denoiser), direction), x).grad
    value = vals.mean(axis=-1)
    return DualGradient(value if value.ndim else float(value), grad, vals)
