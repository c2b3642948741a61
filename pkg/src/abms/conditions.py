"""Differentiable condition functions f and the tasks that build them.

Every condition maps points of shape (..., n) to values of shape (...) and
exposes ``grad``.  Quadratic ones also expose ``quadratic_form() -> (Q, b, c)``
with f(x) = x^T Q x + b^T x + c, so their conditional expectations have closed
forms.  Note Q is the form matrix: the Hessian is 2Q and the gradient
Lipschitz constant is ``L = 2 * ||Q||_2``.

Batched parameters (one measurement per chain) broadcast against the leading
axis of x; extra sample axes in x between batch and feature are allowed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import NumericalError


def _align(p, x):
    """Broadcast a (B, m) parameter against x of shape (B, ..., n)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim <= 1:
        return p
    extra = x.ndim - p.ndim
    return p.reshape(p.shape[:-1] + (1,) * extra + p.shape[-1:]) if extra > 0 else p


class Condition:
    """Base class; subclasses implement ``__call__`` and ``grad``."""

    #: gradient-Lipschitz constant valid on all of R^n, or None
    global_L: float | None = None
    #: Lipschitz constant valid on all of R^n, or None
    global_K: float | None = None

    def quadratic_form(self):
        return None

    def hessian(self, x) -> np.ndarray:
        """Hessian by central differences of ``grad`` (subclasses may override)."""
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[-1]
        h = 1e-5
        cols = []
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            cols.append((self.grad(x + e) - self.grad(x - e)) / (2 * h))
        H = np.stack(cols, axis=-1)
        return 0.5 * (H + np.swapaxes(H, -1, -2))

    def lipschitz(self, box):
        """(K, L) over an axis-aligned box given as (lo, hi) arrays."""
        return lipschitz_on_box(self, box)


@dataclass
class QuadraticLoss(Condition):
    """x^T Q x + b^T x + c."""

    Q: np.ndarray
    b: np.ndarray | None = None
    c: float = 0.0

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.Q = 0.5 * (self.Q + self.Q.T)
        self.b = np.zeros(self.Q.shape[0]) if self.b is None else np.asarray(self.b, dtype=np.float64)
        self.global_L = 2.0 * float(np.max(np.abs(np.linalg.eigvalsh(self.Q))))

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.einsum("...i,ij,...j->...", x, self.Q, x) + x @ self.b + self.c

    def grad(self, x):
        return 2.0 * np.asarray(x, dtype=np.float64) @ self.Q + self.b

    def hessian(self, x):
        return np.broadcast_to(2.0 * self.Q, np.shape(x) + (self.Q.shape[0],))

    def quadratic_form(self):
        return self.Q, self.b, self.c


def squared_distance(center, weight: float = 1.0) -> QuadraticLoss:
    """weight * ||x - center||^2."""
    center = np.asarray(center, dtype=np.float64)
    n = center.size
    return QuadraticLoss(weight * np.eye(n), -2.0 * weight * center, weight * float(center @ center))


@dataclass
class LinearLoss(Condition):
    w: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.global_L = 0.0
        self.global_K = float(np.linalg.norm(self.w))

    def __call__(self, x):
        return np.asarray(x, dtype=np.float64) @ self.w + self.b

    def grad(self, x):
        return np.broadcast_to(self.w, np.shape(x)).copy()

    def hessian(self, x):
        n = self.w.size
        return np.zeros(np.shape(x) + (n,))

    def quadratic_form(self):
        n = self.w.size
        return np.zeros((n, n)), self.w, self.b


# -- linear inverse problems -----------------------------------------------

def select_matrix(n: int, idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=int)
    A = np.zeros((idx.size, n))
    A[np.arange(idx.size), idx] = 1.0
    return A


def block_average_matrix(n: int, block: int) -> np.ndarray:
    if n % block:
        raise ValueError(f"block size {block} does not divide n={n}")
    A = np.zeros((n // block, n))
    for i in range(n // block):
        A[i, i * block : (i + 1) * block] = 1.0 / block
    return A


def circulant_matrix(n: int, kernel) -> np.ndarray:
    """Circular convolution with a centred odd-length kernel."""
    kernel = np.asarray(kernel, dtype=np.float64)
    half = kernel.size // 2
    A = np.zeros((n, n))
    for i in range(n):
        for j, k in enumerate(kernel):
            A[i, (i + j - half) % n] += k
    return A


def operator_from_spec(spec: dict, n: int) -> np.ndarray:
    kind = spec.get("kind", "dense")
    if kind == "select":
        return select_matrix(n, spec["idx"])
    if kind == "block_avg":
        return block_average_matrix(n, int(spec["block"]))
    if kind == "circulant":
        return circulant_matrix(n, spec["kernel"])
    if kind == "dense":
        A = np.asarray(spec["A"], dtype=np.float64)
        if A.ndim != 2 or A.shape[1] != n:
            raise ValueError(f"dense operator must have shape (m, {n})")
        return A
    raise ValueError(f"unknown operator kind {kind!r}")


@dataclass
class LinearInverseTask(Condition):
    """||A x - y||^2.  ``y`` is (m,) or (B, m) for one measurement per chain."""

    A: np.ndarray
    y: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64)
        if not np.all(np.isfinite(self.A)):
            raise ValueError("A must be finite")
        if self.y.shape[-1] != self.A.shape[0]:
            raise TypeError(f"y has {self.y.shape[-1]} entries, A has {self.A.shape[0]} rows")
        self.global_L = 2.0 * float(np.linalg.norm(self.A, 2) ** 2)

    @classmethod
    def generate(cls, A, x0, rng=None, noise_std: float = 0.0):
        """Measurements y = A x0 (+ Gaussian noise when ``noise_std > 0``)."""
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        y = np.asarray(x0) @ A.T
        if noise_std > 0:
            y = y + noise_std * rng.standard_normal(y.shape)
        return cls(A, y, noise_std)

    def _resid(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.A.shape[1]:
            raise TypeError(f"x has dimension {x.shape[-1]}, A expects {self.A.shape[1]}")
        return x @ self.A.T - _align(self.y, x)

    def __call__(self, x):
        r = self._resid(x)
        return np.sum(r * r, axis=-1)

    def grad(self, x):
        return 2.0 * self._resid(x) @ self.A

    def hessian(self, x):
        H = 2.0 * self.A.T @ self.A
        return np.broadcast_to(H, np.shape(x) + (H.shape[0],))

    def quadratic_form(self):
        y = self.y
        return self.A.T @ self.A, -2.0 * y @ self.A, np.sum(y * y, axis=-1)

    def lipschitz(self, box):
        return _quadratic_lipschitz(self, box)


def inverse_loss(task: LinearInverseTask, x0_hat):
    return task(x0_hat)


# -- property targets --------------------------------------------------------

@dataclass
class QuadraticProperty:
    """c(x) = x^T Q x + b^T x."""

    Q: np.ndarray
    b: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.Q = 0.5 * (self.Q + self.Q.T)
        self.b = np.zeros(self.Q.shape[0]) if self.b is None else np.asarray(self.b, dtype=np.float64)

    def value(self, x):
        return np.einsum("...i,ij,...j->...", x, self.Q, x) + x @ self.b

    def grad(self, x):
        return 2.0 * x @ self.Q + self.b

    def hessian(self, x):
        return np.broadcast_to(2.0 * self.Q, np.shape(x) + (self.Q.shape[0],))


@dataclass
class RadialProperty:
    """c(x) = log(1 + ||x - center||^2 / scale^2), smooth with analytic derivatives."""

    center: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def value(self, x):
        d = x - self.center
        return np.log1p(np.sum(d * d, axis=-1) / self.scale**2)

    def grad(self, x):
        d = x - self.center
        q = 1.0 + np.sum(d * d, axis=-1) / self.scale**2
        return 2.0 * d / (self.scale**2 * q[..., None])

    def hessian(self, x):
        d = x - self.center
        s2 = self.scale**2
        q = 1.0 + np.sum(d * d, axis=-1) / s2
        n = d.shape[-1]
        eye = np.eye(n)
        return 2.0 * eye / (s2 * q[..., None, None]) - 4.0 * d[..., :, None] * d[..., None, :] / (s2**2 * q[..., None, None] ** 2)


@dataclass
class PropertyTarget(Condition):
    """s * (c(x) - c_star)^2 for a registered property map c."""

    prop: QuadraticProperty | RadialProperty
    c_star: float
    s: float = 1.0

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.s * (self.prop.value(x) - self.c_star) ** 2

    def grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        r = self.prop.value(x) - self.c_star
        return 2.0 * self.s * r[..., None] * self.prop.grad(x)

    def hessian(self, x):
        x = np.asarray(x, dtype=np.float64)
        r = self.prop.value(x) - self.c_star
        gc = self.prop.grad(x)
        return 2.0 * self.s * (gc[..., :, None] * gc[..., None, :] + r[..., None, None] * self.prop.hessian(x))


def property_loss(task: PropertyTarget, x0_hat):
    return task(x0_hat)


# -- smooth nonlinear losses with global constants ---------------------------

@dataclass
class PseudoHuber(Condition):
    """delta^2 (sqrt(1 + ||x - c||^2 / delta^2) - 1); K = delta, L = 1 on R^n."""

    center: np.ndarray
    delta: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.global_L = 1.0
        self.global_K = float(self.delta)

    def __call__(self, x):
        d = np.asarray(x, dtype=np.float64) - self.center
        return self.delta**2 * (np.sqrt(1.0 + np.sum(d * d, axis=-1) / self.delta**2) - 1.0)

    def grad(self, x):
        d = np.asarray(x, dtype=np.float64) - self.center
        q = np.sqrt(1.0 + np.sum(d * d, axis=-1) / self.delta**2)
        return d / q[..., None]

    def hessian(self, x):
        d = np.asarray(x, dtype=np.float64) - self.center
        q = np.sqrt(1.0 + np.sum(d * d, axis=-1) / self.delta**2)[..., None, None]
        eye = np.eye(d.shape[-1])
        return eye / q - d[..., :, None] * d[..., None, :] / (self.delta**2 * q**3)


@dataclass
class GaussianWell(Condition):
    """-depth * exp(-||x - c||^2 / (2 width^2)); L = depth / width^2 on R^n."""

    center: np.ndarray
    width: float = 1.0
    depth: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.global_L = self.depth / self.width**2
        self.global_K = self.depth * math.exp(-0.5) / self.width

    def __call__(self, x):
        d = np.asarray(x, dtype=np.float64) - self.center
        return -self.depth * np.exp(-np.sum(d * d, axis=-1) / (2 * self.width**2))

    def grad(self, x):
        d = np.asarray(x, dtype=np.float64) - self.center
        e = np.exp(-np.sum(d * d, axis=-1) / (2 * self.width**2))
        return self.depth * e[..., None] * d / self.width**2

    def hessian(self, x):
        d = np.asarray(x, dtype=np.float64) - self.center
        w2 = self.width**2
        e = np.exp(-np.sum(d * d, axis=-1) / (2 * w2))[..., None, None]
        eye = np.eye(d.shape[-1])
        return self.depth * e * (eye / w2 - d[..., :, None] * d[..., None, :] / w2**2)


# -- coordinate restriction and dual-attribute tasks -------------------------

@dataclass
class Restricted(Condition):
    """A condition on the coordinates ``idx`` of an n-dimensional point."""

    inner: Condition
    idx: np.ndarray
    n: int

    def __post_init__(self):
        self.idx = np.asarray(self.idx, dtype=int)
        if np.unique(self.idx).size != self.idx.size or self.idx.min() < 0 or self.idx.max() >= self.n:
            raise ValueError("idx must be distinct coordinates in [0, n)")
        self.global_L = self.inner.global_L
        self.global_K = self.inner.global_K

    def __call__(self, x):
        return self.inner(np.asarray(x, dtype=np.float64)[..., self.idx])

    def grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        g = np.zeros_like(x)
        g[..., self.idx] = self.inner.grad(x[..., self.idx])
        return g

    def hessian(self, x):
        x = np.asarray(x, dtype=np.float64)
        H = np.zeros(x.shape + (self.n,))
        sub = self.inner.hessian(x[..., self.idx])
        H[..., self.idx[:, None], self.idx[None, :]] = sub
        return H

    def quadratic_form(self):
        form = self.inner.quadratic_form()
        if form is None:
            return None
        Qi, bi, c = form
        Q = np.zeros((self.n, self.n))
        Q[np.ix_(self.idx, self.idx)] = Qi
        b = np.zeros(np.shape(bi)[:-1] + (self.n,))
        b[..., self.idx] = bi
        return Q, b, c


@dataclass
class DualAttributeTask:
    """Content loss on coordinates ``content_idx``, style loss on the rest."""

    content: Restricted
    style: Restricted

    def __post_init__(self):
        if self.content.n != self.style.n:
            raise ValueError("content and style losses disagree on dimension")
        if np.intersect1d(self.content.idx, self.style.idx).size:
            raise ValueError("content and style supports overlap")

    @property
    def n(self) -> int:
        return self.content.n

    @classmethod
    def build(cls, n: int, content_idx, f_content: Condition, f_style: Condition):
        content_idx = np.asarray(content_idx, dtype=int)
        style_idx = np.setdiff1d(np.arange(n), content_idx)
        return cls(Restricted(f_content, content_idx, n), Restricted(f_style, style_idx, n))


def dual_losses(task: DualAttributeTask, x0_hat):
    return task.content(x0_hat), task.style(x0_hat)


# -- Lipschitz constants on a box ----------------------------------------------

def _box(box):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    return lo, hi


def _quadratic_lipschitz(f: Condition, box):
    """Gradient is affine, so ||grad||^2 is convex: its box maximum is at a vertex."""
    lo, hi = _box(box)
    n = lo.size
    if n > 20:
        raise ValueError("vertex enumeration limited to n <= 20")
    verts = np.array(list(itertools.product(*zip(lo, hi))))
    K = float(np.max(np.linalg.norm(f.grad(verts), axis=-1)))
    return K, f.global_L


def _max_over_box(fun, lo, hi, starts):
    best = -np.inf
    bounds = list(zip(lo, hi))
    for x0 in starts:
        res = minimize(lambda z: -fun(z), x0, method="L-BFGS-B", bounds=bounds)
        best = max(best, -float(res.fun), fun(x0))
    return best


def lipschitz_on_box(f: Condition, box, n_starts: int = 16, seed: int = 0):
    """(K, L) = max ||grad f|| and max ||Hessian f||_2 over the box.

    Quadratic losses use the exact vertex argument; anything else uses
    multi-start bounded quasi-Newton from the vertices, centre and random points.
    """
    form = f.quadratic_form()
    if form is not None and np.ndim(form[1]) == 1:
        return _quadratic_lipschitz(f, box)
    lo, hi = _box(box)
    n = lo.size
    rng = np.random.default_rng(seed)
    starts = [0.5 * (lo + hi)] + [lo + (hi - lo) * rng.random(n) for _ in range(n_starts)]
    if n <= 6:
        starts += [np.array(v) for v in itertools.product(*zip(lo, hi))]
    K = _max_over_box(lambda z: float(np.linalg.norm(f.grad(z))), lo, hi, starts)
    L = _max_over_box(lambda z: float(np.max(np.abs(np.linalg.eigvalsh(f.hessian(z))))), lo, hi, starts)
    if not (np.isfinite(K) and np.isfinite(L)):
        raise NumericalError("Lipschitz search diverged", K=K, L=L)
    return K, L
