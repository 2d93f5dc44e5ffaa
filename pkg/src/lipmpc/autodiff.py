"""Reverse-mode automatic differentiation over numpy arrays, plus the two
matrix norms the rest of the package leans on.

The tape is a plain DAG of `Tensor` nodes. Each op records a closure that
scatters the output adjoint back to its parents; `backward()` walks the DAG
once in reverse topological order. Tensors are treated as immutable once they
participate in a graph; optimizers mutate leaf `.data` only *between* taped
passes.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "PowerIterationError",
    "matmul",
    "frobenius_norm",
    "spectral_norm",
    "largest_singular_value",
    "gradients",
    "jacobian",
]


class PowerIterationError(RuntimeError):
    """Power iteration failed to converge; carries the last estimate."""

    def __init__(self, message, last_estimate):
        super().__init__(message)
        self.last_estimate = last_estimate


def _unbroadcast(grad, shape):
    # Sum an adjoint down to `shape` after numpy broadcasting in the forward op.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing -----------------------------------------------------

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _node(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into `.grad` of every reachable tensor.

        `seed` defaults to ones (the usual scalar-loss case). Grads of the
        reachable subgraph are reset first, so repeated calls do not leak
        stale adjoints between taped passes.
        """
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen or not node.requires_grad:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            topo.append(node)

        visit(self)
        for node in topo:
            node.grad = np.zeros_like(node.data)
        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=float).reshape(self.data.shape).copy()
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- primitive ops ------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g, b.data.shape)

        return Tensor._node(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def back(g):
            if a.requires_grad:
                a.grad += -g

        return Tensor._node(-a.data, (a,), back)

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g * b.data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g * a.data, b.data.shape)

        return Tensor._node(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / float(scalar))

    def __pow__(self, k):
        k = float(k)
        a = self

        def back(g):
            if a.requires_grad:
                a.grad += g * k * a.data ** (k - 1.0)

        return Tensor._node(a.data**k, (a,), back)

    def __matmul__(self, other):
        other = Tensor._lift(other)
        a, b = self, other
        out = np.matmul(a.data, b.data)

        def back(g):
            ad, bd = a.data, b.data
            if ad.ndim == 1 and bd.ndim == 1:
                if a.requires_grad:
                    a.grad += g * bd
                if b.requires_grad:
                    b.grad += g * ad
            elif ad.ndim == 1:
                if a.requires_grad:
                    a.grad += bd @ g
                if b.requires_grad:
                    b.grad += np.outer(ad, g)
            elif bd.ndim == 1:
                if a.requires_grad:
                    a.grad += np.outer(g, bd)
                if b.requires_grad:
                    b.grad += ad.T @ g
            else:
                if a.requires_grad:
                    a.grad += g @ bd.T
                if b.requires_grad:
                    b.grad += ad.T @ g

        return Tensor._node(out, (a, b), back)

    @property
    def T(self):
        a = self

        def back(g):
            if a.requires_grad:
                a.grad += g.T

        return Tensor._node(a.data.T, (a,), back)

    def exp(self):
        a = self
        out = np.exp(a.data)

        def back(g):
            if a.requires_grad:
                a.grad += g * out

        return Tensor._node(out, (a,), back)

    def relu(self):
        a = self
        mask = a.data > 0  # subgradient 0 at the kink

        def back(g):
            if a.requires_grad:
                a.grad += g * mask

        return Tensor._node(np.where(mask, a.data, 0.0), (a,), back)

    def sum(self):
        a = self

        def back(g):
            if a.requires_grad:
                a.grad += g * np.ones_like(a.data)

        return Tensor._node(np.asarray(a.data.sum()), (a,), back)

    def mean(self):
        return self.sum() / self.data.size

    def concat(self, other):
        """Concatenate two 1-D tensors."""
        other = Tensor._lift(other)
        a, b = self, other
        na = a.data.shape[-1]

        def back(g):
            if a.requires_grad:
                a.grad += g[..., :na]
            if b.requires_grad:
                b.grad += g[..., na:]

        return Tensor._node(np.concatenate([a.data, b.data], axis=-1), (a, b), back)

    def group_sort(self):
        """Sort disjoint adjacent pairs descending (largest first).

        Odd trailing entry passes through. Ties route the gradient to the
        first element of the pair for both the max and the min slot; that is
        a consistent subgradient choice at the (measure-zero) tie set.
        """
        a = self
        data = a.data
        m = data.shape[-1]
        k = m // 2
        lead = data[..., : 2 * k]
        x = lead[..., 0::2]
        y = lead[..., 1::2]
        hi_from_x = x >= y
        lo_from_x = x <= y
        out = data.copy()
        out[..., 0 : 2 * k : 2] = np.where(hi_from_x, x, y)
        out[..., 1 : 2 * k : 2] = np.where(lo_from_x, x, y)

        def back(g):
            if not a.requires_grad:
                return
            ghi = g[..., 0 : 2 * k : 2]
            glo = g[..., 1 : 2 * k : 2]
            ga = np.zeros_like(a.data)
            ga[..., 0 : 2 * k : 2] = np.where(hi_from_x, ghi, 0.0) + np.where(lo_from_x, glo, 0.0)
            ga[..., 1 : 2 * k : 2] = np.where(~hi_from_x, ghi, 0.0) + np.where(~lo_from_x, glo, 0.0)
            if m % 2:
                ga[..., -1] = g[..., -1]
            a.grad += ga

        return Tensor._node(out, (a,), back)


def matmul(a, b):
    """Matrix product with an explicit inner-dimension check.

    Accepts Tensors (gradient flows to both operands) or plain arrays.
    """
    a_shape = a.data.shape if isinstance(a, Tensor) else np.shape(a)
    b_shape = b.data.shape if isinstance(b, Tensor) else np.shape(b)
    if len(a_shape) == 0 or len(b_shape) == 0:
        raise ValueError("matmul requires at least 1-D operands")
    if a_shape[-1] != b_shape[-2 if len(b_shape) > 1 else -1]:
        raise ValueError(f"inner dimensions differ: {a_shape} @ {b_shape}")
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return Tensor._lift(a) @ Tensor._lift(b)
    return np.matmul(a, b)


def frobenius_norm(w):
    """Entrywise l2 norm. Upper-bounds the spectral norm (and is at most
    min(rows, cols) times it)."""
    return float(np.sqrt(np.sum(np.square(np.asarray(w, dtype=float)))))


def spectral_norm(w, tol=1e-9, max_iter=500, u0=None):
    """Largest singular value via power iteration on the Gram matrix.

    Deterministic start: the normalized all-ones vector (or `u0` to warm-start
    across repeated projections of a slowly-moving matrix). Stops when the
    eigen-residual of the Gram matrix certifies the singular value to `tol`.
    Raises PowerIterationError (carrying the last estimate) on non-convergence
    and ValueError on an all-zero matrix.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w.reshape(1, -1)
    if not np.any(w):
        raise ValueError("spectral_norm of an all-zero matrix is undefined here")
    # iterate on the smaller Gram matrix
    gram = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
    n = gram.shape[0]
    if u0 is not None and np.linalg.norm(u0) > 0:
        u = np.asarray(u0, dtype=float) / np.linalg.norm(u0)
    else:
        u = np.full(n, 1.0 / np.sqrt(n))
    sigma = 0.0
    for _ in range(int(max_iter)):
        v = gram @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            # start vector sits in the nullspace; nudge it deterministically
            u = np.zeros(n)
            u[0] = 1.0
            continue
        u = v / nv
        lam = float(u @ (gram @ u))
        resid = float(np.linalg.norm(gram @ u - lam * u))
        sigma = np.sqrt(max(lam, 0.0))
        # |sigma - sigma*| ~= resid / (2 sigma) for the dominant eigenpair
        if resid <= tol * max(2.0 * sigma, tol):
            return sigma
    raise PowerIterationError(
        f"power iteration did not converge in {max_iter} iterations", sigma
    )


def _last_iterate(w, tol=1e-9, max_iter=500, u0=None):
    """spectral_norm that returns the last estimate instead of raising."""
    try:
        return spectral_norm(w, tol=tol, max_iter=max_iter, u0=u0)
    except PowerIterationError as err:
        return err.last_estimate


def largest_singular_value(w, tol=1e-12, max_iter=10_000, u0=None):
    """Largest singular value, robust to clustered spectra.

    Power iteration is fast on the well-separated matrices that dominate this
    codebase, but its convergence rate collapses when the two largest singular
    values nearly tie (which normalized weight matrices drift into during
    training). A stalled iteration's estimate can sit well BELOW the true
    value, and dividing by it would push a nominally norm-one factor outside
    the unit ball — so on non-convergence this computes the exact value with a
    full decomposition instead of returning the low estimate.
    """
    try:
        return spectral_norm(w, tol=tol, max_iter=max_iter, u0=u0)
    except PowerIterationError:
        w = np.atleast_2d(np.asarray(w, dtype=float))
        return float(np.linalg.svd(w, compute_uv=False)[0])


def gradients(output, params, seed=None):
    """Backprop from `output` and return [d output / d p for p in params].

    Raises ValueError if the forward value is non-finite (a NaN upstream
    poisons every adjoint silently otherwise).
    """
    if not np.all(np.isfinite(output.data)):
        raise ValueError("non-finite value in forward pass")
    output.backward(seed=seed)
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


def jacobian(fn, x):
    """Dense Jacobian of a vector function built from taped primitives.

    `fn` maps a 1-D Tensor to a 1-D Tensor; one backward pass per output row.
    """
    x_arr = np.asarray(x, dtype=float)
    rows = []
    for k in range(_output_dim(fn, x_arr)):
        xt = Tensor(x_arr, requires_grad=True)
        out = fn(xt)
        seed = np.zeros(out.data.shape)
        seed[k] = 1.0
        out.backward(seed=seed)
        rows.append(xt.grad.copy())
    return np.array(rows)


def _output_dim(fn, x_arr):
    probe = fn(Tensor(x_arr))
    if probe.data.ndim != 1:
        raise ValueError("jacobian expects a 1-D output")
    return probe.data.shape[0]
