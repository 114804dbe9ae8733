"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional backward closure. Graphs are
built eagerly by the op functions below and walked once, in reverse
topological order, by ``Tensor.backward()``. Everything runs in float64 so
gradients can be checked against central finite differences at tight
tolerances.

Only the ops the model needs are implemented. The state-space scan is a
single fused op with a hand-derived backward pass; building one graph node
per scan step would dominate the runtime.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class no_grad:
    """Context manager that disables graph construction (forward only)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are wrapped as constants
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parents, backward) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 2:  # (k,) @ (k,n) -> (n,)
            return g @ bd.T, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:  # (m,k) @ (k,) -> (m,)
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 1:  # dot -> scalar
            return g * bd, g * ad
        return g @ bd.T, ad.T @ g  # (m,k) @ (k,n)

    return _node(out, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(parts), backward)


def stack(parts) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=0)

    def backward(g):
        return tuple(g[i] for i in range(len(parts)))

    return _node(out, tuple(parts), backward)


def take0(a, index: int) -> Tensor:
    """Select a single slice along axis 0."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _node(a.data[index], (a,), backward)


def gather_rows(a, idx) -> Tensor:
    """Row gather; backward scatter-adds (handles repeated indices)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _node(out, (a,), backward)


def amax0(a) -> Tensor:
    """Column-wise max over axis 0; ties route gradient to the first row."""
    a = as_tensor(a)
    arg = np.argmax(a.data, axis=0)
    out = a.data[arg, np.arange(a.data.shape[1])]

    def backward(g):
        full = np.zeros_like(a.data)
        full[arg, np.arange(a.data.shape[1])] = g
        return (full,)

    return _node(out, (a,), backward)


def texp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def tlog(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                   np.exp(a.data) / (1.0 + np.exp(a.data)))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                   np.exp(a.data) / (1.0 + np.exp(a.data)))
    return _node(out, (a,), lambda g: (g * sig,))


def gelu(a) -> Tensor:
    """Exact Gaussian-error-function GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi_cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (phi_cdf + x * pdf),)

    return _node(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), backward)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)

    def backward(g):
        g = np.expand_dims(np.asarray(g), axis)
        return (g * (e / s),)

    return _node(out, (a,), backward)


def expm1_over_x(a) -> Tensor:
    """(e^z - 1) / z, elementwise, with a Taylor branch below |z| = 1e-6.

    The small-|z| series 1 + z/2 + z^2/6 avoids catastrophic cancellation
    in expm1(z)/z; the derivative branch switches at the same threshold.
    """
    a = as_tensor(a)
    z = a.data
    small = np.abs(z) < 1e-6
    zsafe = np.where(small, 1.0, z)
    out = np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(zsafe) / zsafe)

    def backward(g):
        # the closed-form derivative loses ~|z|^-2 digits to cancellation,
        # so its series window is much wider than the value's
        dsmall = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
        dbig = (np.exp(zsafe) * (zsafe - 1.0) + 1.0) / (zsafe * zsafe)
        return (g * np.where(np.abs(z) < 1e-3, dsmall, dbig),)

    return _node(out, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Row-wise standardization (no learned scale/shift)."""
    a = as_tensor(a)
    mu = tmean(a, axis=1, keepdims=True)
    xc = sub(a, mu)
    var = tmean(mul(xc, xc), axis=1, keepdims=True)
    return div(xc, tsqrt(add(var, eps)))


def _scan_forward_np(adv, bdv, cov, dsv, uv):
    """Reference scan kernel (vectorized numpy); see ssm_scan."""
    R, M, d = uv.shape
    n = adv.shape[1]
    hist = np.empty((M, R, d, n))
    out = np.empty((R, M, d))
    h = np.zeros((R, d, n))
    for k in range(M):
        uk = uv[:, k, :]
        h = adv * h + bdv * uk[:, :, None]
        hist[k] = h
        out[:, k, :] = (cov * h).sum(axis=2) + dsv * uk
    return hist, out


def _scan_backward_np(adv, bdv, cov, dsv, uv, hist, g):
    R, M, d = uv.shape
    n = adv.shape[1]
    dAd = np.zeros_like(adv)
    dBd = np.zeros_like(bdv)
    dCout = np.zeros_like(cov)
    dDskip = np.zeros_like(dsv)
    dU = np.zeros_like(uv)
    dh = np.zeros((R, d, n))
    for k in range(M - 1, -1, -1):
        gk = g[:, k, :]
        uk = uv[:, k, :]
        dCout += (gk[:, :, None] * hist[k]).sum(axis=0)
        dDskip += (gk * uk).sum(axis=0)
        dh += gk[:, :, None] * cov
        hprev = hist[k - 1] if k > 0 else 0.0
        dAd += (dh * hprev).sum(axis=0)
        dBd += (dh * uk[:, :, None]).sum(axis=0)
        dU[:, k, :] = (dh * bdv).sum(axis=2) + dsv * gk
        dh = dh * adv
    return dAd, dBd, dCout, dDskip, dU


def _scan_forward_loops(adv, bdv, cov, dsv, uv):
    """Elementwise-loop form of _scan_forward_np, written for numba.

    Forward accumulation orders match the numpy kernel exactly, so forward
    outputs are bit-identical across the two paths; backward gradients agree
    to float64 roundoff (both asserted in the tests).
    """
    R, M, d = uv.shape
    n = adv.shape[1]
    hist = np.empty((M, R, d, n))
    out = np.empty((R, M, d))
    h = np.zeros((R, d, n))
    for k in range(M):
        for r in range(R):
            for c in range(d):
                u = uv[r, k, c]
                acc = 0.0
                for s in range(n):
                    hv = adv[c, s] * h[r, c, s] + bdv[c, s] * u
                    h[r, c, s] = hv
                    hist[k, r, c, s] = hv
                    acc += cov[c, s] * hv
                out[r, k, c] = acc + dsv[c] * u
    return hist, out


def _scan_backward_loops(adv, bdv, cov, dsv, uv, hist, g):
    R, M, d = uv.shape
    n = adv.shape[1]
    dAd = np.zeros((d, n))
    dBd = np.zeros((d, n))
    dCout = np.zeros((d, n))
    dDskip = np.zeros(d)
    dU = np.zeros((R, M, d))
    dh = np.zeros((R, d, n))
    for k in range(M - 1, -1, -1):
        for r in range(R):
            for c in range(d):
                gk = g[r, k, c]
                u = uv[r, k, c]
                dDskip[c] += gk * u
                acc_du = 0.0
                for s in range(n):
                    dCout[c, s] += gk * hist[k, r, c, s]
                    dhv = dh[r, c, s] + gk * cov[c, s]
                    hprev = hist[k - 1, r, c, s] if k > 0 else 0.0
                    dAd[c, s] += dhv * hprev
                    dBd[c, s] += dhv * u
                    acc_du += dhv * bdv[c, s]
                    dh[r, c, s] = dhv * adv[c, s]
                dU[r, k, c] = acc_du + dsv[c] * gk
    return dAd, dBd, dCout, dDskip, dU


try:
    from numba import njit as _njit

    _scan_forward = _njit(cache=True)(_scan_forward_loops)
    _scan_backward = _njit(cache=True)(_scan_backward_loops)
except ImportError:  # pragma: no cover - numba is optional
    _scan_forward = _scan_forward_np
    _scan_backward = _scan_backward_np


def ssm_scan(Ad, Bd, Cout, Dskip, U) -> Tensor:
    """Batched diagonal state-space recurrence over pre-ordered inputs.

    U has shape (R, M, d): R independent traversals of M steps over d
    channels. Each channel carries an n-dimensional state h updated as
    h <- Ad * h + Bd * u_k, with output y_k = sum_n(Cout * h) + Dskip * u_k.
    Ad, Bd, Cout are (d, n); Dskip is (d,). The backward pass replays the
    recurrence in reverse using the stored state history.
    """
    Ad, Bd = as_tensor(Ad), as_tensor(Bd)
    Cout, Dskip = as_tensor(Cout), as_tensor(Dskip)
    U = as_tensor(U)
    adv, bdv, cov, dsv = Ad.data, Bd.data, Cout.data, Dskip.data
    uv = np.ascontiguousarray(U.data)
    hist, out = _scan_forward(adv, bdv, cov, dsv, uv)

    def backward(g):
        return _scan_backward(adv, bdv, cov, dsv, uv, hist,
                              np.ascontiguousarray(g))

    return _node(out, (Ad, Bd, Cout, Dskip, U), backward)
