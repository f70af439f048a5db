"""A small tape-based reverse-mode autodiff over numpy arrays.

Only the operations needed by the autoencoder, the training losses and the
skinning model are provided. Every op keeps the dtype of its inputs, so the
same graph runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np


class GradientError(FloatingPointError):
    pass


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- plumbing
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def _const(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def _make(self, data, parents, backward):
        rg = any(p.requires_grad for p in parents)
        return Tensor(data, rg, parents if rg else (), backward if rg else None)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        for leaf in order:
            if leaf._backward is None and leaf.grad is not None and not np.all(np.isfinite(leaf.grad)):
                raise GradientError(f"non-finite gradient for {leaf.name or leaf}")

    # -- arithmetic
    def __add__(self, other):
        other = self._const(other)
        a, b = self, other
        return self._make(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._const(other))

    def __rsub__(self, other):
        return self._const(other) + (-self)

    def __mul__(self, other):
        other = self._const(other)
        a, b = self, other
        return self._make(a.data * b.data, (a, b),
                          lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._const(other)
        a, b = self, other
        out = a.data / b.data
        return self._make(out, (a, b), lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ))

    def __rtruediv__(self, other):
        return self._const(other) / self

    def __pow__(self, p):
        a = self
        return self._make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))

    def __matmul__(self, other):
        other = self._const(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul needs operands with at least 2 dimensions")

        def back(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return self._make(a.data @ b.data, (a, b), back)

    def __getitem__(self, idx):
        a = self

        def back(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return self._make(a.data[idx], (a,), back)

    # -- reductions and shape
    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        a = self
        return self._make(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return self._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()

    # -- elementwise
    def abs(self):
        a = self
        return self._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))

    def exp(self):
        a = self
        out = np.exp(a.data)
        return self._make(out, (a,), lambda g: (g * out,))

    def log(self):
        a = self
        return self._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return self._make(out, (a,), lambda g: (g * 0.5 / out,))

    def sin(self):
        a = self
        return self._make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))

    def cos(self):
        a = self
        return self._make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))

    def silu(self):
        a = self
        sig = 1.0 / (1.0 + np.exp(-a.data))
        return self._make(a.data * sig, (a,), lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),))

    def clip(self, lo, hi):
        a = self
        inside = (a.data >= lo) & (a.data <= hi)
        return self._make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))

    def norm(self, axis=-1, keepdims=False):
        """Euclidean norm along ``axis``; the gradient at a zero vector is taken as zero."""
        a = self
        out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            safe = np.where(out > 0, out, 1.0)
            return (np.where(out > 0, g * a.data / safe, 0.0).astype(a.dtype),)

        return self._make(out if keepdims else np.squeeze(out, axis), (a,), back)

    def normalize_rows(self):
        """Unit-normalize along the last axis; an exactly zero row is an error."""
        a = self
        nrm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
        if np.any(nrm == 0):
            row = int(np.argwhere(nrm[..., 0] == 0)[0][0])
            raise FloatingPointError(f"zero row {row} before normalization")
        y = a.data / nrm

        def back(g):
            return ((g - y * (y * g).sum(axis=-1, keepdims=True)) / nrm,)

        return self._make(y, (a,), back)

    def softmax(self, axis=-1):
        a = self
        z = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        return self._make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def tensor(data, requires_grad=False, dtype=None, name=None):
    arr = np.array(data, dtype=dtype) if dtype is not None else np.array(data)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    rg = any(t.requires_grad for t in tensors)
    return Tensor(data, rg, tuple(tensors) if rg else (), back if rg else None)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    rg = any(t.requires_grad for t in tensors)
    return Tensor(data, rg, tuple(tensors) if rg else (), back if rg else None)


def _skew(w):
    z = np.zeros(w.shape[:-1], dtype=w.dtype)
    return np.stack([
        np.stack([z, -w[..., 2], w[..., 1]], -1),
        np.stack([w[..., 2], z, -w[..., 0]], -1),
        np.stack([-w[..., 1], w[..., 0], z], -1),
    ], -2)


def _rodrigues_coeffs(q):
    """sin(r)/r, (1 - cos r)/r^2 and their derivatives with respect to q = r^2."""
    small = q < 1e-6
    qs = np.where(small, 1.0, q)
    ang = np.sqrt(qs)
    sn, cs = np.sin(ang), np.cos(ang)
    sinc = np.where(small, 1 - q / 6 + q * q / 120, sn / ang)
    cosc = np.where(small, 0.5 - q / 24 + q * q / 720, (1 - cs) / qs)
    d_sinc = np.where(small, -1 / 6 + q / 60, (cs / 2 - sn / (2 * ang)) / qs)
    d_cosc = np.where(small, -1 / 24 + q / 360, (sn / (2 * ang) - (1 - cs) / qs) / qs)
    return sinc, cosc, d_sinc, d_cosc


_E = [_skew(np.eye(3)[k]) for k in range(3)]


def rodrigues(omega):
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3)."""
    rot = as_tensor(omega)
    wd = rot.data
    q = (wd * wd).sum(-1)
    sinc, cosc, d_sinc, d_cosc = _rodrigues_coeffs(q)
    K = _skew(wd)
    K2 = K @ K
    eye = np.eye(3, dtype=wd.dtype)
    R = eye + sinc[..., None, None] * K + cosc[..., None, None] * K2

    def back(g):
        out = np.empty_like(wd)
        for k in range(3):
            Ek = _E[k].astype(wd.dtype)
            dq = 2 * wd[..., k]
            dR = ((d_sinc * dq)[..., None, None] * K + sinc[..., None, None] * Ek
                  + (d_cosc * dq)[..., None, None] * K2 + cosc[..., None, None] * (Ek @ K + K @ Ek))
            out[..., k] = (g * dR).sum(axis=(-1, -2))
        return (out,)

    rg = rot.requires_grad
    return Tensor(R.astype(wd.dtype), rg, (rot,) if rg else (), back if rg else None)


def where_const(mask, a, b):
    """Select ``a`` where ``mask`` else ``b`` (mask is not differentiated)."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask)
    data = np.where(m, a.data, b.data)

    def back(g):
        return _unbroadcast(np.where(m, g, 0), a.shape), _unbroadcast(np.where(m, 0, g), b.shape)

    rg = a.requires_grad or b.requires_grad
    return Tensor(data, rg, (a, b) if rg else (), back if rg else None)
