"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Exactly the primitives the forecaster needs: elementwise arithmetic with
numpy-style broadcasting, 2-D matmul, concat/reshape/row-slice, reductions,
the activations, valid-padding conv2d, dropout, and layer normalization.
Gradients accumulate into ``.grad`` on ``backward()``; the caller zeroes
them between optimizer steps.
"""

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch

SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


def _unbroadcast(grad, shape):
    # Reduce a broadcasted gradient back down to the parent's shape.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


class Tensor:
    """A node in the differentiation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self):
        """Populate ``grad`` on every requires_grad leaf reachable from a scalar."""
        if self.data.size != 1:
            raise NonScalarLoss(f"backward requires a scalar loss, got shape {self.data.shape}")
        # Iterative topological order; recursion would overflow on long
        # GRU chains.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        try:
            data = self.data + other.data
        except ValueError:
            raise ShapeMismatch("add", self.shape, other.shape) from None

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._result(data, (self, other), backward)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        try:
            data = self.data - other.data
        except ValueError:
            raise ShapeMismatch("sub", self.shape, other.shape) from None

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))

        return Tensor._result(data, (self, other), backward)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        try:
            data = self.data * other.data
        except ValueError:
            raise ShapeMismatch("mul", self.shape, other.shape) from None

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._result(data, (self, other), backward)

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._result(-self.data, (self,), backward)

    __radd__ = __add__
    __rmul__ = __mul__

    def __rsub__(self, other):
        return Tensor(other) - self

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.data.shape[1] != other.data.shape[0]:
            raise ShapeMismatch("matmul", self.shape, other.shape)
        data = self.data @ other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return Tensor._result(data, (self, other), backward)

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        try:
            data = self.data.reshape(shape)
        except ValueError:
            raise ShapeMismatch("reshape", old, shape) from None

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old))

        return Tensor._result(data, (self,), backward)

    def slice_rows(self, start, stop):
        """Rows [start, stop) along axis 0."""
        n = self.data.shape[0]
        if not (0 <= start <= stop <= n):
            raise ShapeMismatch("slice_rows", self.shape, (start, stop))
        data = self.data[start:stop]

        def backward(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                full[start:stop] = g
                self._accumulate(full)

        return Tensor._result(data, (self,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None):
        data = self.data.sum(axis=axis)

        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            else:
                self._accumulate(np.broadcast_to(np.expand_dims(g, axis), self.data.shape).copy())

        return Tensor._result(data, (self,), backward)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        data = self.data.mean(axis=axis)

        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g / n, self.data.shape).copy())
            else:
                self._accumulate(
                    np.broadcast_to(np.expand_dims(g / n, axis), self.data.shape).copy()
                )

        return Tensor._result(data, (self,), backward)

    # -- activations and pointwise functions ----------------------------------

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._result(out_data, (self,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._result(out_data, (self,), backward)

    def relu(self):
        mask = self.data > 0

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        return Tensor._result(np.where(mask, self.data, 0.0), (self,), backward)

    def selu(self):
        pos = self.data > 0
        exp_x = np.exp(np.minimum(self.data, 0.0))
        data = SELU_LAMBDA * np.where(pos, self.data, SELU_ALPHA * (exp_x - 1.0))

        def backward(g):
            if self.requires_grad:
                local = np.where(pos, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * exp_x)
                self._accumulate(g * local)

        return Tensor._result(data, (self,), backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * out_data)

        return Tensor._result(out_data, (self,), backward)

    def log1p(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(g / (1.0 + self.data))

        return Tensor._result(np.log1p(self.data), (self,), backward)


def concat(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat", ())
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *[t.shape for t in tensors]) from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._result(data, tuple(tensors), backward)


def conv2d(x, w, b=None):
    """Valid-padding stride-1 2-D convolution.

    x: (C_in, H, W); w: (C_out, C_in, k_h, k_w); optional bias (C_out,).
    Output: (C_out, H - k_h + 1, W - k_w + 1).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = w if isinstance(w, Tensor) else Tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4 or x.data.shape[0] != w.data.shape[1]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    c_out, c_in, kh, kw = w.data.shape
    _, h, width = x.data.shape
    if kh > h or kw > width:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    data = np.einsum("oikl,ihwkl->ohw", w.data, windows)
    if b is not None:
        b = b if isinstance(b, Tensor) else Tensor(b)
        if b.data.shape != (c_out,):
            raise ShapeMismatch("conv2d", b.shape, (c_out,))
        data = data + b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.einsum("ohw,ihwkl->oikl", g, windows))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            h_out, w_out = g.shape[1], g.shape[2]
            for k in range(kh):
                for l in range(kw):
                    gx[:, k:k + h_out, l:l + w_out] += np.einsum("ohw,oi->ihw", g, w.data[:, :, k, l])
            x._accumulate(gx)

    return Tensor._result(data, parents, backward)


def dropout(x, p, train_mode, rng=None):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train_mode or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires an rng")
    x = x if isinstance(x, Tensor) else Tensor(x)
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return Tensor._result(x.data * mask, (x,), backward)


def layer_norm(x, axis=-1, eps=1e-5):
    """Normalize to zero mean, unit variance along one axis (no affine)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        if x.requires_grad:
            g_mean = g.mean(axis=axis, keepdims=True)
            gx_mean = (g * xhat).mean(axis=axis, keepdims=True)
            x._accumulate(inv * (g - g_mean - xhat * gx_mean))

    return Tensor._result(xhat, (x,), backward)


def grad_check(f, leaves, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic closure over ``leaves`` returning a scalar
    Tensor. Relative error per element is |a - n| / max(1e-8, |a| + |n|).
    """
    for leaf in leaves:
        leaf.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]
    worst = 0.0
    for leaf, a in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            ai = a.reshape(-1)[i]
            rel = abs(ai - numeric) / max(1e-8, abs(ai) + abs(numeric))
            worst = max(worst, rel)
    for leaf in leaves:
        leaf.zero_grad()
    return worst
