"""Minimal reverse-mode autodiff on numpy arrays.

A Tensor records the op that produced it plus closures that push gradients
to its parents. backward() walks the graph in reverse topological order and
accumulates gradients into every node it visits, so intermediate activations
(needed for Grad-CAM) get gradients for free.
"""

from __future__ import annotations

import numpy as np

BCE_EPS = 1e-7


class AutodiffError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic --

    def __add__(self, other):
        other = _wrap(other)
        out = Tensor(self.data + other.data, parents=(self, other))

        def bw(g):
            return _unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape)

        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        out._backward = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        out = Tensor(self.data * other.data, parents=(self, other))

        def bw(g):
            return (_unbroadcast(g * other.data, self.data.shape),
                    _unbroadcast(g * self.data, other.data.shape))

        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out = Tensor(self.data / other.data, parents=(self, other))

        def bw(g):
            return (_unbroadcast(g / other.data, self.data.shape),
                    _unbroadcast(-g * self.data / other.data ** 2, other.data.shape))

        out._backward = bw
        return out

    def __pow__(self, p: float):
        out = Tensor(self.data ** p, parents=(self,))
        out._backward = lambda g: (g * p * self.data ** (p - 1),)
        return out

    def __matmul__(self, other):
        other = _wrap(other)
        out = Tensor(self.data @ other.data, parents=(self, other))
        a, b = self.data, other.data

        def bw(g):
            if a.ndim == 1 and b.ndim == 1:
                return g * b, g * a
            if a.ndim == 1:
                return g @ b.T, np.outer(a, g)
            if b.ndim == 1:
                return np.outer(g, b), a.T @ g
            return g @ b.swapaxes(-1, -2), a.swapaxes(-1, -2) @ g

        out._backward = bw
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], parents=(self,))

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return (full,)

        out._backward = bw
        return out

    # -- reductions / reshapes --

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))

        def bw(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.data.shape).copy(),)

        out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), parents=(self,))
        out._backward = lambda g: (g.reshape(self.data.shape),)
        return out

    # -- elementwise nonlinearities --

    def relu(self):
        mask = self.data > 0
        out = Tensor(self.data * mask, parents=(self,))
        out._backward = lambda g: (g * mask,)
        return out

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(y, parents=(self,))
        out._backward = lambda g: (g * y * (1.0 - y),)
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, parents=(self,))
        out._backward = lambda g: (g * (1.0 - y ** 2),)
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, parents=(self,))
        out._backward = lambda g: (g * y,)
        return out

    def log(self):
        out = Tensor(np.log(self.data), parents=(self,))
        out._backward = lambda g: (g / self.data,)
        return out


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    out._backward = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def _pool_geometry(extent, window, stride, pad=0):
    span = extent + 2 * pad - window
    if span < 0:
        raise AutodiffError(f"window {window} exceeds padded extent {extent + 2 * pad}")
    if span % stride != 0:
        raise AutodiffError(
            f"non-integral output extent for extent={extent} window={window} stride={stride} pad={pad}")
    return span // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x [*,C,H,W] with kernels [K,C,kh,kw]."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise AutodiffError("conv2d expects [N,C,H,W] input and [K,C,kh,kw] kernels")
    N, C, H, W = xd.shape
    K, Ck, kh, kw = kernels.data.shape
    if Ck != C:
        raise AutodiffError(f"channel mismatch: input {C} vs kernel {Ck}")
    Hp = _pool_geometry(H, kh, stride, pad)
    Wp = _pool_geometry(W, kw, stride, pad)

    xpad = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]              # [N,C,Hp,Wp,kh,kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(N, C * kh * kw, Hp * Wp)
    kmat = kernels.data.reshape(K, C * kh * kw)
    y = (kmat @ cols).reshape(N, K, Hp, Wp)

    out = Tensor(y[0] if squeeze else y, parents=(x, kernels))

    def bw(g):
        gb = g[None] if squeeze else g
        gmat = gb.reshape(N, K, Hp * Wp)
        dk = np.einsum("nkl,ncl->kc", gmat, cols).reshape(K, C, kh, kw)
        dcols = np.einsum("kc,nkl->ncl", kmat, gmat).reshape(N, C, kh, kw, Hp, Wp)
        dxpad = np.zeros_like(xpad)
        for i in range(kh):
            for j in range(kw):
                dxpad[:, :, i:i + stride * Hp:stride, j:j + stride * Wp:stride] += dcols[:, :, i, j]
        dx = dxpad[:, :, pad:pad + H, pad:pad + W] if pad else dxpad
        return (dx[0] if squeeze else dx, dk)

    out._backward = bw
    return out


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = stride or window
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    N, C, H, W = xd.shape
    Hp = _pool_geometry(H, window, stride)
    Wp = _pool_geometry(W, window, stride)
    win = np.lib.stride_tricks.sliding_window_view(xd, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(N, C, Hp, Wp, window * window)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = Tensor(y[0] if squeeze else y, parents=(x,))

    def bw(g):
        gb = g[None] if squeeze else g
        dx = np.zeros_like(xd)
        ii, jj = np.divmod(arg, window)
        n_i, c_i, h_i, w_i = np.indices((N, C, Hp, Wp))
        np.add.at(dx, (n_i, c_i, h_i * stride + ii, w_i * stride + jj), gb)
        return (dx[0] if squeeze else dx,)

    out._backward = bw
    return out


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = stride or window
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    N, C, H, W = xd.shape
    Hp = _pool_geometry(H, window, stride)
    Wp = _pool_geometry(W, window, stride)
    win = np.lib.stride_tricks.sliding_window_view(xd, (window, window), axis=(2, 3))
    y = win[:, :, ::stride, ::stride].mean(axis=(-2, -1))
    out = Tensor(y[0] if squeeze else y, parents=(x,))
    inv = 1.0 / (window * window)

    def bw(g):
        gb = g[None] if squeeze else g
        dx = np.zeros_like(xd)
        for i in range(window):
            for j in range(window):
                dx[:, :, i:i + stride * Hp:stride, j:j + stride * Wp:stride] += gb * inv
        return (dx[0] if squeeze else dx,)

    out._backward = bw
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """[*,C,H,W] -> [*,C]: one value per channel."""
    axes = (-2, -1)
    return x.mean(axis=axes)


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """W x + b for a vector x [n], or x W^T + b for a batch [N,n]."""
    if x.data.ndim == 1:
        if W.data.shape[1] != x.data.shape[0]:
            raise AutodiffError(f"dense shape mismatch: W {W.data.shape} vs x {x.data.shape}")
        return W @ x + b
    if W.data.shape[1] != x.data.shape[-1]:
        raise AutodiffError(f"dense shape mismatch: W {W.data.shape} vs x {x.data.shape}")
    Wt = Tensor(W.data.T, parents=(W,))
    Wt._backward = lambda g: (g.T,)
    return x @ Wt + b


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    """Row lookup ids [*,T] -> [*,T,d] with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], parents=(table,))

    def bw(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (dt,)

    out._backward = bw
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool,
            mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout; pass a precomputed mask to reuse it across timesteps."""
    if not training or rate <= 0.0:
        return x
    if mask is None:
        mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask, parents=(x,))
    out._backward = lambda g: (g * mask,)
    return out


def make_dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    return (rng.random(shape) >= rate) / (1.0 - rate)


def bce_loss(scores: Tensor, labels: Tensor) -> Tensor:
    """Mean binary cross entropy; scores clamped to [eps, 1-eps]."""
    y = labels.data
    if not np.isin(y, (0.0, 1.0)).all():
        raise AutodiffError("labels must be 0 or 1")
    if scores.data.shape != y.shape:
        raise AutodiffError(f"shape mismatch: scores {scores.data.shape} vs labels {y.shape}")
    s = np.clip(scores.data, BCE_EPS, 1.0 - BCE_EPS)
    val = -(y * np.log(s) + (1.0 - y) * np.log1p(-s)).mean()
    out = Tensor(val, parents=(scores,))
    inside = (scores.data > BCE_EPS) & (scores.data < 1.0 - BCE_EPS)

    def bw(g):
        ds = (-(y / s) + (1.0 - y) / (1.0 - s)) / y.size
        return (g * ds * inside,)

    out._backward = bw
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into every graph node."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise AutodiffError("backward requires a scalar loss")

    order: list[Tensor] = []
    state: dict[int, int] = {}  # 0 in-progress, 1 done
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        nid = id(node)
        if processed:
            state[nid] = 1
            order.append(node)
            continue
        if state.get(nid) == 1:
            continue
        if state.get(nid) == 0:
            raise AutodiffError("cycle detected in computation graph")
        state[nid] = 0
        stack.append((node, True))
        for p in node._parents:
            if state.get(id(p)) != 1:
                if state.get(id(p)) == 0:
                    raise AutodiffError("cycle detected in computation graph")
                stack.append((p, False))

    # each backward call owns the grads of its subgraph; stale values from a
    # previous call (e.g. Grad-CAM weight extraction) must not leak in
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad = parent.grad + g


def assert_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(t.data).all():
        raise AutodiffError(f"non-finite values in {what}")
    return t
