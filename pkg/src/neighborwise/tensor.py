"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Graph` (a tape).
Outside of a graph, or inside a graph opened in ``"eval"`` mode, ops run
without recording, which is how inference passes stay cheap.

    with Graph() as g:
        loss = (w * x).sum()
    g.backward(loss)        # accumulates into w.grad
"""

from __future__ import annotations

import numpy as np

_STACK: list["Graph"] = []


class GraphError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array plus autograd bookkeeping.

    Leaf tensors created with ``requires_grad=True`` own a gradient buffer of
    identical shape that backward passes add into. Tensors produced by ops
    carry gradients only transiently inside :meth:`Graph.backward`.
    """

    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @classmethod
    def _interior(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = True
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "parents", "fn")

    def __init__(self, out, parents, fn):
        self.out = out
        self.parents = parents
        self.fn = fn


class Graph:
    """Tape of recorded operations, in execution (hence topological) order."""

    def __init__(self, mode="train"):
        if mode not in ("train", "eval"):
            raise ValueError(f"graph mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.nodes: list[_Node] = []

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        """Propagate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        Calling this twice on the same graph accumulates twice.
        """
        if self.mode != "train":
            raise GraphError("backward called on an eval-mode graph")
        if loss.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if not loss.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        if loss.grad is not None:
            # loss is itself a leaf
            loss.grad += 1.0
            return
        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.fn(g)):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                if parent.grad is not None:
                    parent.grad += pg
                else:
                    k = id(parent)
                    pending[k] = pending[k] + pg if k in pending else pg


def recording() -> bool:
    return bool(_STACK) and _STACK[-1].mode == "train"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, fn):
    """Create an op output, recording it when any parent needs a gradient."""
    if _STACK and _STACK[-1].mode == "train" and any(
        isinstance(p, Tensor) and p.requires_grad for p in parents
    ):
        out = Tensor._interior(data)
        _STACK[-1].nodes.append(_Node(out, parents, fn))
        return out
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def power(a, p: float):
    a = _wrap(a)
    x = a.data
    return _make(x**p, (a,), lambda g: (g * p * x ** (p - 1),))


def square(a):
    a = _wrap(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, alpha=0.01):
    slope = np.where(a.data > 0, 1.0, alpha)
    return _make(a.data * slope, (a,), lambda g: (g * slope,))


def floor_at(a, eps):
    """max(a, eps) with the gradient passed only where a > eps; NaN stays NaN."""
    mask = a.data > eps
    return _make(np.maximum(a.data, eps), (a,), lambda g: (g * mask,))


def clamp(a, lo, hi):
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def where_mask(a, mask):
    """Elementwise ``a * mask`` for a constant 0/1 (or scaled) mask."""
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# ------------------------------------------------------------------ reductions


def tsum(a, axis=None):
    shape = a.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), fn)


def mean(a, axis=None):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / float(n))


# ------------------------------------------------------------- shape handling


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a):
    return reshape(a, (a.shape[0], -1))


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def take_label(p, labels):
    """p[i, labels[i]] for a [N, K] tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(p.shape[0])
    shape = p.shape

    def fn(g):
        out = np.zeros(shape)
        out[rows, labels] = g
        return (out,)

    return _make(p.data[rows, labels], (p,), fn)


# ---------------------------------------------------------------- linear maps


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), fn)


# ---------------------------------------------------------------- convolution


def conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def tconv_out_size(n, k, stride, pad, out_pad):
    return (n - 1) * stride - 2 * pad + k + out_pad


def _im2col(xp, k, stride, ho, wo):
    """Patches of a padded [N, C, H, W] input laid out as [C, k, k, N, ho, wo]."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols


def _col2im(cols, stride, full_hw):
    """Adjoint of _im2col: sum [C, k, k, N, h, w] patches into [N, C, *full_hw]."""
    c, k, _, n, h, w = cols.shape
    out = np.zeros((c, n) + tuple(full_hw))
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of x [N,C,H,W] with w [O,C,k,k] plus bias b [O]."""
    xd, wd = x.data, w.data
    n, c, h, wid = xd.shape
    o, k = wd.shape[0], wd.shape[2]
    xp = _pad(xd, pad)
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(wid, k, stride, pad)
    cols = _im2col(xp, k, stride, ho, wo).reshape(c * k * k, -1)
    wm = wd.reshape(o, -1)
    out = (wm @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def fn(g):
        gt = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gt @ cols.T).reshape(wd.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wm.T @ gt).reshape(c, k, k, n, ho, wo)
            gxp = _col2im(dcols, stride, xp.shape[2:])
            gx = gxp[:, :, pad : pad + h, pad : pad + wid] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, fn)


def conv_transpose2d(x, w, b=None, stride=2, pad=1, out_pad=1):
    """Transposed convolution (adjoint of conv2d); x [N,Cin,H,W], w [Cin,Cout,k,k]."""
    xd, wd = x.data, w.data
    n, cin, h, wid = xd.shape
    cout, k = wd.shape[1], wd.shape[2]
    ho = tconv_out_size(h, k, stride, pad, out_pad)
    wo = tconv_out_size(wid, k, stride, pad, out_pad)
    full = ((h - 1) * stride + k + out_pad, (wid - 1) * stride + k + out_pad)
    wm = wd.reshape(cin, -1)
    xt = xd.transpose(1, 0, 2, 3).reshape(cin, -1)
    cols = (wm.T @ xt).reshape(cout, k, k, n, h, wid)
    out = _col2im(cols, stride, full)[:, :, pad : pad + ho, pad : pad + wo]
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def fn(g):
        gp = np.zeros((n, cout) + full)
        gp[:, :, pad : pad + ho, pad : pad + wo] = g
        gcols = _im2col(gp, k, stride, h, wid).reshape(cout * k * k, -1)
        gx = (wm @ gcols).reshape(cin, n, h, wid).transpose(1, 0, 2, 3) if x.requires_grad else None
        gw = (xt @ gcols.T).reshape(wd.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, fn)


def _pool_view(xd):
    n, c, h, w = xd.shape
    h2, w2 = h // 2, w // 2
    v = xd[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)


def _unpool(g4, shape):
    n, c, h, w = shape
    h2, w2 = g4.shape[2], g4.shape[3]
    full = np.zeros(shape)
    full[:, :, : 2 * h2, : 2 * w2] = (
        g4.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    )
    return full


def max_pool2d(x):
    """2x2 / stride 2 max pooling; odd trailing rows/cols are dropped."""
    v = _pool_view(x.data)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    shape = x.shape

    def fn(g):
        g4 = np.zeros(v.shape)
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        return (_unpool(g4, shape),)

    return _make(out, (x,), fn)


def avg_pool2d(x):
    v = _pool_view(x.data)
    shape = x.shape

    def fn(g):
        return (_unpool(np.repeat(g[..., None] * 0.25, 4, axis=-1), shape),)

    return _make(v.mean(axis=-1), (x,), fn)


# -------------------------------------------------------------- normalization


def batch_norm(x, gamma, beta, running, train, momentum=0.9, eps=1e-5):
    """Batch normalization over all axes except the channel axis (axis 1).

    ``running`` is a dict holding ``mean`` and ``var`` arrays; in train mode it
    is updated as ``r <- momentum * r + (1 - momentum) * batch_stat`` (the
    variance uses the unbiased estimate). Eval mode reads running stats only.
    """
    xd = x.data
    axes = (0,) if xd.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if xd.ndim == 2 else (1, -1, 1, 1)
    gd, bd = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    if train:
        m = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running is not None:
            running["mean"] = momentum * running["mean"] + (1.0 - momentum) * mu
            running["var"] = momentum * running["var"] + (1.0 - momentum) * var * (m / max(m - 1, 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)

        def fn(g):
            gg = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gx = None
            if x.requires_grad:
                gx = (gd * inv.reshape(bshape) / m) * (
                    m * g - gb.reshape(bshape) - xhat * gg.reshape(bshape)
                )
            return (gx, gg, gb)

    else:
        inv = 1.0 / np.sqrt(running["var"] + eps)
        xhat = (xd - running["mean"].reshape(bshape)) * inv.reshape(bshape)

        def fn(g):
            gx = g * gd * inv.reshape(bshape) if x.requires_grad else None
            return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _make(xhat * gd + bd, (x, gamma, beta), fn)
