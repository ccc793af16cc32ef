"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: each differentiable operation records its
parent tensors and a closure that routes the output gradient back to
them. A fresh graph is built on every forward pass, so variable grid
shapes need no special handling. Everything is 64-bit; gradient checks
against finite differences are the correctness backbone, speed is a
distant second at desk scale.

Only the operations the pipeline actually needs are provided: no
broadcasting zoo beyond what bias adds and attention pooling require.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "concat",
    "conv2d",
    "cross_entropy",
    "dropout",
    "linear",
    "relu",
    "softmax2d",
]


class Tensor:
    """N-dimensional float64 value participating in the differentiation graph.

    ``grad`` accumulates additively across uses during :func:`backward`.
    Data is treated as immutable once written, except for in-place
    parameter updates performed by the optimizer between graphs.
    """

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
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not an op the pipeline needs")
        return mul(self, 1.0 / float(scalar))

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Populate ``grad`` for every requires-grad tensor reachable from ``loss``.

    ``loss`` must be scalar. Each graph node is visited exactly once, in
    reverse topological order; gradients accumulate additively across uses.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def assert_finite(x, name: str = "tensor"):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"non-finite values in {name}")


# -- elementwise ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * (x.data > 0.0))

    return _make(out, (x,), bwd)


# -- shape ops --------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _make(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        if x.requires_grad:
            _accum(x, g.transpose(inv))

    return _make(out, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(out, tuple(tensors), bwd)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not x.requires_grad:
            return
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(x, np.broadcast_to(gg, x.data.shape))

    return _make(out, (x,), bwd)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.data.shape[a] for a in ax]))
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- network ops ------------------------------------------------------


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad=(0, 0)) -> Tensor:
    """2D cross-correlation with zero padding.

    ``x`` is [cin, h, w] or batched [n, cin, h, w]; ``kernels`` is
    [cout, cin, kh, kw]. Output spatial extent follows
    floor((h + 2*pad - kh)/stride) + 1.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    ph, pw = int(pad[0]), int(pad[1])
    if ph < 0 or pw < 0:
        raise ValueError("padding must be non-negative")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise ValueError(f"conv2d input must be 3D or 4D, got {x.data.ndim}D")
    if kernels.data.ndim != 4:
        raise ValueError("conv2d kernels must be [cout, cin, kh, kw]")
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernels.data.shape
    if kcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, kernels expect {kcin}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError("kernel larger than padded input")
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [n, cin, oh, ow, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, oh * ow, cin * kh * kw
    )
    kmat = kernels.data.reshape(cout, cin * kh * kw)
    out = (cols @ kmat.T).transpose(0, 2, 1).reshape(n, cout, oh, ow)

    def bwd(g):
        gd = g if batched else g[None]
        gmat = gd.reshape(n, cout, oh * ow)  # [n, cout, oh*ow]
        if kernels.requires_grad:
            dk = (gmat @ cols).sum(axis=0)  # [cout, cin*kh*kw]
            _accum(kernels, dk.reshape(kernels.data.shape))
        if x.requires_grad:
            dcols = gmat.transpose(0, 2, 1) @ kmat  # [n, oh*ow, cin*kh*kw]
            dwin = dcols.reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dwin[
                        :, :, :, :, i, j
                    ]
            dx = dxp[:, :, ph : ph + h, pw : pw + w]
            _accum(x, dx if batched else dx[0])

    return _make(out if batched else out[0], (x, kernels), bwd)


def softmax2d(values: Tensor) -> Tensor:
    """Softmax over all entries of a 2D grid, with max-subtraction."""
    if values.data.ndim != 2:
        raise ValueError(f"softmax2d expects a 2D grid, got {values.data.ndim}D")
    shifted = values.data - values.data.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def bwd(g):
        if values.requires_grad:
            dot = float((g * out).sum())
            _accum(values, out * (g - dot))

    return _make(out, (values,), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: weight [out, n] applied to x [n] or batched [b, n]."""
    if weight.data.ndim != 2:
        raise ValueError("linear weight must be 2D [out, n]")
    n_in = weight.data.shape[1]
    if x.data.ndim == 1:
        if x.data.shape[0] != n_in:
            raise ValueError(f"linear input size {x.data.shape[0]} != weight {n_in}")
        out = weight.data @ x.data + bias.data

        def bwd(g):
            if x.requires_grad:
                _accum(x, g @ weight.data)
            if weight.requires_grad:
                _accum(weight, np.outer(g, x.data))
            if bias.requires_grad:
                _accum(bias, g)

    elif x.data.ndim == 2:
        if x.data.shape[1] != n_in:
            raise ValueError(f"linear input size {x.data.shape[1]} != weight {n_in}")
        out = x.data @ weight.data.T + bias.data

        def bwd(g):
            if x.requires_grad:
                _accum(x, g @ weight.data)
            if weight.requires_grad:
                _accum(weight, g.T @ x.data)
            if bias.requires_grad:
                _accum(bias, g.sum(axis=0))

    else:
        raise ValueError("linear input must be 1D or 2D")
    return _make(out, (x, weight, bias), bwd)


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Negative log softmax probability of the true class.

    ``logits`` is [C] with an int label, or [N, C] with a length-N label
    vector (the batched form returns the mean loss).
    """
    if logits.data.ndim == 1:
        c = logits.data.shape[0]
        if c < 2:
            raise ValueError("cross_entropy needs at least 2 classes")
        label = int(label)
        if not 0 <= label < c:
            raise ValueError(f"label {label} out of range for {c} classes")
        m = logits.data.max()
        lse = m + np.log(np.exp(logits.data - m).sum())
        out = np.asarray(lse - logits.data[label])
        probs = np.exp(logits.data - lse)

        def bwd(g):
            if logits.requires_grad:
                d = probs.copy()
                d[label] -= 1.0
                _accum(logits, d * g)

    elif logits.data.ndim == 2:
        n, c = logits.data.shape
        if c < 2:
            raise ValueError("cross_entropy needs at least 2 classes")
        labels = np.asarray(label, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"labels must have shape ({n},)")
        if labels.min() < 0 or labels.max() >= c:
            raise ValueError("label out of range")
        m = logits.data.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(logits.data - m).sum(axis=1, keepdims=True))
        probs = np.exp(logits.data - lse)
        out = np.asarray((lse[:, 0] - logits.data[np.arange(n), labels]).mean())

        def bwd(g):
            if logits.requires_grad:
                d = probs.copy()
                d[np.arange(n), labels] -= 1.0
                _accum(logits, d * (float(g) / n))

    else:
        raise ValueError("cross_entropy expects 1D or 2D logits")
    return _make(out, (logits,), bwd)


def dropout(x: Tensor, p: float, train: bool, rng=None) -> Tensor:
    """Inverted dropout: zero units with probability p and scale survivors
    by 1/(1-p) in train mode; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop probability must leave keep probability in (0, 1], got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = 1.0 - p
    scale = (rng.random(x.data.shape) < keep) / keep
    out = x.data * scale

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * scale)

    return _make(out, (x,), bwd)
