"""Reverse-mode autodiff over numpy arrays.

Only the handful of operations needed by small 3D U-Nets and graph networks
are provided.  Volumetric tensors are channels-last, ``(batch, x, y, z,
channel)``, so that every convolution tap is a single 2D matmul.  Arrays keep
whatever float dtype they were created with: float32 for training, float64
for gradient checks.
"""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError, ShapeError, ValidationError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``.grad`` on every upstream tensor that requires it."""
        if self.data.size != 1:
            raise ValidationError(f"backward needs a scalar, got shape {self.shape}")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data, parents, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, parents if needs else (), backward if needs else None)


def _accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# --- elementwise and reductions ------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _result(x.data * mask, (x,), backward)


def tanh(x):
    out = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - out * out))

    return _result(out, (x,), backward)


def softmax_rows(x):
    """Softmax along the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _result(out, (x,), backward)


def mean_axis(x, axis, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.shape[axis]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / n, x.shape).copy())

    return _result(out, (x,), backward)


# --- linear layers --------------------------------------------------------


def dense(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} != ({w.shape[1]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data.T).reshape(x.shape))
        _accumulate(w, x2.T @ g2)
        if b is not None:
            _accumulate(b, g2.sum(axis=0))

    return _result(out.reshape(lead + (w.shape[1],)), (x, w) if b is None else (x, w, b), backward)


def conv3d(x, w, b=None):
    """Stride-1 'same' convolution with zero padding.

    ``x``: (batch, X, Y, Z, Cin); ``w``: (kx, ky, kz, Cin, Cout) with odd
    kernel sides; ``b``: (Cout,).
    """
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5D input and weights, got {x.shape}, {w.shape}")
    kx, ky, kz, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv3d: input has {x.shape[-1]} channels, weights expect {cin}")
    if not (kx % 2 and ky % 2 and kz % 2):
        raise ShapeError(f"conv3d: kernel sides must be odd, got {(kx, ky, kz)}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv3d: bias {b.shape} != ({cout},)")
    nb, nx, ny, nz, _ = x.shape
    px, py, pz = kx // 2, ky // 2, kz // 2
    xp = np.pad(x.data, ((0, 0), (px, px), (py, py), (pz, pz), (0, 0)))
    taps = [(i, j, k) for i in range(kx) for j in range(ky) for k in range(kz)]
    rows = nb * nx * ny * nz

    def window(arr, i, j, k):
        return arr[:, i:i + nx, j:j + ny, k:k + nz, :]

    out = np.zeros((rows, cout), dtype=np.result_type(x.data, w.data))
    for i, j, k in taps:
        out += window(xp, i, j, k).reshape(rows, cin) @ w.data[i, j, k]
    if b is not None:
        out += b.data

    def backward(g):
        g2 = g.reshape(rows, cout)
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i, j, k in taps:
            gw[i, j, k] = window(xp, i, j, k).reshape(rows, cin).T @ g2
            if gxp is not None:
                window(gxp, i, j, k)[...] += (g2 @ w.data[i, j, k].T).reshape(nb, nx, ny, nz, cin)
        _accumulate(w, gw)
        if b is not None:
            _accumulate(b, g2.sum(axis=0))
        if gxp is not None:
            _accumulate(x, gxp[:, px:px + nx, py:py + ny, pz:pz + nz, :])

    parents = (x, w) if b is None else (x, w, b)
    return _result(out.reshape(nb, nx, ny, nz, cout), parents, backward)


# --- resampling and plumbing ----------------------------------------------


def maxpool2(x):
    if x.data.ndim != 5 or any(d % 2 for d in x.shape[1:4]):
        raise ShapeError(f"maxpool2 needs 5D input with even spatial dims, got {x.shape}")
    nb, nx, ny, nz, c = x.shape
    blocks = (
        x.data.reshape(nb, nx // 2, 2, ny // 2, 2, nz // 2, 2, c)
        .transpose(0, 1, 3, 5, 7, 2, 4, 6)
        .reshape(nb, nx // 2, ny // 2, nz // 2, c, 8)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = (
            gb.reshape(nb, nx // 2, ny // 2, nz // 2, c, 2, 2, 2)
            .transpose(0, 1, 5, 2, 6, 3, 7, 4)
            .reshape(x.shape)
        )
        _accumulate(x, gx)

    return _result(out, (x,), backward)


def upsample_nn2(x):
    if x.data.ndim != 5:
        raise ShapeError(f"upsample_nn2 needs 5D input, got {x.shape}")
    nb, nx, ny, nz, c = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        _accumulate(x, g.reshape(nb, nx, 2, ny, 2, nz, 2, c).sum(axis=(2, 4, 6)))

    return _result(out, (x,), backward)


def concat_channels(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_channels: {a.shape} vs {b.shape}")
    split = a.shape[-1]

    def backward(g):
        _accumulate(a, g[..., :split])
        _accumulate(b, g[..., split:])

    return _result(np.concatenate([a.data, b.data], axis=-1), (a, b), backward)


# --- losses ---------------------------------------------------------------


def masked_mse_loss(pred, target, weight_mask):
    """Weighted mean of squared errors: ``sum(w * (p - t)**2) / sum(w)``.

    With a 0/1 mask this is the plain mean over selected voxels.
    """
    target = np.asarray(target, dtype=pred.data.dtype)
    weight = np.broadcast_to(np.asarray(weight_mask, dtype=pred.data.dtype), pred.shape)
    if target.shape != pred.shape:
        raise ShapeError(f"masked_mse_loss: pred {pred.shape} vs target {target.shape}")
    total = float(weight.sum(dtype=np.float64))
    if total <= 0:
        raise DegenerateInputError("loss mask selects no voxels")
    diff = pred.data - target
    out = np.asarray((weight * diff * diff).sum(dtype=np.float64) / total, dtype=pred.data.dtype)

    def backward(g):
        _accumulate(pred, (g * 2.0 / total) * weight * diff)

    return _result(out, (pred,), backward)


def cross_entropy_loss(logits, class_index):
    """Mean negative log-softmax probability of the true class; logits are (N, K)."""
    class_index = np.asarray(class_index, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != class_index.size:
        raise ShapeError(f"cross_entropy_loss: logits {logits.shape}, {class_index.size} labels")
    n, k = logits.shape
    if class_index.size and (class_index.min() < 0 or class_index.max() >= k):
        raise ValidationError(f"class index outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    out = np.asarray(-logp[rows, class_index].mean(), dtype=logits.data.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, class_index] -= 1.0
        _accumulate(logits, grad * (g / n))

    return _result(out, (logits,), backward)
