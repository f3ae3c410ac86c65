"""Reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps a row-major numpy array plus an optional backward
closure; running an op on tensors records the op into an implicit tape
(the DAG of parent links).  ``backward`` topologically sorts that DAG
from the loss and accumulates gradients in exact reverse order of
construction.

Production paths run in float32; gradient checks run the same code in
float64.  Every kernel validates its output for NaN/Inf and raises
``FiniteError`` rather than letting poison propagate.

Convolution is cross-correlation (no kernel flip) with no implicit
padding; use ``zero_pad2d`` for shape-preserving 3x3 stacks.  Pooling is
non-overlapping (stride == kernel) and floor division discards trailing
remainders.
"""

from __future__ import annotations

import numpy as np

from .errors import FiniteError, GraphError, ShapeError

CLAMP = 1e-12  # probability floor inside the loss kernels
BN_EPS = 1e-5


def _require(cond, where, message):
    if not cond:
        raise ShapeError(where, message)


def _finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise FiniteError(where)


class Tensor:
    """Array node in the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32):
    """Wrap ``data`` as a leaf tensor, copying to the requested dtype."""
    arr = np.array(data, dtype=dtype)  # always copy: callers keep ownership
    _finite(arr, "tensor")
    return Tensor(arr, requires_grad=requires_grad)


def _result(data, parents, backward, op):
    _finite(data, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward, op=op)


def _acc(t, g):
    # gradient accumulation; first contribution allocates
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss):
    """Backpropagate from a scalar loss through the recorded tape.

    Gradients accumulate on every node reachable from ``loss``; leaves
    created with ``requires_grad=True`` keep theirs for the optimizer,
    intermediate activations keep theirs for saliency probes.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None and not loss.parents:
        raise GraphError("backward called on a leaf with no recorded ops")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# initializer / optimizer


def he_normal_init(shape, fan_in, rng, dtype=np.float32):
    """Draw weights from N(0, 2/fan_in).

    The factor-two variance keeps forward activation magnitude stable
    under half-rectification.
    """
    if fan_in <= 0:
        raise ShapeError("he_normal_init", f"fan_in must be positive, got {fan_in}")
    std = float(np.sqrt(2.0 / fan_in))
    return rng.normal(0.0, std, size=shape).astype(dtype)


class SGDState:
    """Velocity buffers plus fixed hyperparameters for Nesterov SGD."""

    def __init__(self, momentum=0.9, weight_decay=5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}


def sgd_nesterov_step(params, grads, state, lr):
    """One Nesterov-momentum update, in place.

    Weight decay enters as an additive gradient term (decay = wd * w).
    With momentum mu and effective gradient d the update is

        v <- mu * v + d
        w <- w - lr * (d + mu * v)

    which evaluates the gradient step at the looked-ahead point.
    """
    mu = state.momentum
    wd = state.weight_decay
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        d = g + wd * p if wd else g
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            state.velocity[name] = v
        v *= mu
        v += d
        p -= (lr * (d + mu * v)).astype(p.dtype, copy=False)
        _finite(p, f"sgd_nesterov_step[{name}]")


# ---------------------------------------------------------------------------
# elementwise / shape ops


def relu(x):
    y = np.maximum(x.data, 0)

    def back(dy):
        _acc(x, dy * (x.data > 0))

    return _result(y, (x,), back, "relu")


def scale(x, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    y = x.data * x.data.dtype.type(c)

    def back(dy):
        _acc(x, dy * c)

    return _result(y, (x,), back, "scale")


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    _require(a.shape == b.shape, "add", f"shape mismatch {a.shape} vs {b.shape}")
    y = a.data + b.data

    def back(dy):
        if a.requires_grad:
            _acc(a, dy)
        if b.requires_grad:
            _acc(b, dy)

    return _result(y, (a, b), back, "add")


def zero_pad2d(x, pad):
    """Zero-pad the two trailing axes of an NCHW tensor by (ph, pw) each side."""
    ph, pw = pad
    _require(ph >= 0 and pw >= 0, "zero_pad2d", f"negative pad {pad}")
    if ph == 0 and pw == 0:
        return x
    y = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))

    def back(dy):
        h, w = x.shape[2], x.shape[3]
        _acc(x, dy[:, :, ph:ph + h, pw:pw + w])

    return _result(y, (x,), back, "zero_pad2d")


def swap_channels_height(x):
    """Exchange the channel and height axes of an NCHW tensor."""
    _require(x.data.ndim == 4, "swap_channels_height", f"need NCHW, got {x.shape}")
    y = np.ascontiguousarray(np.swapaxes(x.data, 1, 2))

    def back(dy):
        _acc(x, np.swapaxes(dy, 1, 2))

    return _result(y, (x,), back, "swap_channels_height")


def flatten(x):
    n = x.shape[0]
    y = x.data.reshape(n, -1)

    def back(dy):
        _acc(x, dy.reshape(x.shape))

    return _result(y, (x,), back, "flatten")


def dropout(x, rate, rng, train):
    """Inverted dropout: active units scale by 1/(1-rate) during training."""
    if not train or rate == 0.0:
        return x
    _require(0.0 <= rate < 1.0, "dropout", f"rate must be in [0,1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - rate))
    y = x.data * keep * scale

    def back(dy):
        _acc(x, dy * keep * scale)

    return _result(y, (x,), back, "dropout")


# ---------------------------------------------------------------------------
# convolution


def _im2col(x, kh, kw, sh, sw):
    # (N,C,H,W) -> (N*Ho*Wo, C*kh*kw) patch matrix
    n, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]                      # (N,C,Ho,Wo,kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, w, b, stride=(1, 1)):
    """Valid cross-correlation of an NCHW input with FCkhkw filters.

    Output dims: H' = floor((H-kh)/sh)+1, W' = floor((W-kw)/sw)+1.
    The patch matrix from the forward pass is reused for the weight
    gradient; the input gradient comes from correlating the
    zero-stuffed upstream gradient with the spatially flipped filters.
    """
    sh, sw = stride
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    _require(cw == c, "conv2d", f"input has {c} channels, filters expect {cw}")
    _require(h >= kh and wd >= kw, "conv2d",
             f"kernel ({kh},{kw}) larger than input ({h},{wd})")
    _require(b.shape == (f,), "conv2d", f"bias shape {b.shape} != ({f},)")
    _require(sh >= 1 and sw >= 1, "conv2d", f"bad stride {stride}")

    cols, ho, wo = _im2col(x.data, kh, kw, sh, sw)
    wmat = w.data.reshape(f, c * kh * kw)
    out = cols @ wmat.T + b.data
    y = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)

    def back(dy):
        dyf = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        if w.requires_grad:
            _acc(w, (dyf.T @ cols).reshape(w.shape))
        if b.requires_grad:
            _acc(b, dyf.sum(axis=0))
        if x.requires_grad:
            # scatter dy back onto the input grid: zero-stuff by the
            # stride, then full-correlate with flipped filters
            hd = (ho - 1) * sh + 1
            wdd = (wo - 1) * sw + 1
            dyd = np.zeros((n, f, hd, wdd), dtype=dy.dtype)
            dyd[:, :, ::sh, ::sw] = dy
            dyp = np.pad(dyd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C,F,kh,kw)
            gcols, gh, gw = _im2col(dyp, kh, kw, 1, 1)
            gx = (gcols @ wflip.reshape(c, f * kh * kw).T)
            gx = gx.reshape(n, gh, gw, c).transpose(0, 3, 1, 2)
            dx = np.zeros(x.shape, dtype=dy.dtype)
            dx[:, :, :gh, :gw] = gx[:, :, :h, :wd]
            _acc(x, dx)

    return _result(y, (x, w, b), back, "conv2d")


# ---------------------------------------------------------------------------
# batch normalization


class BNState:
    """Running statistics for one batchnorm layer (not trained)."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self):
        out = BNState(len(self.mean), dtype=self.mean.dtype)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm2d(x, gamma, beta, state, train, momentum=0.1, eps=BN_EPS):
    """Per-channel normalization over (N, H, W).

    Training uses batch statistics (biased variance for normalization,
    unbiased for the running update, momentum 0.1); inference uses the
    stored running statistics.
    """
    n, c, h, w = x.shape
    _require(gamma.shape == (c,) and beta.shape == (c,), "batchnorm2d",
             f"scale/shift shape mismatch for {c} channels")
    cnt = n * h * w
    xd = x.data
    if train:
        _require(cnt > 1, "batchnorm2d", "need more than one element per channel")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        state.mean *= (1.0 - momentum)
        state.mean += momentum * mu.astype(state.mean.dtype)
        state.var *= (1.0 - momentum)
        state.var += momentum * (var * cnt / (cnt - 1)).astype(state.var.dtype)
    else:
        mu = state.mean.astype(xd.dtype)
        var = state.var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[:, None, None]) * inv[:, None, None]
    y = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def back(dy):
        if gamma.requires_grad:
            _acc(gamma, (dy * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _acc(beta, dy.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            g = gamma.data[:, None, None]
            if train:
                dxhat = dy * g
                s1 = dxhat.sum(axis=(0, 2, 3))[:, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[:, None, None]
                dx = (inv[:, None, None] / cnt) * (cnt * dxhat - s1 - xhat * s2)
            else:
                dx = dy * g * inv[:, None, None]
            _acc(x, dx)

    return _result(y, (x, gamma, beta), back, "batchnorm2d")


# ---------------------------------------------------------------------------
# pooling


def _pool_view(xd, kh, kw):
    n, c, h, w = xd.shape
    ho, wo = h // kh, w // kw
    v = xd[:, :, :ho * kh, :wo * kw].reshape(n, c, ho, kh, wo, kw)
    return v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kh * kw), ho, wo


def maxpool2d(x, kernel):
    """Non-overlapping max pool; stride equals the kernel.

    Ties inside a window resolve to the first maximum in scan order,
    which is where the full gradient goes.
    """
    kh, kw = kernel
    n, c, h, w = x.shape
    _require(kh >= 1 and kw >= 1, "maxpool2d", f"bad kernel {kernel}")
    _require(h >= kh and w >= kw, "maxpool2d",
             f"kernel ({kh},{kw}) larger than input ({h},{w})")
    win, ho, wo = _pool_view(x.data, kh, kw)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(dy):
        dwin = np.zeros((n, c, ho, wo, kh * kw), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros(x.shape, dtype=dy.dtype)
        dx[:, :, :ho * kh, :wo * kw] = (
            dwin.reshape(n, c, ho, wo, kh, kw)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho * kh, wo * kw)
        )
        _acc(x, dx)

    return _result(np.ascontiguousarray(y), (x,), back, "maxpool2d")


def avgpool2d(x, kernel):
    """Non-overlapping average pool; stride equals the kernel."""
    kh, kw = kernel
    n, c, h, w = x.shape
    _require(kh >= 1 and kw >= 1, "avgpool2d", f"bad kernel {kernel}")
    _require(h >= kh and w >= kw, "avgpool2d",
             f"kernel ({kh},{kw}) larger than input ({h},{w})")
    win, ho, wo = _pool_view(x.data, kh, kw)
    y = win.mean(axis=-1)

    def back(dy):
        share = (dy / (kh * kw))[..., None]
        dwin = np.broadcast_to(share, (n, c, ho, wo, kh * kw))
        dx = np.zeros(x.shape, dtype=dy.dtype)
        dx[:, :, :ho * kh, :wo * kw] = (
            dwin.reshape(n, c, ho, wo, kh, kw)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho * kh, wo * kw)
        )
        _acc(x, dx)

    return _result(np.ascontiguousarray(y), (x,), back, "avgpool2d")


# ---------------------------------------------------------------------------
# dense / softmax / losses


def dense(x, w, b):
    """Affine map of (N, D) by weights (out, D) plus bias (out,)."""
    n, d = x.shape
    o, dw = w.shape
    _require(dw == d, "dense", f"input width {d} != weight width {dw}")
    _require(b.shape == (o,), "dense", f"bias shape {b.shape} != ({o},)")
    y = x.data @ w.data.T + b.data

    def back(dy):
        if w.requires_grad:
            _acc(w, dy.T @ x.data)
        if b.requires_grad:
            _acc(b, dy.sum(axis=0))
        if x.requires_grad:
            _acc(x, dy @ w.data)

    return _result(y, (x, w, b), back, "dense")


def softmax(x):
    """Row softmax with max subtraction for overflow safety."""
    _require(x.data.ndim == 2, "softmax", f"need (N, K), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(dy):
        dot = (dy * y).sum(axis=1, keepdims=True)
        _acc(x, y * (dy - dot))

    return _result(y, (x,), back, "softmax")


def _check_rows_prob(arr, where):
    sums = arr.sum(axis=1)
    if not np.all(np.abs(sums - 1.0) <= 1e-5):
        raise ShapeError(where, "rows must sum to 1 within 1e-5")
    if np.any(arr < 0):
        raise ShapeError(where, "negative probabilities")


def kl_div_loss(pred, target):
    """Mean over the batch of KL(target || pred), predictions clamped at 1e-12.

    Target rows are treated as constants; zero target mass contributes
    zero regardless of the prediction there.
    """
    _require(pred.shape == target.shape, "kl_div_loss",
             f"shape mismatch {pred.shape} vs {target.shape}")
    _check_rows_prob(pred.data, "kl_div_loss")
    _check_rows_prob(target.data, "kl_div_loss")
    n = pred.shape[0]
    f = np.maximum(pred.data, CLAMP)
    t = target.data
    mask = t > 0
    terms = np.where(mask, t * (np.log(np.maximum(t, CLAMP)) - np.log(f)), 0.0)
    y = np.asarray(terms.sum() / n, dtype=pred.dtype)

    def back(dy):
        if pred.requires_grad:
            live = mask & (pred.data >= CLAMP)  # clamped region has zero slope
            _acc(pred, np.where(live, -t / f, 0.0) * (dy / n))

    return _result(y, (pred, target), back, "kl_div_loss")


def cross_entropy_loss(pred, target):
    """Mean over the batch of -sum(target * log(pred)), clamped at 1e-12."""
    _require(pred.shape == target.shape, "cross_entropy_loss",
             f"shape mismatch {pred.shape} vs {target.shape}")
    _check_rows_prob(pred.data, "cross_entropy_loss")
    _check_rows_prob(target.data, "cross_entropy_loss")
    n = pred.shape[0]
    f = np.maximum(pred.data, CLAMP)
    t = target.data
    terms = np.where(t > 0, -t * np.log(f), 0.0)
    y = np.asarray(terms.sum() / n, dtype=pred.dtype)

    def back(dy):
        if pred.requires_grad:
            live = (t > 0) & (pred.data >= CLAMP)
            _acc(pred, np.where(live, -t / f, 0.0) * (dy / n))

    return _result(y, (pred, target), back, "cross_entropy_loss")
