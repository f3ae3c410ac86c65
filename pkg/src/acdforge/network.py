"""Parameter store and forward evaluation for a ``NetworkSpec``.

Parameters live in a flat ``{name: ndarray}`` dict so the optimizer,
the container format, and the pruning surgery all see the same simple
structure.  Key scheme: ``conv3.w``, ``conv3.b``, ``bn3.gamma``,
``bn3.beta``, ``bn3.mean``, ``bn3.var``, ``dense1.w``, ``dense1.b``.
Batchnorm running statistics ride along in the dict but are not
trainable.
"""

from __future__ import annotations

import numpy as np

from . import graph as G
from . import tensor as T
from .errors import ShapeError, SpecError


def param_shapes(spec):
    """Expected parameter keys and shapes, in layer order."""
    shapes = {}
    for l in spec.layers:
        if l.kind == G.CONV:
            kh, kw = l.kernel
            shapes[f"{l.name}.w"] = (l.filters, l.in_channels, kh, kw)
            shapes[f"{l.name}.b"] = (l.filters,)
        elif l.kind == G.BATCHNORM:
            for part in ("gamma", "beta", "mean", "var"):
                shapes[f"{l.name}.{part}"] = (l.filters,)
        elif l.kind == G.DENSE:
            shapes[f"{l.name}.w"] = (l.out_dim, l.in_dim)
            shapes[f"{l.name}.b"] = (l.out_dim,)
    return shapes


def trainable_keys(spec):
    return [k for k in param_shapes(spec)
            if not (k.endswith(".mean") or k.endswith(".var"))]


def init_params(spec, seed, dtype=np.float32):
    """Fresh parameters: conv and dense weights from N(0, 2/fan_in),
    zero biases, identity batchnorm."""
    rng = np.random.default_rng(seed)
    params = {}
    for l in spec.layers:
        if l.kind == G.CONV:
            kh, kw = l.kernel
            fan_in = l.in_channels * kh * kw
            params[f"{l.name}.w"] = T.he_normal_init(
                (l.filters, l.in_channels, kh, kw), fan_in, rng, dtype)
            params[f"{l.name}.b"] = np.zeros(l.filters, dtype=dtype)
        elif l.kind == G.BATCHNORM:
            params[f"{l.name}.gamma"] = np.ones(l.filters, dtype=dtype)
            params[f"{l.name}.beta"] = np.zeros(l.filters, dtype=dtype)
            params[f"{l.name}.mean"] = np.zeros(l.filters, dtype=dtype)
            params[f"{l.name}.var"] = np.ones(l.filters, dtype=dtype)
        elif l.kind == G.DENSE:
            params[f"{l.name}.w"] = T.he_normal_init(
                (l.out_dim, l.in_dim), l.in_dim, rng, dtype)
            params[f"{l.name}.b"] = np.zeros(l.out_dim, dtype=dtype)
    return params


def check_params_match(spec, params):
    """Raise if the parameter dict disagrees with the spec's shapes."""
    want = param_shapes(spec)
    for k, shape in want.items():
        if k not in params:
            raise ShapeError(k, "missing parameter")
        if tuple(params[k].shape) != shape:
            raise ShapeError(k, f"shape {params[k].shape}, spec wants {shape}")
    extra = set(params) - set(want)
    if extra:
        raise ShapeError(sorted(extra)[0], "parameter has no matching layer")


class _BNView:
    """Adapter exposing the dict's running-stat arrays to the bn kernel."""

    def __init__(self, mean, var):
        self.mean = mean
        self.var = var


def forward(spec, params, x, train=False, rng=None, want_taps=False,
            update_stats=None, want_grads=None):
    """Run the network on a batch of waveforms.

    ``x`` is (N, i_len) or (N, 1, 1, i_len); output is the (N, n_cls)
    softmax tensor.  Returns ``(probs, cache)`` where the cache carries
    the pre-softmax logits, the wrapped parameter tensors (for gradient
    collection), and, when ``want_taps`` is set, each conv block's
    post-activation map keyed by conv name.

    Training mode uses batch statistics in the batchnorms and, unless
    ``update_stats`` is False, refreshes the running statistics in
    place.  Dropout draws its mask from ``rng`` (required when training
    with a non-zero rate).
    """
    dtype = None
    for k, v in params.items():
        dtype = v.dtype
        break
    if dtype is None:
        raise SpecError("empty parameter dict")

    xd = np.asarray(x, dtype=dtype)
    if xd.ndim == 2:
        xd = xd[:, None, None, :]
    if xd.ndim != 4:
        raise ShapeError("input", f"need (N, i_len) or NCHW, got {xd.shape}")
    if xd.shape[-1] != spec.i_len:
        raise ShapeError("input", f"length {xd.shape[-1]}, spec wants {spec.i_len}")

    if update_stats is None:
        update_stats = train

    # want_grads decouples differentiability from batch-statistics mode:
    # saliency passes run eval-mode batchnorm but still need gradients
    grad = train if want_grads is None else want_grads
    pt = {}

    def wrap(key, requires):
        t = T.tensor(params[key], requires_grad=requires, dtype=dtype)
        pt[key] = t
        return t

    cur = T.tensor(xd, dtype=dtype)
    taps = {}
    last_conv = None
    for l in spec.layers:
        if l.kind == G.CONV:
            w = wrap(f"{l.name}.w", grad)
            b = wrap(f"{l.name}.b", grad)
            inp = T.zero_pad2d(cur, l.pad) if l.pad != (0, 0) else cur
            cur = T.conv2d(inp, w, b, l.stride)
            last_conv = l.name
        elif l.kind == G.BATCHNORM:
            g = wrap(f"{l.name}.gamma", grad)
            bt = wrap(f"{l.name}.beta", grad)
            if update_stats:
                state = _BNView(params[f"{l.name}.mean"], params[f"{l.name}.var"])
            else:
                state = _BNView(params[f"{l.name}.mean"].copy(),
                                params[f"{l.name}.var"].copy())
            cur = T.batchnorm2d(cur, g, bt, state, train=train)
        elif l.kind == G.RELU:
            cur = T.relu(cur)
            if want_taps and last_conv is not None:
                taps[last_conv] = cur
        elif l.kind == G.MAXPOOL:
            cur = T.maxpool2d(cur, l.kernel)
        elif l.kind == G.AVGPOOL:
            cur = T.avgpool2d(cur, l.kernel)
        elif l.kind == G.SWAP:
            cur = T.swap_channels_height(cur)
        elif l.kind == G.DROPOUT:
            if train and l.rate > 0 and rng is None:
                raise SpecError(f"{l.name}: training forward needs an rng")
            cur = T.dropout(cur, l.rate, rng, train)
        elif l.kind == G.FLATTEN:
            cur = T.flatten(cur)
        elif l.kind == G.DENSE:
            w = wrap(f"{l.name}.w", grad)
            b = wrap(f"{l.name}.b", grad)
            cur = T.dense(cur, w, b)
            logits = cur
        elif l.kind == G.SOFTMAX:
            cur = T.softmax(cur)
    cache = {"logits": logits, "params": pt, "taps": taps}
    return cur, cache


def collect_grads(cache):
    """Pull accumulated parameter gradients out of a forward cache."""
    return {k: t.grad for k, t in cache["params"].items() if t.grad is not None}


def predict_probs(spec, params, x, batch=64):
    """Inference-mode class probabilities as a plain array."""
    xs = np.asarray(x)
    outs = []
    for i in range(0, xs.shape[0], batch):
        probs, _ = forward(spec, params, xs[i:i + batch], train=False)
        outs.append(probs.data)
    return np.concatenate(outs, axis=0)
