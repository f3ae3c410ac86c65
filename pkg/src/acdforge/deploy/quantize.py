"""Post-training 8-bit quantization and the integer reference interpreter.

Scheme: batchnorm folds into the preceding conv, weights quantize
symmetrically per tensor (zero point 0), activations asymmetrically
per tensor from calibrated min/max ranges widened to include zero.
Biases are 32-bit at the product of input and weight scales.

Requantization uses a fixed-point multiplier: the real factor
s_in*s_w/s_out becomes (m, shift) with m in [2^30, 2^31) applied as
round_half_away((acc * m) / 2^shift).  Rounding is half away from
zero, implemented with integer magnitude arithmetic so a C port using
truncating division reproduces it bit for bit.  The interpreter here
is the reference semantics for the emitted C code: both walk the same
schedule records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import graph as G
from .. import network as N
from ..errors import QuantError, SpecError
from ..tensor import BN_EPS
from .container import TensorRecord, load_records, save_records, serialize

QMIN, QMAX = -128, 127
SCALE_FLOOR = 1e-8
ACC_LIMIT = 2 ** 30  # conservative int32 headroom for bias + accumulation


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int


def weight_qparams(w):
    """Symmetric per-tensor range: scale = max|w|/127, zero point 0."""
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    return QuantParams(max(amax / QMAX, SCALE_FLOOR), 0)


def act_qparams(lo, hi):
    """Asymmetric range widened to include zero.

    Zero must be exactly representable so that padding regions and
    rectified silence introduce no bias.
    """
    lo = min(float(lo), 0.0)
    hi = max(float(hi), 0.0)
    scale = max((hi - lo) / (QMAX - QMIN), SCALE_FLOOR)
    zp = int(round(-128.0 - lo / scale))
    return QuantParams(scale, int(np.clip(zp, QMIN, QMAX)))


def quant(x, qp):
    q = np.round(np.asarray(x, dtype=np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequant(q, qp):
    return (q.astype(np.float32) - qp.zero_point) * np.float32(qp.scale)


def requant_multiplier(real_m):
    """Split a positive real factor into (m, shift): real_m ~= m / 2^shift.

    m lands in [2^30, 2^31) so the int64 product acc*m keeps maximum
    precision without overflow.
    """
    if real_m <= 0.0 or not math.isfinite(real_m):
        raise QuantError(f"requant factor must be positive, got {real_m}")
    mant, exp = math.frexp(real_m)       # real_m = mant * 2^exp, mant in [0.5,1)
    m = int(round(mant * (1 << 31)))
    if m == 1 << 31:
        m >>= 1
        exp += 1
    shift = 31 - exp
    if not 0 <= shift <= 62:
        raise QuantError(f"requant shift {shift} out of range for factor "
                         f"{real_m}")
    return m, shift


def round_half_away(v, divisor_pow2):
    """Divide int64 values by 2^k, rounding halves away from zero."""
    v = np.asarray(v, dtype=np.int64)
    half = np.int64((1 << divisor_pow2) >> 1)
    mag = (np.abs(v) + half) >> np.int64(divisor_pow2)
    return np.where(v < 0, -mag, mag)


def div_round_half_away(v, divisor):
    """Divide int64 values by an arbitrary positive integer, halves away."""
    v = np.asarray(v, dtype=np.int64)
    d = np.int64(divisor)
    mag = (np.abs(v) + d // 2) // d
    return np.where(v < 0, -mag, mag)


# ---------------------------------------------------------------------------
# batchnorm folding


def fold_batchnorm(spec, params, eps=BN_EPS):
    """Absorb batchnorm into the preceding conv; drop dropout layers.

    Returns (deploy_spec, folded_params).  The deploy spec contains
    only runtime layers; float inference on it matches the original
    eval-mode network to float precision.
    """
    fparams = {}
    layers = []
    prev_conv = None
    for l in spec.layers:
        if l.kind == G.CONV:
            fparams[f"{l.name}.w"] = params[f"{l.name}.w"].copy()
            fparams[f"{l.name}.b"] = params[f"{l.name}.b"].copy()
            prev_conv = l.name
            layers.append(l)
        elif l.kind == G.BATCHNORM:
            if prev_conv is None:
                raise SpecError(f"{l.name}: batchnorm without a preceding conv")
            num = l.name[2:]
            gamma = params[f"bn{num}.gamma"].astype(np.float64)
            beta = params[f"bn{num}.beta"].astype(np.float64)
            mean = params[f"bn{num}.mean"].astype(np.float64)
            var = params[f"bn{num}.var"].astype(np.float64)
            f = gamma / np.sqrt(var + eps)
            w = fparams[f"{prev_conv}.w"].astype(np.float64)
            b = fparams[f"{prev_conv}.b"].astype(np.float64)
            fparams[f"{prev_conv}.w"] = (w * f[:, None, None, None]).astype(np.float32)
            fparams[f"{prev_conv}.b"] = ((b - mean) * f + beta).astype(np.float32)
        elif l.kind == G.DROPOUT:
            continue
        elif l.kind == G.DENSE:
            fparams[f"{l.name}.w"] = params[f"{l.name}.w"].copy()
            fparams[f"{l.name}.b"] = params[f"{l.name}.b"].copy()
            layers.append(l)
        else:
            layers.append(l)
    deploy = G.NetworkSpec(i_len=spec.i_len, sr=spec.sr, n_cls=spec.n_cls,
                           base_width=spec.base_width, layers=layers)
    G.propagate_shapes(deploy)
    return deploy, fparams


# ---------------------------------------------------------------------------
# quantized model


@dataclass
class QuantizedModel:
    spec: object                      # deploy spec: no batchnorm, no dropout
    weights: dict                     # key -> int8 (weights) / int32 (biases)
    wq: dict                          # layer name -> QuantParams (weights)
    act: dict                         # activation name -> QuantParams
    schedule: list = field(default_factory=list)


@dataclass
class Step:
    op: str
    name: str
    in_shape: tuple
    out_shape: tuple
    kernel: tuple = (0, 0)
    stride: tuple = (1, 1)
    pad: tuple = (0, 0)
    zp_in: int = 0
    zp_out: int = 0
    m: int = 0
    shift: int = 0


def _upstream_acts(spec):
    """Activation-range name feeding each layer, keyed by layer name."""
    cur = "input"
    feeds = {}
    last_conv = None
    for l in spec.layers:
        feeds[l.name] = cur
        if l.kind == G.CONV:
            last_conv = l.name
            cur = l.name           # conv output range, calibrated post-relu
        elif l.kind == G.RELU:
            cur = last_conv
        elif l.kind == G.DENSE:
            cur = "logits"
    return feeds


def build_schedule(spec, wq, act):
    """One executable record per deploy layer, shapes included.

    This table is the single source of truth for both the in-process
    interpreter and the generated C code.
    """
    shapes = dict(G.propagate_shapes(spec))
    feeds = _upstream_acts(spec)
    steps = []
    cur_shape = (1, 1, spec.i_len)
    for l in spec.layers:
        out_shape = shapes[l.name]
        src = feeds[l.name]
        zp_in = act[src].zero_point
        step = Step(op=l.kind, name=l.name, in_shape=cur_shape,
                    out_shape=out_shape, zp_in=zp_in)
        if l.kind == G.CONV:
            out_qp = act[l.name]
            real_m = act[src].scale * wq[l.name].scale / out_qp.scale
            step.m, step.shift = requant_multiplier(real_m)
            step.zp_out = out_qp.zero_point
            step.kernel, step.stride, step.pad = l.kernel, l.stride, l.pad
        elif l.kind == G.DENSE:
            out_qp = act["logits"]
            real_m = act[src].scale * wq[l.name].scale / out_qp.scale
            step.m, step.shift = requant_multiplier(real_m)
            step.zp_out = out_qp.zero_point
        elif l.kind in (G.MAXPOOL, G.AVGPOOL):
            step.kernel = l.kernel
            step.zp_out = zp_in    # pooling reuses the input range
        else:
            step.zp_out = zp_in
        steps.append(step)
        cur_shape = out_shape
    return steps


def quantize_int8(spec, params, calib_batches):
    """Fold, calibrate activation ranges, and quantize every tensor."""
    if not calib_batches:
        raise QuantError("quantization needs a nonempty calibration set")
    deploy, fparams = fold_batchnorm(spec, params)

    lo = {}
    hi = {}

    def observe(name, arr):
        a, b = float(arr.min()), float(arr.max())
        lo[name] = min(lo.get(name, a), a)
        hi[name] = max(hi.get(name, b), b)

    for xs in calib_batches:
        xs = np.asarray(xs, dtype=np.float32)
        observe("input", xs)
        probs, cache = N.forward(deploy, fparams, xs, train=False,
                                 want_taps=True)
        for name, tap in cache["taps"].items():
            observe(name, tap.data)
        observe("logits", cache["logits"].data)

    act = {name: act_qparams(lo[name], hi[name]) for name in lo}

    feeds = _upstream_acts(deploy)
    weights = {}
    wq = {}
    for l in deploy.layers:
        if l.kind not in (G.CONV, G.DENSE):
            continue
        w = fparams[f"{l.name}.w"]
        b = fparams[f"{l.name}.b"]
        qp = weight_qparams(w)
        wq[l.name] = qp
        weights[f"{l.name}.w"] = quant(w, qp)
        s_in = act[feeds[l.name]].scale
        qb = np.round(b.astype(np.float64) / (s_in * qp.scale))
        if np.any(np.abs(qb) >= ACC_LIMIT):
            raise QuantError(f"{l.name}: quantized bias exceeds the "
                             "32-bit accumulator headroom")
        weights[f"{l.name}.b"] = qb.astype(np.int32)

    model = QuantizedModel(spec=deploy, weights=weights, wq=wq, act=act)
    model.schedule = build_schedule(deploy, wq, act)
    return model


# ---------------------------------------------------------------------------
# integer inference (reference semantics for the emitted C)


def _conv2d_int(x_q, w_q, b_q, step):
    n = x_q.shape[0]
    cin, hin, win = step.in_shape
    kh, kw = step.kernel
    sh, sw = step.stride
    ph, pw = step.pad
    # padding holds the input zero point, so centered values pad to 0
    xs = x_q.astype(np.int64) - step.zp_in
    if (ph, pw) != (0, 0):
        xs = np.pad(xs, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    _, _, hp, wp = xs.shape
    hout = (hp - kh) // sh + 1
    wout = (wp - kw) // sw + 1
    view = np.lib.stride_tricks.sliding_window_view(xs, (kh, kw), axis=(2, 3))
    view = view[:, :, ::sh, ::sw]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n, hout * wout, -1)
    wmat = w_q.astype(np.int64).reshape(w_q.shape[0], -1)
    acc = cols @ wmat.T + b_q.astype(np.int64)
    acc = acc.transpose(0, 2, 1).reshape(n, w_q.shape[0], hout, wout)
    if np.any(np.abs(acc) >= 2 ** 31):
        raise QuantError(f"{step.name}: accumulator overflow")
    return acc


def _requant(acc, step):
    q = round_half_away(acc * np.int64(step.m), step.shift) + step.zp_out
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def int8_infer(model, x, want_logits=False):
    """Integer forward pass; returns float probabilities.

    Every arithmetic step matches the emitted C code bit for bit; only
    the final softmax runs in float on the dequantized logits.
    """
    xs = np.asarray(x, dtype=np.float32)
    if xs.ndim == 1:
        xs = xs[None, :]
    codes = quant(xs, model.act["input"])
    return infer_codes(model, codes, want_logits=want_logits)


def infer_codes(model, codes, want_logits=False):
    """Run the schedule on already-quantized input codes."""
    q = np.asarray(codes, dtype=np.int8)
    if q.ndim == 1:
        q = q[None, :]
    q = q[:, None, None, :]
    logits_q = None
    for step in model.schedule:
        if step.op == G.CONV:
            acc = _conv2d_int(q, model.weights[f"{step.name}.w"],
                              model.weights[f"{step.name}.b"], step)
            q = _requant(acc, step)
        elif step.op == G.RELU:
            q = np.maximum(q, np.int8(step.zp_in))
        elif step.op == G.MAXPOOL:
            kh, kw = step.kernel
            n, c, h, w = q.shape
            v = q[:, :, :h - h % kh, :w - w % kw]
            v = v.reshape(n, c, h // kh, kh, w // kw, kw)
            q = v.max(axis=(3, 5))
        elif step.op == G.AVGPOOL:
            kh, kw = step.kernel
            n, c, h, w = q.shape
            v = q[:, :, :h - h % kh, :w - w % kw].astype(np.int64)
            v = (v - step.zp_in).reshape(n, c, h // kh, kh, w // kw, kw)
            s = v.sum(axis=(3, 5))
            avg = div_round_half_away(s, kh * kw) + step.zp_in
            q = np.clip(avg, QMIN, QMAX).astype(np.int8)
        elif step.op == G.SWAP:
            n = q.shape[0]
            c, h, w = step.out_shape
            # (C,1,W) and (1,C,W) share a memory layout: free reinterpret
            q = q.reshape(n, c, h, w)
        elif step.op == G.FLATTEN:
            q = q.reshape(q.shape[0], -1)
        elif step.op == G.DENSE:
            w_q = model.weights[f"{step.name}.w"].astype(np.int64)
            b_q = model.weights[f"{step.name}.b"].astype(np.int64)
            acc = (q.astype(np.int64) - step.zp_in) @ w_q.T + b_q
            if np.any(np.abs(acc) >= 2 ** 31):
                raise QuantError(f"{step.name}: accumulator overflow")
            q = _requant(acc, step)
            logits_q = q
        elif step.op == G.SOFTMAX:
            z = dequant(logits_q, model.act["logits"]).astype(np.float64)
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs = (e / e.sum(axis=1, keepdims=True)).astype(np.float32)
    if want_logits:
        return probs, logits_q
    return probs


# ---------------------------------------------------------------------------
# persistence / size accounting


def _float_records(spec, params):
    del spec
    return [TensorRecord(k, np.asarray(v, dtype=np.float32))
            for k, v in params.items()]


def _quantized_records(model):
    recs = []
    for l in model.spec.layers:
        if l.kind not in (G.CONV, G.DENSE):
            continue
        qp = model.wq[l.name]
        recs.append(TensorRecord(f"{l.name}.w",
                                 model.weights[f"{l.name}.w"],
                                 qp.scale, qp.zero_point))
        recs.append(TensorRecord(f"{l.name}.b",
                                 model.weights[f"{l.name}.b"]))
    for name, qp in model.act.items():
        recs.append(TensorRecord(f"act:{name}", np.zeros((0,), np.int8),
                                 qp.scale, qp.zero_point))
    return recs


def model_size_bytes(model):
    """Serialized container size.

    ``model`` is either a QuantizedModel or a (spec, params) pair for
    the float representation.
    """
    if isinstance(model, QuantizedModel):
        blob = serialize(G.spec_to_text(model.spec), _quantized_records(model))
    else:
        spec, params = model
        blob = serialize(G.spec_to_text(spec), _float_records(spec, params))
    return len(blob)


def save_quantized(model, path):
    return save_records(path, G.spec_to_text(model.spec),
                        _quantized_records(model))


def load_quantized(path):
    spec_text, records = load_records(path)
    spec = G.spec_from_text(spec_text)
    weights = {}
    wq = {}
    act = {}
    for rec in records:
        if rec.name.startswith("act:"):
            act[rec.name[4:]] = QuantParams(rec.scale, rec.zero_point)
        elif rec.name.endswith(".w"):
            weights[rec.name] = rec.data
            wq[rec.name[:-2]] = QuantParams(rec.scale, rec.zero_point)
        else:
            weights[rec.name] = rec.data
    model = QuantizedModel(spec=spec, weights=weights, wq=wq, act=act)
    model.schedule = build_schedule(spec, wq, act)
    return model


def save_float(spec, params, path):
    return save_records(path, G.spec_to_text(spec),
                        _float_records(spec, params))


def load_float(path):
    spec_text, records = load_records(path)
    spec = G.spec_from_text(spec_text)
    return spec, {rec.name: rec.data for rec in records}
