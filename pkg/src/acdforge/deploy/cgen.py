"""Dependency-free C source emission for the quantized network.

Emits ``model.h`` (interface, arena size, quantization constants),
``model.c`` (weight tables, a schedule with one record per deployed
layer, and a small interpreter over that schedule), and a test-vector
file of quantized input codes with their expected predictions.

The C arithmetic mirrors the reference interpreter exactly: 32-bit
accumulators, 64-bit fixed-point requantization rounding halves away
from zero, padding handled implicitly through bounds checks (a padded
position contributes zero once the input zero point is subtracted).
Arena offsets come from the memory plan; when the plan fused the front
end, the second conv carries a segment flag and the interpreter
streams it one pooling window at a time.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .. import graph as G
from ..errors import QuantError, SpecError
from .memplan import layer_io_offsets, plan_memory
from .quantize import QuantizedModel, infer_codes, quant

OPC = {G.CONV: "ACD_OP_CONV", G.RELU: "ACD_OP_RELU",
       G.MAXPOOL: "ACD_OP_MAXPOOL", G.AVGPOOL: "ACD_OP_AVGPOOL",
       G.DENSE: "ACD_OP_DENSE", G.SWAP: "ACD_OP_NOP",
       G.FLATTEN: "ACD_OP_NOP", G.SOFTMAX: "ACD_OP_NOP"}


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _array_lines(name, ctype, values, per_line=16):
    vals = [str(int(v)) for v in values]
    body = []
    for i in range(0, len(vals), per_line):
        body.append("    " + ", ".join(vals[i:i + per_line]) + ",")
    return (f"static const {ctype} {name}[{len(vals)}] = {{\n"
            + "\n".join(body) + "\n};\n")


HEADER_TEMPLATE = """\
#ifndef ACD_MODEL_H
#define ACD_MODEL_H

/* Generated int8 inference model.  Freestanding: stdint.h only.
 *
 * Rounding: requantization multiplies the 32-bit accumulator by a
 * fixed-point factor m/2^shift (m in [2^30, 2^31)) in 64-bit and
 * rounds halves away from zero; average pooling divides the centered
 * sum the same way.  All buffers live in one static arena.
 */

#include <stdint.h>

#define ACD_INPUT_LEN {i_len}
#define ACD_N_CLASSES {n_cls}
#define ACD_N_STEPS {n_steps}
#define ACD_ARENA_BYTES {arena}
#define ACD_INPUT_OFFSET {in_off}
#define ACD_LOGITS_OFFSET {logits_off}

/* quantize float input x as round(x / ACD_IN_SCALE) + ACD_IN_ZP */
#define ACD_IN_SCALE {in_scale}
#define ACD_IN_ZP {in_zp}
/* dequantize logit q as (q - ACD_LOGITS_ZP) * ACD_LOGITS_SCALE */
#define ACD_LOGITS_SCALE {logits_scale}
#define ACD_LOGITS_ZP {logits_zp}

enum {{
    ACD_OP_CONV = 0,
    ACD_OP_RELU = 1,
    ACD_OP_MAXPOOL = 2,
    ACD_OP_AVGPOOL = 3,
    ACD_OP_DENSE = 4,
    ACD_OP_NOP = 5
}};

#define ACD_F_SEGMENT 1u  /* conv streams one pooling window at a time */

typedef struct {{
    uint8_t op;
    uint8_t flags;
    const int8_t *w;
    const int32_t *b;
    int32_t in_c, in_h, in_w;
    int32_t out_c, out_h, out_w;
    int32_t kh, kw, sh, sw, ph, pw;
    int32_t zp_in, zp_out;
    int32_t m, shift;
    int32_t in_off, out_off;
}} AcdStep;

extern const AcdStep acd_steps[ACD_N_STEPS];

/* input: ACD_INPUT_LEN quantized codes; logits: ACD_N_CLASSES codes */
void acd_infer(const int8_t *input, int8_t *logits);

#endif /* ACD_MODEL_H */
"""

RUNTIME = """\
static int8_t acd_arena[ACD_ARENA_BYTES];

static int8_t acd_requant(int32_t acc, int32_t m, int32_t shift, int32_t zp)
{
    int64_t v = (int64_t)acc * m;
    int64_t half = ((int64_t)1 << shift) >> 1;
    int64_t mag = v < 0 ? -v : v;
    int64_t q = (mag + half) >> shift;
    if (v < 0)
        q = -q;
    q += zp;
    if (q < -128)
        q = -128;
    if (q > 127)
        q = 127;
    return (int8_t)q;
}

static void acd_conv(const AcdStep *s)
{
    const int8_t *x = acd_arena + s->in_off;
    int8_t *y = acd_arena + s->out_off;
    int32_t f, oh, ow, c, i, j;
    for (f = 0; f < s->out_c; f++) {
        for (oh = 0; oh < s->out_h; oh++) {
            for (ow = 0; ow < s->out_w; ow++) {
                int32_t acc = s->b[f];
                for (c = 0; c < s->in_c; c++) {
                    for (i = 0; i < s->kh; i++) {
                        int32_t ih = oh * s->sh - s->ph + i;
                        if (ih < 0 || ih >= s->in_h)
                            continue;
                        for (j = 0; j < s->kw; j++) {
                            int32_t iw = ow * s->sw - s->pw + j;
                            if (iw < 0 || iw >= s->in_w)
                                continue;
                            acc += ((int32_t)x[(c * s->in_h + ih) * s->in_w + iw]
                                    - s->zp_in)
                                 * s->w[((f * s->in_c + c) * s->kh + i) * s->kw + j];
                        }
                    }
                }
                y[(f * s->out_h + oh) * s->out_w + ow] =
                    acd_requant(acc, s->m, s->shift, s->zp_out);
            }
        }
    }
}

/* streamed conv + rectifier + row max pool; conv output never fully
 * materializes, only one pooling window of columns in the segment */
static void acd_conv_segment(const AcdStep *cs, const AcdStep *rs,
                             const AcdStep *ps)
{
    const int8_t *x = acd_arena + cs->in_off;
    int8_t *seg = acd_arena + cs->out_off;
    int8_t *y = acd_arena + ps->out_off;
    int32_t kwp = ps->kw;
    int32_t p, f, t, c, j;
    for (p = 0; p < ps->out_w; p++) {
        for (f = 0; f < cs->out_c; f++) {
            for (t = 0; t < kwp; t++) {
                int32_t ow = p * kwp + t;
                int32_t acc = cs->b[f];
                for (c = 0; c < cs->in_c; c++) {
                    for (j = 0; j < cs->kw; j++) {
                        int32_t iw = ow * cs->sw - cs->pw + j;
                        if (iw < 0 || iw >= cs->in_w)
                            continue;
                        acc += ((int32_t)x[c * cs->in_w + iw] - cs->zp_in)
                             * cs->w[(f * cs->in_c + c) * cs->kw + j];
                    }
                }
                seg[f * kwp + t] = acd_requant(acc, cs->m, cs->shift,
                                               cs->zp_out);
            }
        }
        for (f = 0; f < cs->out_c; f++) {
            int8_t mx = (int8_t)rs->zp_in;
            for (t = 0; t < kwp; t++) {
                if (seg[f * kwp + t] > mx)
                    mx = seg[f * kwp + t];
            }
            y[f * ps->out_w + p] = mx;
        }
    }
}

static void acd_relu(const AcdStep *s)
{
    int8_t *x = acd_arena + s->in_off;
    int32_t n = s->out_c * s->out_h * s->out_w;
    int32_t j;
    for (j = 0; j < n; j++) {
        if (x[j] < s->zp_in)
            x[j] = (int8_t)s->zp_in;
    }
}

static void acd_maxpool(const AcdStep *s)
{
    const int8_t *x = acd_arena + s->in_off;
    int8_t *y = acd_arena + s->out_off;
    int32_t c, oh, ow, i, j;
    for (c = 0; c < s->out_c; c++) {
        for (oh = 0; oh < s->out_h; oh++) {
            for (ow = 0; ow < s->out_w; ow++) {
                int8_t mx = -128;
                for (i = 0; i < s->kh; i++) {
                    for (j = 0; j < s->kw; j++) {
                        int8_t v = x[(c * s->in_h + oh * s->kh + i) * s->in_w
                                     + ow * s->kw + j];
                        if (v > mx)
                            mx = v;
                    }
                }
                y[(c * s->out_h + oh) * s->out_w + ow] = mx;
            }
        }
    }
}

static void acd_avgpool(const AcdStep *s)
{
    const int8_t *x = acd_arena + s->in_off;
    int8_t *y = acd_arena + s->out_off;
    int32_t count = s->kh * s->kw;
    int32_t c, oh, ow, i, j;
    for (c = 0; c < s->out_c; c++) {
        for (oh = 0; oh < s->out_h; oh++) {
            for (ow = 0; ow < s->out_w; ow++) {
                int32_t sum = 0;
                for (i = 0; i < s->kh; i++) {
                    for (j = 0; j < s->kw; j++) {
                        sum += (int32_t)x[(c * s->in_h + oh * s->kh + i)
                                          * s->in_w + ow * s->kw + j]
                               - s->zp_in;
                    }
                }
                {
                    int32_t mag = sum < 0 ? -sum : sum;
                    int32_t avg = (mag + count / 2) / count;
                    if (sum < 0)
                        avg = -avg;
                    avg += s->zp_out;
                    if (avg < -128)
                        avg = -128;
                    if (avg > 127)
                        avg = 127;
                    y[(c * s->out_h + oh) * s->out_w + ow] = (int8_t)avg;
                }
            }
        }
    }
}

static void acd_dense(const AcdStep *s)
{
    const int8_t *x = acd_arena + s->in_off;
    int8_t *y = acd_arena + s->out_off;
    int32_t n = s->in_c * s->in_h * s->in_w;
    int32_t f, j;
    for (f = 0; f < s->out_c; f++) {
        int32_t acc = s->b[f];
        for (j = 0; j < n; j++)
            acc += ((int32_t)x[j] - s->zp_in) * s->w[f * n + j];
        y[f] = acd_requant(acc, s->m, s->shift, s->zp_out);
    }
}

void acd_infer(const int8_t *input, int8_t *logits)
{
    int32_t i, j;
    for (j = 0; j < ACD_INPUT_LEN; j++)
        acd_arena[ACD_INPUT_OFFSET + j] = input[j];
    for (i = 0; i < ACD_N_STEPS; i++) {
        const AcdStep *s = &acd_steps[i];
        switch (s->op) {
        case ACD_OP_CONV:
            if (s->flags & ACD_F_SEGMENT) {
                acd_conv_segment(s, &acd_steps[i + 1], &acd_steps[i + 2]);
                i += 2;
            } else {
                acd_conv(s);
            }
            break;
        case ACD_OP_RELU:
            acd_relu(s);
            break;
        case ACD_OP_MAXPOOL:
            acd_maxpool(s);
            break;
        case ACD_OP_AVGPOOL:
            acd_avgpool(s);
            break;
        case ACD_OP_DENSE:
            acd_dense(s);
            break;
        default:
            break;
        }
    }
    for (j = 0; j < ACD_N_CLASSES; j++)
        logits[j] = acd_arena[ACD_LOGITS_OFFSET + j];
}
"""


def _cname(layer_name, suffix):
    return f"acd_{suffix}_{layer_name}"


def emit_c_source(model, out_dir, plan=None):
    """Write model.h and model.c; returns {"header": path, "source": path}.

    ``plan`` defaults to the fused arena layout for the model's graph.
    """
    if not isinstance(model, QuantizedModel) or not model.schedule:
        raise QuantError("C emission needs a quantized model with a schedule")
    spec = model.spec
    if plan is None:
        plan = plan_memory(spec, mode="fused")
    offsets = dict()
    io = layer_io_offsets(spec, plan)
    for name, in_off, out_off in io:
        offsets[name] = (in_off, out_off)
    by_name = {b.name: b for b in plan.buffers}

    dense_names = [l.name for l in spec.layers if l.kind == G.DENSE]
    if len(dense_names) != 1:
        raise SpecError("expected exactly one dense layer")
    logits_off = by_name[dense_names[0]].offset

    arrays = []
    step_rows = []
    shapes = dict(G.propagate_shapes(spec))
    for step in model.schedule:
        in_off, out_off = offsets[step.name]
        w_ref = b_ref = "0"
        flags = "0"
        if step.op in (G.CONV, G.DENSE):
            w = model.weights[f"{step.name}.w"]
            b = model.weights[f"{step.name}.b"]
            arrays.append(_array_lines(_cname(step.name, "w"), "int8_t",
                                       w.ravel()))
            arrays.append(_array_lines(_cname(step.name, "b"), "int32_t",
                                       b.ravel()))
            w_ref = _cname(step.name, "w")
            b_ref = _cname(step.name, "b")
            buf = by_name[step.name]
            nominal = np.prod(shapes[step.name])
            if step.op == G.CONV and buf.nbytes < nominal:
                flags = "ACD_F_SEGMENT"
        ic, ih, iw = step.in_shape
        oc, oh, ow = step.out_shape
        kh, kw = step.kernel
        sh, sw = step.stride
        ph, pw = step.pad
        step_rows.append(
            f"    {{{OPC[step.op]}, {flags}, {w_ref}, {b_ref}, "
            f"{ic}, {ih}, {iw}, {oc}, {oh}, {ow}, "
            f"{kh}, {kw}, {sh}, {sw}, {ph}, {pw}, "
            f"{step.zp_in}, {step.zp_out}, {step.m}, {step.shift}, "
            f"{in_off}, {out_off}}},")

    in_qp = model.act["input"]
    lg_qp = model.act["logits"]
    header = HEADER_TEMPLATE.format(
        i_len=spec.i_len, n_cls=spec.n_cls, n_steps=len(model.schedule),
        arena=plan.peak_bytes, in_off=by_name["input"].offset,
        logits_off=logits_off,
        in_scale=f"{in_qp.scale:.17g}", in_zp=in_qp.zero_point,
        logits_scale=f"{lg_qp.scale:.17g}", logits_zp=lg_qp.zero_point)

    source = "\n".join([
        "/* Generated int8 inference model. */",
        '#include "model.h"',
        "",
        "".join(arrays),
        f"const AcdStep acd_steps[ACD_N_STEPS] = {{",
        "\n".join(step_rows),
        "};",
        "",
        RUNTIME,
    ])

    os.makedirs(out_dir, exist_ok=True)
    hpath = os.path.join(out_dir, "model.h")
    cpath = os.path.join(out_dir, "model.c")
    _atomic_write(hpath, header)
    _atomic_write(cpath, source)
    return {"header": hpath, "source": cpath}


def make_test_vectors(model, path, n=10, seed=0):
    """Write n lines of "<hex input codes> <expected class>".

    Expectations come from the reference interpreter run on the exact
    codes written, so a C port can check bit-level agreement.
    """
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-1.0, 1.0, size=(n, model.spec.i_len)).astype(np.float32)
    codes = quant(xs, model.act["input"])
    probs = infer_codes(model, codes)
    preds = probs.argmax(axis=1)
    lines = [codes[i].tobytes().hex() + f" {int(preds[i])}\n"
             for i in range(n)]
    _atomic_write(path, "".join(lines))
    return path
