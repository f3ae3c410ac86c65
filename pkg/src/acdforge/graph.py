"""Network descriptions for the strided raw-audio CNN family.

A ``NetworkSpec`` is a flat, ordered list of layer hyperparameters; no
weights live here.  The family has a fixed skeleton: a two-conv
frequency-extraction front end working directly on the waveform, a
non-overlapping max pool that sets the frame rate, an axis swap that
turns the front end's channels into the height of a 2-D map, and a
VGG-style body of shape-preserving 3x3 convolutions with halving pools.

The module owns the closed-form accounting (filters, parameters,
multiply-accumulates) and the structural surgery used by channel
pruning.  Counting conventions: parameters are conv weights+biases,
batchnorm scale+shift, and dense weights+biases; MACs count conv and
dense work only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import SpecError

SPEC_VERSION = 1

CONV = "conv"
BATCHNORM = "batchnorm"
RELU = "relu"
MAXPOOL = "maxpool"
AVGPOOL = "avgpool"
SWAP = "swap"
DROPOUT = "dropout"
FLATTEN = "flatten"
DENSE = "dense"
SOFTMAX = "softmax"

_KINDS = (CONV, BATCHNORM, RELU, MAXPOOL, AVGPOOL, SWAP, DROPOUT,
          FLATTEN, DENSE, SOFTMAX)


@dataclass
class LayerSpec:
    kind: str
    name: str
    filters: int = 0            # conv out-channels; batchnorm channel count
    in_channels: int = 0
    kernel: tuple = (0, 0)      # conv / pool
    stride: tuple = (1, 1)
    pad: tuple = (0, 0)
    rate: float = 0.0           # dropout keep-out fraction
    in_dim: int = 0             # dense
    out_dim: int = 0


@dataclass
class NetworkSpec:
    i_len: int
    sr: int
    n_cls: int
    base_width: int
    layers: list = field(default_factory=list)

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise SpecError(f"no layer named {name!r}")

    def conv_layers(self):
        return [l for l in self.layers if l.kind == CONV]


# ---------------------------------------------------------------------------
# pool sizing rules


def sfeb_pool_size(i_len, sr, w):
    """Kernel width of the front-end max pool.

    The pool reduces the conv2 output to one column per 10 ms of audio:
    with ``frames = (i_len / sr) * 100`` the kernel is w / frames,
    rounded to the nearest integer (half up), floored at 1.
    """
    if i_len <= 0 or sr <= 0 or w <= 0:
        raise SpecError(f"sfeb_pool_size: bad arguments ({i_len}, {sr}, {w})")
    frames = (i_len / sr) * 1000.0 / 10.0
    return max(1, int(w / frames + 0.5))


def tfeb_pool_sizes(h0, w0, n_pools):
    """Per-pool kernels that drive an (h0, w0) map down to (1, 1).

    Each axis halves (kernel 2) while its extent exceeds 1, except that
    the final pool's kernel equals whatever extent remains, collapsing
    the axis in one step.  An axis already at 1 gets kernel 1.  Extents
    update by floor division, mirroring the pooling kernels.
    """
    if h0 < 1 or w0 < 1 or n_pools < 1:
        raise SpecError(f"tfeb_pool_sizes: bad arguments ({h0}, {w0}, {n_pools})")

    def axis_kernel(x, last):
        if last:
            return x
        if x == 1:
            return 1
        return 2

    kernels = []
    h, w = h0, w0
    for i in range(1, n_pools + 1):
        kh = axis_kernel(h, i == n_pools)
        kw = axis_kernel(w, i == n_pools)
        kernels.append((kh, kw))
        h //= kh
        w //= kw
    if (h, w) != (1, 1):
        raise SpecError(f"tfeb_pool_sizes: chain left extent ({h}, {w})")
    return kernels


# ---------------------------------------------------------------------------
# builders


def build_acdnet_custom(i_len, sr, n_cls, conv_filters, dropout_rate=0.2,
                        base_width=0):
    """Build the family skeleton with explicit per-conv filter counts.

    ``conv_filters`` lists the twelve conv widths front to back.  The
    final conv usually matches ``n_cls`` but may differ (pruned models
    keep their reduced width; the dense layer still maps to ``n_cls``).
    """
    if len(conv_filters) != 12:
        raise SpecError(f"need 12 conv filter counts, got {len(conv_filters)}")
    if any(f < 1 for f in conv_filters):
        raise SpecError("conv filter counts must be >= 1")
    f = list(conv_filters)

    w = (i_len - 9) // 2 + 1
    if w < 5:
        raise SpecError(f"input length {i_len} too short for the front end")
    w = (w - 5) // 2 + 1
    ps = sfeb_pool_size(i_len, sr, w)
    if w // ps < 1:
        raise SpecError(f"front-end pool {ps} swallows the whole width {w}")
    w //= ps
    h = f[1]  # front-end channels become the body's input height

    pools = tfeb_pool_sizes(h, w, 6)

    layers = []

    def conv(idx, in_ch, kernel, stride=(1, 1), pad=(0, 0)):
        layers.append(LayerSpec(CONV, f"conv{idx}", filters=f[idx - 1],
                                in_channels=in_ch, kernel=kernel,
                                stride=stride, pad=pad))
        layers.append(LayerSpec(BATCHNORM, f"bn{idx}", filters=f[idx - 1]))
        layers.append(LayerSpec(RELU, f"relu{idx}"))

    def pool(kind, idx, kernel):
        if kernel == (1, 1):
            return  # identity pools are never materialized
        layers.append(LayerSpec(kind, f"{kind}{idx}", kernel=kernel))

    conv(1, 1, (1, 9), stride=(1, 2))
    conv(2, f[0], (1, 5), stride=(1, 2))
    pool(MAXPOOL, 1, (1, ps))
    layers.append(LayerSpec(SWAP, "swap1"))
    conv(3, 1, (3, 3), pad=(1, 1))
    pool(MAXPOOL, 2, pools[0])
    conv(4, f[2], (3, 3), pad=(1, 1))
    conv(5, f[3], (3, 3), pad=(1, 1))
    pool(MAXPOOL, 3, pools[1])
    conv(6, f[4], (3, 3), pad=(1, 1))
    conv(7, f[5], (3, 3), pad=(1, 1))
    pool(MAXPOOL, 4, pools[2])
    conv(8, f[6], (3, 3), pad=(1, 1))
    conv(9, f[7], (3, 3), pad=(1, 1))
    pool(MAXPOOL, 5, pools[3])
    conv(10, f[8], (3, 3), pad=(1, 1))
    conv(11, f[9], (3, 3), pad=(1, 1))
    pool(MAXPOOL, 6, pools[4])
    if dropout_rate > 0:
        layers.append(LayerSpec(DROPOUT, "drop1", rate=dropout_rate))
    conv(12, f[10], (1, 1))
    pool(AVGPOOL, 1, pools[5])
    layers.append(LayerSpec(FLATTEN, "flatten1"))
    layers.append(LayerSpec(DENSE, "dense1", in_dim=f[11], out_dim=n_cls))
    layers.append(LayerSpec(SOFTMAX, "softmax1"))

    spec = NetworkSpec(i_len=i_len, sr=sr, n_cls=n_cls,
                       base_width=base_width, layers=layers)
    propagate_shapes(spec)  # fail fast on impossible geometry
    return spec


def build_acdnet(i_len=30225, sr=20000, n_cls=50, base_width=8):
    """Build the standard doubling-ladder network.

    Filter widths follow the ladder x, 8x, 4x, 8x, 8x, 16x, 16x, 32x,
    32x, 64x, 64x, then a 1x1 conv down to ``n_cls``.
    """
    x = base_width
    if x < 1:
        raise SpecError(f"base_width must be >= 1, got {x}")
    ladder = [x, 8 * x, 4 * x, 8 * x, 8 * x, 16 * x, 16 * x,
              32 * x, 32 * x, 64 * x, 64 * x, n_cls]
    return build_acdnet_custom(i_len, sr, n_cls, ladder, base_width=x)


# ---------------------------------------------------------------------------
# shape propagation and accounting


def propagate_shapes(spec):
    """Walk the layer list and return [(name, (c, h, w))] output shapes.

    The input is a single waveform seen as (1, 1, i_len).  Dense and
    softmax outputs report as (d, 1, 1).  Raises ``SpecError`` on any
    inconsistency, naming the offending layer.
    """
    c, h, w = 1, 1, spec.i_len
    trace = []
    flat = None
    for l in spec.layers:
        if l.kind == CONV:
            if l.in_channels != c:
                raise SpecError(f"{l.name}: expects {l.in_channels} channels, "
                                f"gets {c}")
            kh, kw = l.kernel
            sh, sw = l.stride
            ph, pw = l.pad
            ih, iw = h + 2 * ph, w + 2 * pw
            if ih < kh or iw < kw:
                raise SpecError(f"{l.name}: kernel ({kh},{kw}) larger than "
                                f"padded input ({ih},{iw})")
            c = l.filters
            h = (ih - kh) // sh + 1
            w = (iw - kw) // sw + 1
        elif l.kind == BATCHNORM:
            if l.filters != c:
                raise SpecError(f"{l.name}: {l.filters} channels, map has {c}")
        elif l.kind in (MAXPOOL, AVGPOOL):
            kh, kw = l.kernel
            if h < kh or w < kw:
                raise SpecError(f"{l.name}: kernel ({kh},{kw}) larger than "
                                f"input ({h},{w})")
            h //= kh
            w //= kw
        elif l.kind == SWAP:
            c, h = h, c
        elif l.kind == FLATTEN:
            flat = c * h * w
            c, h, w = flat, 1, 1
        elif l.kind == DENSE:
            if flat is None:
                raise SpecError(f"{l.name}: dense before flatten")
            if l.in_dim != c:
                raise SpecError(f"{l.name}: expects {l.in_dim} inputs, gets {c}")
            c = l.out_dim
        elif l.kind in (RELU, DROPOUT, SOFTMAX):
            pass
        else:
            raise SpecError(f"{l.name}: unknown layer kind {l.kind!r}")
        trace.append((l.name, (c, h, w)))
    return trace


def count_filters(spec):
    """Total conv filters across the network."""
    return sum(l.filters for l in spec.layers if l.kind == CONV)


def count_params(spec):
    """Learnable parameter count: conv w+b, batchnorm scale+shift, dense w+b."""
    total = 0
    for l in spec.layers:
        if l.kind == CONV:
            kh, kw = l.kernel
            total += l.filters * l.in_channels * kh * kw + l.filters
        elif l.kind == BATCHNORM:
            total += 2 * l.filters
        elif l.kind == DENSE:
            total += l.in_dim * l.out_dim + l.out_dim
    return total


def count_flops(spec):
    """Multiply-accumulate count of the conv and dense layers."""
    shapes = propagate_shapes(spec)
    total = 0
    for l, (_, (c, h, w)) in zip(spec.layers, shapes):
        if l.kind == CONV:
            kh, kw = l.kernel
            total += l.filters * l.in_channels * kh * kw * h * w
        elif l.kind == DENSE:
            total += l.in_dim * l.out_dim
    return total


# ---------------------------------------------------------------------------
# pruning surgery


def rewire_after_channel_removal(spec, conv_name, channel_idx):
    """Return a new spec with one filter removed from ``conv_name``.

    Downstream bookkeeping:
      * the conv's batchnorm shrinks with it;
      * the next conv (skipping shape-neutral layers) loses one input
        channel;
      * a conv feeding the axis swap changes the body's input height
        instead, so every body pool kernel is recomputed and pools that
        become (1, 1) are dropped;
      * a conv feeding the classifier head re-derives the dense input
        width from the flattened pool output.
    """
    idx = None
    for i, l in enumerate(spec.layers):
        if l.name == conv_name:
            idx = i
            break
    if idx is None:
        raise SpecError(f"no layer named {conv_name!r}")
    conv = spec.layers[idx]
    if conv.kind != CONV:
        raise SpecError(f"{conv_name} is a {conv.kind} layer, not a conv")
    if not (0 <= channel_idx < conv.filters):
        raise SpecError(f"{conv_name}: channel {channel_idx} out of range "
                        f"0..{conv.filters - 1}")
    if conv.filters <= 1:
        raise SpecError(f"{conv_name}: cannot remove the last filter")

    layers = [replace(l) for l in spec.layers]
    layers[idx] = replace(conv, filters=conv.filters - 1)

    j = idx + 1
    touched_swap = False
    while j < len(layers):
        l = layers[j]
        if l.kind == BATCHNORM and l.filters == conv.filters:
            layers[j] = replace(l, filters=conv.filters - 1)
        elif l.kind == CONV:
            layers[j] = replace(l, in_channels=l.in_channels - 1)
            break
        elif l.kind == SWAP:
            touched_swap = True
            break
        elif l.kind == DENSE:
            break
        j += 1

    new = NetworkSpec(i_len=spec.i_len, sr=spec.sr, n_cls=spec.n_cls,
                      base_width=spec.base_width, layers=layers)

    if touched_swap:
        _recompute_body_pools(new, j)

    _refresh_dense_input(new)
    propagate_shapes(new)
    return new


def _recompute_body_pools(spec, swap_idx):
    # height entering the body changed; rebuild the halving schedule
    c, h, w = 1, 1, spec.i_len
    for l in spec.layers[:swap_idx]:
        if l.kind == CONV:
            kh, kw = l.kernel
            ph, pw = l.pad
            c = l.filters
            h = (h + 2 * ph - kh) // l.stride[0] + 1
            w = (w + 2 * pw - kw) // l.stride[1] + 1
        elif l.kind in (MAXPOOL, AVGPOOL):
            h //= l.kernel[0]
            w //= l.kernel[1]
    h0, w0 = c, w  # extent after the axis swap

    pool_idxs = [i for i in range(swap_idx + 1, len(spec.layers))
                 if spec.layers[i].kind in (MAXPOOL, AVGPOOL)]
    if not pool_idxs:
        return
    kernels = tfeb_pool_sizes(h0, w0, len(pool_idxs))
    drop = []
    for i, k in zip(pool_idxs, kernels):
        if k == (1, 1):
            drop.append(i)
        else:
            spec.layers[i] = replace(spec.layers[i], kernel=k)
    for i in reversed(drop):
        del spec.layers[i]


def _refresh_dense_input(spec):
    c, h, w = 1, 1, spec.i_len
    flat = None
    for i, l in enumerate(spec.layers):
        if l.kind == CONV:
            kh, kw = l.kernel
            ph, pw = l.pad
            c = l.filters
            h = (h + 2 * ph - kh) // l.stride[0] + 1
            w = (w + 2 * pw - kw) // l.stride[1] + 1
        elif l.kind in (MAXPOOL, AVGPOOL):
            h //= l.kernel[0]
            w //= l.kernel[1]
        elif l.kind == SWAP:
            c, h = h, c
        elif l.kind == FLATTEN:
            flat = c * h * w
        elif l.kind == DENSE and flat is not None:
            if l.in_dim != flat:
                spec.layers[i] = replace(l, in_dim=flat)


# ---------------------------------------------------------------------------
# text form


def spec_to_text(spec):
    """Serialize to a stable, human-readable line format."""
    out = [f"v{SPEC_VERSION}",
           f"net i_len={spec.i_len} sr={spec.sr} n_cls={spec.n_cls} "
           f"base_width={spec.base_width}"]
    for l in spec.layers:
        if l.kind == CONV:
            out.append(f"conv name={l.name} filters={l.filters} "
                       f"in={l.in_channels} kernel={l.kernel[0]}x{l.kernel[1]} "
                       f"stride={l.stride[0]}x{l.stride[1]} "
                       f"pad={l.pad[0]}x{l.pad[1]}")
        elif l.kind == BATCHNORM:
            out.append(f"batchnorm name={l.name} channels={l.filters}")
        elif l.kind in (MAXPOOL, AVGPOOL):
            out.append(f"{l.kind} name={l.name} kernel={l.kernel[0]}x{l.kernel[1]}")
        elif l.kind == DROPOUT:
            out.append(f"dropout name={l.name} rate={l.rate!r}")
        elif l.kind == DENSE:
            out.append(f"dense name={l.name} in={l.in_dim} out={l.out_dim}")
        else:
            out.append(f"{l.kind} name={l.name}")
    return "\n".join(out) + "\n"


def _pair(text, what):
    try:
        a, b = text.split("x")
        return int(a), int(b)
    except ValueError:
        raise SpecError(f"bad {what} value {text!r}") from None


def spec_from_text(text):
    """Parse the output of ``spec_to_text``."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("v"):
        raise SpecError("missing version line")
    try:
        version = int(lines[0][1:])
    except ValueError:
        raise SpecError(f"bad version line {lines[0]!r}") from None
    if version != SPEC_VERSION:
        raise SpecError(f"unsupported spec version {version}")
    if len(lines) < 2 or not lines[1].startswith("net "):
        raise SpecError("missing net header line")

    def fields(line):
        parts = line.split()
        kv = {}
        for p in parts[1:]:
            if "=" not in p:
                raise SpecError(f"bad field {p!r} in line {line!r}")
            k, v = p.split("=", 1)
            kv[k] = v
        return parts[0], kv

    _, head = fields(lines[1])
    try:
        spec = NetworkSpec(i_len=int(head["i_len"]), sr=int(head["sr"]),
                           n_cls=int(head["n_cls"]),
                           base_width=int(head["base_width"]))
    except (KeyError, ValueError) as e:
        raise SpecError(f"bad net header: {e}") from None

    for ln in lines[2:]:
        kind, kv = fields(ln)
        if kind not in _KINDS:
            raise SpecError(f"unknown layer kind {kind!r}")
        name = kv.get("name")
        if not name:
            raise SpecError(f"layer line missing name: {ln!r}")
        try:
            if kind == CONV:
                l = LayerSpec(CONV, name, filters=int(kv["filters"]),
                              in_channels=int(kv["in"]),
                              kernel=_pair(kv["kernel"], "kernel"),
                              stride=_pair(kv["stride"], "stride"),
                              pad=_pair(kv["pad"], "pad"))
            elif kind == BATCHNORM:
                l = LayerSpec(BATCHNORM, name, filters=int(kv["channels"]))
            elif kind in (MAXPOOL, AVGPOOL):
                l = LayerSpec(kind, name, kernel=_pair(kv["kernel"], "kernel"))
            elif kind == DROPOUT:
                l = LayerSpec(DROPOUT, name, rate=float(kv["rate"]))
            elif kind == DENSE:
                l = LayerSpec(DENSE, name, in_dim=int(kv["in"]),
                              out_dim=int(kv["out"]))
            else:
                l = LayerSpec(kind, name)
        except (KeyError, ValueError) as e:
            raise SpecError(f"bad layer line {ln!r}: {e}") from None
        spec.layers.append(l)
    return spec
