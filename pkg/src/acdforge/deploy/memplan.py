"""Static arena planning for int8 inference.

Two layouts over the deployed graph (batch 1, one byte per value):

* ``naive``: every materializing layer gets a whole output buffer and
  consecutive buffers alternate between the two ends of the arena, so
  the arena equals the largest input+output pair.
* ``fused``: the two-conv front end streams.  The second conv never
  materializes; it produces one pooling window of columns at a time
  into a small segment buffer which is max-reduced immediately.  The
  front-end arena is then input + first conv output + segment + pooled
  output, stacked, and the remaining chain alternates ends as above.

Rectifier, axis swap, flatten and softmax run in place and alias their
input buffer.  Offsets are final: the generated C indexes the arena
with exactly these numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

from .. import graph as G
from ..errors import PlanError

MATERIAL = (G.CONV, G.MAXPOOL, G.AVGPOOL, G.DENSE)
ALIAS = (G.RELU, G.SWAP, G.FLATTEN, G.SOFTMAX)


@dataclass(frozen=True)
class Buffer:
    name: str
    offset: int
    nbytes: int
    first: int          # layer index that writes the buffer
    last: int           # last layer index that reads it


@dataclass
class MemoryPlan:
    mode: str
    peak_bytes: int
    buffers: list

    def buffer(self, name):
        for b in self.buffers:
            if b.name == name:
                return b
        raise PlanError(f"no buffer named {name!r}")


def _nbytes(shape):
    c, h, w = shape
    return c * h * w


def _events(spec):
    """(layer index, name, output bytes) for each materializing layer."""
    shapes = dict(G.propagate_shapes(spec))
    out = []
    for idx, l in enumerate(spec.layers):
        if l.kind in (G.BATCHNORM, G.DROPOUT):
            raise PlanError(f"{l.name}: plan the deployed graph; fold "
                            "batchnorm and strip dropout first")
        if l.kind in MATERIAL:
            out.append((idx, l.name, _nbytes(shapes[l.name])))
        elif l.kind not in ALIAS:
            raise PlanError(f"{l.name}: no memory rule for kind {l.kind!r}")
    return out


def _lifetimes(spec, events):
    """Buffer rows (name, nbytes, first, last), offsets unassigned."""
    end = len(spec.layers) - 1
    rows = []
    first_read = events[0][0] if events else end
    rows.append(("input", spec.i_len, 0, first_read))
    for k, (idx, name, nbytes) in enumerate(events):
        last = events[k + 1][0] if k + 1 < len(events) else end
        rows.append((name, nbytes, idx, last))
    return rows


def _alternate(rows, base, side, arena, placed):
    """Assign chain offsets flipping between the arena ends."""
    for name, nbytes, first, last in rows:
        off = base if side == 0 else arena - nbytes
        placed.append(Buffer(name, off, nbytes, first, last))
        side ^= 1
    return placed


def plan_memory(spec, mode="fused"):
    events = _events(spec)
    rows = _lifetimes(spec, events)

    if mode == "naive":
        peak = max(rows[i][1] + rows[i + 1][1] for i in range(len(rows) - 1)) \
            if len(rows) > 1 else rows[0][1]
        buffers = _alternate(rows, 0, 0, peak, [])
        return MemoryPlan("naive", peak, buffers)

    if mode != "fused":
        raise PlanError(f"unknown plan mode {mode!r}")

    kinds = [l.kind for l in spec.layers[:6]]
    if kinds != [G.CONV, G.RELU, G.CONV, G.RELU, G.MAXPOOL, G.SWAP]:
        raise PlanError("front-end fusion expects conv/relu/conv/relu/"
                        "maxpool/swap at the head of the graph")
    conv2 = spec.layers[2]
    pool = spec.layers[4]
    if conv2.kernel[0] != 1 or pool.kernel[0] != 1:
        raise PlanError("front-end fusion expects row convolution and "
                        "row pooling")

    seg_bytes = conv2.filters * pool.kernel[1]
    in_row, c1_row, _, p1_row = rows[:4]
    tail = rows[4:]

    stack_end = in_row[1] + c1_row[1] + seg_bytes + p1_row[1]
    pairs = [p1_row[1] + tail[0][1]] if tail else []
    pairs += [tail[i][1] + tail[i + 1][1] for i in range(len(tail) - 1)]
    peak = max([stack_end] + pairs)

    # front end stacks upward from zero; the pooled output sits at the
    # top of the arena so the rest of the chain always fits below it
    buffers = [
        Buffer("input", 0, in_row[1], in_row[2], in_row[3]),
        Buffer(c1_row[0], in_row[1], c1_row[1], c1_row[2], p1_row[2]),
        Buffer(conv2.name, in_row[1] + c1_row[1], seg_bytes, rows[2][2],
               p1_row[2]),
        Buffer(p1_row[0], peak - p1_row[1], p1_row[1], p1_row[2], p1_row[3]),
    ]
    buffers = _alternate(tail, 0, 0, peak, buffers)
    return MemoryPlan("fused", peak, buffers)


def layer_io_offsets(spec, plan):
    """Per layer (in_offset, out_offset) pairs into the arena.

    Alias layers run in place; materializing layers read the current
    buffer and write their own.
    """
    by_name = {b.name: b for b in plan.buffers}
    cur = by_name["input"]
    out = []
    for l in spec.layers:
        if l.kind in MATERIAL:
            nxt = by_name[l.name]
            out.append((l.name, cur.offset, nxt.offset))
            cur = nxt
        else:
            out.append((l.name, cur.offset, cur.offset))
    return out
