"""Binary model container.

Layout (all integers little-endian):

    magic   4 bytes  "ACDF"
    version u16
    spec    u32 length + UTF-8 network description text
    count   u32 number of tensor records

    record:
      name      u16 length + UTF-8
      dtype     u8   (0 = float32, 1 = int8, 2 = int32)
      has_quant u8   (1 -> f64 scale, i32 zero_point follow)
      ndim      u8   (up to 8 dims, u32 each)
      nbytes    u64  payload length, must equal element count * item size
      payload   nbytes bytes, C-order

Zero-element records are legal; they carry quantization parameters for
tensors that exist only at runtime (layer activations).  Serialization
sorts records by name so a given model always produces identical bytes.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from ..errors import BadMagic, ContainerError, TruncatedContainer, VersionMismatch

MAGIC = b"ACDF"
VERSION = 1
MAX_DIMS = 8

_DTYPES = {0: np.float32, 1: np.int8, 2: np.int32}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.int8): 1, np.dtype(np.int32): 2}


@dataclass
class TensorRecord:
    name: str
    data: np.ndarray
    scale: float | None = None
    zero_point: int | None = None

    @property
    def quantized(self):
        return self.scale is not None


def _pack_record(rec):
    name = rec.name.encode("utf-8")
    if len(name) > 0xFFFF:
        raise ContainerError(f"record name too long: {rec.name[:40]}...")
    arr = np.ascontiguousarray(rec.data)
    if arr.dtype not in _TAGS:
        raise ContainerError(f"{rec.name}: unsupported dtype {arr.dtype}")
    if arr.ndim > MAX_DIMS:
        raise ContainerError(f"{rec.name}: too many dimensions ({arr.ndim})")
    parts = [struct.pack("<H", len(name)), name,
             struct.pack("<BB", _TAGS[arr.dtype], 1 if rec.quantized else 0)]
    if rec.quantized:
        parts.append(struct.pack("<di", float(rec.scale), int(rec.zero_point)))
    parts.append(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        parts.append(struct.pack("<I", d))
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    parts.append(struct.pack("<Q", len(payload)))
    parts.append(payload)
    return b"".join(parts)


def serialize(spec_text, records):
    """Encode a network description and its tensors as container bytes."""
    spec_bytes = spec_text.encode("utf-8")
    out = [MAGIC, struct.pack("<H", VERSION),
           struct.pack("<I", len(spec_bytes)), spec_bytes,
           struct.pack("<I", len(records))]
    for rec in sorted(records, key=lambda r: r.name):
        out.append(_pack_record(rec))
    return b"".join(out)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.blob):
            raise TruncatedContainer(
                f"container ends inside {what} "
                f"(need {n} bytes at offset {self.off})")
        piece = self.blob[self.off:self.off + n]
        self.off += n
        return piece

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize(blob):
    """Decode container bytes back to (spec_text, [TensorRecord])."""
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise BadMagic("not a model container (magic mismatch)")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise VersionMismatch(f"container version {version}, "
                              f"reader supports {VERSION}")
    (spec_len,) = r.unpack("<I", "spec length")
    spec_text = r.take(spec_len, "spec text").decode("utf-8")
    (count,) = r.unpack("<I", "record count")
    records = []
    for _ in range(count):
        (name_len,) = r.unpack("<H", "record name length")
        name = r.take(name_len, "record name").decode("utf-8")
        tag, has_quant = r.unpack("<BB", f"{name}: dtype/quant flags")
        if tag not in _DTYPES:
            raise ContainerError(f"{name}: unknown dtype tag {tag}")
        scale = zero_point = None
        if has_quant:
            scale, zero_point = r.unpack("<di", f"{name}: quant params")
        (ndim,) = r.unpack("<B", f"{name}: ndim")
        if ndim > MAX_DIMS:
            raise ContainerError(f"{name}: too many dimensions ({ndim})")
        dims = [r.unpack("<I", f"{name}: dim")[0] for _ in range(ndim)]
        (nbytes,) = r.unpack("<Q", f"{name}: payload length")
        dtype = np.dtype(_DTYPES[tag]).newbyteorder("<")
        expect = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if nbytes != expect:
            raise ContainerError(
                f"{name}: payload of {nbytes} bytes does not match "
                f"shape {tuple(dims)} ({expect} bytes)")
        payload = r.take(nbytes, f"{name}: payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        arr = arr.astype(arr.dtype.newbyteorder("="))
        records.append(TensorRecord(name, arr, scale, zero_point))
    if r.off != len(blob):
        raise ContainerError(f"{len(blob) - r.off} trailing bytes "
                             "after the last record")
    return spec_text, records


def save_records(path, spec_text, records):
    """Serialize to a file, atomically (write-temp-then-rename)."""
    blob = serialize(spec_text, records)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".acdf-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(blob)


def load_records(path):
    with open(path, "rb") as f:
        return deserialize(f.read())
