"""Binary tensor record format (``.styf``).

Layout, all little-endian::

    b"STYF"  u16 version
    repeated until EOF:
        u8 name_len, name bytes (utf-8), u8 rank, rank x u32 dims,
        float32 payload in C order

Arrays are stored as float32; a round trip through ``write_tensors`` and
``read_tensors`` is bit exact for float32 data.
"""

import io
import struct
from collections import OrderedDict

import numpy as np

from styler.errors import DataError, InvalidInput

MAGIC = b"STYF"
VERSION = 1


def dumps(tensors):
    """Serialize a mapping of name -> array into STYF bytes (order preserved)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if not 0 < len(raw) < 256:
            raise InvalidInput(f"tensor name must be 1..255 bytes: {name!r}")
        a = np.asarray(arr, dtype="<f4").copy(order="C")
        if a.ndim > 255:
            raise InvalidInput(f"rank too large for {name!r}")
        buf.write(struct.pack("<B", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", a.ndim))
        if a.ndim:
            buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes(order="C"))
    return buf.getvalue()


def loads(data):
    """Parse STYF bytes into an ordered name -> float32 array mapping."""
    if data[:4] != MAGIC:
        raise DataError("not a STYF file (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise DataError(f"unsupported STYF version {version}")
    pos = 6
    out = OrderedDict()
    n = len(data)
    try:
        while pos < n:
            (name_len,) = struct.unpack_from("<B", data, pos)
            pos += 1
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos) if rank else ()
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > n:
                raise DataError(f"truncated payload for tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            out[name] = arr.astype(np.float32, copy=True)
            pos += nbytes
    except struct.error as exc:
        raise DataError(f"truncated STYF record: {exc}") from exc
    return out


def write_tensors(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def read_tensors(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
