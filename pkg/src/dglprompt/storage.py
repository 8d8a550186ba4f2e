"""Flat little-endian binary container shared by backbone, checkpoint and dataset files.

Layout::

    magic      4 bytes   ("DGLB", "DGLP" or "DGLD")
    version    u32
    n_fields   u32
    field*     name_len u32, UTF-8 name, type u8, value
               type 0: u32, type 1: f64, type 2: u32 length + raw bytes
    n_tensors  u32
    tensor*    name_len u32, UTF-8 name, dtype u8 (0: f64, 1: u32),
               ndim u32, dims u32 * ndim, payload (little-endian, row-major)
"""

from __future__ import annotations

import io
import struct

import numpy as np

VERSION = 1

_U32, _F64, _BYTES = 0, 1, 2
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u4")}


class FormatError(ValueError):
    pass


def _put_name(buf, name: str) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def encode(magic: bytes, fields: dict, tensors: dict) -> bytes:
    """Serialize header ``fields`` and named arrays.

    Field values may be ``int`` or ``bool`` (u32), ``float`` (f64) or
    ``bytes``. Arrays with an unsigned/signed integer dtype are stored as u32,
    anything else as f64.
    """
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<II", VERSION, len(fields)))
    for name, value in fields.items():
        _put_name(buf, name)
        if isinstance(value, (bool, int, np.integer)):
            if not 0 <= int(value) < 2**32:
                raise ValueError(f"field {name}={value} does not fit in u32")
            buf.write(struct.pack("<BI", _U32, int(value)))
        elif isinstance(value, (float, np.floating)):
            buf.write(struct.pack("<Bd", _F64, float(value)))
        elif isinstance(value, (bytes, bytearray)):
            buf.write(struct.pack("<BI", _BYTES, len(value)))
            buf.write(bytes(value))
        else:
            raise TypeError(f"field {name}: unsupported type {type(value).__name__}")
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "iub":
            if arr.size and (arr.min() < 0 or arr.max() >= 2**32):
                raise ValueError(f"tensor {name} has values outside u32")
            code = 1
        else:
            code = 0
        _put_name(buf, name)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("truncated file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def decode(blob: bytes, magic: bytes) -> tuple[dict, dict]:
    """Inverse of :func:`encode`; returns ``(fields, tensors)``."""
    r = _Reader(blob)
    got = r.take(4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version, n_fields = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    fields = {}
    for _ in range(n_fields):
        name = r.name()
        (kind,) = r.unpack("<B")
        if kind == _U32:
            (fields[name],) = r.unpack("<I")
        elif kind == _F64:
            (fields[name],) = r.unpack("<d")
        elif kind == _BYTES:
            (n,) = r.unpack("<I")
            fields[name] = r.take(n)
        else:
            raise FormatError(f"field {name}: unknown type code {kind}")
    (n_tensors,) = r.unpack("<I")
    tensors = {}
    for _ in range(n_tensors):
        name = r.name()
        code, ndim = r.unpack("<BI")
        if code not in _DTYPES:
            raise FormatError(f"tensor {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(np.float64) if code == 0 else arr.astype(np.int64)
    if r.pos != len(blob):
        raise FormatError("trailing bytes after last tensor")
    return fields, tensors


def write_file(path, magic: bytes, fields: dict, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(magic, fields, tensors))


def read_file(path, magic: bytes) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return decode(fh.read(), magic)


# --- config header helpers -------------------------------------------------


def config_fields(cfg) -> dict:
    """Header fields for a ModelConfig: ints/bools as u32, floats as f64, enums as indices."""
    from .config import ENUMS

    out = {}
    for key, value in cfg.to_dict().items():
        if key in ENUMS:
            out[key] = ENUMS[key].index(value)
        else:
            out[key] = value
    return out


def config_from_fields(fields: dict):
    from .config import ENUMS, ModelConfig

    kw = {}
    for f in ModelConfig.__dataclass_fields__.values():
        if f.name not in fields:
            raise FormatError(f"header lacks config field {f.name}")
        value = fields[f.name]
        if f.name in ENUMS:
            value = ENUMS[f.name][value]
        elif f.type in ("bool", bool):
            value = bool(value)
        kw[f.name] = value
    return ModelConfig(**kw)
