"""Model container: magic, JSON header, little-endian array payload.

Layout::

    magic (ASCII) | u32 LE header length | UTF-8 JSON header | payload

The header carries ``"arrays": [{"name", "dtype", "shape"}, ...]`` describing
the payload in order. Only ``<f8`` and ``<i8`` arrays are written.
"""

import json
import struct

import numpy as np

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


class ModelFormatError(ValueError):
    pass


def pack(magic: bytes, header: dict, arrays: dict) -> bytes:
    specs, chunks = [], []
    for name, a in arrays.items():
        a = np.asarray(a)
        dt = "<i8" if np.issubdtype(a.dtype, np.integer) else "<f8"
        specs.append({"name": name, "dtype": dt, "shape": list(a.shape)})
        chunks.append(np.ascontiguousarray(a, dtype=_DTYPES[dt]).tobytes())
    head = json.dumps({**header, "arrays": specs}, sort_keys=True, separators=(",", ":")).encode()
    return magic + struct.pack("<I", len(head)) + head + b"".join(chunks)


def unpack(blob: bytes, magic: bytes, what: str):
    if not blob.startswith(magic):
        raise ModelFormatError(f"not a {what} file (bad magic)")
    pos = len(magic)
    if len(blob) < pos + 4:
        raise ModelFormatError(f"truncated {what} file (no header length)")
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + n:
        raise ModelFormatError(f"truncated {what} file (header)")
    try:
        header = json.loads(blob[pos : pos + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ModelFormatError(f"corrupt {what} header") from None
    pos += n
    arrays = {}
    for spec in header.pop("arrays", []):
        dt = _DTYPES.get(spec.get("dtype"))
        if dt is None:
            raise ModelFormatError(f"unsupported dtype {spec.get('dtype')!r}")
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if len(blob) < pos + nbytes:
            raise ModelFormatError(f"truncated {what} file (payload {spec['name']!r})")
        arrays[spec["name"]] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise ModelFormatError(f"{what} file has {len(blob) - pos} trailing bytes")
    return header, arrays
