"""Parameter checkpoints: a JSON header followed by raw little-endian reals.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then each
tensor's data in header order. The header lists ``name`` and ``shape`` per
tensor plus the storage ``dtype`` and free-form ``meta``.
"""

from __future__ import annotations

import json
import struct

import numpy as np

DTYPES = ("<f4", "<f8")


def save_params(path, params: dict, meta: dict | None = None, dtype: str = "<f4") -> None:
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {DTYPES}")
    names = sorted(params)
    header = {
        "dtype": dtype,
        "tensors": [{"name": n, "shape": list(np.shape(params[n]))} for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype=dtype).tobytes())


def load_params(path) -> tuple[dict, dict]:
    """Return ``(params, meta)``; arrays are float64 regardless of storage."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: bad checkpoint header ({exc})") from None
    dtype = np.dtype(header["dtype"])
    offset = 8 + hlen
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated tensor {t['name']}")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        params[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return params, header.get("meta", {})
