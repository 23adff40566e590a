"""Shared test helpers.

``encode_archive`` is an independent implementation of the on-disk format
(struct + json only); tests use it to produce files the production reader
must decode, so reader and writer are never validated against themselves.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import ml_dtypes
import numpy as np
import pytest

_NUMPY_BY_CODE = {
    "F16": np.dtype("<f2"),
    "BF16": np.dtype(ml_dtypes.bfloat16),
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
    "I8": np.dtype("<i1"),
    "I16": np.dtype("<i2"),
    "I32": np.dtype("<i4"),
    "I64": np.dtype("<i8"),
    "U8": np.dtype("<u1"),
    "BOOL": np.dtype(np.bool_),
}


def encode_archive(
    tensors: dict[str, tuple[str, tuple[int, ...], bytes]],
    metadata: dict[str, str] | None = None,
    *,
    corrupt_offsets: dict[str, tuple[int, int]] | None = None,
) -> bytes:
    """Build archive bytes from (dtype code, shape, raw buffer) entries.

    ``corrupt_offsets`` lets error-path tests plant inconsistent ranges.
    """
    header: dict[str, object] = {}
    payload = b""
    offset = 0
    for name, (code, shape, buf) in tensors.items():
        begin, end = offset, offset + len(buf)
        if corrupt_offsets and name in corrupt_offsets:
            begin, end = corrupt_offsets[name]
        header[name] = {
            "dtype": code,
            "shape": list(shape),
            "data_offsets": [begin, end],
        }
        payload += buf
        offset += len(buf)
    if metadata is not None:
        header["__metadata__"] = metadata
    hbytes = json.dumps(header).encode("utf-8")
    return struct.pack("<Q", len(hbytes)) + hbytes + payload


def write_archive(path: Path, tensors, metadata=None, **kwargs) -> Path:
    path.write_bytes(encode_archive(tensors, metadata, **kwargs))
    return path


def tensor_entry(arr: np.ndarray, code: str) -> tuple[str, tuple[int, ...], bytes]:
    return (code, arr.shape, np.ascontiguousarray(arr).tobytes())


def random_array(rng: np.random.Generator, code: str, shape: tuple[int, ...]) -> np.ndarray:
    dt = _NUMPY_BY_CODE[code]
    size = int(np.prod(shape)) if shape else 1
    if code == "BOOL":
        return rng.integers(0, 2, size=shape).astype(np.bool_)
    if code in ("I8", "I16", "I32", "I64", "U8"):
        info = np.iinfo(dt)
        return rng.integers(info.min, min(info.max, 2**31 - 1), size=shape).astype(dt)
    vals = rng.standard_normal(size).reshape(shape)
    return vals.astype(dt)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)
