"""Bit-exact reader/writer for checkpoint archives and sidecar tensor files.

File layout (safetensors-compatible): an 8-byte unsigned little-endian
integer ``N``, then ``N`` bytes of UTF-8 JSON header, then the data section.
The header maps tensor name -> ``{"dtype": str, "shape": [ints],
"data_offsets": [begin, end]}`` with offsets relative to the start of the
data section; the optional ``"__metadata__"`` key maps string -> string.
All numeric buffers are little-endian. Byte ranges of distinct tensors must
be disjoint and lie inside the data section; full coverage is not required.

Supported dtype codes: F16, BF16, F32, F64, I8, I16, I32, I64, U8, BOOL
(long spellings such as ``float32`` are accepted on read and normalized on
write). bfloat16 arrays use the ``ml_dtypes`` numpy extension type.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Collection, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import ml_dtypes
import numpy as np

from .errors import DtypeOverflowError, FormatError, SchemaMismatchError

_HEADER_PREFIX = struct.Struct("<Q")

# code -> (numpy dtype, is_float). All multi-byte dtypes are little-endian.
_DTYPES: dict[str, tuple[np.dtype, bool]] = {
    "F16": (np.dtype("<f2"), True),
    "BF16": (np.dtype(ml_dtypes.bfloat16), True),
    "F32": (np.dtype("<f4"), True),
    "F64": (np.dtype("<f8"), True),
    "I8": (np.dtype("<i1"), False),
    "I16": (np.dtype("<i2"), False),
    "I32": (np.dtype("<i4"), False),
    "I64": (np.dtype("<i8"), False),
    "U8": (np.dtype("<u1"), False),
    "BOOL": (np.dtype(np.bool_), False),
}

_ALIASES = {
    "float16": "F16",
    "bfloat16": "BF16",
    "float32": "F32",
    "float64": "F64",
    "int8": "I8",
    "int16": "I16",
    "int32": "I32",
    "int64": "I64",
    "uint8": "U8",
    "bool": "BOOL",
}

_NUMPY_TO_CODE = {dt: code for code, (dt, _) in _DTYPES.items()}

DTYPE_POLICIES = ("preserve", "f32", "f16", "bf16")
_POLICY_CODES = {"f32": "F32", "f16": "F16", "bf16": "BF16"}


def canonical_dtype(code: str) -> str:
    """Normalize a dtype string to its canonical code; raise on unknown."""
    c = _ALIASES.get(code, code)
    if c not in _DTYPES:
        raise FormatError(f"unknown dtype string {code!r}")
    return c


def numpy_dtype(code: str) -> np.dtype:
    return _DTYPES[canonical_dtype(code)][0]


def is_float_code(code: str) -> bool:
    return _DTYPES[canonical_dtype(code)][1]


def dtype_code_of(dtype: np.dtype) -> str:
    dt = np.dtype(dtype)
    code = _NUMPY_TO_CODE.get(dt.newbyteorder("<") if dt.byteorder == ">" else dt)
    if code is None:
        # native-order dtypes hash distinctly from explicit '<' on some numpy
        # builds; retry through the name
        code = _ALIASES.get(dt.name)
    if code is None:
        raise FormatError(f"unsupported array dtype {dt}")
    return code


@dataclass(frozen=True)
class TensorMeta:
    """Header entry for one tensor."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]


class Checkpoint:
    """Immutable ordered map of named tensors plus optional string metadata.

    Iteration order is lexicographic by name; this is the canonical order
    used by every deterministic reduction downstream. Arrays are marked
    read-only where possible.
    """

    def __init__(
        self,
        tensors: Mapping[str, np.ndarray],
        metadata: Mapping[str, str] | None = None,
    ):
        ordered: dict[str, np.ndarray] = {}
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            dtype_code_of(arr.dtype)  # reject unsupported dtypes early
            if arr.flags.owndata:
                arr.flags.writeable = False
            ordered[name] = arr
        self.tensors = ordered
        self.metadata = dict(metadata) if metadata is not None else None

    def __len__(self) -> int:
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def dtype_code(self, name: str) -> str:
        return dtype_code_of(self.tensors[name].dtype)

    def float_names(self) -> list[str]:
        return [n for n, a in self.tensors.items() if is_float_code(dtype_code_of(a.dtype))]

    def schema(self) -> tuple[tuple[str, str, tuple[int, ...]], ...]:
        return tuple((n, dtype_code_of(a.dtype), a.shape) for n, a in self.tensors.items())


@dataclass
class CompatibilityReport:
    """Per-name classification across a set of checkpoints."""

    mergeable: list[str] = field(default_factory=list)
    carry_over: list[str] = field(default_factory=list)
    mismatched: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.mismatched


def _parse_meta(name: str, entry: object, data_size: int) -> TensorMeta:
    if not isinstance(entry, dict):
        raise FormatError(f"tensor {name!r}: header entry is not an object")
    try:
        dtype, shape, offsets = entry["dtype"], entry["shape"], entry["data_offsets"]
    except KeyError as e:
        raise FormatError(f"tensor {name!r}: header entry missing {e.args[0]!r}") from None
    if not isinstance(dtype, str):
        raise FormatError(f"tensor {name!r}: dtype is not a string")
    code = canonical_dtype(dtype)
    if not isinstance(shape, list) or any(
        not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in shape
    ):
        raise FormatError(f"tensor {name!r}: shape must be a list of non-negative integers")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or any(not isinstance(o, int) or isinstance(o, bool) for o in offsets)
    ):
        raise FormatError(f"tensor {name!r}: data_offsets must be [begin, end]")
    begin, end = offsets
    if begin < 0 or begin > end:
        raise FormatError(f"tensor {name!r}: invalid byte range [{begin}, {end})")
    if end > data_size:
        raise FormatError(
            f"tensor {name!r}: truncated data section "
            f"(range ends at {end}, data section has {data_size} bytes)"
        )
    expected = int(np.prod(shape, dtype=np.int64)) * numpy_dtype(code).itemsize
    if end - begin != expected:
        raise FormatError(
            f"tensor {name!r}: byte range length {end - begin} does not match "
            f"shape/dtype ({expected} bytes expected)"
        )
    return TensorMeta(name, code, tuple(shape), (begin, end))


def _check_disjoint(metas: list[TensorMeta]) -> None:
    by_start = sorted(metas, key=lambda m: m.data_offsets)
    for prev, cur in zip(by_start, by_start[1:]):
        if prev.data_offsets[1] > cur.data_offsets[0]:
            raise FormatError(
                f"overlapping ranges: tensors {prev.name!r} and {cur.name!r}"
            )


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Read an archive file into a :class:`Checkpoint`.

    Values are zero-copy views into the file bytes, decoded per dtype.
    Rejects malformed headers, unknown dtypes, overlapping byte ranges and
    truncated data sections. NaN values are permitted here; merge
    operations reject them later.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_PREFIX.size:
        raise FormatError(f"{path}: malformed header (file shorter than length prefix)")
    (header_len,) = _HEADER_PREFIX.unpack_from(raw)
    if _HEADER_PREFIX.size + header_len > len(raw):
        raise FormatError(f"{path}: malformed header (header length exceeds file size)")
    header_bytes = raw[_HEADER_PREFIX.size : _HEADER_PREFIX.size + header_len]
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed header ({e})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: malformed header (not a JSON object)")

    data = memoryview(raw)[_HEADER_PREFIX.size + header_len :]
    metadata: dict[str, str] | None = None
    metas: list[TensorMeta] = []
    for name, entry in header.items():
        if name == "__metadata__":
            if not isinstance(entry, dict) or any(
                not isinstance(k, str) or not isinstance(v, str) for k, v in entry.items()
            ):
                raise FormatError(f"{path}: __metadata__ must map strings to strings")
            metadata = dict(entry)
            continue
        metas.append(_parse_meta(name, entry, len(data)))
    _check_disjoint(metas)

    tensors: dict[str, np.ndarray] = {}
    for meta in metas:
        begin, end = meta.data_offsets
        arr = np.frombuffer(data[begin:end], dtype=numpy_dtype(meta.dtype))
        tensors[meta.name] = arr.reshape(meta.shape)
    return Checkpoint(tensors, metadata)


def _le_bytes(arr: np.ndarray) -> bytes:
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return np.ascontiguousarray(arr).tobytes()


def _float_max(dtype: np.dtype) -> float:
    finfo = ml_dtypes.finfo if dtype == np.dtype(ml_dtypes.bfloat16) else np.finfo
    return float(finfo(dtype).max)


def convert_float_array(arr: np.ndarray, target_code: str, name: str) -> np.ndarray:
    """Convert a float array to the target float dtype with overflow checks.

    Narrowing a value whose magnitude exceeds the target's largest finite
    value is rejected (naming the tensor); so are non-finite values, which
    cannot be narrowed faithfully.
    """
    target = numpy_dtype(target_code)
    if arr.dtype == target:
        return arr
    vals = arr.astype(np.float64)
    if target.itemsize < 8 or arr.dtype.itemsize > target.itemsize:
        finite = np.isfinite(vals)
        if not finite.all():
            raise DtypeOverflowError(
                f"tensor {name!r}: non-finite values cannot be converted to {target_code}"
            )
        if vals.size and float(np.max(np.abs(vals))) > _float_max(target):
            raise DtypeOverflowError(
                f"tensor {name!r}: value overflow when narrowing to {target_code}"
            )
    return vals.astype(target)


def write_checkpoint(
    ckpt: Checkpoint, path: str | Path, dtype_policy: str = "preserve"
) -> None:
    """Write a checkpoint archive.

    ``dtype_policy`` is one of ``preserve`` (write every buffer bit-exact at
    its current dtype), ``f32``, ``f16`` or ``bf16`` (convert float tensors;
    non-float tensors are written unchanged). The header is canonically
    re-serialized with sorted keys, so round-trips preserve tensor bytes
    exactly and header semantics (not header bytes).
    """
    if dtype_policy not in DTYPE_POLICIES:
        raise FormatError(f"unknown dtype policy {dtype_policy!r}")

    header: dict[str, object] = {}
    if ckpt.metadata is not None:
        header["__metadata__"] = dict(sorted(ckpt.metadata.items()))
    chunks: list[bytes] = []
    offset = 0
    for name, arr in ckpt.items():
        code = dtype_code_of(arr.dtype)
        if dtype_policy != "preserve" and is_float_code(code):
            arr = convert_float_array(arr, _POLICY_CODES[dtype_policy], name)
            code = _POLICY_CODES[dtype_policy]
        buf = _le_bytes(arr)
        header[name] = {
            "dtype": code,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(buf)],
        }
        chunks.append(buf)
        offset += len(buf)

    header_bytes = json.dumps(
        header, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER_PREFIX.pack(len(header_bytes)))
        f.write(header_bytes)
        for buf in chunks:
            f.write(buf)


def apply_dtype_policy(
    ckpt: Checkpoint, policy: str, like: Checkpoint | None = None
) -> Checkpoint:
    """Cast a checkpoint's float tensors per an output-dtype policy.

    ``preserve`` casts each float tensor to the dtype the same name has in
    ``like`` (typically the base checkpoint), which is the default "match
    base" behaviour for merged outputs. Other policies force f32/f16/bf16.
    """
    if policy not in DTYPE_POLICIES:
        raise FormatError(f"unknown dtype policy {policy!r}")
    out: dict[str, np.ndarray] = {}
    for name, arr in ckpt.items():
        code = dtype_code_of(arr.dtype)
        if not is_float_code(code):
            out[name] = arr
        elif policy == "preserve":
            if like is not None and name in like:
                out[name] = convert_float_array(arr, like.dtype_code(name), name)
            else:
                out[name] = arr
        else:
            out[name] = convert_float_array(arr, _POLICY_CODES[policy], name)
    return Checkpoint(out, ckpt.metadata)


def validate_compatible(
    ckpts: Sequence[Checkpoint], exclude: Collection[str] = ()
) -> CompatibilityReport:
    """Classify every tensor name across checkpoints.

    mergeable: float dtype class, present in every checkpoint, equal shapes.
    carry_over: non-float everywhere, or explicitly excluded by name.
    mismatched: anything else (missing somewhere, shape conflict, or
    float/non-float class disagreement), with a reason string.

    Report-only; callers decide how strict to be.
    """
    if not ckpts:
        raise SchemaMismatchError("validate_compatible requires at least one checkpoint")
    report = CompatibilityReport()
    all_names = sorted({n for c in ckpts for n in c})
    for name in all_names:
        if name in exclude:
            report.carry_over.append(name)
            continue
        present = [c for c in ckpts if name in c]
        floats = {is_float_code(c.dtype_code(name)) for c in present}
        if len(floats) > 1:
            report.mismatched[name] = "float/non-float dtype class disagreement"
            continue
        if not floats.pop():
            report.carry_over.append(name)
            continue
        if len(present) != len(ckpts):
            report.mismatched[name] = "missing from at least one checkpoint"
            continue
        shapes = {c[name].shape for c in present}
        if len(shapes) > 1:
            report.mismatched[name] = f"shape conflict: {sorted(shapes)}"
            continue
        report.mergeable.append(name)
    return report
