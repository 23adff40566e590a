"""Task-vector algebra: construction, decomposition, scaling, application.

A task vector is the per-parameter difference between a fine-tuned
checkpoint and its shared base, defined over the base's mergeable (float)
tensors only. Checkpoint float tensors enter the math as float32; deltas
and every accumulation across tasks are held in float64 so that applying a
task vector back onto its base restores the fine-tuned float32 values
bit-exactly. Results round to float32 once, at the end.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .archive import Checkpoint, read_checkpoint, validate_compatible, write_checkpoint
from .errors import (
    ComputeError,
    FormatError,
    InvalidConfigError,
    NonFiniteInputError,
    SchemaMismatchError,
)
from .parallel import map_named

_KIND_KEY = "tensor_ties.kind"
_FINGERPRINT_KEY = "tensor_ties.base_fingerprint"


def schema_fingerprint(ckpt: Checkpoint) -> str:
    """Digest of sorted (name, dtype, shape) triples; values never hashed."""
    payload = json.dumps(
        [[n, c, list(s)] for n, c, s in ckpt.schema()], separators=(",", ":")
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _sorted_f64(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        if arr.flags.owndata:
            arr.flags.writeable = False
        out[name] = arr
    return out


@dataclass
class TaskVector:
    """Per-tensor deltas (float64) sharing the base checkpoint's schema."""

    deltas: dict[str, np.ndarray]
    base_fingerprint: str | None = None

    def __post_init__(self):
        self.deltas = _sorted_f64(self.deltas)

    @property
    def total_params(self) -> int:
        return sum(v.size for v in self.deltas.values())

    def schema(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((n, v.shape) for n, v in self.deltas.items())


@dataclass
class SignVector:
    """Per-parameter signs in {-1, 0, +1}, stored as int8."""

    signs: dict[str, np.ndarray]

    def __post_init__(self):
        out = {}
        for name in sorted(self.signs):
            arr = np.ascontiguousarray(self.signs[name], dtype=np.int8)
            if not np.isin(arr, (-1, 0, 1)).all():
                raise InvalidConfigError(
                    f"sign vector tensor {name!r} has values outside {{-1, 0, +1}}"
                )
            if arr.flags.owndata:
                arr.flags.writeable = False
            out[name] = arr
        self.signs = out

    def schema(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((n, v.shape) for n, v in self.signs.items())


@dataclass
class MagnitudeVector:
    """Per-parameter non-negative magnitudes."""

    magnitudes: dict[str, np.ndarray]

    def __post_init__(self):
        self.magnitudes = _sorted_f64(self.magnitudes)


def _as_f32(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32, copy=False)


def _require_finite(arr: np.ndarray, name: str, which: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteInputError(f"tensor {name!r} in {which} contains non-finite values")


def _check_same_schema(tau: TaskVector, others: Sequence[TaskVector]) -> None:
    for other in others:
        if other.schema() != tau.schema():
            a = dict(tau.schema())
            b = dict(other.schema())
            for name in sorted(set(a) | set(b)):
                if a.get(name) != b.get(name):
                    raise SchemaMismatchError(
                        f"task-vector schema mismatch at tensor {name!r}: "
                        f"{a.get(name)} vs {b.get(name)}"
                    )
        if (
            tau.base_fingerprint
            and other.base_fingerprint
            and tau.base_fingerprint != other.base_fingerprint
        ):
            raise SchemaMismatchError("task vectors built from different base checkpoints")


def compute_task_vector(
    finetuned: Checkpoint, base: Checkpoint, *, threads: int | None = None
) -> TaskVector:
    """Element-wise ``finetuned - base`` over mergeable tensors.

    Rejects schema mismatches (naming the first offending tensor) and
    non-finite values in either input.
    """
    report = validate_compatible([finetuned, base])
    if report.mismatched:
        name, reason = next(iter(sorted(report.mismatched.items())))
        raise SchemaMismatchError(f"tensor {name!r}: {reason}")

    def one(name: str) -> np.ndarray:
        ft = _as_f32(finetuned[name])
        bs = _as_f32(base[name])
        _require_finite(ft, name, "finetuned checkpoint")
        _require_finite(bs, name, "base checkpoint")
        return ft.astype(np.float64) - bs.astype(np.float64)

    deltas = map_named(one, report.mergeable, threads)
    return TaskVector(deltas, base_fingerprint=schema_fingerprint(base))


def decompose(tau: TaskVector) -> tuple[SignVector, MagnitudeVector]:
    """Split into sign and magnitude; ``sign(x) * |x| == x`` with sign(0) == 0."""
    signs = {n: np.sign(v).astype(np.int8) for n, v in tau.deltas.items()}
    mags = {n: np.abs(v) for n, v in tau.deltas.items()}
    return SignVector(signs), MagnitudeVector(mags)


def recompose(
    signs: SignVector, magnitudes: MagnitudeVector, base_fingerprint: str | None = None
) -> TaskVector:
    deltas = {
        n: signs.signs[n].astype(np.float64) * magnitudes.magnitudes[n]
        for n in signs.signs
    }
    return TaskVector(deltas, base_fingerprint=base_fingerprint)


def apply_task_vector(
    base: Checkpoint, tau: TaskVector, lam: float, *, threads: int | None = None
) -> Checkpoint:
    """Return ``base + lam * tau`` on mergeable tensors, carry-overs verbatim.

    ``lam`` must be finite and > 0. Merged tensors come out as float32;
    non-float tensors are copied from the base unchanged, and header
    metadata passes through untouched.
    """
    lam = float(lam)
    if not np.isfinite(lam) or lam <= 0:
        raise InvalidConfigError(f"lambda must be finite and > 0, got {lam}")
    if tau.base_fingerprint and tau.base_fingerprint != schema_fingerprint(base):
        raise SchemaMismatchError(
            "task vector was built from a different base checkpoint (fingerprint mismatch)"
        )
    base_float = set(base.float_names())
    tau_schema = dict(tau.schema())
    for name in sorted(base_float | set(tau_schema)):
        if name not in tau_schema:
            raise SchemaMismatchError(f"tensor {name!r}: missing from task vector")
        if name not in base_float:
            raise SchemaMismatchError(f"tensor {name!r}: missing from base checkpoint")
        if tau_schema[name] != base[name].shape:
            raise SchemaMismatchError(
                f"tensor {name!r}: shape {tau_schema[name]} vs {base[name].shape}"
            )

    def one(name: str) -> np.ndarray:
        bs = _as_f32(base[name])
        _require_finite(bs, name, "base checkpoint")
        out = bs.astype(np.float64) + lam * tau.deltas[name]
        if not np.isfinite(out).all():
            raise ComputeError(
                f"tensor {name!r}: non-finite result after scaling by lambda={lam}"
            )
        return out.astype(np.float32)

    merged = map_named(one, sorted(base_float), threads)
    tensors = {n: merged.get(n, base[n]) for n in base.names()}
    return Checkpoint(tensors, base.metadata)


def linear_combination(taus: Sequence[TaskVector], weights: Sequence[float]) -> TaskVector:
    """Weighted sum over tasks, accumulated in input-list order (float64)."""
    if not taus:
        raise InvalidConfigError("linear_combination requires at least one task vector")
    if len(taus) != len(weights):
        raise InvalidConfigError(
            f"got {len(taus)} task vectors but {len(weights)} weights"
        )
    ws = [float(w) for w in weights]
    if not all(np.isfinite(ws)):
        raise InvalidConfigError("weights must be finite")
    _check_same_schema(taus[0], taus[1:])
    out: dict[str, np.ndarray] = {}
    for name, first in taus[0].deltas.items():
        acc = np.zeros(first.shape, dtype=np.float64)
        for tau, w in zip(taus, ws):
            acc += w * tau.deltas[name]
        out[name] = acc
    return TaskVector(out, base_fingerprint=taus[0].base_fingerprint)


def save_task_vector(tau: TaskVector, path: str | Path) -> None:
    """Serialize to a sidecar archive (float64 tensors, kind-tagged)."""
    meta = {_KIND_KEY: "task-vector"}
    if tau.base_fingerprint:
        meta[_FINGERPRINT_KEY] = tau.base_fingerprint
    write_checkpoint(Checkpoint(tau.deltas, meta), path)


def load_task_vector(path: str | Path) -> TaskVector:
    ckpt = read_checkpoint(path)
    meta = ckpt.metadata or {}
    kind = meta.get(_KIND_KEY)
    if kind not in (None, "task-vector"):
        raise FormatError(f"{path}: sidecar kind {kind!r} is not a task vector")
    for name in ckpt.names():
        _require_finite(ckpt[name].astype(np.float64), name, "task-vector sidecar")
    return TaskVector(
        {n: ckpt[n] for n in ckpt.names()},
        base_fingerprint=meta.get(_FINGERPRINT_KEY),
    )


def save_sign_vector(sv: SignVector, path: str | Path) -> None:
    write_checkpoint(Checkpoint(sv.signs, {_KIND_KEY: "sign-vector"}), path)


def load_sign_vector(path: str | Path) -> SignVector:
    ckpt = read_checkpoint(path)
    meta = ckpt.metadata or {}
    kind = meta.get(_KIND_KEY)
    if kind not in (None, "sign-vector"):
        raise FormatError(f"{path}: sidecar kind {kind!r} is not a sign vector")
    return SignVector({n: np.asarray(ckpt[n]) for n in ckpt.names()})
