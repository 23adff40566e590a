"""Baseline merging methods: averaging, Fisher, RegMean, task arithmetic.

Fisher diagonals and Gram matrices are consumed as precomputed sidecar
files; estimating them requires a live model and is out of scope. All
cross-model reductions accumulate in float64 in input order and round to
float32 once.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .archive import Checkpoint, read_checkpoint, validate_compatible
from .errors import (
    InvalidConfigError,
    NonFiniteInputError,
    SchemaMismatchError,
    ValidationError,
)
from .parallel import map_named
from .task_vector import (
    _as_f32,
    _require_finite,
    apply_task_vector,
    compute_task_vector,
    linear_combination,
)

_GRAM_SYMMETRY_RTOL = 1e-5


@dataclass
class FisherSidecar:
    """Per-parameter non-negative importance weights, one file per task.

    Schema must mirror the checkpoint's mergeable tensors.
    """

    diagonals: dict[str, np.ndarray]

    def __post_init__(self):
        out = {}
        for name in sorted(self.diagonals):
            arr = np.ascontiguousarray(self.diagonals[name], dtype=np.float32)
            if not np.isfinite(arr).all():
                raise NonFiniteInputError(f"Fisher tensor {name!r} has non-finite values")
            if (arr < 0).any():
                raise ValidationError(f"Fisher tensor {name!r} has negative values")
            out[name] = arr
        self.diagonals = out


@dataclass
class GramSidecar:
    """Per-linear-layer inner-product matrices (input_dim x input_dim)."""

    grams: dict[str, np.ndarray]

    def __post_init__(self):
        out = {}
        for name in sorted(self.grams):
            g = np.ascontiguousarray(self.grams[name], dtype=np.float32)
            if g.ndim != 2 or g.shape[0] != g.shape[1]:
                raise ValidationError(f"Gram matrix {name!r} is not square 2-D")
            if not np.isfinite(g).all():
                raise NonFiniteInputError(f"Gram matrix {name!r} has non-finite values")
            scale = max(float(np.max(np.abs(g))) if g.size else 0.0, 1e-30)
            if g.size and float(np.max(np.abs(g - g.T))) > _GRAM_SYMMETRY_RTOL * scale:
                raise ValidationError(f"Gram matrix {name!r} is not symmetric")
            out[name] = g
        self.grams = out


def load_fisher_sidecar(path: str | Path, like: Checkpoint) -> FisherSidecar:
    ckpt = read_checkpoint(path)
    expected = set(like.float_names())
    got = set(ckpt.names())
    if expected != got:
        missing = sorted(expected - got) + sorted(got - expected)
        raise SchemaMismatchError(
            f"Fisher sidecar {path} does not mirror the checkpoint schema "
            f"(first difference: {missing[0]!r})"
        )
    for name in expected:
        if ckpt[name].shape != like[name].shape:
            raise SchemaMismatchError(
                f"Fisher tensor {name!r}: shape {ckpt[name].shape} vs {like[name].shape}"
            )
    return FisherSidecar({n: _as_f32(ckpt[n]) for n in ckpt.names()})


def load_gram_sidecar(path: str | Path) -> GramSidecar:
    ckpt = read_checkpoint(path)
    return GramSidecar({n: _as_f32(ckpt[n]) for n in ckpt.names()})


def _strict_mergeable(ckpts: Sequence[Checkpoint]) -> list[str]:
    report = validate_compatible(ckpts)
    if report.mismatched:
        name, reason = next(iter(sorted(report.mismatched.items())))
        raise SchemaMismatchError(f"tensor {name!r}: {reason}")
    return report.mergeable


def simple_average(
    finetuned: Sequence[Checkpoint], *, threads: int | None = None
) -> Checkpoint:
    """Element-wise mean of the models; carry-overs copied from the first."""
    if not finetuned:
        raise InvalidConfigError("simple_average requires at least one checkpoint")
    mergeable = _strict_mergeable(finetuned)
    n = len(finetuned)

    def one(name: str) -> np.ndarray:
        acc = np.zeros(finetuned[0][name].shape, dtype=np.float64)
        for i, ckpt in enumerate(finetuned):
            vals = _as_f32(ckpt[name])
            _require_finite(vals, name, f"checkpoint #{i}")
            acc += vals.astype(np.float64)
        return (acc / n).astype(np.float32)

    merged = map_named(one, mergeable, threads)
    first = finetuned[0]
    tensors = {name: merged.get(name, first[name]) for name in first.names()}
    return Checkpoint(tensors, first.metadata)


def task_arithmetic(
    base: Checkpoint,
    finetuned: Sequence[Checkpoint],
    lam: float = 0.4,
    *,
    threads: int | None = None,
) -> Checkpoint:
    """``base + lam * sum_t(finetuned_t - base)`` on mergeable tensors."""
    if not finetuned:
        raise InvalidConfigError("task_arithmetic requires at least one checkpoint")
    taus = [compute_task_vector(ft, base, threads=threads) for ft in finetuned]
    total = linear_combination(taus, [1.0] * len(taus))
    return apply_task_vector(base, total, lam, threads=threads)


def fisher_merge(
    finetuned: Sequence[Checkpoint],
    fishers: Sequence[FisherSidecar],
    epsilon: float = 1e-8,
    *,
    threads: int | None = None,
) -> Checkpoint:
    """Fisher-weighted mean: ``sum_t F_t * theta_t / sum_t F_t`` per element.

    Where the Fisher mass is exactly zero the result falls back to the
    unweighted mean of the models at that element; ``epsilon`` only guards
    that degenerate division.
    """
    if not finetuned:
        raise InvalidConfigError("fisher_merge requires at least one checkpoint")
    if len(fishers) != len(finetuned):
        raise InvalidConfigError(
            f"got {len(finetuned)} checkpoints but {len(fishers)} Fisher sidecars"
        )
    if not (epsilon > 0):
        raise InvalidConfigError(f"epsilon must be > 0, got {epsilon}")
    mergeable = _strict_mergeable(finetuned)
    for i, sidecar in enumerate(fishers):
        for name in mergeable:
            if name not in sidecar.diagonals:
                raise SchemaMismatchError(f"Fisher sidecar #{i} is missing tensor {name!r}")
            if sidecar.diagonals[name].shape != finetuned[0][name].shape:
                raise SchemaMismatchError(
                    f"Fisher sidecar #{i} tensor {name!r}: shape mismatch"
                )
    n = len(finetuned)

    def one(name: str) -> np.ndarray:
        num = np.zeros(finetuned[0][name].shape, dtype=np.float64)
        den = np.zeros(num.shape, dtype=np.float64)
        mean = np.zeros(num.shape, dtype=np.float64)
        for i, (ckpt, sidecar) in enumerate(zip(finetuned, fishers)):
            vals = _as_f32(ckpt[name])
            _require_finite(vals, name, f"checkpoint #{i}")
            v64 = vals.astype(np.float64)
            f64 = sidecar.diagonals[name].astype(np.float64)
            num += f64 * v64
            den += f64
            mean += v64
        zero = den == 0
        out = num / (den + epsilon * zero)
        return np.where(zero, mean / n, out).astype(np.float32)

    merged = map_named(one, mergeable, threads)
    first = finetuned[0]
    tensors = {name: merged.get(name, first[name]) for name in first.names()}
    return Checkpoint(tensors, first.metadata)


class RegMeanResult(NamedTuple):
    checkpoint: Checkpoint
    # layer name -> "solved" | "averaged_no_gram" | "fallback_singular"
    layer_paths: dict[str, str]


def _gram_orientation(weight_shape: tuple[int, ...], gram_dim: int, name: str) -> int:
    """Axis of the weight that carries the input dimension.

    Prefers axis 0 (the ``[in, out]`` layout of the closed-form solution);
    falls back to axis 1 for ``[out, in]`` checkpoints.
    """
    if len(weight_shape) != 2:
        raise ValidationError(f"tensor {name!r} named in Gram sidecar is not 2-D")
    if weight_shape[0] == gram_dim:
        return 0
    if weight_shape[1] == gram_dim:
        return 1
    raise SchemaMismatchError(
        f"tensor {name!r}: Gram dimension {gram_dim} matches neither weight axis "
        f"{weight_shape}"
    )


def regmean_merge(
    finetuned: Sequence[Checkpoint],
    grams: Sequence[GramSidecar],
    alpha: float = 0.1,
    ridge: float | None = None,
    *,
    threads: int | None = None,
) -> RegMeanResult:
    """Closed-form per-layer least-squares merge.

    For each layer with a Gram: solve ``(sum_t G~_t + ridge*I) W = sum_t
    G~_t W_t`` where ``G~ = (1-alpha)*G + alpha*diag(G)``. ``ridge=None``
    picks ``1e-6 * mean(diag(sum G~))`` per layer. Layers without Grams fall
    back to simple averaging, as do layers whose system stays singular.
    """
    if not finetuned:
        raise InvalidConfigError("regmean_merge requires at least one checkpoint")
    if len(grams) != len(finetuned):
        raise InvalidConfigError(
            f"got {len(finetuned)} checkpoints but {len(grams)} Gram sidecars"
        )
    if not (0.0 <= alpha <= 1.0):
        raise InvalidConfigError(f"alpha must be in [0, 1], got {alpha}")
    if ridge is not None and ridge < 0:
        raise InvalidConfigError(f"ridge must be non-negative, got {ridge}")
    mergeable = _strict_mergeable(finetuned)
    gram_names = sorted({name for g in grams for name in g.grams})
    for name in gram_names:
        if name not in mergeable:
            raise SchemaMismatchError(
                f"Gram sidecar names tensor {name!r} which is not a mergeable weight"
            )
        dims = {g.grams[name].shape[0] for g in grams if name in g.grams}
        if len(dims) > 1:
            raise SchemaMismatchError(f"Gram matrices for {name!r} disagree on dimension")
        _gram_orientation(finetuned[0][name].shape, dims.pop(), name)
        for i, g in enumerate(grams):
            if name not in g.grams:
                raise SchemaMismatchError(f"Gram sidecar #{i} is missing layer {name!r}")

    n = len(finetuned)
    layer_paths: dict[str, str] = {}

    def average(name: str) -> np.ndarray:
        acc = np.zeros(finetuned[0][name].shape, dtype=np.float64)
        for i, ckpt in enumerate(finetuned):
            vals = _as_f32(ckpt[name])
            _require_finite(vals, name, f"checkpoint #{i}")
            acc += vals.astype(np.float64)
        return (acc / n).astype(np.float32)

    def one(name: str) -> tuple[np.ndarray, str]:
        if name not in gram_names:
            return average(name), "averaged_no_gram"
        gram_dim = grams[0].grams[name].shape[0]
        axis = _gram_orientation(finetuned[0][name].shape, gram_dim, name)
        lhs = np.zeros((gram_dim, gram_dim), dtype=np.float64)
        rhs = np.zeros(
            (gram_dim, finetuned[0][name].shape[1 - axis]), dtype=np.float64
        )
        for i, (ckpt, sidecar) in enumerate(zip(finetuned, grams)):
            w = _as_f32(ckpt[name]).astype(np.float64)
            _require_finite(w, name, f"checkpoint #{i}")
            if axis == 1:
                w = w.T
            g = sidecar.grams[name].astype(np.float64)
            g = 0.5 * (g + g.T)
            g_shrunk = (1.0 - alpha) * g + alpha * np.diag(np.diag(g))
            lhs += g_shrunk
            rhs += g_shrunk @ w
        r = ridge
        if r is None:
            r = 1e-6 * float(np.mean(np.diag(lhs))) if gram_dim else 0.0
        system = lhs + r * np.eye(gram_dim)
        try:
            solved = scipy.linalg.cho_solve(scipy.linalg.cho_factor(system), rhs)
        except np.linalg.LinAlgError:
            return average(name), "fallback_singular"
        if not np.isfinite(solved).all():
            return average(name), "fallback_singular"
        if axis == 1:
            solved = solved.T
        return solved.astype(np.float32), "solved"

    results = map_named(one, mergeable, threads)
    for name in mergeable:
        layer_paths[name] = results[name][1]
    first = finetuned[0]
    tensors = {
        name: (results[name][0] if name in results else first[name])
        for name in first.names()
    }
    return RegMeanResult(Checkpoint(tensors, first.metadata), layer_paths)
