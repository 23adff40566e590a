"""Interference diagnostics over sets of task vectors.

Covers the three measurements behind the motivating statistics: sign
conflict fractions after trimming (vs. number of models, and vs. k),
magnitude statistics of merged parameters grouped by influence count and
sign agreement, and trimmed-checkpoint emission for external evaluation
harnesses. Also generates synthetic task vectors at desk scale with a
fully specified counter-based generator so every number is reproducible.

Synthetic model: each task draws an influential support of
``round(density * d)`` positions uniformly; a shared latent consensus sign
exists per position, and each task follows it with probability
``q = (1 + sqrt(2a - 1)) / 2`` so that any two tasks sharing a position
agree on sign with probability exactly ``a`` (the ``sign_agreement``
parameter, hence its [0.5, 1] range); magnitudes are half-normal times
``magnitude_scale``.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from . import prng
from .archive import Checkpoint, apply_dtype_policy, write_checkpoint
from .errors import InvalidConfigError
from .task_vector import (
    TaskVector,
    apply_task_vector,
    compute_task_vector,
    schema_fingerprint,
    _check_same_schema,
)
from .ties import TrimmedTaskVector, kept_count_for, trim

INTERFERENCE_METHODS = ("plain_mean", "trim_then_disjoint", "elect_then_disjoint", "ties")

AGREEMENT_BINS = ("[0.5,0.6)", "[0.6,0.7)", "[0.7,0.8)", "[0.8,0.9)", "[0.9,1.0)", "1.0")
_BIN_EDGES = np.array([0.6, 0.7, 0.8, 0.9, 1.0])

MAX_SUBSETS_PER_SIZE = 10

# stream labels for the synthetic generator
_STREAM_SUPPORT = 1
_STREAM_CONSENSUS = 2
_STREAM_SIGN = 3
_STREAM_MAG_R = 4
_STREAM_MAG_PHI = 5
_STREAM_SUBSET = 6


@dataclass
class ConflictCurve:
    points: list[tuple[int, float]]
    k_percent: float
    subset_policy: str


@dataclass
class GroupStat:
    mean_abs: float
    std_abs: float
    count: int


@dataclass
class InterferenceStats:
    by_influence_count: dict[int, GroupStat]
    by_agreement_bin: dict[str, GroupStat]
    method: str


@dataclass
class SyntheticSpec:
    d: int
    n: int
    density: float
    sign_agreement: float
    magnitude_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.d < 1:
            raise InvalidConfigError(f"d must be >= 1, got {self.d}")
        if self.n < 1:
            raise InvalidConfigError(f"n must be >= 1, got {self.n}")
        if not (0.0 < self.density <= 1.0):
            raise InvalidConfigError(f"density must be in (0, 1], got {self.density}")
        if not (0.5 <= self.sign_agreement <= 1.0):
            raise InvalidConfigError(
                f"sign_agreement must be in [0.5, 1], got {self.sign_agreement}"
            )
        if not (self.magnitude_scale > 0):
            raise InvalidConfigError(
                f"magnitude_scale must be > 0, got {self.magnitude_scale}"
            )


def _require_group(taus: Sequence[TaskVector], minimum: int = 2) -> None:
    if len(taus) < minimum:
        raise InvalidConfigError(f"need at least {minimum} task vectors, got {len(taus)}")
    _check_same_schema(taus[0], taus[1:])


def conflict_fraction_of_trimmed(vectors: Sequence[TaskVector]) -> float:
    """Fraction of parameters whose values include both signs."""
    _require_group(vectors)
    conflicts = 0
    total = 0
    for name in vectors[0].deltas:
        has_pos = np.zeros(vectors[0].deltas[name].shape, dtype=bool)
        has_neg = np.zeros(has_pos.shape, dtype=bool)
        for v in vectors:
            has_pos |= v.deltas[name] > 0
            has_neg |= v.deltas[name] < 0
        conflicts += int(np.count_nonzero(has_pos & has_neg))
        total += has_pos.size
    return conflicts / total if total else 0.0


def sign_conflict_fraction(taus: Sequence[TaskVector], k_percent: float) -> float:
    """Trim each vector at k, then count parameters with conflicting signs."""
    _require_group(taus)
    trimmed = [trim(t, k_percent) for t in taus]
    return conflict_fraction_of_trimmed(trimmed)


def _random_subsets(n: int, m: int, trials: int, seed: int) -> list[tuple[int, ...]]:
    """Up to ``trials`` distinct m-subsets of range(n), deterministically."""
    n_subsets = math.comb(n, m)
    if n_subsets <= trials:
        return list(combinations(range(n), m))
    key = prng.derive_key(seed, _STREAM_SUBSET, m)
    chosen: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    counter = 0
    while len(chosen) < trials:
        keys = prng.counter_u64(key, np.arange(counter * n, (counter + 1) * n))
        subset = tuple(sorted(np.argsort(keys, kind="stable")[:m].tolist()))
        counter += 1
        if subset not in seen:
            seen.add(subset)
            chosen.append(subset)
    return chosen


def conflict_curve(
    taus: Sequence[TaskVector],
    k_percent: float,
    trials: int = MAX_SUBSETS_PER_SIZE,
    seed: int = 0,
) -> ConflictCurve:
    """Average conflict fraction over random m-subsets, for m = 2..n.

    Each size samples min(trials, C(n, m)) distinct subsets drawn from the
    seeded counter-based generator, so curves are reproducible.
    """
    _require_group(taus)
    if trials < 1:
        raise InvalidConfigError(f"trials must be >= 1, got {trials}")
    trimmed = [trim(t, k_percent) for t in taus]
    points = []
    for m in range(2, len(taus) + 1):
        subsets = _random_subsets(len(taus), m, trials, seed)
        fractions = [
            conflict_fraction_of_trimmed([trimmed[i] for i in subset])
            for subset in subsets
        ]
        points.append((m, float(np.mean(fractions))))
    policy = f"<= {trials} random subsets per size, splitmix seed {seed}"
    return ConflictCurve(points=points, k_percent=float(k_percent), subset_policy=policy)


def conflict_k_sweep(
    taus: Sequence[TaskVector], k_grid: Sequence[float]
) -> list[tuple[float, float]]:
    """Conflict fraction of the full model set at each k in the grid."""
    _require_group(taus)
    return [(float(k), sign_conflict_fraction(taus, k)) for k in k_grid]


def _merged_values(
    taus: Sequence[TaskVector],
    trimmed: Sequence[TrimmedTaskVector],
    method: str,
    name: str,
) -> np.ndarray:
    n = len(taus)
    raw = [t.deltas[name] for t in taus]
    cut = [t.deltas[name] for t in trimmed]
    if method == "plain_mean":
        acc = np.zeros(raw[0].shape, dtype=np.float64)
        for v in raw:
            acc += v
        return acc / n
    if method == "trim_then_disjoint":
        num = np.zeros(cut[0].shape, dtype=np.float64)
        cnt = np.zeros(num.shape, dtype=np.int32)
        for v in cut:
            nz = v != 0
            num += np.where(nz, v, 0.0)
            cnt += nz
        return num / np.maximum(cnt, 1)
    if method == "elect_then_disjoint":
        vectors = raw
    else:  # ties
        vectors = cut
    acc = np.zeros(vectors[0].shape, dtype=np.float64)
    for v in vectors:
        acc += v
    gamma = np.sign(acc)
    num = np.zeros(acc.shape, dtype=np.float64)
    cnt = np.zeros(acc.shape, dtype=np.int32)
    for v in vectors:
        contrib = ((v > 0) & (gamma > 0)) | ((v < 0) & (gamma < 0))
        num += np.where(contrib, v, 0.0)
        cnt += contrib
    return num / np.maximum(cnt, 1)


def interference_stats(
    taus: Sequence[TaskVector], k_percent: float, method: str
) -> InterferenceStats:
    """Mean/std of |merged value| grouped by influence count and agreement.

    Influence count of a parameter is the number of tasks whose trimmed
    value there is nonzero; agreement is max(#pos, #neg)/(#pos + #neg) over
    those nonzero trimmed entries (parameters with none go to the
    "undefined" bin). The merge itself follows ``method``: ``plain_mean``
    averages the raw vectors over n; ``trim_then_disjoint`` averages
    nonzero trimmed values regardless of sign; ``elect_then_disjoint``
    elects signs on the raw vectors and averages the matching values;
    ``ties`` does trim, elect, then the sign-matched mean.
    """
    _require_group(taus)
    if method not in INTERFERENCE_METHODS:
        raise InvalidConfigError(
            f"method must be one of {INTERFERENCE_METHODS}, got {method!r}"
        )
    trimmed = [trim(t, k_percent) for t in taus]
    n = len(taus)

    # group accumulators: [sum |v|, sum v^2, count]
    infl_acc = np.zeros((n + 1, 3), dtype=np.float64)
    agree_acc = np.zeros((len(AGREEMENT_BINS) + 1, 3), dtype=np.float64)  # last: undefined

    for name in taus[0].deltas:
        pos = np.zeros(taus[0].deltas[name].size, dtype=np.int32)
        neg = np.zeros(pos.shape, dtype=np.int32)
        for t in trimmed:
            flat = t.deltas[name].ravel()
            pos += flat > 0
            neg += flat < 0
        influence = pos + neg
        merged = np.abs(_merged_values(taus, trimmed, method, name)).ravel()

        np.add.at(infl_acc[:, 0], influence, merged)
        np.add.at(infl_acc[:, 1], influence, merged * merged)
        np.add.at(infl_acc[:, 2], influence, 1.0)

        defined = influence > 0
        ratio = np.maximum(pos, neg)[defined] / influence[defined]
        bin_idx = np.digitize(ratio, _BIN_EDGES, right=False)
        np.add.at(agree_acc[:, 0], bin_idx, merged[defined])
        np.add.at(agree_acc[:, 1], bin_idx, merged[defined] ** 2)
        np.add.at(agree_acc[:, 2], bin_idx, 1.0)
        undefined = int(np.count_nonzero(~defined))
        agree_acc[-1, 0] += float(np.sum(merged[~defined]))
        agree_acc[-1, 1] += float(np.sum(merged[~defined] ** 2))
        agree_acc[-1, 2] += undefined

    def group(row: np.ndarray) -> GroupStat:
        count = int(row[2])
        if count == 0:
            return GroupStat(0.0, 0.0, 0)
        mean = row[0] / count
        var = max(row[1] / count - mean * mean, 0.0)
        return GroupStat(float(mean), float(math.sqrt(var)), count)

    by_influence = {
        i: group(infl_acc[i]) for i in range(n + 1) if int(infl_acc[i, 2]) > 0
    }
    by_agreement: dict[str, GroupStat] = {}
    for i, label in enumerate(AGREEMENT_BINS):
        if int(agree_acc[i, 2]) > 0:
            by_agreement[label] = group(agree_acc[i])
    if int(agree_acc[-1, 2]) > 0:
        by_agreement["undefined"] = group(agree_acc[-1])
    return InterferenceStats(
        by_influence_count=by_influence, by_agreement_bin=by_agreement, method=method
    )


def emit_trimmed_checkpoints(
    base: Checkpoint,
    finetuned: Checkpoint,
    k_grid: Sequence[float],
    out_dir: str | Path,
) -> list[Path]:
    """Write ``base + trim(tau, k)`` for each k; k is encoded in filenames."""
    for k in k_grid:
        if not (0.0 < float(k) <= 100.0):
            raise InvalidConfigError(f"k values must be in (0, 100], got {k}")
    tau = compute_task_vector(finetuned, base)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in k_grid:
        trimmed = trim(tau, float(k))
        ckpt = apply_task_vector(base, trimmed, 1.0)
        ckpt = apply_dtype_policy(ckpt, "preserve", like=base)
        path = out_dir / f"trimmed_k{float(k):g}.safetensors"
        write_checkpoint(ckpt, path)
        paths.append(path)
    return paths


def generate_synthetic(spec: SyntheticSpec) -> list[TaskVector]:
    """Deterministic synthetic task vectors (see module docstring)."""
    spec.validate()
    d, n = spec.d, spec.n
    support_size = kept_count_for(spec.density * 100.0, d)
    positions = np.arange(d, dtype=np.uint64)

    consensus_bits = prng.counter_u64(
        prng.derive_key(spec.seed, _STREAM_CONSENSUS), positions
    )
    consensus = np.where((consensus_bits >> np.uint64(63)).astype(bool), -1.0, 1.0)

    q = (1.0 + math.sqrt(2.0 * spec.sign_agreement - 1.0)) / 2.0

    # schema fingerprint matches a float32 checkpoint holding one "params"
    # tensor, so synthetic vectors can be applied onto such a base
    ref = Checkpoint({"params": np.zeros(d, dtype=np.float32)})
    fingerprint = schema_fingerprint(ref)

    out = []
    for t in range(n):
        if support_size >= d:
            support = np.arange(d)
        else:
            keys = prng.counter_u64(prng.derive_key(spec.seed, _STREAM_SUPPORT, t), positions)
            support = np.sort(np.argpartition(keys, support_size)[:support_size])
        u = prng.uniform01(prng.derive_key(spec.seed, _STREAM_SIGN, t), support.astype(np.uint64))
        signs = np.where(u < q, consensus[support], -consensus[support])
        mags = np.abs(
            prng.standard_normal(
                prng.derive_key(spec.seed, _STREAM_MAG_R, t),
                prng.derive_key(spec.seed, _STREAM_MAG_PHI, t),
                support.astype(np.uint64),
            )
        ) * spec.magnitude_scale
        vec = np.zeros(d, dtype=np.float64)
        vec[support] = signs * mags
        out.append(TaskVector({"params": vec}, base_fingerprint=fingerprint))
    return out


def _format_float(x: float) -> str:
    return repr(float(x))


def conflict_curve_to_dict(curve: ConflictCurve) -> dict:
    return {
        "k_percent": curve.k_percent,
        "subset_policy": curve.subset_policy,
        "points": [
            {"num_models": m, "conflict_fraction": f} for m, f in curve.points
        ],
    }


def write_conflict_curve_csv(
    curve: ConflictCurve, path: str | Path, k_sweep: Sequence[tuple[float, float]] = ()
) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["sweep", "x", "conflict_fraction"])
        for m, frac in curve.points:
            writer.writerow(["num_models", m, _format_float(frac)])
        for k, frac in k_sweep:
            writer.writerow(["k_percent", _format_float(k), _format_float(frac)])


def interference_stats_to_dict(stats: InterferenceStats) -> dict:
    return {
        "method": stats.method,
        "by_influence_count": {
            str(k): {"mean_abs": g.mean_abs, "std_abs": g.std_abs, "count": g.count}
            for k, g in stats.by_influence_count.items()
        },
        "by_agreement_bin": {
            k: {"mean_abs": g.mean_abs, "std_abs": g.std_abs, "count": g.count}
            for k, g in stats.by_agreement_bin.items()
        },
    }


def write_interference_csv(stats: InterferenceStats, path: str | Path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["grouping", "group", "mean_abs", "std_abs", "count"])
        for k, g in stats.by_influence_count.items():
            writer.writerow(
                ["influence_count", k, _format_float(g.mean_abs), _format_float(g.std_abs), g.count]
            )
        for label, g in stats.by_agreement_bin.items():
            writer.writerow(
                ["agreement", label, _format_float(g.mean_abs), _format_float(g.std_abs), g.count]
            )
