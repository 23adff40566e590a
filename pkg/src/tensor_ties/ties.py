"""Trim / elect-sign / disjoint-merge pipeline with ablation variants.

Pipeline, given a base checkpoint and n fine-tuned checkpoints:

1. task vectors ``tau_t = finetuned_t - base`` (float64 per-element);
2. trim: keep the top-k% entries of each ``tau_t`` by magnitude, zero the
   rest (global across all mergeable tensors by default, or per tensor);
3. elect: per parameter, the sign of the float64 sum of trimmed values in
   task order (zero only for an exactly zero sum), unless an external sign
   vector overrides the election;
4. disjoint merge: per parameter, the mean of the trimmed values whose sign
   matches the elected sign, ignoring zeros; empty selections produce 0;
5. scale by lambda and add onto the base, rounding to float32 once.

Trim tie-breaking at the threshold magnitude: lower flat global index wins,
where the flat order is lexicographic by tensor name, then C order within a
tensor. Kept counts are round-half-up(k/100 * d), minimum 1, computed with
exact rational arithmetic.

Ablation flags reproduce the component-removal variants: ``no_trim`` skips
step 2; ``no_elect`` replaces the sign filter with "mean of nonzero values
regardless of sign"; ``no_disjoint_mean`` keeps the sign filter but divides
by n (zeros count); ``no_scale`` forces lambda = 1.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .archive import Checkpoint
from .errors import InvalidConfigError, SchemaMismatchError
from .parallel import map_named
from .report import GlobalStats, MergeReport, PerTensorStats
from .task_vector import (
    SignVector,
    TaskVector,
    apply_task_vector,
    compute_task_vector,
    _check_same_schema,
)

ABLATIONS = ("no_trim", "no_elect", "no_disjoint_mean", "no_scale")
GRANULARITIES = ("global", "per-tensor")


@dataclass
class TiesConfig:
    """Knobs for a merge run. Defaults follow the no-validation recipe
    (k = 20, lambda = 1, global trim)."""

    k_percent: float = 20.0
    lam: float = 1.0
    granularity: str = "global"
    ablation: frozenset[str] = frozenset()
    sign_override: SignVector | None = None

    def __post_init__(self):
        self.ablation = frozenset(self.ablation)

    def validate(self) -> None:
        if not (0.0 < self.k_percent <= 100.0):
            raise InvalidConfigError(f"k_percent must be in (0, 100], got {self.k_percent}")
        if not (math.isfinite(self.lam) and self.lam > 0):
            raise InvalidConfigError(f"lambda must be finite and > 0, got {self.lam}")
        if self.granularity not in GRANULARITIES:
            raise InvalidConfigError(f"granularity must be one of {GRANULARITIES}")
        unknown = self.ablation - set(ABLATIONS)
        if unknown:
            raise InvalidConfigError(f"unknown ablation flags: {sorted(unknown)}")
        if self.sign_override is not None and "no_elect" in self.ablation:
            raise InvalidConfigError("sign_override conflicts with the no_elect ablation")

    @property
    def effective_lambda(self) -> float:
        return 1.0 if "no_scale" in self.ablation else self.lam


@dataclass
class TrimmedTaskVector(TaskVector):
    """A task vector after trimming, with bookkeeping for the kept set."""

    kept_count: int = 0
    threshold_magnitude: float = 0.0
    per_tensor_kept: dict[str, int] = field(default_factory=dict)


def kept_count_for(k_percent: float, d: int) -> int:
    """round-half-up(k/100 * d), clamped to [1, d]; exact in rationals."""
    if d <= 0:
        return 0
    kc = math.floor(Fraction(float(k_percent)) * d / 100 + Fraction(1, 2))
    return min(max(kc, 1), d)


def _keep_mask(
    mags: np.ndarray, threshold: float, ties_budget: int
) -> tuple[np.ndarray, int]:
    """Boolean keep mask: everything above threshold plus the first
    ``ties_budget`` at-threshold entries in flat order. Returns the mask and
    the budget still unconsumed."""
    mask = mags > threshold
    if ties_budget > 0:
        tie_idx = np.flatnonzero(mags == threshold)
        take = tie_idx[:ties_budget]
        mask.flat[take] = True
        ties_budget -= take.size
    return mask, ties_budget


def trim(
    tau: TaskVector,
    k_percent: float,
    granularity: str = "global",
    *,
    threads: int | None = None,
) -> TrimmedTaskVector:
    """Keep the top-k% entries by magnitude, reset the rest to zero.

    The kept set equals the oracle that stable-sorts all elements by
    (magnitude descending, flat index ascending) and keeps the first
    round-half-up(k/100 * d). k=100 is the identity.
    """
    if not (0.0 < float(k_percent) <= 100.0):
        raise InvalidConfigError(f"k_percent must be in (0, 100], got {k_percent}")
    if granularity not in GRANULARITIES:
        raise InvalidConfigError(f"granularity must be one of {GRANULARITIES}")

    names = list(tau.deltas)
    out: dict[str, np.ndarray] = {}
    per_tensor_kept: dict[str, int] = {}

    if granularity == "per-tensor":
        thresholds = []
        for name in names:
            v = tau.deltas[name]
            mags = np.abs(v).ravel()
            kc = kept_count_for(k_percent, v.size)
            if kc >= v.size:
                out[name] = v.copy()
                per_tensor_kept[name] = v.size
                if v.size:
                    thresholds.append(float(mags.min()))
                continue
            thr = float(np.partition(mags, v.size - kc)[v.size - kc])
            above = int(np.count_nonzero(mags > thr))
            mask, _ = _keep_mask(mags, thr, kc - above)
            out[name] = np.where(mask.reshape(v.shape), v, 0.0)
            per_tensor_kept[name] = kc
            thresholds.append(thr)
        total_kept = sum(per_tensor_kept.values())
        threshold = min(thresholds) if thresholds else 0.0
        return TrimmedTaskVector(
            out,
            base_fingerprint=tau.base_fingerprint,
            kept_count=total_kept,
            threshold_magnitude=threshold,
            per_tensor_kept=per_tensor_kept,
        )

    d_total = tau.total_params
    kc = kept_count_for(k_percent, d_total)
    if kc >= d_total:
        for name in names:
            out[name] = tau.deltas[name].copy()
            per_tensor_kept[name] = tau.deltas[name].size
        all_mags = [np.abs(v).min() for v in tau.deltas.values() if v.size]
        threshold = float(min(all_mags)) if all_mags else 0.0
        return TrimmedTaskVector(
            out,
            base_fingerprint=tau.base_fingerprint,
            kept_count=d_total,
            threshold_magnitude=threshold,
            per_tensor_kept=per_tensor_kept,
        )

    mags_by_name = map_named(lambda n: np.abs(tau.deltas[n]).ravel(), names, threads)
    flat = (
        np.concatenate([mags_by_name[n] for n in names])
        if len(names) > 1
        else mags_by_name[names[0]]
    )
    threshold = float(np.partition(flat, d_total - kc)[d_total - kc])
    above = int(np.count_nonzero(flat > threshold))

    # Tie budget is consumed in flat global order, i.e. tensor by tensor.
    budget = kc - above
    masks: dict[str, np.ndarray] = {}
    for name in names:
        masks[name], budget = _keep_mask(mags_by_name[name], threshold, budget)
        per_tensor_kept[name] = int(np.count_nonzero(masks[name]))

    def one(name: str) -> np.ndarray:
        v = tau.deltas[name]
        return np.where(masks[name].reshape(v.shape), v, 0.0)

    out = map_named(one, names, threads)
    return TrimmedTaskVector(
        out,
        base_fingerprint=tau.base_fingerprint,
        kept_count=kc,
        threshold_magnitude=threshold,
        per_tensor_kept=per_tensor_kept,
    )


def elect_sign(
    vectors: Sequence[TaskVector], *, threads: int | None = None
) -> SignVector:
    """Per parameter, the sign of the float64 sum of values in task order."""
    if not vectors:
        raise InvalidConfigError("elect_sign requires at least one task vector")
    _check_same_schema(vectors[0], vectors[1:])

    def one(name: str) -> np.ndarray:
        acc = np.zeros(vectors[0].deltas[name].shape, dtype=np.float64)
        for v in vectors:
            acc += v.deltas[name]
        return np.sign(acc).astype(np.int8)

    return SignVector(map_named(one, list(vectors[0].deltas), threads))


def _sign_match(values: np.ndarray, signs: np.ndarray) -> np.ndarray:
    return ((values > 0) & (signs > 0)) | ((values < 0) & (signs < 0))


def disjoint_merge(
    vectors: Sequence[TaskVector],
    elected: SignVector,
    *,
    threads: int | None = None,
) -> TaskVector:
    """Mean over the values whose sign matches the elected sign, per
    parameter, ignoring zeros; 0 where nothing matches."""
    if not vectors:
        raise InvalidConfigError("disjoint_merge requires at least one task vector")
    _check_same_schema(vectors[0], vectors[1:])
    if elected.schema() != vectors[0].schema():
        raise SchemaMismatchError("elected sign vector schema does not match task vectors")

    def one(name: str) -> np.ndarray:
        g = elected.signs[name]
        num = np.zeros(g.shape, dtype=np.float64)
        cnt = np.zeros(g.shape, dtype=np.int32)
        for v in vectors:
            vals = v.deltas[name]
            contrib = _sign_match(vals, g)
            num += np.where(contrib, vals, 0.0)
            cnt += contrib
        return num / np.maximum(cnt, 1)

    merged = map_named(one, list(vectors[0].deltas), threads)
    return TaskVector(merged, base_fingerprint=vectors[0].base_fingerprint)


@dataclass
class MergeStats:
    """Intermediate statistics collected while merging task vectors."""

    per_tensor_kept: dict[str, int]
    per_tensor_conflicts: dict[str, int]
    per_tensor_l2: dict[str, float]
    total_params: int
    conflict_params: int
    elected_positive: int
    elected_nonzero: int
    empty_selection: int


def merge_task_vectors(
    taus: Sequence[TaskVector],
    cfg: TiesConfig,
    *,
    threads: int | None = None,
) -> tuple[TaskVector, MergeStats]:
    """Run trim/elect/merge (honoring ablations) on task vectors.

    Returns the merged task vector before lambda scaling, plus statistics
    for the merge report.
    """
    cfg.validate()
    if not taus:
        raise InvalidConfigError("at least one task vector is required")
    _check_same_schema(taus[0], taus[1:])
    names = list(taus[0].deltas)
    n = len(taus)

    if "no_trim" in cfg.ablation:
        vectors: Sequence[TaskVector] = list(taus)
    else:
        vectors = [trim(t, cfg.k_percent, cfg.granularity, threads=threads) for t in taus]

    use_elect = "no_elect" not in cfg.ablation
    if cfg.sign_override is not None:
        if cfg.sign_override.schema() != taus[0].schema():
            raise SchemaMismatchError("sign override schema does not match task vectors")
        elected = cfg.sign_override
    elif use_elect:
        elected = elect_sign(vectors, threads=threads)
    else:
        elected = None

    divide_by_n = "no_disjoint_mean" in cfg.ablation

    def one(name: str):
        num = np.zeros(vectors[0].deltas[name].shape, dtype=np.float64)
        cnt = np.zeros(num.shape, dtype=np.int32)
        has_pos = np.zeros(num.shape, dtype=bool)
        has_neg = np.zeros(num.shape, dtype=bool)
        for v in vectors:
            vals = v.deltas[name]
            has_pos |= vals > 0
            has_neg |= vals < 0
            contrib = _sign_match(vals, elected.signs[name]) if elected is not None else vals != 0
            num += np.where(contrib, vals, 0.0)
            cnt += contrib
        merged = num / n if divide_by_n else num / np.maximum(cnt, 1)
        kept = int(np.count_nonzero(has_pos | has_neg))
        conflicts = int(np.count_nonzero(has_pos & has_neg))
        empty = int(np.count_nonzero(cnt == 0))
        l2 = float(np.sqrt(np.sum(merged * merged)))
        return merged, kept, conflicts, empty, l2

    results = map_named(one, names, threads)

    merged = {name: results[name][0] for name in names}
    stats = MergeStats(
        per_tensor_kept={n_: results[n_][1] for n_ in names},
        per_tensor_conflicts={n_: results[n_][2] for n_ in names},
        per_tensor_l2={n_: results[n_][4] for n_ in names},
        total_params=taus[0].total_params,
        conflict_params=sum(results[n_][2] for n_ in names),
        elected_positive=(
            sum(int(np.count_nonzero(elected.signs[n_] > 0)) for n_ in names)
            if elected is not None
            else 0
        ),
        elected_nonzero=(
            sum(int(np.count_nonzero(elected.signs[n_] != 0)) for n_ in names)
            if elected is not None
            else 0
        ),
        empty_selection=sum(results[n_][3] for n_ in names),
    )
    return TaskVector(merged, base_fingerprint=taus[0].base_fingerprint), stats


def _config_echo(cfg: TiesConfig) -> dict:
    echo = {
        "k_percent": cfg.k_percent,
        "lambda": cfg.effective_lambda,
        "granularity": cfg.granularity,
        "ablation": sorted(cfg.ablation),
        "sign_override": cfg.sign_override is not None,
    }
    return echo


def ties_merge(
    base: Checkpoint,
    finetuned: Sequence[Checkpoint],
    cfg: TiesConfig,
    *,
    threads: int | None = None,
) -> tuple[Checkpoint, MergeReport]:
    """End-to-end merge: task vectors, trim, elect, disjoint merge, scale.

    Returns the merged checkpoint and a populated merge report (provenance
    paths are left for the caller to fill in).
    """
    cfg.validate()
    if not finetuned:
        raise InvalidConfigError("at least one fine-tuned checkpoint is required")
    taus = [compute_task_vector(ft, base, threads=threads) for ft in finetuned]
    tau_m, stats = merge_task_vectors(taus, cfg, threads=threads)
    merged = apply_task_vector(base, tau_m, cfg.effective_lambda, threads=threads)

    sizes = {name: v.size for name, v in tau_m.deltas.items()}
    per_tensor = [
        PerTensorStats(
            name=name,
            l2_norm_of_delta=stats.per_tensor_l2[name],
            kept_count=stats.per_tensor_kept[name],
            conflict_fraction=(
                stats.per_tensor_conflicts[name] / sizes[name] if sizes[name] else 0.0
            ),
        )
        for name in tau_m.deltas
    ]
    total = stats.total_params
    report = MergeReport(
        method="ties",
        config=_config_echo(cfg),
        per_tensor=per_tensor,
        global_stats=GlobalStats(
            total_params=total,
            kept_params=sum(stats.per_tensor_kept.values()),
            sign_conflict_fraction_after_trim=(
                stats.conflict_params / total if total else 0.0
            ),
            elected_positive_fraction=(
                stats.elected_positive / stats.elected_nonzero
                if stats.elected_nonzero
                else 0.0
            ),
            empty_A_fraction=stats.empty_selection / total if total else 0.0,
        ),
    )
    report.validate()
    return merged, report
