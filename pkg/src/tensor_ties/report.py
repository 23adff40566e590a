"""Machine-readable statistics of a merge run.

Reports serialize to JSON with sorted keys so that CI can diff them.
``kept_count`` for a tensor is the number of positions where at least one
(trimmed) task vector is nonzero; for methods that never trim it equals the
tensor size. Conflict/election statistics are zero for runs that have no
task-vector stage (e.g. plain averaging without a base checkpoint).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import InvalidConfigError


@dataclass
class PerTensorStats:
    name: str
    l2_norm_of_delta: float
    kept_count: int
    conflict_fraction: float


@dataclass
class GlobalStats:
    total_params: int
    kept_params: int
    sign_conflict_fraction_after_trim: float
    elected_positive_fraction: float
    empty_A_fraction: float


@dataclass
class Provenance:
    base_path: str | None = None
    model_paths: list[str] = field(default_factory=list)
    tool_version: str = ""
    wall_time_ms: float = 0.0


@dataclass
class MergeReport:
    method: str
    config: dict
    per_tensor: list[PerTensorStats]
    global_stats: GlobalStats
    provenance: Provenance = field(default_factory=Provenance)
    # method-specific extras, e.g. which solve path each RegMean layer took
    details: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.global_stats.kept_params != sum(t.kept_count for t in self.per_tensor):
            raise InvalidConfigError("kept_params != sum of per-tensor kept_count")
        fractions = [
            self.global_stats.sign_conflict_fraction_after_trim,
            self.global_stats.elected_positive_fraction,
            self.global_stats.empty_A_fraction,
            *(t.conflict_fraction for t in self.per_tensor),
        ]
        if any(f < 0.0 or f > 1.0 for f in fractions):
            raise InvalidConfigError("report fraction outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "config": self.config,
            "per_tensor": [asdict(t) for t in self.per_tensor],
            "global": asdict(self.global_stats),
            "provenance": asdict(self.provenance),
            "details": self.details,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")
