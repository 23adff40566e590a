import json

import pytest

from tensor_ties.errors import InvalidConfigError
from tensor_ties.report import GlobalStats, MergeReport, PerTensorStats, Provenance


def make_report(kept=4, conflict=0.25) -> MergeReport:
    return MergeReport(
        method="ties",
        config={"k": 20.0},
        per_tensor=[PerTensorStats("w", 1.5, kept, conflict)],
        global_stats=GlobalStats(
            total_params=8,
            kept_params=4,
            sign_conflict_fraction_after_trim=conflict,
            elected_positive_fraction=0.5,
            empty_A_fraction=0.0,
        ),
        provenance=Provenance("base.st", ["a.st"], "0.1.0", 12.5),
    )


def test_report_round_trips_as_sorted_json():
    report = make_report()
    report.validate()
    text = report.to_json()
    payload = json.loads(text)
    assert list(payload) == sorted(payload)
    assert payload["global"]["kept_params"] == 4
    assert payload["provenance"]["model_paths"] == ["a.st"]
    assert text == report.to_json()  # byte-stable


def test_report_kept_invariant_enforced():
    report = make_report(kept=3)
    with pytest.raises(InvalidConfigError):
        report.validate()


def test_report_fraction_bounds_enforced():
    report = make_report(conflict=1.5)
    with pytest.raises(InvalidConfigError):
        report.validate()
