import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tensor_ties.archive import Checkpoint
from tensor_ties.errors import InvalidConfigError, SchemaMismatchError
from tensor_ties.task_vector import SignVector, TaskVector
from tensor_ties.ties import (
    TiesConfig,
    disjoint_merge,
    elect_sign,
    kept_count_for,
    ties_merge,
    trim,
)

from oracle import merge_scalar, round_half_up_min1, trim_scalar


def tv(*values, name="w") -> TaskVector:
    return TaskVector({name: np.asarray(values, dtype=np.float64)})


def fckpt(*values, name="w") -> Checkpoint:
    return Checkpoint({name: np.asarray(values, dtype=np.float32)})


# --- kept-count rounding -------------------------------------------------

@pytest.mark.parametrize(
    "k,d,expected",
    [
        (20.0, 10, 2),
        (50.0, 5, 3),     # 2.5 rounds half-up to 3
        (15.0, 10, 2),    # 1.5 rounds half-up to 2
        (25.0, 10, 3),    # 2.5 rounds half-up to 3
        (100.0, 7, 7),
        (1.0, 10000, 100),
        (0.001, 100, 1),  # minimum 1
        (40.0, 5, 2),
    ],
)
def test_kept_count_round_half_up(k, d, expected):
    assert kept_count_for(k, d) == expected
    assert round_half_up_min1(k, d) == expected


# --- trim -----------------------------------------------------------------

def test_trim_spec_example():
    t = tv(0.1, -3.0, 0.5, 2.0, -0.2)
    out = trim(t, 40.0)
    np.testing.assert_array_equal(out.deltas["w"], [0.0, -3.0, 0.0, 2.0, 0.0])
    assert out.kept_count == 2
    assert out.threshold_magnitude == 2.0


def test_trim_k100_is_identity(rng):
    t = TaskVector({"w": rng.standard_normal(57)})
    out = trim(t, 100.0)
    np.testing.assert_array_equal(out.deltas["w"], t.deltas["w"])
    assert out.kept_count == 57


def test_trim_tie_break_lower_flat_index_wins():
    t = tv(1.0, -1.0, 1.0, -1.0)
    out = trim(t, 50.0)
    np.testing.assert_array_equal(out.deltas["w"], [1.0, -1.0, 0.0, 0.0])


def test_trim_tie_break_across_tensors():
    # flat order is lexicographic by name: a then b
    t = TaskVector({"b": np.array([2.0, 2.0]), "a": np.array([2.0, 2.0])})
    out = trim(t, 50.0)
    np.testing.assert_array_equal(out.deltas["a"], [2.0, 2.0])
    np.testing.assert_array_equal(out.deltas["b"], [0.0, 0.0])


def test_trim_default_k_matches_no_validation_recipe():
    assert TiesConfig().k_percent == 20.0
    assert TiesConfig().lam == 1.0


def test_trim_global_vs_per_tensor():
    t = TaskVector({"a": np.array([3.0, 2.0]), "b": np.array([1.0, 0.5])})
    out_global = trim(t, 50.0, "global")
    np.testing.assert_array_equal(out_global.deltas["a"], [3.0, 2.0])
    np.testing.assert_array_equal(out_global.deltas["b"], [0.0, 0.0])
    out_per = trim(t, 50.0, "per-tensor")
    np.testing.assert_array_equal(out_per.deltas["a"], [3.0, 0.0])
    np.testing.assert_array_equal(out_per.deltas["b"], [1.0, 0.0])
    assert out_per.per_tensor_kept == {"a": 1, "b": 1}


def test_trim_kept_set_matches_sort_oracle(rng):
    for _ in range(25):
        d = int(rng.integers(1, 400))
        vals = rng.standard_normal(d)
        k = float(rng.choice([0.5, 3.0, 10.0, 20.0, 33.3, 50.0, 75.0, 99.0, 100.0]))
        got = trim(TaskVector({"w": vals}), k).deltas["w"]
        expected = np.array(trim_scalar([float(v) for v in vals], k))
        np.testing.assert_array_equal(got, expected)


def test_trim_kept_count_exact_on_ties(rng):
    signs = rng.choice([-1.0, 1.0], size=200)
    t = TaskVector({"w": signs * 0.25})  # every magnitude identical
    for k in (1.0, 10.0, 37.7, 50.0, 100.0):
        out = trim(t, k)
        assert int(np.count_nonzero(out.deltas["w"])) == kept_count_for(k, 200)


def test_trim_magnitude_separation_invariant(rng):
    vals = rng.standard_normal(300)
    out = trim(TaskVector({"w": vals}), 20.0)
    kept = out.deltas["w"] != 0
    assert np.abs(vals[kept]).min() >= np.abs(vals[~kept]).max() or np.isclose(
        np.abs(vals[kept]).min(), out.threshold_magnitude
    )


@given(
    st.lists(st.integers(-50, 50).map(float), min_size=1, max_size=40),
    st.sampled_from([12.5, 20.0, 50.0, 80.0]),
    st.sampled_from([2.0, 4.0, 0.5, 1.5, 3.0]),
)
def test_trim_set_scale_invariance(values, k, c):
    # integer-valued inputs times benign scales keep magnitudes exactly ordered
    t1 = TaskVector({"w": np.array(values)})
    t2 = TaskVector({"w": np.array(values) * c})
    kept1 = trim(t1, k).deltas["w"] != 0
    kept2 = trim(t2, k).deltas["w"] != 0
    np.testing.assert_array_equal(kept1, kept2)


def test_trim_rejects_bad_k():
    with pytest.raises(InvalidConfigError):
        trim(tv(1.0), 0.0)
    with pytest.raises(InvalidConfigError):
        trim(tv(1.0), 101.0)


# --- elect ----------------------------------------------------------------

def test_elect_spec_example():
    t1 = tv(0.0, -3.0, 0.0, 2.0, 0.0)
    t2 = tv(1.0, 1.0, 0.0, -2.0, 0.0)
    gamma = elect_sign([t1, t2])
    np.testing.assert_array_equal(gamma.signs["w"], [1, -1, 0, 0, 0])


def test_elect_single_vector_is_sign():
    t = tv(3.0, -0.5, 0.0)
    np.testing.assert_array_equal(elect_sign([t]).signs["w"], [1, -1, 0])


@given(
    st.lists(
        st.lists(st.integers(-20, 20).map(float), min_size=5, max_size=5),
        min_size=1,
        max_size=6,
    ),
    st.sampled_from([2.0, 0.5, 8.0, 1.5]),
)
def test_elect_positive_homogeneity(rows, c):
    vecs = [tv(*row) for row in rows]
    scaled = [tv(*[v * c for v in row]) for row in rows]
    np.testing.assert_array_equal(
        elect_sign(vecs).signs["w"], elect_sign(scaled).signs["w"]
    )


# --- disjoint merge --------------------------------------------------------

def test_disjoint_merge_spec_example():
    t1 = tv(0.0, -3.0, 0.0, 2.0, 0.0)
    t2 = tv(1.0, 1.0, 0.0, -2.0, 0.0)
    gamma = SignVector({"w": np.array([1, -1, 0, 0, 0], np.int8)})
    out = disjoint_merge([t1, t2], gamma)
    np.testing.assert_array_equal(out.deltas["w"], [1.0, -3.0, 0.0, 0.0, 0.0])


def test_disjoint_merge_identical_vectors():
    t = tv(1.0, -2.0, 0.0, 4.0)
    out = disjoint_merge([t, t, t], elect_sign([t]))
    np.testing.assert_array_equal(out.deltas["w"], t.deltas["w"])


def test_disjoint_merge_equals_mean_when_signs_agree(rng):
    from tensor_ties.task_vector import linear_combination

    mags = [rng.uniform(0.5, 2.0, 64) for _ in range(4)]
    signs = rng.choice([-1.0, 1.0], 64)
    vecs = [TaskVector({"w": signs * m}) for m in mags]
    out = disjoint_merge(vecs, elect_sign(vecs))
    mean = linear_combination(vecs, [0.25] * 4)
    np.testing.assert_allclose(out.deltas["w"], mean.deltas["w"], rtol=1e-12)


@given(
    st.lists(
        st.lists(st.floats(-100, 100, allow_nan=False, width=32).map(float),
                 min_size=6, max_size=6),
        min_size=2,
        max_size=7,
    )
)
def test_disjoint_merge_bounds(rows):
    vecs = [tv(*row) for row in rows]
    gamma = elect_sign(vecs)
    out = disjoint_merge(vecs, gamma).deltas["w"]
    stacked = np.array([v.deltas["w"] for v in vecs])
    assert (np.abs(out) <= np.abs(stacked).max(axis=0) + 1e-12).all()
    sign_out = np.sign(out).astype(np.int8)
    assert ((sign_out == 0) | (sign_out == gamma.signs["w"])).all()


def test_disjoint_merge_schema_check():
    gamma = SignVector({"w": np.array([1], np.int8)})
    with pytest.raises(SchemaMismatchError):
        disjoint_merge([tv(1.0, 2.0)], gamma)


# --- end-to-end ties_merge --------------------------------------------------

def test_n1_k100_lambda1_returns_input_bit_exact(rng):
    base = fckpt(*rng.standard_normal(128))
    ft = fckpt(*rng.standard_normal(128))
    merged, report = ties_merge(base, [ft], TiesConfig(k_percent=100.0, lam=1.0))
    assert np.array_equal(merged["w"], ft["w"])
    assert report.global_stats.total_params == 128


def test_idempotence_on_copies(rng):
    base = fckpt(*rng.standard_normal(64))
    ft = fckpt(*rng.standard_normal(64))
    merged, _ = ties_merge(base, [ft, ft, ft], TiesConfig(k_percent=100.0, lam=1.0))
    assert np.array_equal(merged["w"], ft["w"])


def test_sign_uniform_k100_matches_task_arithmetic(rng):
    from tensor_ties.baselines import task_arithmetic

    d, n = 256, 5
    base_vals = rng.standard_normal(d).astype(np.float32)
    signs = rng.choice([-1.0, 1.0], d)
    models = []
    for _ in range(n):
        taudelta = signs * rng.uniform(0.1, 1.0, d)
        models.append(fckpt(*(base_vals.astype(np.float64) + taudelta)))
    base = fckpt(*base_vals)
    lam = 0.7
    merged, _ = ties_merge(base, models, TiesConfig(k_percent=100.0, lam=lam))
    ta = task_arithmetic(base, models, lam / n)
    np.testing.assert_allclose(merged["w"], ta["w"], rtol=1e-6, atol=1e-8)


def test_matches_scalar_transcription_small(rng):
    for _ in range(10):
        d = int(rng.integers(3, 60))
        n = int(rng.integers(1, 6))
        k = float(rng.choice([1.0, 10.0, 20.0, 50.0, 100.0]))
        lam = float(rng.uniform(0.3, 2.0))
        base_vals = rng.standard_normal(d).astype(np.float32)
        model_vals = [
            (base_vals.astype(np.float64) + rng.standard_normal(d) * 0.5).astype(np.float32)
            for _ in range(n)
        ]
        merged, _ = ties_merge(
            Checkpoint({"w": base_vals}),
            [Checkpoint({"w": m}) for m in model_vals],
            TiesConfig(k_percent=k, lam=lam),
        )
        expected = merge_scalar(
            [float(x) for x in base_vals],
            [[float(x) for x in m] for m in model_vals],
            k,
            lam,
        )
        assert np.array_equal(merged["w"], np.array(expected, np.float32))


# --- ablation fixtures (hand-computed, 8 elements, 3 tasks, k=50) -----------

BASE8 = np.zeros(8, np.float32)
TAU1 = np.array([5.0, -4.0, 3.0, 2.0, 1.0, -1.0, 0.5, 0.0], np.float32)
TAU2 = np.array([-3.0, 6.0, 1.0, -2.0, 4.0, 0.5, 2.0, -1.0], np.float32)
TAU3 = np.array([2.0, -2.0, -6.0, 1.0, -3.0, 5.0, 0.0, 4.0], np.float32)


def _fixture_merge(ablation=(), lam=1.0, k=50.0):
    base = Checkpoint({"w": BASE8})
    models = [Checkpoint({"w": t}) for t in (TAU1, TAU2, TAU3)]
    cfg = TiesConfig(k_percent=k, lam=lam, ablation=frozenset(ablation))
    merged, report = ties_merge(base, models, cfg)
    return merged["w"], report


def test_full_ties_hand_fixture():
    # trimmed (k=50, keep 4 of 8 per task):
    #   tau1 -> [5,-4,3,2,0,0,0,0]
    #   tau2 -> [-3,6,0,-2,4,0,0,0]   (tie at |2|: flat index 3 beats 6)
    #   tau3 -> [0,0,-6,0,-3,5,0,4]
    # elect sums: [2,2,-3,0,1,5,0,4] -> gamma [1,1,-1,0,1,1,0,1]
    # disjoint means: [5,6,-6,0,4,5,0,4]
    got, report = _fixture_merge()
    np.testing.assert_array_equal(got, [5.0, 6.0, -6.0, 0.0, 4.0, 5.0, 0.0, 4.0])
    assert report.global_stats.kept_params == 7  # positions with any nonzero trimmed value


def test_no_trim_hand_fixture():
    # raw sums: [4,0,-2,1,2,4.5,2.5,3] -> gamma [1,0,-1,1,1,1,1,1]
    # disjoint: [3.5, 0, -6, 1.5, 2.5, 2.75, 1.25, 4]
    got, _ = _fixture_merge(ablation=("no_trim",))
    np.testing.assert_array_equal(got, [3.5, 0.0, -6.0, 1.5, 2.5, 2.75, 1.25, 4.0])


def test_no_elect_hand_fixture():
    # mean of nonzero trimmed values regardless of sign:
    # [ (5-3)/2, (-4+6)/2, (3-6)/2, (2-2)/2, (4-3)/2, 5, 0, 4 ]
    got, _ = _fixture_merge(ablation=("no_elect",))
    np.testing.assert_array_equal(got, [1.0, 1.0, -1.5, 0.0, 0.5, 5.0, 0.0, 4.0])


def test_no_disjoint_mean_hand_fixture():
    # elected-sign sums divided by n=3 (zeros included in the denominator)
    expected = np.array([5 / 3, 2.0, -2.0, 0.0, 4 / 3, 5 / 3, 0.0, 4 / 3])
    got, _ = _fixture_merge(ablation=("no_disjoint_mean",))
    np.testing.assert_array_equal(got, expected.astype(np.float32))


def test_no_scale_hand_fixture():
    # lambda=2 without the flag doubles; with no_scale it is forced back to 1
    scaled, _ = _fixture_merge(lam=2.0)
    np.testing.assert_array_equal(scaled, [10.0, 12.0, -12.0, 0.0, 8.0, 10.0, 0.0, 8.0])
    unscaled, _ = _fixture_merge(ablation=("no_scale",), lam=2.0)
    np.testing.assert_array_equal(unscaled, [5.0, 6.0, -6.0, 0.0, 4.0, 5.0, 0.0, 4.0])


def test_ablations_match_scalar_transcription():
    base = [float(x) for x in BASE8]
    models = [[float(x) for x in t] for t in (TAU1, TAU2, TAU3)]
    for ablation in ((), ("no_trim",), ("no_elect",), ("no_disjoint_mean",), ("no_scale",),
                     ("no_trim", "no_elect"), ("no_elect", "no_disjoint_mean")):
        got, _ = _fixture_merge(ablation=ablation, lam=1.5)
        expected = merge_scalar(base, models, 50.0, 1.5, frozenset(ablation))
        assert np.array_equal(got, np.array(expected, np.float32)), ablation


# --- sign override -----------------------------------------------------------

def test_sign_override_beats_election():
    # election picks gamma = [-1, +1, 0, +1]; the supplied signs disagree at
    # the first three positions and must drive the merge instead
    base = Checkpoint({"w": np.zeros(4, np.float32)})
    models = [
        Checkpoint({"w": np.array([1.0, -1.0, 2.0, 0.0], np.float32)}),
        Checkpoint({"w": np.array([2.0, -2.0, -1.0, 1.0], np.float32)}),
        Checkpoint({"w": np.array([-4.0, 4.0, -1.0, 1.0], np.float32)}),
    ]
    elected, _ = ties_merge(base, models, TiesConfig(k_percent=100.0))
    np.testing.assert_array_equal(elected["w"], [-4.0, 4.0, 0.0, 1.0])

    override = SignVector({"w": np.array([1, -1, 1, 1], np.int8)})
    cfg = TiesConfig(k_percent=100.0, sign_override=override)
    merged, _ = ties_merge(base, models, cfg)
    np.testing.assert_array_equal(merged["w"], [1.5, -1.5, 2.0, 1.0])


def test_sign_override_conflicts_with_no_elect():
    override = SignVector({"w": np.array([1], np.int8)})
    cfg = TiesConfig(sign_override=override, ablation=frozenset({"no_elect"}))
    with pytest.raises(InvalidConfigError):
        cfg.validate()


def test_merge_requires_models():
    base = fckpt(1.0)
    with pytest.raises(InvalidConfigError):
        ties_merge(base, [], TiesConfig())


# --- determinism under threads ------------------------------------------------

def test_thread_count_does_not_change_results(rng):
    tensors = {f"t{i}": rng.standard_normal(500).astype(np.float32) for i in range(6)}
    base = Checkpoint(tensors)
    models = [
        Checkpoint({k: (v + rng.standard_normal(500) * 0.1).astype(np.float32)
                    for k, v in tensors.items()})
        for _ in range(4)
    ]
    outputs = []
    for threads in (1, 2, 8):
        merged, _ = ties_merge(base, models, TiesConfig(), threads=threads)
        outputs.append(b"".join(merged[n].tobytes() for n in merged.names()))
    assert outputs[0] == outputs[1] == outputs[2]
