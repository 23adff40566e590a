import numpy as np
import pytest

from tensor_ties.archive import Checkpoint
from tensor_ties.baselines import (
    FisherSidecar,
    GramSidecar,
    fisher_merge,
    regmean_merge,
    simple_average,
    task_arithmetic,
)
from tensor_ties.errors import InvalidConfigError, SchemaMismatchError, ValidationError
from tensor_ties.task_vector import apply_task_vector, compute_task_vector, linear_combination


def fckpt(**tensors) -> Checkpoint:
    return Checkpoint({k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()})


# --- simple averaging ---------------------------------------------------------

def test_average_of_copies_is_identity(rng):
    ck = fckpt(w=rng.standard_normal(40))
    out = simple_average([ck, ck, ck])
    np.testing.assert_array_equal(out["w"], ck["w"])


def test_average_scalar_oracle():
    out = simple_average([fckpt(w=[2.0, 0.0]), fckpt(w=[0.0, 4.0])])
    np.testing.assert_array_equal(out["w"], [1.0, 2.0])


def test_average_empty_list_rejected():
    with pytest.raises(InvalidConfigError):
        simple_average([])


def test_average_carry_over_from_first():
    a = Checkpoint({"w": np.ones(2, np.float32), "step": np.array([3], np.int64)})
    b = Checkpoint({"w": np.zeros(2, np.float32), "step": np.array([8], np.int64)})
    out = simple_average([a, b])
    assert out["step"].tolist() == [3]


# --- task arithmetic ------------------------------------------------------------

def test_task_arithmetic_n1_lambda1_is_identity(rng):
    base = fckpt(w=rng.standard_normal(64))
    ft = fckpt(w=rng.standard_normal(64))
    out = task_arithmetic(base, [ft], 1.0)
    assert np.array_equal(out["w"], ft["w"])


def test_task_arithmetic_default_lambda_is_04():
    import inspect

    sig = inspect.signature(task_arithmetic)
    assert sig.parameters["lam"].default == 0.4


def test_task_arithmetic_scalar_oracle():
    base = fckpt(w=[1.0])
    out = task_arithmetic(base, [fckpt(w=[2.0]), fckpt(w=[0.0])], 0.5)
    # tau sum = (2-1) + (0-1) = 0 -> output equals base
    np.testing.assert_array_equal(out["w"], [1.0])


def test_task_arithmetic_structural_identity(rng):
    base = fckpt(w=rng.standard_normal(128))
    models = [fckpt(w=rng.standard_normal(128)) for _ in range(3)]
    lam = 0.4
    out = task_arithmetic(base, models, lam)
    taus = [compute_task_vector(m, base) for m in models]
    manual = apply_task_vector(base, linear_combination(taus, [1.0] * 3), lam)
    assert np.array_equal(out["w"], manual["w"])


# --- fisher merging ---------------------------------------------------------------

def test_fisher_uniform_equals_simple_average(rng):
    models = [fckpt(w=rng.standard_normal(512)) for _ in range(4)]
    ones = FisherSidecar({"w": np.ones(512, np.float32)})
    out = fisher_merge(models, [ones] * 4)
    avg = simple_average(models)
    assert np.max(np.abs(out["w"].astype(np.float64) - avg["w"].astype(np.float64))) <= 1e-6


def test_fisher_scalar_oracle():
    models = [fckpt(w=[10.0]), fckpt(w=[0.0])]
    fishers = [
        FisherSidecar({"w": np.array([3.0], np.float32)}),
        FisherSidecar({"w": np.array([1.0], np.float32)}),
    ]
    out = fisher_merge(models, fishers)
    # (3*10 + 1*0) / (3+1) = 7.5
    np.testing.assert_array_equal(out["w"], [7.5])


def test_fisher_zero_mass_falls_back_to_mean():
    models = [fckpt(w=[2.0]), fckpt(w=[4.0])]
    zeros = FisherSidecar({"w": np.zeros(1, np.float32)})
    out = fisher_merge(models, [zeros, zeros])
    np.testing.assert_array_equal(out["w"], [3.0])


def test_fisher_negative_values_rejected():
    with pytest.raises(ValidationError):
        FisherSidecar({"w": np.array([-1.0], np.float32)})


def test_fisher_proportional_weights(rng):
    # F_t = c_t * ones reduces to the weighted mean with weights c_t / sum(c)
    models = [fckpt(w=rng.standard_normal(256)) for _ in range(3)]
    consts = [0.5, 2.0, 5.0]
    fishers = [FisherSidecar({"w": np.full(256, c, np.float32)}) for c in consts]
    out = fisher_merge(models, fishers)
    weights = np.array(consts) / sum(consts)
    expected = sum(
        w * m["w"].astype(np.float64) for w, m in zip(weights, models)
    )
    assert np.max(np.abs(out["w"] - expected)) <= 1e-6


def test_fisher_requires_aligned_sidecars():
    models = [fckpt(w=[1.0]), fckpt(w=[2.0])]
    with pytest.raises(InvalidConfigError):
        fisher_merge(models, [FisherSidecar({"w": np.ones(1, np.float32)})])


# --- regmean ---------------------------------------------------------------------

def test_regmean_identity_grams_equal_average(rng):
    shapes = {"lin1.w": (12, 8), "lin2.w": (8, 16)}
    models = [
        Checkpoint({k: rng.standard_normal(v).astype(np.float32) for k, v in shapes.items()})
        for _ in range(3)
    ]
    grams = [
        GramSidecar({k: np.eye(v[0], dtype=np.float32) for k, v in shapes.items()})
        for _ in range(3)
    ]
    result = regmean_merge(models, grams, alpha=0.0, ridge=0.0)
    avg = simple_average(models)
    for name in shapes:
        assert np.max(np.abs(result.checkpoint[name].astype(np.float64)
                             - avg[name].astype(np.float64))) <= 1e-6
        assert result.layer_paths[name] == "solved"


def test_regmean_n1_recovers_weights(rng):
    w = rng.standard_normal((6, 3)).astype(np.float32)
    a = rng.standard_normal((20, 6))
    gram = (a.T @ a).astype(np.float32)
    result = regmean_merge(
        [Checkpoint({"lin.w": w})], [GramSidecar({"lin.w": gram})], alpha=0.0, ridge=0.0
    )
    np.testing.assert_allclose(result.checkpoint["lin.w"], w, rtol=1e-6, atol=1e-6)


def test_regmean_2x2_closed_form_oracle():
    # in-dim 2, out-dim 1: solve diag(5,2) W = [[4],[1]] -> [[0.8],[0.5]]
    w1 = np.array([[1.0], [0.0]], np.float32)
    w2 = np.array([[0.0], [1.0]], np.float32)
    g1 = np.diag([4.0, 1.0]).astype(np.float32)
    g2 = np.diag([1.0, 1.0]).astype(np.float32)
    result = regmean_merge(
        [Checkpoint({"lin.w": w1}), Checkpoint({"lin.w": w2})],
        [GramSidecar({"lin.w": g1}), GramSidecar({"lin.w": g2})],
        alpha=0.0,
        ridge=0.0,
    )
    np.testing.assert_allclose(result.checkpoint["lin.w"], [[0.8], [0.5]], rtol=1e-6)


def test_regmean_out_in_orientation():
    # weights stored [out, in]: same system as above on the transpose
    w1 = np.array([[1.0, 0.0]], np.float32)
    w2 = np.array([[0.0, 1.0]], np.float32)
    g1 = np.diag([4.0, 1.0]).astype(np.float32)
    g2 = np.diag([1.0, 1.0]).astype(np.float32)
    result = regmean_merge(
        [Checkpoint({"lin.w": w1}), Checkpoint({"lin.w": w2})],
        [GramSidecar({"lin.w": g1}), GramSidecar({"lin.w": g2})],
        alpha=0.0,
        ridge=0.0,
    )
    np.testing.assert_allclose(result.checkpoint["lin.w"], [[0.8, 0.5]], rtol=1e-6)


def test_regmean_residual_bound(rng):
    # residual of the solved system stays tiny relative to the right side
    n, dim, out_dim = 3, 32, 5
    models, sidecars = [], []
    for _ in range(n):
        a = rng.standard_normal((64, dim))
        sidecars.append(GramSidecar({"lin.w": (a.T @ a).astype(np.float32)}))
        models.append(Checkpoint({"lin.w": rng.standard_normal((dim, out_dim)).astype(np.float32)}))
    alpha = 0.1
    result = regmean_merge(models, sidecars, alpha=alpha)
    w_m = result.checkpoint["lin.w"].astype(np.float64)

    lhs = np.zeros((dim, dim))
    rhs = np.zeros((dim, out_dim))
    for m, s in zip(models, sidecars):
        g = s.grams["lin.w"].astype(np.float64)
        g = 0.5 * (g + g.T)
        g_shrunk = (1 - alpha) * g + alpha * np.diag(np.diag(g))
        lhs += g_shrunk
        rhs += g_shrunk @ m["lin.w"].astype(np.float64)
    ridge = 1e-6 * float(np.mean(np.diag(lhs)))
    residual = np.max(np.abs((lhs + ridge * np.eye(dim)) @ w_m - rhs))
    assert residual <= 1e-4 * np.max(np.abs(rhs))


def test_regmean_singular_system_falls_back():
    w = np.array([[1.0], [3.0]], np.float32)
    zero_gram = np.zeros((2, 2), np.float32)
    result = regmean_merge(
        [Checkpoint({"lin.w": w})], [GramSidecar({"lin.w": zero_gram})], alpha=0.0, ridge=0.0
    )
    assert result.layer_paths["lin.w"] == "fallback_singular"
    np.testing.assert_array_equal(result.checkpoint["lin.w"], w)


def test_regmean_layers_without_grams_average(rng):
    models = [
        Checkpoint({"lin.w": np.ones((2, 2), np.float32) * i, "bias": np.ones(2, np.float32) * i})
        for i in (1.0, 3.0)
    ]
    grams = [GramSidecar({"lin.w": np.eye(2, dtype=np.float32)})] * 2
    result = regmean_merge(models, grams, alpha=0.0, ridge=0.0)
    np.testing.assert_array_equal(result.checkpoint["bias"], [2.0, 2.0])
    assert result.layer_paths["bias"] == "averaged_no_gram"


def test_regmean_dimension_mismatch_rejected():
    w = np.zeros((3, 4), np.float32)
    gram = np.eye(5, dtype=np.float32)
    with pytest.raises(SchemaMismatchError, match="lin.w"):
        regmean_merge([Checkpoint({"lin.w": w})], [GramSidecar({"lin.w": gram})])


def test_gram_symmetry_validation():
    asym = np.array([[1.0, 2.0], [0.5, 1.0]], np.float32)
    with pytest.raises(ValidationError, match="symmetric"):
        GramSidecar({"lin.w": asym})


def test_all_baselines_n1_identity(rng):
    ck = fckpt(w=rng.standard_normal(32))
    base = fckpt(w=np.zeros(32))
    assert np.array_equal(simple_average([ck])["w"], ck["w"])
    assert np.array_equal(task_arithmetic(base, [ck], 1.0)["w"], ck["w"])
    ones = FisherSidecar({"w": np.ones(32, np.float32)})
    assert np.max(np.abs(fisher_merge([ck], [ones])["w"] - ck["w"])) <= 1e-6
