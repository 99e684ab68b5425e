import numpy as np
import pytest

from orthomerge.decoupling import (
    DecoupleStrategy,
    build_targets,
    column_cosines,
    conflict_masks,
    decompose,
    extract_rotation_and_residual,
    hybrid_merge,
    merged_rotation,
)
from orthomerge.errors import EmptyInputError, ShapeMismatchError
from orthomerge.euclidean import EuclideanMethod
from orthomerge.manifold import cayley, random_skew
from orthomerge.synthetic import SyntheticSpec, gen_planted


def test_column_cosine_zero_convention():
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    b = np.array([[2.0, 1.0], [0.0, 1.0]])
    np.testing.assert_allclose(column_cosines(a, b), [1.0, 0.0])


def test_conflict_mask_rule():
    t1 = np.array([[1.0, 1.0], [0.0, 1.0]])
    t2 = np.array([[1.0, -3.0], [0.0, -3.0]])
    # mean: col0 (1, 0), col1 (-1, -1)
    m1, m2 = conflict_masks([t1, t2])
    np.testing.assert_array_equal(m1, [False, True])
    np.testing.assert_array_equal(m2, [False, False])


def test_targets_global_and_aligned_conflict_aware():
    rng = np.random.default_rng(0)
    base = rng.standard_normal((3, 4))
    tau = rng.standard_normal((3, 4))
    experts = [base + tau, base + tau]
    g = build_targets(base, experts, "global")
    np.testing.assert_array_equal(g[0], experts[0])
    targets, masks = build_targets(base, experts, "conflict_aware", return_masks=True)
    for t, m in zip(targets, masks):
        np.testing.assert_array_equal(t, base)
        assert not m.any()


def test_opposite_task_vectors_give_base_targets():
    base = np.array([[1.0, 2.0], [3.0, 4.0]])
    tau = np.array([[0.5, -1.0], [2.0, 0.25]])
    targets = build_targets(base, [base + tau, base - tau], "conflict_aware")
    for t in targets:
        np.testing.assert_array_equal(t, base)


def test_targets_keep_only_conflicting_columns():
    base = np.zeros((2, 3))
    t1 = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    t2 = np.array([[1.0, -5.0, 1.0], [0.0, 0.0, 0.0]])
    targets = build_targets(base, [t1, t2], "conflict_aware")
    np.testing.assert_array_equal(targets[0], [[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(targets[1], np.zeros((2, 3)))


def test_reconstruction_identity():
    rng = np.random.default_rng(1)
    base = rng.standard_normal((6, 10))
    expert = cayley(random_skew(6, rng)).data @ base + 0.1 * rng.standard_normal((6, 10))
    for target in (expert, base):
        r, tv = extract_rotation_and_residual(base, expert, target)
        np.testing.assert_allclose(r.data @ base + tv.residual, expert, atol=1e-13)


def test_empty_mask_is_pure_euclidean():
    rng = np.random.default_rng(2)
    base = rng.standard_normal((4, 5))
    tau = rng.standard_normal((4, 5))
    r, tv = extract_rotation_and_residual(base, base + tau, base)
    np.testing.assert_array_equal(r.data, np.eye(4))
    np.testing.assert_allclose(tv.residual, tau, atol=1e-15)


def test_planted_rotation_has_zero_residual():
    fx = gen_planted(SyntheticSpec(d_in=8, d_out=16, num_tasks=3, seed=4))
    _, tvs = decompose(fx.w_base, fx.experts)
    for tv in tvs:
        assert np.linalg.norm(tv.residual) < 1e-12


@pytest.mark.parametrize("strategy", list(DecoupleStrategy))
def test_single_task_ta_is_exact(strategy):
    fx = gen_planted(SyntheticSpec(d_in=6, d_out=9, num_tasks=1, noise_scale=0.2, seed=3))
    out, diag = hybrid_merge(fx.w_base, fx.experts, strategy, EuclideanMethod(scale=1.0))
    np.testing.assert_allclose(out, fx.experts[0], atol=1e-12)
    assert diag.correction_factor in (1.0, "ZERO_SUM")


def test_residual_default_scale_is_one_over_n():
    rng = np.random.default_rng(5)
    base = rng.standard_normal((4, 6))
    experts = [base + rng.standard_normal((4, 6)) for _ in range(4)]
    out, _ = hybrid_merge(base, experts, "conflict_aware")
    r, tvs = decompose(base, experts, "conflict_aware")
    rm = merged_rotation(base, experts, "conflict_aware")
    expected = rm.data @ base + sum(tv.residual for tv in tvs) / 4
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_diagnostics_fields():
    fx = gen_planted(SyntheticSpec(d_in=5, d_out=10, num_tasks=3, seed=8))
    _, diag = hybrid_merge(fx.w_base, fx.experts)
    assert len(diag.per_task_norms) == 3
    assert len(diag.cayley_margins) == 3 and min(diag.cayley_margins) > 0
    assert diag.degenerate_svd == (False, False, False)
    assert diag.orthogonality_error < 1e-12
    d = diag.to_dict()
    assert {"correction_factor", "collapse_ratio", "sum_norm"} <= set(d)


def test_block_diagonal_decoupling():
    spec = SyntheticSpec(d_in=8, d_out=12, num_tasks=2, block_size=4, seed=2)
    fx = gen_planted(spec)
    rotations, _ = decompose(fx.w_base, fx.experts, block_size=4)
    for r, r_star in zip(rotations, fx.rotations):
        assert r.block_size == 4
        np.testing.assert_allclose(r.data, r_star.data, atol=1e-10)


def test_errors_carry_task_index():
    base = np.zeros((3, 3))
    with pytest.raises(EmptyInputError):
        hybrid_merge(base, [])
    with pytest.raises(ShapeMismatchError) as exc:
        hybrid_merge(base, [np.zeros((3, 3)), np.zeros((3, 4))])
    assert exc.value.task == 1
