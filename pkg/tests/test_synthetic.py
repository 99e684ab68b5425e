import numpy as np
import pytest

from orthomerge.decoupling import decompose
from orthomerge.manifold import inverse_cayley, magnitude_corrected_merge, merge_oft
from orthomerge.synthetic import (
    JointQuadraticLoss,
    SyntheticSpec,
    gen_planted,
    gen_quadratic_tasks,
)


@pytest.mark.parametrize("kw", [{"d_in": 0, "d_out": 2}, {"d_in": 2, "d_out": 2, "alignment": 1.5},
                                {"d_in": 2, "d_out": 2, "noise_scale": -1.0},
                                {"d_in": 2, "d_out": 2, "rotation_magnitude": -0.1}])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(**kw)


def test_generators_have_exact_magnitude():
    for a in (-0.7, 0.0, 0.4, 1.0):
        fx = gen_planted(SyntheticSpec(d_in=10, d_out=12, num_tasks=4, rotation_magnitude=0.37,
                                       alignment=a, seed=2))
        for q in fx.generators:
            assert abs(q.norm - 0.37) < 1e-12


def test_base_columns_are_unit_norm():
    fx = gen_planted(SyntheticSpec(d_in=7, d_out=9, seed=0))
    np.testing.assert_allclose(np.linalg.norm(fx.w_base, axis=0), 1.0, rtol=1e-14)


def test_deterministic_per_seed():
    spec = SyntheticSpec(d_in=6, d_out=8, num_tasks=3, noise_scale=0.1, seed=5)
    a, b = gen_planted(spec), gen_planted(spec)
    assert a.w_base.tobytes() == b.w_base.tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.experts, b.experts))
    ta, tb = gen_quadratic_tasks(spec), gen_quadratic_tasks(spec)
    assert all(x.probe.tobytes() == y.probe.tobytes() for x, y in zip(ta, tb))
    c = gen_planted(SyntheticSpec(d_in=6, d_out=8, num_tasks=3, noise_scale=0.1, seed=6))
    assert not np.array_equal(a.w_base, c.w_base)


def test_fully_aligned_tasks_are_identical_and_recovered():
    fx = gen_planted(SyntheticSpec(d_in=8, d_out=16, num_tasks=4, alignment=1.0, seed=1))
    for w in fx.experts[1:]:
        np.testing.assert_array_equal(w, fx.experts[0])
    merged = merge_oft(decompose(fx.w_base, fx.experts)[0])
    np.testing.assert_allclose(merged.data @ fx.w_base, fx.experts[0], atol=1e-12)


def test_negative_alignment_anticorrelates_neighbours():
    fx = gen_planted(SyntheticSpec(d_in=16, d_out=16, num_tasks=2, alignment=-0.9, seed=0))
    q0, q1 = (q.data.ravel() for q in fx.generators)
    assert q0 @ q1 / (np.linalg.norm(q0) * np.linalg.norm(q1)) < -0.5


def test_procrustes_recovers_planted_rotations():
    fx = gen_planted(SyntheticSpec(d_in=12, d_out=24, num_tasks=3, rotation_magnitude=0.6, seed=3))
    for r, r_star in zip(decompose(fx.w_base, fx.experts)[0], fx.rotations):
        assert np.linalg.norm(r.data - r_star.data) < 1e-8


def test_collapse_ratio_concentrates_near_inverse_sqrt_two():
    # Monte Carlo oracle: for independent generators the expected ratio tends to 1/sqrt(2)
    def mean_ratio(d):
        vals = []
        for seed in range(100):
            fx = gen_planted(SyntheticSpec(d_in=d, d_out=d, num_tasks=2, seed=seed))
            qs = [inverse_cayley(r) for r in decompose(fx.w_base, fx.experts)[0]]
            vals.append(magnitude_corrected_merge(qs)[1].collapse_ratio)
        return np.mean(vals), np.std(vals)

    small_mean, small_std = mean_ratio(4)
    large_mean, large_std = mean_ratio(32)
    target = 1 / np.sqrt(2)
    assert abs(large_mean - target) < abs(small_mean - target) + 1e-3
    assert abs(large_mean - target) < 0.01
    assert large_std < small_std


def test_task_loss_is_zero_at_its_expert():
    spec = SyntheticSpec(d_in=5, d_out=7, num_tasks=3, seed=4)
    fx = gen_planted(spec)
    tasks = gen_quadratic_tasks(spec, fx.experts)
    for t, w in zip(tasks, fx.experts):
        assert t.loss(w) == 0.0
        assert t.loss(fx.w_base) > 0.0


def test_gradient_matches_finite_differences():
    spec = SyntheticSpec(d_in=4, d_out=5, num_tasks=2, seed=7)
    joint = JointQuadraticLoss(gen_quadratic_tasks(spec, probe_rank=3))
    rng = np.random.default_rng(0)
    for _ in range(5):
        w = rng.standard_normal((4, 5))
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            e = np.zeros_like(w)
            e[idx] = 1e-5
            fd[idx] = (joint(w + e) - joint(w - e)) / 2e-5
        g = joint.grad(w)
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-6


def test_losses_accept_flat_vectors():
    spec = SyntheticSpec(d_in=3, d_out=4, seed=1)
    joint = JointQuadraticLoss(gen_quadratic_tasks(spec))
    w = np.random.default_rng(1).standard_normal((3, 4))
    assert joint(w.ravel()) == joint(w)


def test_base_loss_exceeds_ortho_merge_on_aligned_fixtures():
    for seed in range(10):
        spec = SyntheticSpec(d_in=12, d_out=24, num_tasks=3, rotation_magnitude=0.5,
                             alignment=0.8, seed=seed)
        fx = gen_planted(spec)
        joint = JointQuadraticLoss(gen_quadratic_tasks(spec, fx.experts))
        merged = merge_oft(decompose(fx.w_base, fx.experts)[0])
        assert joint(fx.w_base) >= joint(merged.data @ fx.w_base)
