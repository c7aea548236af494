import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_bins, naive_pool_avg
from rgaekit import compressor as C
from rgaekit import tensor as T


def column_ramp(side):
    """side x side grid whose value at (r, c) is c, one channel."""
    return np.tile(np.arange(side, dtype=np.float64), side)[:, None]


def test_quarter_compression_uses_2x2_windows():
    plan = C.plan_bins(24, 12)
    assert plan.kernel == 2 and plan.stride == 2
    assert all(r1 - r0 == 2 for r0, r1 in plan.bins)
    assert plan.n_in == 576 and plan.n_out == 144


def test_six_to_four_bins():
    assert C.plan_bins(6, 4).bins == ((0, 2), (1, 3), (3, 5), (4, 6))
    assert C.plan_bins(6, 4).kernel is None


def test_identity_plan_has_unit_bins():
    plan = C.plan_bins(5, 5)
    assert plan.bins == tuple((i, i + 1) for i in range(5))


def test_upsampling_rejected():
    with pytest.raises(ValueError, match="cannot upsample"):
        C.plan_bins(3, 4)


@pytest.mark.parametrize("in_side", range(1, 13))
def test_bins_match_floor_ceil_rule_and_cover(in_side):
    for out_side in range(1, in_side + 1):
        plan = C.plan_bins(in_side, out_side)
        assert list(plan.bins) == naive_bins(in_side, out_side)
        covered = np.zeros(in_side, dtype=int)
        for r0, r1 in plan.bins:
            assert r0 < r1
            covered[r0:r1] += 1
        assert covered.min() >= 1
        if in_side % out_side == 0:
            assert covered.max() == 1


def test_avg_pool_six_to_four_ramp():
    out = C.pool_avg(column_ramp(6), C.plan_bins(6, 4)).reshape(4, 4)
    for row in out:
        np.testing.assert_array_equal(row, [0.5, 1.5, 3.5, 4.5])


def test_avg_pool_global_mean_and_identity(rng):
    out = C.pool_avg(np.array([[1.0], [2.0], [3.0], [4.0]]), C.plan_bins(2, 2 // 2))
    assert out.tolist() == [[2.5]]
    x = rng.normal(size=(25, 3))
    np.testing.assert_array_equal(C.pool_avg(x, C.plan_bins(5, 5)), x)


def test_pool_shape_error():
    with pytest.raises(ValueError, match="shape"):
        C.pool_avg(np.zeros((15, 2)), C.plan_bins(4, 2))


def test_max_pool_values_and_ties():
    window = np.array([[1.0], [5.0], [2.0], [3.0]])
    values, argmax = C.pool_max(window, C.plan_bins(2, 1))
    assert values.tolist() == [[5.0]] and argmax.tolist() == [[1]]
    values, argmax = C.pool_max(np.full((4, 1), 7.0), C.plan_bins(2, 1))
    assert argmax.tolist() == [[0]]
    values, _ = C.pool_max(column_ramp(6), C.plan_bins(6, 4))
    for row in values.reshape(4, 4):
        np.testing.assert_array_equal(row, [1, 2, 4, 5])


def test_structural_maps():
    np.testing.assert_array_equal(C.structural_map_avg(C.plan_bins(2, 1)), [[0.25] * 4])
    np.testing.assert_array_equal(C.structural_map_avg(C.plan_bins(4, 4)), np.eye(16))
    np.testing.assert_array_equal(C.structural_map_linear(3), np.eye(3))
    for in_side, out_side in [(6, 4), (7, 3), (8, 2), (5, 5)]:
        S = C.structural_map_avg(C.plan_bins(in_side, out_side))
        assert np.all(S.sum(axis=1) == 1.0)


def test_structural_max_map(rng):
    plan = C.plan_bins(2, 1)
    _, argmax = C.pool_max(np.array([[0.0], [1.0], [2.0], [9.0]]), plan)
    np.testing.assert_array_equal(C.structural_map_max(plan, argmax), [[0, 0, 0, 1]])
    ident = C.plan_bins(3, 3)
    _, argmax = C.pool_max(rng.normal(size=(9, 4)), ident)
    np.testing.assert_array_equal(C.structural_map_max(ident, argmax), np.eye(9))
    plan = C.plan_bins(6, 4)
    _, argmax = C.pool_max(rng.normal(size=(36, 5)), plan)
    S = C.structural_map_max(plan, argmax)
    assert np.all(S.sum(axis=1) == 1.0)
    with pytest.raises(ValueError, match="argmax"):
        C.structural_map_max(plan, None)


def test_structural_max_majority_over_channels():
    plan = C.plan_bins(2, 1)
    # channel 0 and 2 favour patch 2, channel 1 favours patch 3
    x = np.array([[0, 0, 0], [0, 0, 0], [5, 0, 5], [0, 5, 0]], dtype=float)
    _, argmax = C.pool_max(x, plan)
    np.testing.assert_array_equal(C.structural_map_max(plan, argmax), [[0, 0, 1, 0]])


def test_pool_backward_cases():
    plan = C.plan_bins(3, 3)
    g = np.arange(18.0).reshape(9, 2)
    np.testing.assert_array_equal(C.pool_backward(g, plan, "avg"), g)
    np.testing.assert_array_equal(C.pool_backward(np.ones((1, 1)), C.plan_bins(2, 1), "avg"), np.full((4, 1), 0.25))
    with pytest.raises(ValueError, match="grad_out"):
        C.pool_backward(np.ones((2, 1)), C.plan_bins(2, 1))


@pytest.mark.parametrize("in_side,out_side", [(6, 4), (4, 2), (5, 3)])
def test_avg_pool_gradient_matches_finite_differences(rng, in_side, out_side):
    plan = C.plan_bins(in_side, out_side)
    w = rng.uniform(-1, 1, size=(plan.n_out, 2))
    rec = T.Record(lambda x: {"y": (C.adaptive_avg_pool(x, plan) * w).sum()})
    x = rng.uniform(-2, 2, size=(plan.n_in, 2))
    assert T.finite_diff_check(rec, "y", "x", 1e-5, inputs={"x": x}) < 1e-8


def test_max_pool_gradient_routes_to_argmax(rng):
    plan = C.plan_bins(4, 2)
    x = rng.normal(size=(16, 3))
    _, argmax = C.pool_max(x, plan)
    g = C.pool_backward(np.ones((4, 3)), plan, "max", argmax)
    assert g.sum() == 12.0
    for m in range(4):
        for ch in range(3):
            assert g[argmax[m, ch], ch] >= 1.0


# -- property tests ---------------------------------------------------------

sides = st.integers(1, 12).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n)))


@settings(max_examples=80, deadline=None)
@given(sides, st.integers(0, 2**32 - 1))
def test_avg_pool_is_its_structural_map(sizes, seed):
    in_side, out_side = sizes
    plan = C.plan_bins(in_side, out_side)
    x = np.random.default_rng(seed).normal(size=(plan.n_in, 3))
    np.testing.assert_allclose(C.pool_avg(x, plan), C.structural_map_avg(plan) @ x, rtol=0, atol=1e-12)


@settings(max_examples=80, deadline=None)
@given(sides, st.integers(0, 2**32 - 1))
def test_max_dominates_avg(sizes, seed):
    plan = C.plan_bins(*sizes)
    x = np.random.default_rng(seed).normal(size=(plan.n_in, 2))
    assert np.all(C.pool_max(x, plan)[0] >= C.pool_avg(x, plan))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([(4, 2), (6, 3), (6, 2), (8, 4), (9, 3), (12, 4)]), st.integers(0, 2**32 - 1))
def test_mean_preserved_for_divisible_sizes(sizes, seed):
    plan = C.plan_bins(*sizes)
    x = np.random.default_rng(seed).normal(size=(plan.n_in, 2))
    assert abs(C.pool_avg(x, plan).mean() - x.mean()) < 1e-12


def test_batched_pool_matches_per_sample(rng):
    plan = C.plan_bins(6, 4)
    x = rng.normal(size=(3, 36, 2))
    out = C.pool_avg(x, plan)
    for b in range(3):
        np.testing.assert_array_equal(out[b], naive_pool_avg(x[b], 6, 4))
