import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sdgs.anchors import init_from_points
from sdgs.core_math import quat_from_axis_angle, quat_identity
from sdgs.deformation import DeformationDelta
from sdgs.densify import (
    EPS,
    DensifyConfig,
    accumulate,
    anchor_weights,
    deform_stats,
    deformation_weight,
    grow_and_prune,
    mean_gradient,
    percentile_reference,
    weighted_gradient,
)


def line_model(n=6, k=2, voxel=0.1):
    pts = np.stack([np.arange(n) * 1.0, np.zeros(n), np.zeros(n)], axis=1)
    m = init_from_points(pts, voxel, k, np.random.default_rng(0))
    m.offsets[...] = 0.0
    m.offsets[:, 0] = [3.0, 0.0, 0.0]  # child 0 sits 0.3 along +x, three voxels away
    return m


def fill(m, grad, den=100.0, opacity=0.5, cfg=DensifyConfig()):
    m.grad_num[:] = np.asarray(grad) * den
    m.grad_den[:] = den
    m.child_num[:] = 0.0
    m.child_num[:, 0] = 1.0
    m.child_den[:] = 1.0
    m.opacity_accum[:] = opacity * cfg.interval
    m.obs_count[:] = cfg.interval


class TestWeight:
    def test_zero(self):
        assert deformation_weight(0.0, 0.0, 0.0, 1.0, 1.0, 1.0) == 0.0

    def test_unit_ratios(self):
        assert deformation_weight(2.0, 3.0, 0.5, 2.0, 3.0, 0.5) == pytest.approx(1.0, abs=1e-15)

    def test_position_only(self):
        cfg = DensifyConfig()
        assert (cfg.alpha, cfg.beta, cfg.gamma) == (0.8, 0.1, 0.1)
        assert deformation_weight(0.3, 0.0, 0.0, 0.3, 1.0, 1.0, cfg) == pytest.approx(0.8, abs=1e-15)

    def test_vectors_reduced_by_norm(self):
        w = deformation_weight(np.array([[3.0, 4.0, 0.0]]), np.zeros((1, 6)), np.zeros(1), 5.0, 1.0, 1.0)
        np.testing.assert_allclose(w, [0.8])

    def test_bad_reference(self):
        with pytest.raises(ValueError):
            deformation_weight(1.0, 1.0, 1.0, 0.0, 1.0, 1.0)

    @given(arrays(np.float64, 3, elements=st.floats(0, 10)), arrays(np.float64, 3, elements=st.floats(0.01, 10)))
    def test_non_negative(self, d, s):
        assert deformation_weight(*d, *s) >= 0.0


class TestPercentile:
    def test_one_to_ten(self):
        assert percentile_reference(np.arange(1, 11), 0.9) == 9.0

    def test_constant(self):
        assert percentile_reference([0.7] * 13) == 0.7

    def test_zeros_floor(self):
        assert percentile_reference(np.zeros(5)) == EPS == 1e-8

    def test_empty(self):
        with pytest.raises(ValueError):
            percentile_reference([])

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=50), st.floats(0.01, 0.99))
    def test_is_an_element_or_floor(self, vals, p):
        r = percentile_reference(vals, p)
        assert r == EPS or r in vals
        assert r >= EPS


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(alpha=0.5), dict(percentile=1.0), dict(percentile=0.0), dict(interval=0),
                                    dict(min_anchors=5, max_anchors=2), dict(alpha=1.1, beta=-0.1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            DensifyConfig(**kw)


class TestAccumulation:
    def test_weighted_mean_example(self):
        assert weighted_gradient([1, 3], [2, 4]) == 3.5

    def test_single(self):
        assert weighted_gradient([1.0], [0.7]) == 0.7

    def test_constant_weights_cancel(self):
        norms = np.random.default_rng(0).uniform(size=20)
        assert weighted_gradient(np.full(20, 0.37), norms) == pytest.approx(norms.mean(), rel=1e-12)

    def test_zero_weights(self):
        assert weighted_gradient([0.0, 0.0], [1.0, 2.0]) == 0.0

    @given(arrays(np.float64, 8, elements=st.floats(0.01, 5)), arrays(np.float64, 8, elements=st.floats(0, 1)),
           st.floats(0.01, 100))
    def test_scale_invariant(self, w, g, c):
        assert weighted_gradient(c * w, g) == pytest.approx(weighted_gradient(w, g), rel=1e-9, abs=1e-15)

    def test_accumulate_into_model(self):
        m = line_model(3, k=2)
        # iteration 1: weight 1, children (2, 2); iteration 2: weight 3, children (4, 4)
        accumulate(m, [1], np.array([[2.0, 2.0]]), np.ones((1, 2), bool), np.array([1.0]))
        accumulate(m, [1], np.array([[4.0, 4.0]]), np.ones((1, 2), bool), np.array([3.0]))
        np.testing.assert_allclose(mean_gradient(m), [0.0, 3.5, 0.0])

    def test_child_mean_ignores_unseen(self):
        m = line_model(1, k=3)
        accumulate(m, [0], np.array([[0.6, 9.0, 0.2]]), np.array([[True, False, True]]), np.array([1.0]),
                   child_opacity=np.array([[0.2, 0.4, 0.6]]))
        assert mean_gradient(m)[0] == pytest.approx(0.4)
        assert m.obs_count[0] == 1 and m.opacity_accum[0] == pytest.approx(0.4)

    def test_nothing_seen_adds_no_weight(self):
        m = line_model(1, k=2)
        accumulate(m, [0], np.array([[5.0, 5.0]]), np.zeros((1, 2), bool), np.array([1.0]))
        assert m.grad_den[0] == 0.0 and mean_gradient(m)[0] == 0.0

    def test_zero_deformation_position_only_halts(self):
        cfg = DensifyConfig(alpha=1.0, beta=0.0, gamma=0.0, weight_floor=0.0)
        n = 4
        delta = DeformationDelta(np.zeros((n, 3)), np.zeros((n, 6)), np.zeros((n, 4)))
        w = anchor_weights(deform_stats(delta, quat_identity(n), quat_identity(n)), n, cfg)
        np.testing.assert_array_equal(w, 0.0)
        m = line_model(n)
        accumulate(m, np.arange(n), np.full((n, 2), 0.9), np.ones((n, 2), bool), w)
        np.testing.assert_array_equal(mean_gradient(m), 0.0)

    def test_floor_and_plain_mode(self):
        n = 5
        dx = np.zeros((n, 3))
        dx[:, 0] = np.arange(n)
        delta = DeformationDelta(dx, np.zeros((n, 6)), np.zeros((n, 4)))
        stats = deform_stats(delta, quat_identity(n), quat_identity(n))
        assert stats.s_x == 4.0 and stats.s_l == EPS
        w = anchor_weights(stats, n, DensifyConfig())
        np.testing.assert_allclose(w, [0.01, 0.2, 0.4, 0.6, 0.8])
        np.testing.assert_array_equal(anchor_weights(stats, n, DensifyConfig(deformation_aware=False)), 1.0)

    def test_rotation_term_uses_angle(self):
        n = 2
        rot = np.stack([quat_identity(), quat_from_axis_angle([0, 0, 1], np.pi / 2)])
        delta = DeformationDelta(np.zeros((n, 3)), np.zeros((n, 6)), rot - quat_identity(n))
        stats = deform_stats(delta, quat_identity(n), rot)
        np.testing.assert_allclose(stats.dq_angle, [0.0, np.pi / 2], atol=1e-7)


class TestGrowPrune:
    def test_below_threshold_no_change(self):
        m = line_model()
        fill(m, np.full(len(m), 1e-5))
        rep = grow_and_prune(m, DensifyConfig(), 1000, np.random.default_rng(0))
        assert rep.grown == 0 and len(m) == 6

    def test_single_growth(self):
        m = line_model()
        g = np.full(len(m), 1e-5)
        g[2] = 1e-3
        fill(m, g)
        parent = m.positions[2].copy()
        rep = grow_and_prune(m, DensifyConfig(), 1000, np.random.default_rng(0))
        assert rep.grown == 1 and len(m) == 7
        np.testing.assert_allclose(m.positions[-1], parent + [0.3, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(m.scaling[-1], 0.1)
        np.testing.assert_array_equal(m.rotations[-1], quat_identity())
        assert m.born_step[-1] == 1000
        assert not m.grad_num.any() and not m.obs_count.any()

    def test_occupied_voxel_blocks_growth(self):
        m = line_model()
        m.offsets[:, 0] = [10.0, 0.0, 0.0]  # child lands on the next anchor's voxel
        g = np.full(len(m), 1e-5)
        g[2] = 1e-3
        fill(m, g)
        assert grow_and_prune(m, DensifyConfig(), 1000, np.random.default_rng(0)).grown == 0

    def test_two_candidates_same_voxel_grow_once(self):
        pts = np.array([[0.0, 0, 0], [0.6, 0, 0]])
        m = init_from_points(pts, 0.1, 1, np.random.default_rng(0))
        m.offsets[0, 0] = [3.0, 0, 0]
        m.offsets[1, 0] = [-3.0, 0, 0]
        fill(m, [1e-3, 1e-3])
        assert grow_and_prune(m, DensifyConfig(), 1000, np.random.default_rng(0)).grown == 1

    def test_thin_evidence_blocks_growth(self):
        m = line_model()
        g = np.full(len(m), 1e-5)
        g[2] = 1e-3
        fill(m, g, den=5.0)
        assert grow_and_prune(m, DensifyConfig(), 1000, np.random.default_rng(0)).grown == 0

    def test_prune_dim(self):
        m = line_model()
        fill(m, np.zeros(len(m)))
        m.opacity_accum[3] = 0.001 * 100
        rep = grow_and_prune(m, DensifyConfig(), 1000, np.random.default_rng(0))
        assert rep.pruned == 1 and len(m) == 5
        assert 3.0 not in m.positions[:, 0]
        assert rep.kept.tolist() == [True, True, True, False, True, True]

    def test_grace_period(self):
        m = line_model()
        fill(m, np.zeros(len(m)), opacity=0.0)
        m.born_step[:3] = 950
        rep = grow_and_prune(m, DensifyConfig(interval=100), 1000, np.random.default_rng(0))
        assert rep.pruned == 3
        np.testing.assert_array_equal(m.born_step, [950] * 3)

    def test_unobserved_not_pruned(self):
        m = line_model()
        grow_and_prune(m, DensifyConfig(), 1000, np.random.default_rng(0))
        assert len(m) == 6

    def test_min_bound(self):
        m = line_model()
        fill(m, np.zeros(len(m)), opacity=0.0)
        grow_and_prune(m, DensifyConfig(min_anchors=4), 1000, np.random.default_rng(0))
        assert len(m) == 4

    def test_max_bound(self):
        m = line_model()
        fill(m, np.full(len(m), 1e-3))
        rep = grow_and_prune(m, DensifyConfig(max_anchors=8), 1000, np.random.default_rng(0))
        assert len(m) == 8 and rep.grown == 2

    def test_max_bound_trims_existing(self):
        m = line_model()
        fill(m, np.zeros(len(m)))
        m.opacity_accum[:] = np.arange(len(m)) + 1.0
        grow_and_prune(m, DensifyConfig(max_anchors=4), 1000, np.random.default_rng(0))
        np.testing.assert_array_equal(m.positions[:, 0], [2.0, 3.0, 4.0, 5.0])

    def test_region_tally(self):
        m = line_model()
        g = np.full(len(m), 1e-5)
        g[[1, 4]] = 1e-3
        fill(m, g)
        rep = grow_and_prune(m, DensifyConfig(), 1000, np.random.default_rng(0),
                             region_of=lambda p: np.where(p[:, 0] > 2, "dynamic", "static"))
        assert rep.grown_by_region == {"dynamic": 1, "static": 1}
        assert rep.as_record()["event"] == "densify"

    @given(st.integers(0, 2**32 - 1), st.integers(0, 12), st.integers(12, 30))
    @settings(max_examples=40, deadline=None)
    def test_count_within_bounds(self, seed, lo, hi):
        rng = np.random.default_rng(seed)
        m = init_from_points(rng.uniform(-1, 1, (20, 3)), 0.1, 3, rng)
        n = len(m)
        m.grad_num[:] = rng.uniform(0, 1e-3, n) * 100
        m.grad_den[:] = 100
        m.child_num[:] = rng.uniform(size=m.child_num.shape)
        m.child_den[:] = 1.0
        m.opacity_accum[:] = rng.uniform(0, 0.02, n) * 100
        m.obs_count[:] = 100
        m.born_step[:] = rng.integers(0, 1000, n)
        young = m.positions[m.born_step > 900].copy()
        grow_and_prune(m, DensifyConfig(min_anchors=lo, max_anchors=hi), 1000, rng)
        assert min(lo, n) <= len(m) <= hi
        for p in young:
            if len(young) <= hi:
                assert np.any(np.all(m.positions == p, axis=1))


def test_deformation_weighting_steers_growth_to_moving_region():
    """One moving and one static cluster with the same average photometric
    error. The moving cluster's error comes in bursts while it moves; plain
    averaging sees the same mean everywhere, weighting sees the bursts."""
    pts = np.concatenate([np.stack([np.arange(5) * 0.5, np.zeros(5), np.zeros(5)], 1),
                          np.stack([np.arange(5) * 0.5, np.full(5, 3.0), np.zeros(5)], 1)])
    cfg_on, cfg_off = DensifyConfig(), DensifyConfig(deformation_aware=False)
    grown = {}
    for name, cfg in (("on", cfg_on), ("off", cfg_off)):
        m = init_from_points(pts, 0.1, 2, np.random.default_rng(0))
        m.offsets[...] = [3.0, 0.0, 0.0]
        n = len(m)
        moving = m.positions[:, 1] < 1.5
        for it in range(cfg.interval):
            burst = it % 2 == 0
            dx = np.zeros((n, 3))
            dx[moving, 0] = 0.2 if burst else 0.0
            dx[~moving, 0] = 1e-4
            delta = DeformationDelta(dx, np.zeros((n, 6)), np.zeros((n, 4)))
            w = anchor_weights(deform_stats(delta, m.rotations, m.rotations), n, cfg)
            g = np.where(moving, 3.8e-4 if burst else 0.0, 1.9e-4)
            accumulate(m, np.arange(n), np.repeat(g[:, None], 2, 1), np.ones((n, 2), bool), w)
        before = m.positions.copy()
        rep = grow_and_prune(m, cfg, 5000, np.random.default_rng(1),
                             region_of=lambda p: np.where(p[:, 1] < 1.5, "moving", "static"))
        grown[name] = rep.grown_by_region.get("moving", 0)
        assert rep.grown_by_region.get("static", 0) == 0
        assert len(before) == n
    assert grown["on"] > grown["off"]
