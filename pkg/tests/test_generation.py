import numpy as np
import pytest

from sdgs.anchors import FEATURE_DIM
from sdgs.generation import GaussianGenerator, filter_by_opacity, generate, neural_positions
from sdgs.nn import TemporalEmbedding
from sdgs.rasterizer import Gaussians

from .oracles import central_diff, rel_err


def inputs(rng, v=3, k=4):
    feats = rng.normal(0, 0.5, (v, FEATURE_DIM))
    pos = rng.uniform(-0.5, 0.5, (v, 3))
    scaling = rng.uniform(0.05, 0.3, (v, 6))
    offsets = rng.uniform(-0.5, 0.5, (v, k, 3))
    return feats, pos, scaling, offsets


class TestPositions:
    def test_offset_one(self):
        m = neural_positions(np.zeros(3), np.full(6, 0.1), np.array([[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(m, [[0.1, 0.0, 0.0]])

    def test_zero_offsets_sit_on_anchor(self):
        p = np.array([0.3, -0.2, 1.0])
        m = neural_positions(p, np.full(6, 0.4), np.zeros((5, 3)))
        np.testing.assert_array_equal(m, np.tile(p, (5, 1)))

    def test_per_axis_scaling(self):
        m = neural_positions(np.zeros(3), np.array([1.0, 2.0, 3.0, 9, 9, 9]), np.array([[1.0, 1.0, 1.0]]))
        np.testing.assert_array_equal(m, [[1.0, 2.0, 3.0]])


class TestFilter:
    def test_threshold_is_strict(self):
        g = Gaussians(np.zeros((3, 3)), np.ones((3, 3)), np.tile([1.0, 0, 0, 0], (3, 1)),
                      np.array([0.004, 0.005, 0.006]), np.zeros((3, 3)))
        np.testing.assert_array_equal(filter_by_opacity(g).opacities, [0.006])

    def test_all_transparent_gives_empty(self):
        g = Gaussians(np.zeros((2, 3)), np.ones((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), np.zeros(2),
                      np.zeros((2, 3)))
        assert len(filter_by_opacity(g)) == 0


class TestGenerator:
    def test_count_and_ranges(self):
        rng = np.random.default_rng(0)
        gen = GaussianGenerator(4, hidden=16, rng=rng)
        f, p, s, o = inputs(rng)
        g = gen.forward(f, p, s, o, np.array([0.0, 0.0, -3.0]), 0.4)
        assert len(g) == 12
        assert np.all((g.opacities >= 0) & (g.opacities < 1))
        assert np.all((g.colors >= 0) & (g.colors <= 1))
        np.testing.assert_allclose(np.linalg.norm(g.rotations, axis=1), 1.0, atol=1e-12)
        assert np.all(g.scales > 0)
        assert np.all(g.scales <= np.repeat(s[:, 3:], 4, axis=0))

    def test_time_starts_inert(self):
        rng = np.random.default_rng(1)
        gen = GaussianGenerator(3, hidden=16, rng=rng)
        f, p, s, o = inputs(rng, k=3)
        cam = np.array([0.2, 0.1, -2.5])
        a = gen.forward(f, p, s, o, cam, 0.0)
        b = gen.forward(f, p, s, o, cam, 0.9)
        c = gen.forward(f, p, s, o, cam, 0.9, time_active=False)
        np.testing.assert_array_equal(a.colors, b.colors)
        np.testing.assert_array_equal(a.opacities, c.opacities)

    def test_static_variant_ignores_time(self):
        rng = np.random.default_rng(2)
        gen = GaussianGenerator(3, hidden=16, temporal=False, rng=rng)
        assert gen.in_dim == FEATURE_DIM + 3
        for net in gen.nets.values():
            net.weights[0][...] = rng.normal(size=net.weights[0].shape)
        f, p, s, o = inputs(rng, k=3)
        cam = np.array([0.0, 0.0, -2.0])
        np.testing.assert_array_equal(gen.forward(f, p, s, o, cam, 0.1).colors,
                                      gen.forward(f, p, s, o, cam, 0.8).colors)

    def test_time_changes_output_once_trained(self):
        rng = np.random.default_rng(3)
        gen = GaussianGenerator(3, hidden=16, rng=rng)
        for net in gen.nets.values():
            net.weights[0][...] = rng.normal(size=net.weights[0].shape)
        f, p, s, o = inputs(rng, k=3)
        cam = np.array([0.0, 0.0, -2.0])
        assert not np.array_equal(gen.forward(f, p, s, o, cam, 0.1).colors,
                                  gen.forward(f, p, s, o, cam, 0.8).colors)

    def test_view_direction_matters(self):
        rng = np.random.default_rng(4)
        gen = GaussianGenerator(2, hidden=16, rng=rng)
        f, p, s, o = inputs(rng, k=2)
        a = gen.forward(f, p, s, o, np.array([0.0, 0.0, -3.0]), 0.0)
        b = gen.forward(f, p, s, o, np.array([3.0, 0.0, 0.0]), 0.0)
        assert not np.allclose(a.colors, b.colors)

    def test_empty_input(self):
        gen = GaussianGenerator(2, hidden=8)
        g = gen.forward(np.zeros((0, FEATURE_DIM)), np.zeros((0, 3)), np.zeros((0, 6)), np.zeros((0, 2, 3)),
                        np.zeros(3), 0.0)
        assert len(g) == 0

    def test_single_anchor_wrapper(self):
        rng = np.random.default_rng(5)
        gen = GaussianGenerator(5, hidden=8, rng=rng)
        f, p, s, o = inputs(rng, v=1, k=5)
        recs = generate(gen, f[0], p[0], s[0], o[0], np.array([0.0, 0.0, -2.0]), 0.3, anchor=7)
        assert [r.offset for r in recs] == list(range(5))
        assert all(r.anchor == 7 for r in recs)
        np.testing.assert_allclose([r.mean for r in recs], neural_positions(p[0], s[0], o[0]))

    def test_embedding_width(self):
        gen = GaussianGenerator(2, embedding=TemporalEmbedding(bands=3))
        assert gen.in_dim == FEATURE_DIM + 3 + 7


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("use_distance", [False, True])
def test_backward_matches_finite_differences(seed, use_distance):
    rng = np.random.default_rng(seed)
    k = 3
    gen = GaussianGenerator(k, hidden=12, use_distance=use_distance, rng=rng)
    for net in gen.nets.values():
        net.weights[0][...] = rng.normal(0, 0.3, net.weights[0].shape)
    f, p, s, o = inputs(rng, k=k)
    cam = np.array([0.1, -0.2, -2.5])
    n = 3 * k
    r = Gaussians(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=(n, 4)), rng.normal(size=n),
                  rng.normal(size=(n, 3)))

    def loss(f_, p_, s_, o_):
        g = gen.forward(f_, p_, s_, o_, cam, 0.6)
        return float(sum(np.sum(getattr(g, a) * getattr(r, a))
                         for a in ("means", "scales", "rotations", "opacities", "colors")))

    gen.zero_grad()
    gen.forward(f, p, s, o, cam, 0.6)
    gf, gp, gs, go = gen.backward(r)
    assert rel_err(gf, central_diff(lambda v: loss(v, p, s, o), f)) <= 1e-5
    assert rel_err(gp, central_diff(lambda v: loss(f, v, s, o), p)) <= 1e-5
    assert rel_err(gs, central_diff(lambda v: loss(f, p, v, o), s)) <= 1e-5
    assert rel_err(go, central_diff(lambda v: loss(f, p, s, v), o)) <= 1e-5
