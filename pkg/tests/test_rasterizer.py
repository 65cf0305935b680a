import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdgs.core_math import Camera, quat_normalize
from sdgs.rasterizer import (
    ALPHA_MAX,
    T_MIN,
    Gaussians,
    StaleCacheError,
    blend,
    blend_backward,
    make_fragments,
    render,
    render_backward,
    tile_partition,
)

from .oracles import blend_stack, central_diff, rel_err


def pixel_stack(alphas, colors, depths=None):
    """Fragments centred on the only pixel of a 1x1 image, so alpha' = opacity."""
    n = len(alphas)
    depths = np.arange(1, n + 1, dtype=float) if depths is None else depths
    return make_fragments(np.full((n, 2), 0.5), np.tile(np.eye(2), (n, 1, 1)), depths, alphas, colors, 1, 1)


def cam(size=32):
    return Camera.look_at([0.3, -0.2, -3.0], [0, 0, 0], [0, 1, 0], 60.0, size, size)


def random_gaussians(rng, n, spread=0.4, size=(0.05, 0.2)):
    return Gaussians(rng.uniform(-spread, spread, (n, 3)), rng.uniform(*size, (n, 3)),
                     quat_normalize(rng.normal(size=(n, 4))), rng.uniform(0.1, 0.9, n), rng.uniform(0, 1, (n, 3)))


class TestBlendExamples:
    def test_empty_is_background(self):
        frags = make_fragments(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0), np.zeros((0, 3)), 8, 6)
        img, _ = blend(frags, background=(0.2, 0.4, 0.6))
        assert img.shape == (6, 8, 3)
        np.testing.assert_array_equal(img, np.broadcast_to([0.2, 0.4, 0.6], (6, 8, 3)))

    def test_opaque_fragment_is_clipped(self):
        # alpha' = 1 is clipped to 0.999, so a red fragment gives 0.999 red over black
        img, _ = blend(pixel_stack([1.0], [[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(img[0, 0], [ALPHA_MAX, 0.0, 0.0], rtol=0, atol=1e-15)

    def test_two_half_fragments(self):
        img, _ = blend(pixel_stack([0.5, 0.5], [[1.0, 1.0, 1.0]] * 2))
        np.testing.assert_allclose(img[0, 0], 0.75, atol=1e-15)

    def test_depth_order(self):
        near_red_far_green = pixel_stack([0.5, 0.5], [[0, 1.0, 0], [1.0, 0, 0]], depths=np.array([5.0, 1.0]))
        img, _ = blend(near_red_far_green)
        np.testing.assert_allclose(img[0, 0], [0.5, 0.25, 0.0], atol=1e-15)

    def test_terminates_below_min_transmittance(self):
        img, cache = blend(pixel_stack([0.99, 0.99, 0.99], [[1, 0, 0], [0, 1, 0], [0, 0, 1]]))
        # after two fragments T = 1e-4 exactly at the limit; the third would push it below
        assert cache.n_used[0, 0] == 2
        assert cache.final_t[0, 0] >= T_MIN
        assert img[0, 0, 2] == 0.0


@pytest.mark.parametrize("seed", range(1000))
def test_random_stacks_match_reference(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    alphas = rng.uniform(0, 1, n) ** rng.uniform(0.2, 2)
    colors = rng.uniform(0, 1, (n, 3))
    depths = rng.permutation(n).astype(float) + 1
    bg = rng.uniform(0, 1, 3)
    img, cache = blend(pixel_stack(alphas, colors, depths), background=bg)
    order = np.argsort(depths)
    ref, trans = blend_stack(alphas[order], colors[order], bg)
    np.testing.assert_allclose(img[0, 0], ref, rtol=0, atol=1e-12)
    assert all(a >= b for a, b in zip(trans, trans[1:]))
    assert cache.final_t[0, 0] == pytest.approx(trans[-1], abs=1e-12)
    assert np.all((img >= 0) & (img <= 1))


@given(st.integers(0, 2**32 - 1), st.integers(0, 2), st.floats(0.0, 0.5))
@settings(max_examples=60, deadline=None)
def test_raising_a_color_never_darkens(seed, channel, bump):
    rng = np.random.default_rng(seed)
    g = random_gaussians(rng, 12)
    c = cam(16)
    base, _ = render(g, c)
    i = int(rng.integers(len(g)))
    g.colors[i, channel] = min(1.0, g.colors[i, channel] + bump)
    brighter, _ = render(g, c)
    assert np.all(brighter >= base - 1e-15)


class TestTiling:
    @pytest.mark.parametrize("seed", range(5))
    def test_tiled_equals_untiled(self, seed):
        rng = np.random.default_rng(seed)
        g = random_gaussians(rng, 60)
        c = cam(40)
        whole, _ = render(g, c, tile_size=64)
        for ts in (1, 3, 8, 16):
            tiled, _ = render(g, c, tile_size=ts)
            np.testing.assert_array_equal(tiled, whole)

    def test_one_tile(self):
        f = make_fragments([[5.0, 5.0]], [np.eye(2)], [1.0], [0.5], [[1, 1, 1]], 32, 32)
        assert tile_partition(f, 16) == {(0, 0): [0]}

    def test_two_by_two_block(self):
        # sigma 1 px centred on the corner shared by four 8x8 tiles: the 3-sigma box spans pixels 5..10
        f = make_fragments([[8.0, 8.0]], [np.eye(2)], [1.0], [0.5], [[1, 1, 1]], 32, 32)
        assert f.rect[0].tolist() == [5, 11, 5, 11]
        assert sorted(tile_partition(f, 8)) == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_empty(self):
        f = make_fragments(np.zeros((0, 2)), np.zeros((0, 2, 2)), [], [], np.zeros((0, 3)), 8, 8)
        assert tile_partition(f, 4) == {}

    def test_bad_tile_size(self):
        f = make_fragments([[5.0, 5.0]], [np.eye(2)], [1.0], [0.5], [[1, 1, 1]], 8, 8)
        with pytest.raises(ValueError):
            tile_partition(f, 0)

    def test_every_touching_tile_listed(self):
        rng = np.random.default_rng(7)
        f = make_fragments(rng.uniform(0, 40, (30, 2)), np.tile(np.diag([4.0, 9.0]), (30, 1, 1)),
                           rng.uniform(1, 2, 30), np.full(30, 0.5), np.ones((30, 3)), 40, 40)
        tiles = tile_partition(f, 8)
        for i in range(len(f)):
            x0, x1, y0, y1 = f.rect[i]
            if x0 >= x1 or y0 >= y1:
                continue
            for ty in range(y0 // 8, (y1 - 1) // 8 + 1):
                for tx in range(x0 // 8, (x1 - 1) // 8 + 1):
                    assert f.source[i] in tiles[(ty, tx)]


class TestBackward:
    def test_zero_upstream(self):
        g = random_gaussians(np.random.default_rng(0), 5)
        img, cache = render(g, cam(16))
        out = render_backward(cache, np.zeros_like(img))
        for name in ("means", "scales", "rotations", "opacities", "colors", "mean2d"):
            assert not getattr(out, name).any()

    def test_no_gaussians(self):
        g = random_gaussians(np.random.default_rng(0), 0)
        img, cache = render(g, cam(8), background=(0.1, 0.2, 0.3))
        np.testing.assert_array_equal(img, np.broadcast_to([0.1, 0.2, 0.3], (8, 8, 3)))
        out = render_backward(cache, np.ones_like(img))
        assert out.means.shape == (0, 3) and out.opacities.shape == (0,)

    def test_stale_cache(self):
        g = random_gaussians(np.random.default_rng(0), 5)
        img, cache = render(g, cam(16))
        render_backward(cache, np.ones_like(img))
        with pytest.raises(StaleCacheError):
            render_backward(cache, np.ones_like(img))

    def test_shape_mismatch(self):
        g = random_gaussians(np.random.default_rng(0), 5)
        _, cache = render(g, cam(16))
        with pytest.raises(StaleCacheError):
            render_backward(cache, np.ones((8, 8, 3)))

    def test_occlusion_term(self):
        # C = a1 c1 + (1 - a1) a2 c2 at a pixel centre, so dC/da1 = c1 - a2 c2
        a1, a2, c1, c2 = 0.3, 0.6, 0.2, 0.9
        _, cache = blend(pixel_stack([a1, a2], [[c1] * 3, [c2] * 3]))
        grads = blend_backward(cache, np.array([[[1.0, 0.0, 0.0]]]))
        assert grads["opacity"][0] == pytest.approx(c1 - a2 * c2, abs=1e-12)
        assert grads["opacity"][1] == pytest.approx((1 - a1) * c2, abs=1e-12)


def _loss(g, c, r):
    img, _ = render(g, c)
    return float(np.sum(img * r))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("count", [1, 2])
def test_gradients_match_finite_differences(seed, count):
    rng = np.random.default_rng(seed)
    c = cam(20)
    g = random_gaussians(rng, count, spread=0.1, size=(0.1, 0.25))
    r = rng.normal(size=(20, 20, 3))
    _, cache = render(g, c)
    out = render_backward(cache, r)
    for name in ("means", "scales", "rotations", "opacities", "colors"):
        arr = getattr(g, name)

        def f(v, arr=arr):
            old = arr.copy()
            arr[...] = v
            val = _loss(g, c, r)
            arr[...] = old
            return val

        assert rel_err(getattr(out, name), central_diff(f, arr.copy())) <= 1e-3, name


def test_screen_gradient_norm():
    rng = np.random.default_rng(3)
    g = random_gaussians(rng, 4, spread=0.1)
    img, cache = render(g, cam(20))
    out = render_backward(cache, rng.normal(size=img.shape))
    np.testing.assert_allclose(out.grad2d_norm, np.linalg.norm(out.mean2d, axis=1))
