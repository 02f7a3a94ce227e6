import math

import numpy as np
import pytest

from citympc.render import (CH_DEPTH, CH_EPS, CH_NORMAL, CH_RGB, DEPTH_MAX_M,
                            POV_CHANNELS, HeightMap, PovStack, _camera_rays,
                            render_heightmap, render_pov)
from citympc.materials import MATERIALS
from citympc.scene import SceneConfig, generate_scene
from citympc.errors import ConfigError


def brute_force_depth(scene, origin, direction):
    """Scalar reference intersection: nearest of ground plane and boxes."""
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    best = math.inf
    if d[2] < -1e-12:
        t = -o[2] / d[2]
        if t > 1e-9:
            best = t
    for b in scene.buildings:
        lo = np.array([b.xmin, b.ymin, 0.0])
        hi = np.array([b.xmax, b.ymax, b.height_m])
        tmin, tmax = -math.inf, math.inf
        ok = True
        for ax in range(3):
            if abs(d[ax]) < 1e-15:
                if not (lo[ax] - 1e-12 <= o[ax] <= hi[ax] + 1e-12):
                    ok = False
                    break
                continue
            t1 = (lo[ax] - o[ax]) / d[ax]
            t2 = (hi[ax] - o[ax]) / d[ax]
            tmin = max(tmin, min(t1, t2))
            tmax = min(tmax, max(t1, t2))
        if not ok or tmax < tmin or tmax <= 1e-9:
            continue
        t_enter = tmin if tmin > 1e-9 else tmax
        best = min(best, t_enter)
    return min(best, DEPTH_MAX_M) if math.isfinite(best) else DEPTH_MAX_M


class TestPov:
    def test_depth_matches_brute_force(self):
        scene = generate_scene(7, SceneConfig(n_buildings=6))
        from_pos = (250.0, 250.0, 45.0)
        toward = (100.0, 380.0, 1.5)
        pov = render_pov(scene, from_pos, toward, resolution=16)
        origin, dirs = _camera_rays(from_pos, toward, 16)
        depth = pov.data[CH_DEPTH].reshape(-1)
        rng = np.random.default_rng(0)
        for i in rng.choice(dirs.shape[0], size=64, replace=False):
            assert depth[i] == pytest.approx(
                brute_force_depth(scene, origin, dirs[i]), rel=1e-9, abs=1e-9)

    def test_sky_defaults(self):
        scene = generate_scene(7, SceneConfig(n_buildings=2))
        # camera looking up from a rooftop: mostly sky
        pov = render_pov(scene, (250.0, 250.0, 80.0), (250.0, 250.0, 500.0), 8)
        d = pov.data
        sky = d[CH_DEPTH] == DEPTH_MAX_M
        assert np.any(sky)
        assert np.all(d[CH_EPS][sky] == 1.0)
        assert np.all(d[CH_NORMAL][:, sky] == 0.0)

    def test_ground_pixels(self):
        scene = generate_scene(8, SceneConfig(n_buildings=2))
        pov = render_pov(scene, (250.0, 250.0, 60.0), (255.0, 255.0, 0.0), 8)
        d = pov.data
        ground = MATERIALS[scene.ground]
        mask = np.isclose(d[CH_EPS], ground.eps_r) & (d[CH_DEPTH] < DEPTH_MAX_M)
        assert np.any(mask)
        # ground normal points straight up
        assert np.all(d[CH_NORMAL][2][mask] == 1.0)

    def test_wall_normal_is_axis_aligned_unit(self):
        scene = generate_scene(9, SceneConfig(n_buildings=6))
        pov = render_pov(scene, (250.0, 250.0, 10.0), (100.0, 100.0, 10.0), 16)
        n = pov.data[CH_NORMAL].reshape(3, -1)
        hit = np.linalg.norm(n, axis=0) > 0
        norms = np.linalg.norm(n[:, hit], axis=0)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)
        # axis-aligned: exactly one non-zero component
        assert np.all((np.abs(n[:, hit]) > 0).sum(axis=0) == 1)

    def test_channel_count_and_rgb_range(self):
        scene = generate_scene(10, SceneConfig(n_buildings=3))
        pov = render_pov(scene, (250, 250, 30), (100, 100, 1.5), 8)
        assert pov.data.shape == (POV_CHANNELS, 8, 8)
        assert np.all(pov.data[CH_RGB] >= 0) and np.all(pov.data[CH_RGB] <= 255)

    def test_coincident_camera_rejected(self):
        scene = generate_scene(10, SceneConfig(n_buildings=2))
        with pytest.raises(ConfigError):
            render_pov(scene, (1, 1, 1), (1, 1, 1), 8)

    def test_straight_down_view_works(self):
        scene = generate_scene(11, SceneConfig(n_buildings=3))
        pov = render_pov(scene, (250, 250, 90), (250, 250, 0), 8)
        assert np.all(np.isfinite(pov.data))


class TestHeightmap:
    def test_max_height_per_pixel(self):
        scene = generate_scene(12, SceneConfig(n_buildings=5))
        hm = render_heightmap(scene, resolution=128)
        assert hm.data.shape == (128, 128)
        # sample: pixel centers inside a footprint report that height
        b = scene.buildings[0]
        cx, cy = b.center
        ix = int(cx / hm.meters_per_pixel)
        iy = int(cy / hm.meters_per_pixel)
        assert hm.data[iy, ix] == pytest.approx(b.height_m)

    def test_open_ground_is_zero(self):
        scene = generate_scene(12, SceneConfig(n_buildings=2))
        hm = render_heightmap(scene, resolution=64)
        covered = sum((b.xmax - b.xmin) * (b.ymax - b.ymin)
                      for b in scene.buildings)
        frac = np.count_nonzero(hm.data) / hm.data.size
        assert frac < covered / scene.extent_m ** 2 + 0.05
        assert hm.data.min() == 0.0

    def test_extent_property(self):
        hm = HeightMap(data=np.zeros((32, 32)), meters_per_pixel=4.0)
        assert hm.extent_m == 128.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            HeightMap(data=np.full((4, 4), -1.0), meters_per_pixel=1.0)
        with pytest.raises(ConfigError):
            PovStack(data=np.zeros((5, 4, 4)))
