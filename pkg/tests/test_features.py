import math

import numpy as np
import pytest

from citympc.errors import ConfigError
from citympc.features import (EPS_R_MAX, HEIGHT_MAX_M, FourierEncoding,
                              fourier_encode, preprocess_heightmap,
                              preprocess_pov)
from citympc.render import (CH_DEPTH, CH_EPS, CH_NORMAL, CH_RGB, DEPTH_MAX_M,
                            HeightMap, render_heightmap, render_pov)
from citympc.scene import SceneConfig, generate_scene


def _pov(seed=3):
    scene = generate_scene(seed, SceneConfig(n_buildings=4))
    return render_pov(scene, (250.0, 250.0, 40.0), (120.0, 300.0, 1.5), 8)


class TestPovPreprocess:
    def test_ranges(self):
        out = preprocess_pov(_pov())
        non_normal = np.delete(out, range(CH_NORMAL.start, CH_NORMAL.stop), axis=0)
        assert np.all(non_normal >= 0.0) and np.all(non_normal <= 1.0)
        assert np.all(np.abs(out[CH_NORMAL]) <= 1.0)

    def test_log_depth_values(self):
        raw = _pov()
        out = preprocess_pov(raw)
        expected = np.log1p(raw.data[CH_DEPTH]) / math.log1p(DEPTH_MAX_M)
        np.testing.assert_allclose(out[CH_DEPTH], expected, rtol=1e-12)
        # sky depth normalizes to exactly 1
        sky = raw.data[CH_DEPTH] == DEPTH_MAX_M
        assert np.all(out[CH_DEPTH][sky] == 1.0)

    def test_rgb_linear(self):
        raw = _pov()
        out = preprocess_pov(raw)
        np.testing.assert_allclose(out[CH_RGB], raw.data[CH_RGB] / 255.0, rtol=1e-15)

    def test_out_of_range_rejected(self):
        raw = _pov()
        raw.data[CH_EPS] = EPS_R_MAX + 5.0
        with pytest.raises(ConfigError):
            preprocess_pov(raw)


class TestHeightmapPreprocess:
    def test_monotone_and_bounded(self):
        scene = generate_scene(4, SceneConfig(n_buildings=5))
        hm = render_heightmap(scene, 64)
        out = preprocess_heightmap(hm)
        assert out.min() == 0.0 and out.max() < 1.0
        flat, raw = out.ravel(), hm.data.ravel()
        order = np.argsort(raw)
        assert np.all(np.diff(flat[order]) >= 0)

    def test_exact_formula(self):
        hm = HeightMap(data=np.array([[0.0, 100.0]]), meters_per_pixel=1.0)
        out = preprocess_heightmap(hm)
        assert out[0, 0] == 0.0
        assert out[0, 1] == pytest.approx(
            math.log1p(100.0) / math.log1p(HEIGHT_MAX_M), rel=1e-13)


class TestFourier:
    def test_dimensions(self):
        enc = FourierEncoding()
        assert enc.dims_per_scalar == 16
        assert fourier_encode([1, 2, 3, 4, 5, 6]).shape == (96,)

    def test_band_frequencies_octave_spaced(self):
        np.testing.assert_array_equal(FourierEncoding(n_bands=4).frequencies(),
                                      [1.0, 2.0, 4.0, 8.0])

    def test_hand_computed_entry(self):
        enc = FourierEncoding(n_bands=2, coordinate_scale_m=100.0)
        out = enc.encode([25.0])
        # band 0: phase 2*pi*1*25/100 = pi/2 -> sin 1, cos 0
        # band 1: phase pi -> sin 0, cos -1
        np.testing.assert_allclose(out, [1.0, 0.0, 0.0, -1.0], atol=1e-12)

    def test_scalar_major_layout(self):
        enc = FourierEncoding(n_bands=3)
        a, b = enc.encode([7.0]), enc.encode([11.0])
        both = enc.encode([7.0, 11.0])
        np.testing.assert_array_equal(both[:6], a)
        np.testing.assert_array_equal(both[6:], b)

    def test_wrong_arity_rejected(self):
        with pytest.raises(ConfigError):
            fourier_encode([1.0, 2.0, 3.0])
