import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facealign.errors import FormatError, NumericError
from facealign.heatmaps import (
    ProbabilityMaps,
    SynthConfig,
    _gaussian_kernel,
    map_values,
    peak_coords,
    read_maps,
    smooth,
    synthesize,
    synthesize_from_shape,
    write_maps,
)


def test_maps_validation():
    with pytest.raises(FormatError):
        ProbabilityMaps(np.zeros((3, 3)))  # wrong ndim
    with pytest.raises(FormatError):
        ProbabilityMaps(-np.ones((1, 3, 3)))
    bad = np.ones((1, 3, 3))
    bad[0, 1, 1] = np.nan
    with pytest.raises(NumericError):
        ProbabilityMaps(bad)


class TestSmooth:
    def test_constant_preserved(self):
        m = ProbabilityMaps(np.full((2, 9, 9), 0.37))
        out = smooth(m, 2.0)
        np.testing.assert_allclose(out.maps, 0.37, atol=1e-9)

    def test_impulse_center_weight(self):
        sigma = 2.0
        g = np.zeros((1, 41, 41))
        g[0, 20, 20] = 1.0
        out = smooth(ProbabilityMaps(g), sigma)
        k = _gaussian_kernel(sigma)
        c = len(k) // 2
        assert out.maps[0, 20, 20] == pytest.approx(k[c] ** 2, rel=1e-12)

    def test_matches_double_loop_convolution(self):
        # brute-force 2D convolution oracle on the interior (away from borders)
        r = np.random.default_rng(0)
        sigma = 1.5
        g = r.uniform(size=(1, 25, 25))
        out = smooth(ProbabilityMaps(g), sigma)
        k = _gaussian_kernel(sigma)
        rad = len(k) // 2
        k2 = np.outer(k, k)
        for y in range(rad, 25 - rad):
            for x in range(rad, 25 - rad):
                ref = 0.0
                for dy in range(-rad, rad + 1):
                    for dx in range(-rad, rad + 1):
                        ref += k2[dy + rad, dx + rad] * g[0, y + dy, x + dx]
                assert out.maps[0, y, x] == pytest.approx(ref, abs=1e-12)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            smooth(ProbabilityMaps(np.ones((1, 4, 4))), 0.0)


class TestPeaks:
    def test_delta(self):
        g = np.zeros((1, 30, 30))
        g[0, 20, 10] = 1.0  # row 20 = y, col 10 = x
        assert tuple(peak_coords(ProbabilityMaps(g))[0]) == (10.0, 20.0)

    def test_uniform_tie_break(self):
        g = np.ones((1, 5, 5))
        assert tuple(peak_coords(ProbabilityMaps(g))[0]) == (0.0, 0.0)

    def test_two_equal_maxima_row_major_first(self):
        g = np.zeros((1, 10, 10))
        g[0, 3, 3] = 2.0
        g[0, 7, 7] = 2.0
        assert tuple(peak_coords(ProbabilityMaps(g))[0]) == (3.0, 3.0)

    @given(st.floats(0.1, 100.0), st.integers(0, 100))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance(self, factor, seed):
        g = np.random.default_rng(seed).uniform(size=(2, 8, 8))
        a = peak_coords(ProbabilityMaps(g))
        b = peak_coords(ProbabilityMaps(factor * g))
        np.testing.assert_array_equal(a, b)


class TestMapValues:
    def test_rounding(self):
        g = np.arange(12, dtype=np.float64).reshape(3, 4)
        v = map_values(g, np.array([[1.4, 2.4], [1.6, 2.4]]))
        assert v[0] == g[2, 1]
        assert v[1] == g[2, 2]

    def test_out_of_bounds_zero(self):
        g = np.ones((3, 3))
        v = map_values(g, np.array([[-1.0, 0.0], [0.0, 3.0], [99.0, 99.0]]))
        np.testing.assert_array_equal(v, 0.0)


class TestSynthesize:
    def run_shape(self, cfg, seed=0, L=4, vis=None, ann=None):
        r = np.random.default_rng(seed)
        coords = np.array([[20.0, 30.0], [80.0, 40.0], [50.0, 90.0], [110.0, 120.0]])
        vis = np.ones(L) if vis is None else np.asarray(vis, float)
        ann = np.ones(L, dtype=np.uint8) if ann is None else np.asarray(ann, np.uint8)
        return coords, synthesize_from_shape(coords, vis, ann, cfg, r, (160, 160))

    def test_noiseless_peaks_equal_truth(self):
        coords, maps = self.run_shape(SynthConfig())
        np.testing.assert_array_equal(peak_coords(maps), np.rint(coords))

    def test_unannotated_is_flat_floor(self):
        cfg = SynthConfig(floor=0.05)
        _, maps = self.run_shape(cfg, ann=[1, 0, 1, 1])
        np.testing.assert_array_equal(maps.maps[1], 0.05)
        assert maps.maps[0].max() == pytest.approx(1.0)

    def test_occluded_dropout(self):
        cfg = SynthConfig(occluded_dropout=1.0, floor=0.01)
        _, maps = self.run_shape(cfg, vis=[1, 0, 1, 1])
        np.testing.assert_array_equal(maps.maps[1], 0.01)
        assert maps.maps[0].max() > 0.9

    def test_flags_do_not_leak_between_landmarks(self):
        # identical streams: flattening one landmark must leave others bit-equal
        cfg = SynthConfig(coordinate_noise_sigma=2.0, occluded_dropout=1.0)
        _, a = self.run_shape(cfg, seed=5)
        _, b = self.run_shape(cfg, seed=5, vis=[1, 0, 1, 1])
        for l in (0, 2, 3):
            np.testing.assert_array_equal(a.maps[l], b.maps[l])

    def test_all_outliers_match_uniform_oracle(self):
        # with outlier_rate=1 every peak is uniform on the grid; compare the
        # mean peak-to-truth distance against a direct uniform simulation
        cfg = SynthConfig(outlier_rate=1.0)
        truth = np.array([[80.0, 80.0]])
        dists = []
        for seed in range(1000):
            r = np.random.default_rng(seed)
            maps = synthesize_from_shape(
                truth, np.ones(1), np.ones(1, np.uint8), cfg, r, (160, 160)
            )
            dists.append(np.linalg.norm(peak_coords(maps)[0] - truth[0]))
        oracle_rng = np.random.default_rng(987654)
        pts = oracle_rng.uniform(0.0, 159.0, size=(200000, 2))
        expected = np.mean(np.linalg.norm(pts - truth[0], axis=1))
        assert np.mean(dists) == pytest.approx(expected, rel=0.05)

    def test_sample_determinism(self, tiny_corpus):
        cfg = SynthConfig(coordinate_noise_sigma=1.0, outlier_rate=0.2)
        s = tiny_corpus.samples[4]
        a = synthesize(s, cfg, 11)
        b = synthesize(s, cfg, 11)
        np.testing.assert_array_equal(a.maps, b.maps)
        c = synthesize(s, cfg, 12)
        assert not np.array_equal(a.maps, c.maps)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(peak_sigma=0.0)
        with pytest.raises(ValueError):
            SynthConfig(outlier_rate=1.5)
        with pytest.raises(ValueError):
            SynthConfig(coordinate_noise_sigma=-1.0)


class TestMapFiles:
    def test_round_trip_exact(self, tmp_path):
        r = np.random.default_rng(3)
        maps = ProbabilityMaps(r.uniform(size=(5, 17, 13)).astype(np.float32))
        p = tmp_path / "m.fapm"
        write_maps(maps, p)
        out = read_maps(p)
        np.testing.assert_array_equal(out.maps, maps.maps.astype(np.float32))

    def test_truncated_file(self, tmp_path):
        p = tmp_path / "m.fapm"
        write_maps(ProbabilityMaps(np.ones((2, 4, 4))), p)
        data = p.read_bytes()
        p.write_bytes(data[:-7])
        with pytest.raises(FormatError):
            read_maps(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "m.fapm"
        p.write_bytes(b"FAPM\x01\x00")
        with pytest.raises(FormatError):
            read_maps(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.fapm"
        write_maps(ProbabilityMaps(np.ones((1, 2, 2))), p)
        data = bytearray(p.read_bytes())
        data[0] = ord("X")
        p.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            read_maps(p)

    def test_dims_disagree_with_payload(self, tmp_path):
        p = tmp_path / "m.fapm"
        write_maps(ProbabilityMaps(np.ones((2, 4, 4))), p)
        data = bytearray(p.read_bytes())
        data[4:8] = (1).to_bytes(4, "little")  # keep version, then corrupt L
        data[8:12] = (3).to_bytes(4, "little")
        p.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            read_maps(p)
