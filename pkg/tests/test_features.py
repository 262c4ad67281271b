import numpy as np
import pytest

from facealign.errors import FormatError
from facealign.features import (
    FreakPattern,
    SplitParams,
    extract_pattern_values,
    extract_pattern_values_gray,
    feature_value,
    gen_candidates,
    stage_scale,
)
from facealign.heatmaps import ProbabilityMaps, map_values
from facealign.shapes import Shape


def make_shape(L, xy=(50.0, 50.0)):
    return Shape(np.tile(xy, (L, 1)), np.ones(L), np.ones(L, np.uint8))


class TestPattern:
    def test_default_pattern_structure(self, pattern):
        assert len(pattern) == 43
        np.testing.assert_array_equal(pattern.offsets[0], [0.0, 0.0])
        # every point fits the base diameter; rings shrink inward
        ring_max = []
        for rid in np.unique(pattern.rings):
            pts = pattern.offsets[pattern.rings == rid][1:] if rid == 0 else \
                pattern.offsets[pattern.rings == rid]
            radii = np.linalg.norm(pts, axis=1)
            assert radii.max() <= pattern.base_diameter / 2 + 1e-6
            ring_max.append(radii.max())
        assert all(a >= b for a, b in zip(ring_max, ring_max[1:]))

    def test_round_trip(self, tmp_path, pattern):
        p = tmp_path / "pat.txt"
        pattern.save(p)
        p2 = FreakPattern.load(p)
        np.testing.assert_allclose(p2.offsets, pattern.offsets, atol=1e-5)
        np.testing.assert_array_equal(p2.rings, pattern.rings)

    def test_rejects_out_of_diameter(self):
        with pytest.raises(FormatError):
            FreakPattern(np.array([[30.0, 0.0]]), np.array([0]), 32.0)

    def test_rejects_empty(self):
        with pytest.raises(FormatError):
            FreakPattern(np.zeros((0, 2)), np.zeros(0), 32.0)

    def test_missing_diameter_line(self, tmp_path):
        p = tmp_path / "pat.txt"
        p.write_text("0 1.0 2.0\n")
        with pytest.raises(FormatError):
            FreakPattern.load(p)


class TestStageScale:
    def test_endpoints(self):
        assert stage_scale(0, 20) == 1.0
        assert stage_scale(19, 20, floor=0.2) == pytest.approx(0.2)

    def test_single_stage(self):
        assert stage_scale(0, 1) == 1.0

    def test_monotone_non_increasing(self):
        for T in range(1, 21):
            vals = [stage_scale(t, T) for t in range(T)]
            assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            stage_scale(5, 5)


class TestFeatureValue:
    def test_constant_map_is_zero(self, pattern):
        maps = ProbabilityMaps(np.full((2, 100, 100), 0.7))
        shape = make_shape(2)
        theta = SplitParams(tau=0.0, p1=3, p2=11, landmark=1)
        assert feature_value(maps, shape, theta, pattern) == 0.0

    def test_direct_read(self, pattern):
        maps = np.zeros((1, 100, 100))
        shape = make_shape(1)
        theta = SplitParams(tau=0.0, p1=0, p2=1, landmark=0)
        a = np.rint(shape.coords[0] + pattern.offsets[0]).astype(int)
        b = np.rint(shape.coords[0] + pattern.offsets[1]).astype(int)
        maps[0, a[1], a[0]] = 0.9
        maps[0, b[1], b[0]] = 0.4
        got = feature_value(ProbabilityMaps(maps), shape, theta, pattern)
        assert got == pytest.approx(0.5)

    def test_against_two_lookup_oracle(self, pattern):
        r = np.random.default_rng(42)
        for _ in range(100):
            maps = ProbabilityMaps(r.uniform(size=(3, 60, 60)))
            shape = make_shape(3, xy=tuple(r.uniform(10, 50, size=2)))
            p1 = int(r.integers(len(pattern)))
            p2 = int(r.integers(len(pattern)))
            if p2 == p1:
                p2 = (p2 + 1) % len(pattern)
            l = int(r.integers(3))
            scale = float(r.uniform(0.2, 1.0))
            theta = SplitParams(tau=0.0, p1=p1, p2=p2, landmark=l)
            got = feature_value(maps, shape, theta, pattern, scale)
            ref = float(
                map_values(maps.maps[l], shape.coords[l] + scale * pattern.offsets[p1])
                - map_values(maps.maps[l], shape.coords[l] + scale * pattern.offsets[p2])
            )
            assert got == ref

    def test_p1_p2_must_differ(self):
        with pytest.raises(ValueError):
            SplitParams(tau=0.0, p1=4, p2=4, landmark=0)

    def test_scale_validated(self, pattern):
        maps = ProbabilityMaps(np.ones((1, 10, 10)))
        theta = SplitParams(tau=0.0, p1=0, p2=1, landmark=0)
        with pytest.raises(ValueError):
            feature_value(maps, make_shape(1), theta, pattern, scale=1.5)


class TestGenCandidates:
    def test_restricted_landmark_set(self, pattern):
        cands = gen_candidates(50, [3], pattern, seed=0)
        assert all(c.landmark == 3 for c in cands)

    def test_deterministic(self, pattern):
        a = gen_candidates(40, [0, 1, 5], pattern, seed=7)
        b = gen_candidates(40, [0, 1, 5], pattern, seed=7)
        assert a == b

    def test_distinct_offsets_and_range(self, pattern):
        cands = gen_candidates(300, list(range(10)), pattern, tau_range=(-0.3, 0.3), seed=1)
        for c in cands:
            assert c.p1 != c.p2
            assert 0 <= c.p1 < len(pattern) and 0 <= c.p2 < len(pattern)
            assert -0.3 <= c.tau <= 0.3

    def test_count_validation(self, pattern):
        with pytest.raises(ValueError):
            gen_candidates(0, [0], pattern)
        with pytest.raises(ValueError):
            gen_candidates(5, [], pattern)


class TestExtraction:
    def test_matches_feature_value(self, pattern):
        r = np.random.default_rng(5)
        maps = ProbabilityMaps(r.uniform(size=(4, 80, 80)))
        coords = r.uniform(20, 60, size=(4, 2))
        shape = Shape(coords, np.ones(4), np.ones(4, np.uint8))
        scale = 0.5
        V = extract_pattern_values(maps, coords, pattern, scale)
        assert V.shape == (4, len(pattern))
        for l in range(4):
            for (p1, p2) in [(0, 10), (5, 42), (17, 3)]:
                theta = SplitParams(tau=0.0, p1=p1, p2=p2, landmark=l)
                assert V[l, p1] - V[l, p2] == pytest.approx(
                    feature_value(maps, shape, theta, pattern, scale), abs=1e-12
                )

    def test_gray_uses_single_grid(self, pattern):
        r = np.random.default_rng(6)
        img = r.uniform(size=(80, 80))
        coords = r.uniform(20, 60, size=(3, 2))
        V = extract_pattern_values_gray(img, coords, pattern, 1.0)
        for l in range(3):
            ref = map_values(img, coords[l] + pattern.offsets)
            np.testing.assert_array_equal(V[l], ref)

    def test_landmark_subset(self, pattern):
        r = np.random.default_rng(7)
        maps = ProbabilityMaps(r.uniform(size=(6, 50, 50)))
        coords = r.uniform(10, 40, size=(6, 2))
        Vall = extract_pattern_values(maps, coords, pattern, 1.0)
        Vsub = extract_pattern_values(maps, coords, pattern, 1.0, landmarks=[2, 4])
        np.testing.assert_array_equal(Vsub, Vall[[2, 4]])
