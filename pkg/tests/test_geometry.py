import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relfeat import geometry as geo

FIX = __import__("pathlib").Path(__file__).parent / "fixtures"


def random_h(rng):
    return geo.sample_random_homography(int(rng.integers(1 << 30)), 20, 2e-3, 0.3, 10, center=(32, 32))


def test_project_identity():
    assert geo.project(geo.identity(), (10, 10)) == (10.0, 10.0)


def test_project_translation():
    assert geo.project(geo.translation(3, 0), (10, 10)) == (13.0, 10.0)


def test_project_point_at_infinity():
    h = np.array([[1.0, 0, 0], [0, 1, 0], [1, 0, -10.0]])
    with pytest.raises(geo.PointAtInfinity):
        geo.project(h, (10.0, 3.0))


def test_project_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        h = random_h(rng)
        p = tuple(rng.uniform(0, 64, 2))
        back = geo.project(geo.inverse(h), geo.project(h, p))
        assert np.allclose(back, p, rtol=0, atol=1e-9)


def test_project_matches_formula():
    rng = np.random.default_rng(1)
    h = random_h(rng)
    x, y = 12.5, 40.25
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    want = ((h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w, (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w)
    assert geo.project(h, (x, y)) == pytest.approx(want, abs=1e-12)


def test_compose_with_inverse_is_identity():
    rng = np.random.default_rng(2)
    for _ in range(100):
        h = random_h(rng)
        np.testing.assert_allclose(geo.compose(h, geo.inverse(h)), np.eye(3), rtol=0, atol=1e-9)


def test_reprojection_error_examples():
    assert geo.reprojection_error(geo.identity(), (4, 5), (4, 5)) == 0.0
    assert geo.reprojection_error(geo.translation(3, 0), (10, 10), (14, 10)) == 1.0


def test_reprojection_error_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        h = random_h(rng)
        p1 = rng.uniform(0, 64, 2)
        p2 = rng.uniform(0, 64, 2)
        q = h @ np.array([p1[0], p1[1], 1.0])
        want = np.hypot(q[0] / q[2] - p2[0], q[1] / q[2] - p2[1])
        assert geo.reprojection_error(h, p1, p2) == pytest.approx(want, abs=1e-10)


def test_reprojection_symmetry_on_exact_matches():
    rng = np.random.default_rng(4)
    for _ in range(100):
        h = random_h(rng)
        p1 = rng.uniform(0, 64, 2)
        p2 = geo.project(h, p1)
        assert abs(geo.reprojection_error(h, p1, p2) - geo.reprojection_error(geo.inverse(h), p2, p1)) <= 1e-6


def test_zero_bounds_give_identity():
    h = geo.sample_random_homography(5, 0, 0, 0, 0)
    np.testing.assert_array_equal(h, np.eye(3))


def test_sampling_is_deterministic():
    a = geo.sample_random_homography(11, center=(31.5, 31.5))
    b = geo.sample_random_homography(11, center=(31.5, 31.5))
    assert np.array_equal(a, b)


def test_negative_bound_rejected():
    with pytest.raises(ValueError):
        geo.sample_random_homography(0, max_rotation_deg=-1)


def test_default_bounds_keep_corners_in_padded_frame():
    h, w = 64, 64
    b = geo.default_bounds_for(h, w)
    assert b.max_translation_px == pytest.approx(6.4)
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=float)
    for seed in range(1000):
        hom = geo.sample_random_homography(seed, b.max_rotation_deg, b.max_perspective, b.max_scale_delta,
                                           b.max_translation_px, center=((w - 1) / 2, (h - 1) / 2))
        assert abs(np.linalg.det(hom)) > 1e-9
        q = geo.project_points(hom, corners)
        assert np.all((q[:, 0] > -w) & (q[:, 0] < 2 * w) & (q[:, 1] > -h) & (q[:, 1] < 2 * h))


def test_default_bounds_keep_half_the_grid():
    for seed in range(200):
        hom = geo.sample_random_homography(seed, center=(31.5, 31.5))
        p1, _ = geo.valid_correspondence_arrays(hom, 64, 64, 4)
        assert len(p1) >= 0.5 * len(geo.grid_points(64, 64, 4))


def test_grid_identity_pairs_each_point_with_itself():
    corr = geo.valid_correspondence_grid(geo.identity(), 32, 32, 4)
    assert corr and all(c.p1 == c.p2 for c in corr)
    assert len(corr) == len(geo.grid_points(32, 32, 4))


def test_grid_translation_example():
    corr = geo.valid_correspondence_grid(geo.translation(5, 0), 64, 64, 4)
    assert geo.Correspondence((10.0, 10.0), (15.0, 10.0)) in corr


def test_grid_translation_beyond_width_is_empty():
    assert geo.valid_correspondence_grid(geo.translation(100, 0), 64, 64, 4) == []


def test_grid_rejects_bad_stride():
    with pytest.raises(ValueError):
        geo.valid_correspondence_grid(geo.identity(), 8, 8, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_grid_membership_brute_force(seed, stride):
    hom = random_h(np.random.default_rng(seed))
    h, w = 40, 48
    got = {(c.p1, c.p2) for c in geo.valid_correspondence_grid(hom, h, w, stride)}
    want = set()
    for y in range(stride // 2, h, stride):
        for x in range(stride // 2, w, stride):
            if not (0 < x < w - 1 and 0 < y < h - 1):
                continue
            v = hom @ np.array([x, y, 1.0])
            if v[2] <= 1e-12:
                continue
            qx, qy = v[0] / v[2], v[1] / v[2]
            if 0 < qx < w - 1 and 0 < qy < h - 1:
                want.add(((float(x), float(y)), (qx, qy)))
    assert {a for a, _ in got} == {a for a, _ in want}
    for a, b in got:
        match = [q for p, q in want if p == a][0]
        assert np.allclose(b, match, rtol=0, atol=1e-9)


def test_read_golden_homography():
    h = geo.read_homography(FIX / "H_golden")
    want = np.array([[0.79208, 0.010314, 27.751], [-0.023778, 0.92337, 58.794], [-0.00012788, 1.5939e-05, 1.0]])
    np.testing.assert_array_equal(h, want)


@pytest.mark.parametrize("name,match", [("H_eight_numbers", "8 numbers"), ("H_non_numeric", "non-numeric"),
                                        ("H_singular", "singular")])
def test_malformed_homography_names_file(name, match):
    with pytest.raises(geo.HomographyParseError, match=match) as err:
        geo.read_homography(FIX / name)
    assert name in str(err.value)


def test_missing_homography_names_file(tmp_path):
    with pytest.raises(geo.HomographyParseError, match="H_1_9"):
        geo.read_homography(tmp_path / "H_1_9")


def test_write_read_round_trip(tmp_path):
    h = random_h(np.random.default_rng(9))
    geo.write_homography(tmp_path / "H", h)
    assert np.array_equal(geo.read_homography(tmp_path / "H"), h)
