import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relfeat import diffcore as dc
from relfeat import teacher as tch
from relfeat import tsg
from gradcheck import check, weighted_sum


def cosine_oracle(F):
    n = len(F)
    R = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ni, nj = np.sqrt(sum(v * v for v in F[i])), np.sqrt(sum(v * v for v in F[j]))
            R[i, j] = 0.0 if ni == 0 or nj == 0 else sum(a * b for a, b in zip(F[i], F[j])) / (ni * nj)
    return R


def test_identical_rows_give_ones():
    np.testing.assert_allclose(tch.relation_matrix(np.tile([[0.3, -2.0, 1.0]], (4, 1))), 1.0, atol=1e-15)


def test_orthogonal_rows():
    np.testing.assert_array_equal(tch.relation_matrix(np.array([[1.0, 0.0], [0.0, 1.0]])), np.eye(2))


def test_cosine_example():
    r = tch.relation_matrix(np.array([[1.0, 0.0], [1.0, 1.0]]))
    assert r[0, 1] == pytest.approx(1 / np.sqrt(2), abs=1e-15)


def test_zero_rows_give_zero():
    F = np.array([[1.0, 2.0], [0.0, 0.0], [3.0, -1.0]])
    r = tch.relation_matrix(F)
    assert np.all(r[1] == 0) and np.all(r[:, 1] == 0)


def test_one_row():
    np.testing.assert_allclose(tch.relation_matrix(np.array([[0.2, 5.0]])), [[1.0]], atol=1e-15)


def test_nan_rejected():
    with pytest.raises(ValueError, match="NaN"):
        tch.relation_matrix(np.array([[np.nan, 1.0]]))


def test_relation_properties_100_maps():
    rng = np.random.default_rng(0)
    for _ in range(100):
        F = rng.standard_normal((int(rng.integers(1, 40)), int(rng.integers(1, 20))))
        R = tch.relation_matrix(F)
        assert np.max(np.abs(R - R.T)) <= 1e-9
        np.testing.assert_allclose(np.diag(R), 1.0, rtol=0, atol=1e-9)
        assert R.min() >= -1 - 1e-9 and R.max() <= 1 + 1e-9
        D = rng.uniform(0.01, 100.0, len(F))
        assert np.max(np.abs(tch.relation_matrix(D[:, None] * F) - R)) <= 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_cosine_oracle_8x8(seed):
    F = np.random.default_rng(seed).standard_normal((8, 8))
    np.testing.assert_allclose(tch.relation_matrix(F), cosine_oracle(F.tolist()), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_relation_matrix_gradient(seed):
    F = np.random.default_rng(seed).standard_normal((6, 4))
    assert check(lambda f: weighted_sum(tch.relation_matrix(f), seed), F) <= 1e-6


def test_diff_input_returns_diff():
    r = tch.relation_matrix(dc.DiffArray(np.eye(3), True))
    assert isinstance(r, dc.DiffArray) and r.requires_grad


@pytest.mark.parametrize("a,b,want", [((3, 3), (3, 3), tch.PairLabel.IGNORE), ((1, 1), (2, 2), tch.PairLabel.POSITIVE),
                                      ((1, 1), (0, 0), tch.PairLabel.IGNORE), ((1, 1), (1, 0), tch.PairLabel.NEGATIVE)])
def test_pair_labels(a, b, want):
    G = np.array([[0, 5, 3, 3], [3, 3, 0, 0], [3, 3, 3, 3], [3, 3, 3, 3]])
    assert tch.grouping_pair_label(G, a, b) == want


def test_pair_label_examples():
    G = tch.SemanticGrouping(np.array([[3, 3, 0]]))
    assert tch.grouping_pair_label(G, (0, 0), (0, 0)) == tch.PairLabel.IGNORE
    assert tch.grouping_pair_label(G, (0, 0), (1, 0)) == tch.PairLabel.POSITIVE
    assert tch.grouping_pair_label(G, (0, 0), (2, 0)) == tch.PairLabel.IGNORE


def test_edge_round_trip(tmp_path):
    E = (np.random.default_rng(1).random((4, 4)) > 0.5).astype(float)
    tch.write_signal(tmp_path / "e.tsg", tch.EdgeMap(E))
    back = tch.read_signal(tmp_path / "e.tsg")
    assert isinstance(back, tch.EdgeMap) and np.array_equal(back.E, E)


def test_grouping_and_feature_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    G = rng.integers(0, 7, (16, 8))
    F = rng.standard_normal((2, 5)).astype(np.float32).astype(np.float64)
    tch.write_signal(tmp_path / "g.tsg", tch.SemanticGrouping(G))
    tch.write_signal(tmp_path / "f.tsg", tch.TeacherFeatureMap(F))
    assert np.array_equal(tch.read_signal(tmp_path / "g.tsg", (16, 8)).labels, G)
    assert tch.read_signal(tmp_path / "f.tsg", (16, 8)).F.tobytes() == F.tobytes()


def test_signal_bad_magic(tmp_path):
    (tmp_path / "x.tsg").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(tsg.BadMagic):
        tch.read_signal(tmp_path / "x.tsg")


def test_feature_rows_checked_against_image_size(tmp_path):
    tch.write_signal(tmp_path / "ok.tsg", tch.TeacherFeatureMap(np.zeros((256, 4))))
    assert tch.read_signal(tmp_path / "ok.tsg", (128, 128)).F.shape == (256, 4)
    tch.write_signal(tmp_path / "bad.tsg", tch.TeacherFeatureMap(np.zeros((255, 4))))
    with pytest.raises(tsg.DimensionMismatch, match="255"):
        tch.read_signal(tmp_path / "bad.tsg", (128, 128))


def test_non_binary_edge_not_storable(tmp_path):
    with pytest.raises(ValueError):
        tch.write_signal(tmp_path / "e.tsg", tch.EdgeMap(np.full((2, 2), 0.5)))


def test_edge_pgm(tmp_path):
    tch.write_edge_pgm(tmp_path / "e.pgm", np.eye(3))
    assert (tmp_path / "e.pgm").read_bytes() == b"P5\n3 3\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_relation_is_scale_invariant_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((rows, cols))
    D = rng.uniform(1e-3, 1e3, rows)
    assert np.max(np.abs(tch.relation_matrix(D[:, None] * F) - tch.relation_matrix(F))) <= 1e-9
