import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emsubspace.dataset import (
    DataMatrix,
    SyntheticSpec,
    center,
    generate_synthetic,
    is_centered,
    mask_random,
    read_csv,
    read_emss,
    read_matrix,
    sample_covariance,
    write_csv,
    write_emss,
)
from emsubspace.errors import DataError, DimensionError, MissingDataError


def test_center_two_by_two():
    m = center(DataMatrix([[1.0, 3.0], [2.0, 2.0]]))
    np.testing.assert_array_equal(m.values, [[-1.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(m.column_mean, [2.0, 2.0])


def test_center_already_centered():
    x = np.array([[1.0, -1.0, 0.0], [2.0, -2.0, 0.0]])
    m = center(DataMatrix(x))
    np.testing.assert_allclose(m.values, x, atol=1e-15)
    np.testing.assert_allclose(m.column_mean, 0.0, atol=1e-15)


def test_center_uses_observed_entries_only():
    m = DataMatrix.from_nan([[1.0, np.nan, 5.0], [1.0, 2.0, 3.0]])
    c = center(m)
    assert c.column_mean[0] == 3.0
    assert c.values[0, 0] == -2.0 and c.values[0, 2] == 2.0
    assert c.missing_mask[0, 1]
    assert np.isnan(c.with_nan()[0, 1])


def test_center_row_without_observations_keeps_zero_mean():
    mask = np.array([[True, True], [False, False]])
    c = center(DataMatrix([[0.0, 0.0], [1.0, 3.0]], mask))
    assert c.column_mean[0] == 0.0
    assert np.all(np.isfinite(c.values))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 9)),
              elements=st.floats(-1e3, 1e3)))
def test_center_idempotent(x):
    once = center(DataMatrix(x))
    twice = center(once)
    np.testing.assert_allclose(twice.values, once.values, atol=1e-9)
    assert is_centered(once, atol=1e-12)
    np.testing.assert_allclose(twice.column_mean, x.mean(axis=1), atol=1e-9)


def test_sample_covariance_examples():
    np.testing.assert_array_equal(sample_covariance(DataMatrix([[1.0, -1.0], [1.0, -1.0]])),
                                  [[2.0, 2.0], [2.0, 2.0]])
    np.testing.assert_array_equal(sample_covariance(DataMatrix(np.eye(2))), np.eye(2))


def test_sample_covariance_matches_triple_loop(rng):
    x = center(DataMatrix(rng.standard_normal((3, 5)))).values
    expected = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            for t in range(5):
                expected[i, j] += x[i, t] * x[j, t]
    expected /= 4
    np.testing.assert_allclose(sample_covariance(DataMatrix(x)), expected, rtol=1e-14, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_sample_covariance_psd(p, n, seed):
    x = np.random.default_rng(seed).standard_normal((p, n)) * 10
    cov = sample_covariance(center(DataMatrix(x)))
    np.testing.assert_array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-10


def test_sample_covariance_rejects_missing():
    with pytest.raises(MissingDataError):
        sample_covariance(DataMatrix.from_nan([[1.0, np.nan, 2.0], [0.0, 1.0, 2.0]]))


def test_datamatrix_invariants():
    with pytest.raises(DimensionError):
        DataMatrix(np.ones((3, 1)))
    with pytest.raises(DataError):
        DataMatrix(np.ones((2, 2)), np.array([[True, False], [True, False]]))
    with pytest.raises(DataError):
        DataMatrix([[1.0, np.inf]])
    m = DataMatrix(np.ones((2, 3)), np.zeros((2, 3), dtype=bool))
    assert m.missing_mask is None
    with pytest.raises(ValueError):
        m.values[0, 0] = 5.0


def test_values_are_column_major():
    m = DataMatrix(np.arange(12.0).reshape(3, 4))
    assert m.values.flags.f_contiguous


def test_synthetic_deterministic():
    spec = SyntheticSpec(6, 40, 2, (3.0, 1.0), noise_sigma=0.1, seed=99)
    a, ba = generate_synthetic(spec)
    b, bb = generate_synthetic(spec)
    assert a.fingerprint() == b.fingerprint()
    np.testing.assert_array_equal(ba, bb)


def test_synthetic_single_direction_variance():
    m, b = generate_synthetic(SyntheticSpec(5, 1000, 1, (4.0,), seed=1))
    var = float(np.var(b[:, 0] @ m.values, ddof=1))
    assert abs(var - 4.0) < 0.15 * 4.0


def test_synthetic_full_rank_eigenvalues():
    ev = (5.0, 3.0, 1.0)
    m, _ = generate_synthetic(SyntheticSpec(3, 20000, 3, ev, seed=2))
    got = np.sort(np.linalg.eigvalsh(sample_covariance(center(m))))[::-1]
    np.testing.assert_allclose(got, ev, rtol=0.05)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_noiseless_synthetic_has_rank_k(p, k, seed):
    k = min(k, p)
    m, _ = generate_synthetic(SyntheticSpec(p, 30, k, tuple(range(k, 0, -1)), seed=seed))
    sv = np.linalg.svd(m.values, compute_uv=False)
    assert np.all(sv[k:] < 1e-8 * sv[0])


def test_synthetic_spec_validation():
    with pytest.raises(DimensionError):
        SyntheticSpec(2, 10, 3, (3.0, 2.0, 1.0))
    with pytest.raises(DimensionError):
        SyntheticSpec(4, 10, 2, (1.0,))
    with pytest.raises(ValueError):
        SyntheticSpec(4, 10, 1, (-1.0,))


def test_mask_random_keeps_a_value_per_column():
    m, _ = generate_synthetic(SyntheticSpec(3, 200, 1, (1.0,), seed=0))
    masked = mask_random(m, 0.6, seed=4)
    assert masked.has_missing
    assert not masked.missing_mask.all(axis=0).any()
    # fully hidden columns get one entry back: expected rate 0.6 - 0.6**3 / 3
    assert 0.45 < masked.missing_mask.mean() < 0.6


def test_csv_roundtrip_with_header_and_gaps(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("a,b,c\n1,,3\n4,5,6\n")
    m = read_csv(path)
    assert m.shape == (2, 3)
    assert m.missing_mask[0, 1]
    write_csv(tmp_path / "out.csv", m)
    back = read_csv(tmp_path / "out.csv")
    np.testing.assert_array_equal(back.with_nan(), m.with_nan())


def test_csv_errors(tmp_path):
    (tmp_path / "ragged.csv").write_text("1,2\n3\n")
    with pytest.raises(DataError):
        read_csv(tmp_path / "ragged.csv")
    (tmp_path / "empty.csv").write_text("\n")
    with pytest.raises(DataError):
        read_csv(tmp_path / "empty.csv")


def test_emss_roundtrip(tmp_path, rng):
    x = rng.standard_normal((4, 7))
    mask = rng.random((4, 7)) < 0.2
    mask[:, 0] = False
    m = DataMatrix(x, mask)
    write_emss(tmp_path / "m.emss", m)
    back = read_matrix(tmp_path / "m.emss")
    assert back.fingerprint() == m.fingerprint()
    raw = (tmp_path / "m.emss").read_bytes()
    assert raw[:4] == b"EMSS"
    assert int.from_bytes(raw[4:8], "little") == 4 and int.from_bytes(raw[8:12], "little") == 7
    # row-major f64 payload
    assert np.frombuffer(raw[12:20], "<f8")[0] == x[0, 0]
    assert np.frombuffer(raw[20:28], "<f8")[0] == x[0, 1]


def test_emss_truncated(tmp_path):
    (tmp_path / "bad.emss").write_bytes(b"EMSS" + (2).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"\0" * 8)
    with pytest.raises(DataError):
        read_emss(tmp_path / "bad.emss")
