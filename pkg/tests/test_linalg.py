import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dense_eigh, random_psd
from emsubspace.errors import ConvergenceError, DimensionError
from emsubspace.linalg import jacobi_eigh, orthonormalize, principal_angle, sign_normalize


def test_principal_angle_examples():
    e1 = np.array([[1.0], [0.0]])
    e2 = np.array([[0.0], [1.0]])
    diag = np.array([[1.0], [1.0]]) / np.sqrt(2)
    assert principal_angle(e1, e1) == 0.0
    assert principal_angle(e1, e2) == pytest.approx(np.pi / 2, abs=1e-15)
    assert principal_angle(e1, diag) == pytest.approx(np.pi / 4, abs=1e-15)


def test_principal_angle_small_angles_accurate():
    t = 1e-9
    a = np.array([[1.0], [0.0]])
    b = np.array([[np.cos(t)], [np.sin(t)]])
    assert principal_angle(a, b) == pytest.approx(t, rel=1e-6)


def test_principal_angle_shape_mismatch():
    with pytest.raises(DimensionError):
        principal_angle(np.eye(3)[:, :2], np.eye(3)[:, :1])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_principal_angle_rotation_invariant(p, seed):
    rng = np.random.default_rng(seed)
    k = max(1, p // 2)
    a = orthonormalize(rng.standard_normal((p, k)))
    b = orthonormalize(rng.standard_normal((p, k)))
    rot = orthonormalize(rng.standard_normal((k, k)))
    ang = principal_angle(a, b)
    assert 0.0 <= ang <= np.pi / 2
    assert principal_angle(a @ rot, b) == pytest.approx(ang, abs=1e-10)


def test_sign_normalize_largest_entry_positive():
    b = sign_normalize(np.array([[0.1, 0.5], [-0.9, -0.5]]))
    np.testing.assert_array_equal(b, [[-0.1, 0.5], [0.9, -0.5]])


def test_jacobi_two_by_two():
    w, v = jacobi_eigh(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(w, [3.0, 1.0], rtol=1e-15)
    np.testing.assert_allclose(v[:, 0], [1 / np.sqrt(2), 1 / np.sqrt(2)], rtol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_jacobi_matches_lapack(n, seed):
    s = random_psd(n, seed)
    w, v = jacobi_eigh(s)
    w_ref, v_ref = dense_eigh(s)
    np.testing.assert_allclose(w, w_ref, rtol=1e-10, atol=1e-12 * abs(w_ref[0]))
    np.testing.assert_allclose(v.T @ v, np.eye(n), atol=1e-12)
    np.testing.assert_allclose(s @ v, v * w, atol=1e-9 * max(1.0, w_ref[0]))
    assert np.all(np.diff(w) <= 0)


def test_jacobi_sweep_cap_raises():
    s = random_psd(6, 1)
    with pytest.raises(ConvergenceError):
        jacobi_eigh(s, max_sweeps=1)


def test_orthonormalize_fixed_signs(rng):
    a = rng.standard_normal((7, 3))
    q = orthonormalize(a)
    np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-14)
    # positive diagonal of R
    assert np.all(np.diag(q.T @ a) > 0)
