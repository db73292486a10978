import numpy as np
import pytest

from geotrot.so3 import (
    angular_velocity_error,
    exp_so3,
    hat,
    is_rotation,
    jac_left,
    jac_right,
    log_so3,
    orientation_error,
    reproject,
    vee,
)

RNG = np.random.default_rng(1234)


def test_hat_zero():
    assert np.array_equal(hat(np.zeros(3)), np.zeros((3, 3)))


def test_hat_cross_product_identity():
    assert np.allclose(hat(np.array([1.0, 0, 0])) @ np.array([0.0, 1, 0]), [0, 0, 1])
    for _ in range(20):
        a, b = RNG.standard_normal(3), RNG.standard_normal(3)
        assert np.allclose(hat(a) @ b, np.cross(a, b), atol=1e-14)


def test_hat_skew_symmetry_exact():
    for _ in range(20):
        H = hat(RNG.standard_normal(3))
        assert np.array_equal(H + H.T, np.zeros((3, 3)))


def test_vee_roundtrip_exact():
    v = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(vee(hat(v)), v)
    assert np.array_equal(vee(np.zeros((3, 3))), np.zeros(3))


def test_vee_antisymmetrized_random_matrix():
    # oracle: direct index arithmetic on the antisymmetric part
    M = RNG.standard_normal((3, 3))
    A = 0.5 * (M - M.T)
    expect = np.array([A[2, 1], A[0, 2], A[1, 0]])
    assert np.allclose(vee(A), expect, atol=1e-15)


def test_vee_rejects_symmetric_part():
    with pytest.raises(ValueError):
        vee(np.eye(3))


def test_exp_zero_is_identity():
    assert np.array_equal(exp_so3(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_about_z():
    # Rodrigues closed form by hand: columns (0,1,0), (-1,0,0), (0,0,1)
    R = exp_so3(np.array([0.0, 0.0, np.pi / 2]))
    expect = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(R, expect, atol=1e-15)


def test_exp_inverse_property():
    for _ in range(20):
        w = RNG.standard_normal(3) * 2.0
        assert np.allclose(exp_so3(w) @ exp_so3(-w), np.eye(3), atol=1e-14)


def test_exp_output_on_group():
    for scale in (1e-12, 1e-8, 1e-3, 1.0, 10.0):
        w = RNG.standard_normal(3)
        w = scale * w / np.linalg.norm(w)
        R = exp_so3(w)
        assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-12
        assert abs(np.linalg.det(R) - 1.0) < 1e-12


def test_exp_collinear_composition():
    n = RNG.standard_normal(3)
    n /= np.linalg.norm(n)
    for a, b in [(0.3, 1.1), (-0.7, 0.2), (2.0, 2.5)]:
        lhs = exp_so3((a + b) * n)
        rhs = exp_so3(a * n) @ exp_so3(b * n)
        assert np.linalg.norm(lhs - rhs) < 1e-10


def test_exp_taylor_branch_continuity():
    # both branches agree at the cutoff magnitude
    n = np.array([1.0, -2.0, 0.5])
    n /= np.linalg.norm(n)
    w = 1e-8 * n
    th2 = float(w @ w)
    K = hat(w)
    taylor = np.eye(3) + (1 - th2 / 6) * K + (0.5 - th2 / 24) * (K @ K)
    th = np.sqrt(th2)
    rodrigues = np.eye(3) + np.sin(th) / th * K + (1 - np.cos(th)) / th2 * (K @ K)
    assert np.linalg.norm(taylor - rodrigues) < 1e-10
    assert np.linalg.norm(exp_so3(w) - rodrigues) < 1e-10


def test_log_identity():
    assert np.array_equal(log_so3(np.eye(3)), np.zeros(3))


def test_log_exp_roundtrip():
    w = np.array([0.1, 0.2, 0.3])
    assert np.allclose(log_so3(exp_so3(w)), w, atol=1e-10)
    for _ in range(20):
        v = RNG.standard_normal(3)
        v *= RNG.uniform(0, 3.0) / np.linalg.norm(v)
        R = exp_so3(v)
        assert np.linalg.norm(exp_so3(log_so3(R)) - R) < 1e-9


def test_log_large_angle_about_z():
    w = log_so3(exp_so3(np.array([0.0, 0.0, 3.0])))
    assert np.allclose(w, [0.0, 0.0, 3.0], atol=1e-9)


def test_log_rejects_near_pi():
    with pytest.raises(ValueError):
        log_so3(exp_so3(np.array([np.pi - 1e-5, 0.0, 0.0])))


def test_jac_right_left_conventions():
    for _ in range(10):
        u = RNG.standard_normal(3)
        v = RNG.standard_normal(3)
        eps = 1e-7
        lhs = exp_so3(u + eps * v)
        assert np.linalg.norm(lhs - exp_so3(u) @ exp_so3(eps * (jac_right(u) @ v))) < 1e-12
        assert np.linalg.norm(lhs - exp_so3(eps * (jac_left(u) @ v)) @ exp_so3(u)) < 1e-12


def test_orientation_error_zero_at_reference():
    R = exp_so3(RNG.standard_normal(3))
    assert np.allclose(orientation_error(R, R), np.zeros(3), atol=1e-15)


def test_orientation_error_first_order():
    # small-angle expansion oracle: error of R_d e^(eps
    # hat(n)) around R_d is eps*n to O(eps^2)
    for _ in range(20):
        Rd = exp_so3(RNG.standard_normal(3))
        n = RNG.standard_normal(3)
        n /= np.linalg.norm(n)
        for eps in (1e-4, 1e-3):
            e = orientation_error(Rd @ exp_so3(eps * n), Rd)
            assert np.linalg.norm(e - eps * n) <= 5 * eps**2


def test_orientation_error_antisymmetry_transported():
    # e(a,b) = -(b^T a) e(b,a): direct evaluation oracle
    for _ in range(10):
        a = exp_so3(RNG.standard_normal(3) * 0.5)
        b = exp_so3(RNG.standard_normal(3) * 0.5)
        lhs = orientation_error(a, b)
        rhs = -(b.T @ a) @ orientation_error(b, a)
        assert np.allclose(lhs, rhs, atol=1e-12)


def test_angular_velocity_error_cases():
    R = exp_so3(RNG.standard_normal(3))
    w = RNG.standard_normal(3)
    assert np.allclose(angular_velocity_error(w, R, R, w), np.zeros(3), atol=1e-15)
    assert np.allclose(angular_velocity_error(w, R, R, np.zeros(3)), w)
    # direct matrix-product evaluation oracle
    Rd = exp_so3(RNG.standard_normal(3))
    wd = RNG.standard_normal(3)
    expect = w - R.T @ Rd @ wd
    assert np.allclose(angular_velocity_error(w, R, Rd, wd), expect, atol=1e-12)


def test_reproject_restores_orthogonality():
    R = exp_so3(RNG.standard_normal(3))
    Rn = R + 1e-6 * RNG.standard_normal((3, 3))
    Rp = reproject(Rn)
    assert np.linalg.norm(Rp.T @ Rp - np.eye(3)) < np.linalg.norm(Rn.T @ Rn - np.eye(3)) * 1e-3
    assert is_rotation(reproject(Rp), tol=1e-12)
