"""SO(3) kernels: hat/vee maps, exponential/logarithm, rotation Jacobians,
and the geometric error terms used by the stance controller.

Conventions (fixed repo-wide):
  - matrices are numpy arrays in row-major layout, R maps body -> world,
  - rotations act on column vectors, R @ v.
All functions are pure and safe for concurrent use.
"""

from __future__ import annotations

import numpy as np

# Below this angle the Rodrigues coefficients switch to their 2nd-order
# Taylor expansions (sin x / x etc. cancel catastrophically near 0).
SMALL_ANGLE = 1e-8

ROTATION_TOL = 1e-9


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of v, so that hat(v) @ b == cross(v, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of hat. Antisymmetrizes first; rejects clearly non-skew input."""
    sym = 0.5 * (m + m.T)
    if np.abs(sym).max() > 1e-8 * max(1.0, np.abs(m).max()):
        raise ValueError("vee: input has a symmetric part above tolerance")
    a = 0.5 * (m - m.T)
    return np.array([a[2, 1], a[0, 2], a[1, 0]])


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula exp: R^3 -> SO(3), Taylor branch below SMALL_ANGLE."""
    th2 = float(w @ w)
    K = hat(w)
    if th2 < SMALL_ANGLE * SMALL_ANGLE:
        # sin(t)/t = 1 - t^2/6, (1-cos t)/t^2 = 1/2 - t^2/24
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        th = np.sqrt(th2)
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / th2
    return np.eye(3) + a * K + b * (K @ K)


def log_so3(r: np.ndarray) -> np.ndarray:
    """Rotation vector of r; rejects angles within 1e-3 of pi (branch ambiguity)."""
    c = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    th = np.arccos(c)
    if th > np.pi - 1e-3:
        raise ValueError("log_so3: rotation angle within 1e-3 of pi")
    u = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if th < SMALL_ANGLE:
        return u  # th/sin(th) -> 1
    return (th / np.sin(th)) * u


def jac_right(w: np.ndarray) -> np.ndarray:
    """Right Jacobian J_r of SO(3): exp(u + v) = exp(u) exp(J_r(u) v) + O(|v|^2)."""
    th2 = float(w @ w)
    K = hat(w)
    if th2 < SMALL_ANGLE * SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    th = np.sqrt(th2)
    return (
        np.eye(3)
        - (1.0 - np.cos(th)) / th2 * K
        + (th - np.sin(th)) / (th2 * th) * (K @ K)
    )


def jac_left(w: np.ndarray) -> np.ndarray:
    """Left Jacobian J_l of SO(3); J_l(w) = J_r(w).T = exp(w) J_r(w)."""
    return jac_right(w).T


def is_rotation(r: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    return (
        r.shape == (3, 3)
        and np.isfinite(r).all()
        and np.linalg.norm(r.T @ r - np.eye(3)) <= tol
        and abs(np.linalg.det(r) - 1.0) <= tol
    )


def check_rotation(r: np.ndarray, tol: float = ROTATION_TOL) -> np.ndarray:
    """Validate the RotationMatrix invariants; returns r unchanged."""
    r = np.asarray(r, dtype=float)
    if not is_rotation(r, tol):
        raise ValueError("not a rotation matrix within tolerance %g" % tol)
    return r


def reproject(r: np.ndarray) -> np.ndarray:
    """One Newton (Newton-Schulz) step toward the polar factor of r.

    For nearly-orthogonal r this removes drift quadratically; long rollouts
    call this explicitly, step() never does.
    """
    return r @ (1.5 * np.eye(3) - 0.5 * (r.T @ r))


def orientation_error(r: np.ndarray, r_des: np.ndarray) -> np.ndarray:
    """Geometric attitude error 0.5 * vee(R_d^T R - R^T R_d)."""
    e = r_des.T @ r
    a = 0.5 * (e - e.T)
    return np.array([a[2, 1], a[0, 2], a[1, 0]])


def angular_velocity_error(
    w: np.ndarray, r: np.ndarray, r_des: np.ndarray, w_des: np.ndarray
) -> np.ndarray:
    """Body-rate error w - R^T R_d w_d (reference rate transported into the body frame)."""
    return w - r.T @ (r_des @ w_des)
