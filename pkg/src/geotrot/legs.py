"""3-DOF leg kinematics for the A1 geometry (hip abduction about x, hip and
knee pitch about y), Bezier swing trajectories, and the swing impedance law.

Legs are ordered FR, FL, RR, RL repo-wide.  Joint vector per leg is
(abduction, hip pitch, knee pitch); the knee folds backward (negative
angle).  Foot positions and Jacobians are world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT_CONFIG

LEG_NAMES = ("FR", "FL", "RR", "RL")
# abduction offset sign: +y for left legs, -y for right legs
_SIDE_SIGN = {"FR": -1.0, "FL": 1.0, "RR": -1.0, "RL": 1.0}
_FORE_SIGN = {"FR": 1.0, "FL": 1.0, "RR": -1.0, "RL": -1.0}


class UnreachableError(ValueError):
    """Raised by inverse kinematics when the target is outside the workspace."""

    def __init__(self, msg, distance=None):
        super().__init__(msg)
        self.distance = distance


def _legs_defaults():
    return DEFAULT_CONFIG["legs"]


@dataclass
class LegConfig:
    l_abd: float = field(default_factory=lambda: _legs_defaults()["l_abd"])
    l_thigh: float = field(default_factory=lambda: _legs_defaults()["l_thigh"])
    l_calf: float = field(default_factory=lambda: _legs_defaults()["l_calf"])
    hip_x: float = field(default_factory=lambda: _legs_defaults()["hip_x"])
    hip_y: float = field(default_factory=lambda: _legs_defaults()["hip_y"])
    abd_limits: tuple = field(default_factory=lambda: tuple(_legs_defaults()["abd_limits"]))
    hip_limits: tuple = field(default_factory=lambda: tuple(_legs_defaults()["hip_limits"]))
    knee_limits: tuple = field(default_factory=lambda: tuple(_legs_defaults()["knee_limits"]))

    def __post_init__(self):
        if min(self.l_abd, self.l_thigh, self.l_calf) <= 0:
            raise ValueError("link lengths must be positive")
        for lim in (self.abd_limits, self.hip_limits, self.knee_limits):
            if not lim[0] < lim[1]:
                raise ValueError("degenerate joint limits")

    def hip_offset(self, leg: str) -> np.ndarray:
        """Hip position in the torso frame."""
        return np.array(
            [_FORE_SIGN[leg] * self.hip_x, _SIDE_SIGN[leg] * self.hip_y, 0.0]
        )

    def abd_sign(self, leg: str) -> float:
        return _SIDE_SIGN[leg]

    def stance_width(self) -> float:
        return self.hip_y + self.l_abd


def _rx(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _foot_in_hip_frame(q, leg: str, cfg: LegConfig):
    """Foot position in the hip frame plus the in-plane partials."""
    d = cfg.abd_sign(leg) * cfg.l_abd
    lt, lc = cfg.l_thigh, cfg.l_calf
    s2, c2 = np.sin(q[1]), np.cos(q[1])
    s23, c23 = np.sin(q[1] + q[2]), np.cos(q[1] + q[2])
    x = -lt * s2 - lc * s23
    z = -lt * c2 - lc * c23
    p_plane = np.array([x, d, z])
    return _rx(q[0]) @ p_plane, p_plane


def forward_kinematics(q, leg: str, cfg: LegConfig, base_pos, base_R) -> np.ndarray:
    """World-frame foot position for joint angles q = (abd, hip, knee)."""
    p_hip, _ = _foot_in_hip_frame(q, leg, cfg)
    return np.asarray(base_pos) + np.asarray(base_R) @ (cfg.hip_offset(leg) + p_hip)


def leg_jacobian(q, leg: str, cfg: LegConfig, base_R) -> np.ndarray:
    """World-frame 3x3 Jacobian d(foot position)/d(abd, hip, knee)."""
    lt, lc = cfg.l_thigh, cfg.l_calf
    s2, c2 = np.sin(q[1]), np.cos(q[1])
    s23, c23 = np.sin(q[1] + q[2]), np.cos(q[1] + q[2])
    _, p_plane = _foot_in_hip_frame(q, leg, cfg)
    R1 = _rx(q[0])
    # column 1: rotation about hip x-axis
    col1 = R1 @ np.array([0.0, -p_plane[2], p_plane[1]])
    # columns 2, 3: planar partials rotated by abduction
    col2 = R1 @ np.array([-lt * c2 - lc * c23, 0.0, lt * s2 + lc * s23])
    col3 = R1 @ np.array([-lc * c23, 0.0, lc * s23])
    return np.asarray(base_R) @ np.column_stack([col1, col2, col3])


def inverse_kinematics(foot_world, leg: str, cfg: LegConfig, base_pos, base_R) -> np.ndarray:
    """Closed-form IK, knee-backward branch; FK(IK(p)) == p to 1e-9 m."""
    base_R = np.asarray(base_R)
    rel = base_R.T @ (np.asarray(foot_world) - np.asarray(base_pos)) - cfg.hip_offset(leg)
    d = cfg.abd_sign(leg) * cfg.l_abd
    py, pz = rel[1], rel[2]
    L = np.hypot(py, pz)
    if L < abs(d) - 1e-12:
        raise UnreachableError("target inside the abduction cylinder", distance=abs(d) - L)
    phi = np.arctan2(pz, py)
    q1a = phi + np.arccos(np.clip(d / max(L, 1e-12), -1.0, 1.0))
    q1b = phi - np.arccos(np.clip(d / max(L, 1e-12), -1.0, 1.0))
    # choose the branch that puts the foot below the hip in the leg plane
    best = None
    for q1 in (q1a, q1b):
        zp = -np.sin(q1) * py + np.cos(q1) * pz
        if best is None or zp < best[1]:
            best = (q1, zp)
    q1, z_plane = best
    x_plane = rel[0]
    r2 = x_plane**2 + z_plane**2
    lt, lc = cfg.l_thigh, cfg.l_calf
    r_min, r_max = abs(lt - lc) + 1e-4, lt + lc - 1e-4
    r = np.sqrt(r2)
    if not r_min <= r <= r_max:
        dist = r_min - r if r < r_min else r - r_max
        raise UnreachableError(f"target at distance {r:.4f} outside [{r_min:.4f}, {r_max:.4f}]", distance=dist)
    cos_knee = (r2 - lt**2 - lc**2) / (2 * lt * lc)
    q3 = -np.arccos(np.clip(cos_knee, -1.0, 1.0))  # knee-backward branch
    q2 = np.arctan2(-x_plane, -z_plane) - np.arctan2(lc * np.sin(q3), lt + lc * np.cos(q3))
    q2 = (q2 + np.pi) % (2 * np.pi) - np.pi
    return np.array([(q1 + np.pi) % (2 * np.pi) - np.pi, q2, q3])


# -- swing trajectories ------------------------------------------------------


@dataclass
class SwingTrajectory:
    """Degree-4 Bezier; endpoint control points doubled so endpoint speed is 0."""

    control_points: np.ndarray  # (5, 3)
    duration: float
    apex_height: float

    def position(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), 1.0)
        pts = self.control_points
        b = np.array(
            [(1 - s) ** 4, 4 * s * (1 - s) ** 3, 6 * s**2 * (1 - s) ** 2, 4 * s**3 * (1 - s), s**4]
        )
        return b @ pts

    def velocity(self, s: float) -> np.ndarray:
        """World-frame velocity (m/s) at phase s, including the 1/duration factor."""
        s = min(max(s, 0.0), 1.0)
        pts = self.control_points
        d = 4 * (pts[1:] - pts[:-1])
        b = np.array([(1 - s) ** 3, 3 * s * (1 - s) ** 2, 3 * s**2 * (1 - s), s**3])
        return (b @ d) / self.duration


def plan_swing(liftoff, target, terrain_clearance: float | None = None, duration: float = 0.15) -> SwingTrajectory:
    """Swing trajectory from liftoff to target clearing both endpoints.

    The middle control point is lifted so the midpoint height equals
    max(endpoint heights) + clearance, which bounds the apex from below.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    if terrain_clearance is None:
        terrain_clearance = DEFAULT_CONFIG["swing"]["clearance"]
    p0 = np.asarray(liftoff, dtype=float)
    p4 = np.asarray(target, dtype=float)
    apex = max(p0[2], p4[2]) + terrain_clearance
    mid = 0.5 * (p0 + p4)
    # B(1/2) = (5 p0 + 6 p2 + 5 p4) / 16 with doubled endpoints
    mid_z = (16.0 * apex - 5.0 * p0[2] - 5.0 * p4[2]) / 6.0
    p2 = np.array([mid[0], mid[1], mid_z])
    pts = np.vstack([p0, p0, p2, p4, p4])
    return SwingTrajectory(pts, float(duration), apex)


def swing_torques(q, qd, desired_pos, desired_vel, leg: str, cfg: LegConfig, base_pos, base_R, Kp, Kd) -> np.ndarray:
    """Impedance law tau = J^T (-Kp (p - p_d) - Kd (pdot - pdot_d))."""
    p = forward_kinematics(q, leg, cfg, base_pos, base_R)
    J = leg_jacobian(q, leg, cfg, base_R)
    v = J @ np.asarray(qd)
    f = -np.asarray(Kp) @ (p - np.asarray(desired_pos)) - np.asarray(Kd) @ (v - np.asarray(desired_vel))
    return J.T @ f
