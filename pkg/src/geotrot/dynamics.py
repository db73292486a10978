"""Discrete variational rigid-body dynamics (trapezoidal discrete Lagrangian).

The same propagator is used as the simulator plant and as the MPC
prediction model:

    p+  = p + dt * pdot
    pd+ = pdot + dt * g + dt * f / m
    R+  = R @ exp(dt * hat(w))
    I w+ = exp(dt * hat(w)).T @ I w + dt * tau

The wrench argument of step() is the one applied over [t_k, t_k+1]; the
recursion indexes it k+1 (force enters the k+1 velocity update), which is
why inverse dynamics below solves for the *trailing* wrench of each
interval.  f is expressed in the world frame, tau in the body frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .so3 import check_rotation, exp_so3, hat

GRAVITY = np.array([0.0, 0.0, -9.81])

# 10 kg, 0.36 x 0.19 x 0.11 m uniform-box approximation of the A1 torso.
DEFAULT_MASS = 10.0
DEFAULT_INERTIA = np.diag([0.02, 0.06, 0.07])


@dataclass
class BodyParams:
    """Rigid-body constants. Inertia must be symmetric positive definite."""

    mass: float = DEFAULT_MASS
    inertia: np.ndarray = field(default_factory=lambda: DEFAULT_INERTIA.copy())
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        self.gravity = np.asarray(self.gravity, dtype=float)
        if not self.mass > 0.0:
            raise ValueError("mass must be positive")
        if np.abs(self.inertia - self.inertia.T).max() > 1e-12:
            raise ValueError("inertia must be symmetric")
        np.linalg.cholesky(self.inertia)  # raises if not positive definite
        self.inertia_inv = np.linalg.inv(self.inertia)


@dataclass
class Wrench:
    """World-frame force on the CoM and body-frame moment."""

    f: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float).reshape(3)
        self.tau = np.asarray(self.tau, dtype=float).reshape(3)

    @classmethod
    def zero(cls) -> "Wrench":
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.f, self.tau])


@dataclass
class RigidBodyState:
    """Reduced-order state (p, pdot, R, w); R body->world, w body frame."""

    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.w = np.asarray(self.w, dtype=float).reshape(3)

    @classmethod
    def rest(cls, p=(0.0, 0.0, 0.0)) -> "RigidBodyState":
        return cls(np.array(p, dtype=float), np.zeros(3), np.eye(3), np.zeros(3))

    def validate(self) -> "RigidBodyState":
        check_rotation(self.R)
        if not (np.isfinite(self.p).all() and np.isfinite(self.v).all() and np.isfinite(self.w).all()):
            raise ValueError("non-finite state")
        return self

    def copy(self) -> "RigidBodyState":
        return RigidBodyState(self.p.copy(), self.v.copy(), self.R.copy(), self.w.copy())


def step(state: RigidBodyState, inp: Wrench, params: BodyParams, dt: float) -> RigidBodyState:
    """One variational step; `inp` is the wrench over [t_k, t_k+1] (indexed k+1)."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    dR = exp_so3(dt * state.w)
    p_next = state.p + dt * state.v
    v_next = state.v + dt * params.gravity + (dt / params.mass) * inp.f
    R_next = state.R @ dR
    w_next = params.inertia_inv @ (dR.T @ (params.inertia @ state.w) + dt * inp.tau)
    return RigidBodyState(p_next, v_next, R_next, w_next)


def rollout(
    state0: RigidBodyState, inputs, params: BodyParams, dt: float
) -> list[RigidBodyState]:
    """Apply step() repeatedly; returns len(inputs)+1 states starting at state0."""
    if len(inputs) == 0:
        raise ValueError("rollout needs at least one input")
    # Inline the step math on raw arrays: rollouts dominate the simulator's
    # and the acceptance suite's runtime.
    m = params.mass
    g = params.gravity
    I = params.inertia
    I_inv = params.inertia_inv
    p, v, R, w = state0.p, state0.v, state0.R, state0.w
    out = [state0.copy()]
    for u in inputs:
        dR = exp_so3(dt * w)
        p = p + dt * v
        v = v + dt * g + (dt / m) * u.f
        R = R @ dR
        w = I_inv @ (dR.T @ (I @ w) + dt * u.tau)
        out.append(RigidBodyState(p, v, R, w))
    return out


def reference_wrench(traj, params: BodyParams, dt: float) -> list[Wrench]:
    """Discrete inverse dynamics: wrenches F_k with step(traj[k], F_k) == traj[k+1].

    Exact in p, pdot, w; raises if the orientation sequence is not generated
    by the discrete rotation update (within 1e-6), since then no wrench can
    reproduce it.
    """
    if len(traj) < 2:
        raise ValueError("need at least two states")
    out = []
    for k in range(len(traj) - 1):
        a, b = traj[k], traj[k + 1]
        dR = exp_so3(dt * a.w)
        if np.linalg.norm(b.R - a.R @ dR) > 1e-6:
            raise ValueError(f"trajectory not dynamically consistent in orientation at step {k}")
        f = params.mass * ((b.v - a.v) / dt - params.gravity)
        tau = (params.inertia @ b.w - dR.T @ (params.inertia @ a.w)) / dt
        out.append(Wrench(f, tau))
    return out
