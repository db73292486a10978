"""Variation-based linearization of the discrete rigid-body dynamics.

Produces the time-varying linear error system

    dxi_{k+1} = A_k dxi_k + B_k dF_k,
    dxi = (dp, dpdot, eta, dw)  stacked in this fixed order,

around a reference state.  The translational blocks are exact (the
underlying recursion is linear); the rotational blocks are the exact
first-order Jacobians of the discrete step through the exponential chart,

    A_rot = [ dRd.T   dt * J_r(dt wd)                      ]
            [ 0       I^-1 dRd.T (dt hat(I wd) J_l + I)    ]

with dRd = exp(dt hat(wd)).  The dw coordinate of the linear system is the
plain rate difference w - wd (the w update never reads R, which is what
makes the lower-left block exactly zero); the transported error of
error_state() agrees with it to first order and is what the controller
measures.  At wd = 0 every block reduces to the familiar double-integrator
form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import BodyParams, RigidBodyState, Wrench
from .so3 import angular_velocity_error, exp_so3, hat, jac_left, jac_right, orientation_error

STATE_DIM = 12
INPUT_DIM = 6


@dataclass
class ErrorState:
    """Error coordinates around a reference: (dp, dv, eta, dw)."""

    dp: np.ndarray
    dv: np.ndarray
    eta: np.ndarray
    dw: np.ndarray

    def __post_init__(self):
        self.dp = np.asarray(self.dp, dtype=float).reshape(3)
        self.dv = np.asarray(self.dv, dtype=float).reshape(3)
        self.eta = np.asarray(self.eta, dtype=float).reshape(3)
        self.dw = np.asarray(self.dw, dtype=float).reshape(3)

    @classmethod
    def zero(cls) -> "ErrorState":
        z = np.zeros(3)
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "ErrorState":
        x = np.asarray(x, dtype=float).reshape(STATE_DIM)
        return cls(x[0:3], x[3:6], x[6:9], x[9:12])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dp, self.dv, self.eta, self.dw])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))


@dataclass
class LinearizedStep:
    """One-step error dynamics: A (12x12) and B (12x6)."""

    A: np.ndarray
    B: np.ndarray


def linearize(ref_state: RigidBodyState, params: BodyParams, dt: float) -> LinearizedStep:
    """Error-dynamics matrices around `ref_state` for time step `dt`."""
    wd = ref_state.w
    I = params.inertia
    I_inv = params.inertia_inv
    dRdT = exp_so3(dt * wd).T
    Jr = jac_right(dt * wd)
    Jl = Jr.T

    A = np.zeros((STATE_DIM, STATE_DIM))
    eye = np.eye(3)
    A[0:3, 0:3] = eye
    A[0:3, 3:6] = dt * eye
    A[3:6, 3:6] = eye
    A[6:9, 6:9] = dRdT
    A[6:9, 9:12] = dt * Jr
    A[9:12, 9:12] = I_inv @ (dRdT @ (dt * (hat(I @ wd) @ Jl) + I))

    B = np.zeros((STATE_DIM, INPUT_DIM))
    B[3:6, 0:3] = (dt / params.mass) * eye
    B[9:12, 3:6] = dt * I_inv
    return LinearizedStep(A, B)


def error_state(state: RigidBodyState, ref: RigidBodyState) -> ErrorState:
    """Geometric error of `state` around `ref` (attitude terms on TSO(3))."""
    return ErrorState(
        state.p - ref.p,
        state.v - ref.v,
        orientation_error(state.R, ref.R),
        angular_velocity_error(state.w, state.R, ref.R, ref.w),
    )


def propagate_error(err: ErrorState, dF: Wrench, lin: LinearizedStep) -> ErrorState:
    """One step of the linear error dynamics."""
    x = lin.A @ err.as_vector() + lin.B @ dF.as_vector()
    return ErrorState.from_vector(x)
