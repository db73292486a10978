"""Stance control: condenses the linearized error dynamics over the horizon
into a sparse QP with friction-cone, unilateral, and grasp-map constraints,
and maps the resulting contact forces to joint torques.

Decision variables, stacked: dxi_1..dxi_N (12 each), dF_0..dF_N-1 (6 each),
lambda (12, per-foot world-frame forces ordered FR, FL, RR, RL).  The
friction cone and force bounds apply to lambda (the first control step),
exactly as the QP is posed; later-stage wrench corrections are free.

Two force models share the machinery: the geometric one (variational
linearization around the reference) and the Euler/Jacobian baseline used in
the controller-comparison experiments (double-integrator blocks from a
small-angle model about zero roll/pitch, orientation error measured in ZYX
Euler angles).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .config import DEFAULT_CONFIG
from .dynamics import BodyParams, RigidBodyState, Wrench
from .linearize import ErrorState, error_state, linearize
from .qp import QpProblem, QpSettings, QpSolution, QpSolver, QpStatus
from .so3 import hat

log = logging.getLogger(__name__)

LEG_NAMES = ("FR", "FL", "RR", "RL")
N_LEGS = 4


def _default_Q():
    return np.diag(DEFAULT_CONFIG["mpc"]["q_diag"])


def _default_R():
    return np.diag(DEFAULT_CONFIG["mpc"]["r_diag"])


def _default_P():
    return DEFAULT_CONFIG["mpc"]["terminal_scale"] * _default_Q()


@dataclass
class ContactState:
    """Which feet carry load and where they are (world frame, FR FL RR RL)."""

    in_contact: tuple[bool, bool, bool, bool]
    foot_positions: np.ndarray  # (4, 3)

    def __post_init__(self):
        self.in_contact = tuple(bool(c) for c in self.in_contact)
        self.foot_positions = np.asarray(self.foot_positions, dtype=float).reshape(4, 3)

    @property
    def n_contact(self) -> int:
        return sum(self.in_contact)


@dataclass
class MpcWeights:
    Q: np.ndarray = field(default_factory=_default_Q)
    R: np.ndarray = field(default_factory=_default_R)
    P: np.ndarray = field(default_factory=_default_P)
    horizon: int = 10
    dt: float = 0.05
    mu: float = 0.6
    lambda_max: float = 500.0
    lambda_reg: float = 1e-6

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for M, name in ((self.Q, "Q"), (self.P, "P")):
            if np.linalg.eigvalsh(M).min() < -1e-9:
                raise ValueError(f"{name} must be positive semidefinite")
        np.linalg.cholesky(self.R)  # R must be positive definite


@dataclass
class MpcSolution:
    contact_forces: np.ndarray  # (4, 3), world frame
    predicted_errors: list
    wrench_corrections: list
    qp_stats: dict

    def stacked_forces(self) -> np.ndarray:
        return self.contact_forces.reshape(12)


def grasp_map(contacts: ContactState, com_position: np.ndarray, rotation: np.ndarray | None = None) -> np.ndarray:
    """6x12 map from stacked foot forces to the CoM wrench.

    Force rows sum world-frame forces; moment rows apply (p_i - com) x f_i
    rotated into the body frame by `rotation` (identity when omitted).
    """
    com = np.asarray(com_position, dtype=float).reshape(3)
    Rt = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float).T
    G = np.zeros((6, 12))
    for i in range(N_LEGS):
        G[0:3, 3 * i : 3 * i + 3] = np.eye(3)
        G[3:6, 3 * i : 3 * i + 3] = Rt @ hat(contacts.foot_positions[i] - com)
    return G


def _as_vector(err0) -> np.ndarray:
    if isinstance(err0, ErrorState):
        return err0.as_vector()
    return np.asarray(err0, dtype=float).reshape(12)


def _cost_matrix(weights: MpcWeights) -> sp.csc_matrix:
    N = weights.horizon
    blocks = [weights.Q] * (N - 1) + [weights.Q + weights.P] + [weights.R] * N
    blocks.append(weights.lambda_reg * np.eye(12))
    return (sp.block_diag(blocks, format="csc") * 2.0).tocsc()  # objective is 0.5 x'Px


def _assemble_qp(err0, A_list, B_list, grasp, fd0, contacts, weights, cost=None):
    """Shared QP assembly for both force models."""
    N = weights.horizon
    nx, nu, nl = 12, 6, 12
    n = N * nx + N * nu + nl
    iu0 = N * nx  # first input block
    il = N * nx + N * nu

    Pmat = cost if cost is not None else _cost_matrix(weights)
    q = np.zeros(n)

    # dynamics equalities + grasp-map equality, filled densely then converted
    Ad = np.zeros((N * nx + 6, n))
    beq = np.zeros(N * nx + 6)
    e0 = _as_vector(err0)
    eye12 = np.eye(nx)
    for k in range(N):
        r0 = k * nx
        Ad[r0 : r0 + nx, k * nx : (k + 1) * nx] = eye12
        Ad[r0 : r0 + nx, iu0 + k * nu : iu0 + (k + 1) * nu] = -B_list[k]
        if k == 0:
            beq[r0 : r0 + nx] = A_list[0] @ e0
        else:
            Ad[r0 : r0 + nx, (k - 1) * nx : k * nx] = -A_list[k]
    r0 = N * nx
    Ad[r0 : r0 + 6, il:] = grasp
    Ad[r0 : r0 + 6, iu0 : iu0 + 6] = -np.eye(6)
    beq[r0 : r0 + 6] = fd0
    Aeq = sp.csc_matrix(Ad)

    # pyramidal friction cone on lambda, contact feet only
    mu = weights.mu
    face = np.array([[1.0, 0.0, -mu], [-1.0, 0.0, -mu], [0.0, 1.0, -mu], [0.0, -1.0, -mu]])
    stance = [i for i in range(N_LEGS) if contacts.in_contact[i]]
    if stance:
        Gd = np.zeros((4 * len(stance), n))
        for j, i in enumerate(stance):
            Gd[4 * j : 4 * j + 4, il + 3 * i : il + 3 * i + 3] = face
        Gin = sp.csc_matrix(Gd)
        hin = np.zeros(Gd.shape[0])
    else:
        Gin, hin = None, None

    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    for i in range(N_LEGS):
        c0 = il + 3 * i
        if contacts.in_contact[i]:
            lower[c0 + 2] = 0.0
            upper[c0 + 2] = weights.lambda_max
        else:
            lower[c0 : c0 + 3] = 0.0
            upper[c0 : c0 + 3] = 0.0

    return QpProblem(
        P=Pmat, q=q, Aeq=Aeq, beq=beq, Gin=Gin, hin=hin, lower=lower, upper=upper,
        trusted_symmetric=True,
    )


def build_mpc_qp(
    err0,
    ref_traj,
    ref_wrench,
    contacts: ContactState,
    weights: MpcWeights,
    params: BodyParams,
    cost: sp.csc_matrix | None = None,
) -> QpProblem:
    """Geometric MPC QP around the reference trajectory.

    `cost` optionally reuses a prebuilt _cost_matrix(weights) (hot-path knob).
    """
    N = weights.horizon
    if len(ref_traj) < N + 1:
        raise ValueError(f"reference trajectory must cover horizon+1 = {N + 1} states")
    if len(ref_wrench) < N:
        raise ValueError("reference wrench sequence too short")
    if contacts.n_contact == 0:
        raise ValueError("no stance feet: stance controller inactive in flight")
    lins = [linearize(ref_traj[k], params, weights.dt) for k in range(N)]
    G = grasp_map(contacts, ref_traj[0].p, ref_traj[0].R)
    fd0 = ref_wrench[0].as_vector()
    return _assemble_qp(err0, [l.A for l in lins], [l.B for l in lins], G, fd0, contacts, weights, cost)


def baseline_linearized_step(params: BodyParams, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Euler/Jacobian baseline model: small-angle about zero roll/pitch gives
    double-integrator blocks for every coordinate (body-frame rates make the
    Euler-rate matrix the identity there; the gyroscopic term is dropped)."""
    A = np.eye(12)
    A[0:3, 3:6] = dt * np.eye(3)
    A[6:9, 9:12] = dt * np.eye(3)
    B = np.zeros((12, 6))
    B[3:6, 0:3] = (dt / params.mass) * np.eye(3)
    B[9:12, 3:6] = dt * params.inertia_inv
    return A, B


def euler_zyx(R: np.ndarray) -> np.ndarray:
    """(roll, pitch, yaw) of R = Rz(yaw) Ry(pitch) Rx(roll)."""
    pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def baseline_error_state(state: RigidBodyState, ref: RigidBodyState) -> np.ndarray:
    """Error chart of the baseline: Euler-angle differences, plain rates."""
    dth = euler_zyx(state.R) - euler_zyx(ref.R)
    dth = (dth + np.pi) % (2 * np.pi) - np.pi
    return np.concatenate([state.p - ref.p, state.v - ref.v, dth, state.w - ref.w])


def build_baseline_qp(
    err0,
    ref_traj,
    ref_wrench,
    contacts: ContactState,
    weights: MpcWeights,
    params: BodyParams,
    cost: sp.csc_matrix | None = None,
) -> QpProblem:
    """Jacobian-linearized baseline QP; same interface and constraints as
    build_mpc_qp, state chart (p, pdot, Theta_zyx, omega)."""
    N = weights.horizon
    if len(ref_traj) < N + 1:
        raise ValueError(f"reference trajectory must cover horizon+1 = {N + 1} states")
    if contacts.n_contact == 0:
        raise ValueError("no stance feet: stance controller inactive in flight")
    A, B = baseline_linearized_step(params, weights.dt)
    G = grasp_map(contacts, ref_traj[0].p, ref_traj[0].R)
    fd0 = ref_wrench[0].as_vector()
    return _assemble_qp(err0, [A] * N, [B] * N, G, fd0, contacts, weights, cost)


class StanceController:
    """Warm-started stance MPC; one instance per simulated robot.

    model="geometric" uses the variational linearization; model="euler" is
    the Jacobian baseline.  Carries the previous QP solution for warm starts
    and the previous force set for graceful degradation.
    """

    def __init__(
        self,
        weights: MpcWeights | None = None,
        params: BodyParams | None = None,
        model: str = "geometric",
        qp_settings: QpSettings | None = None,
    ):
        if model not in ("geometric", "euler"):
            raise ValueError("model must be 'geometric' or 'euler'")
        self.weights = weights or MpcWeights()
        self.params = params or BodyParams()
        self.model = model
        eps = DEFAULT_CONFIG["mpc"]["eps"]
        self.solver = QpSolver(qp_settings or QpSettings(eps_abs=eps, eps_rel=eps, polish=False))
        self.prev_solution: QpSolution | None = None
        self.prev_forces: np.ndarray | None = None
        self._cost = _cost_matrix(self.weights)

    def initial_error(self, state: RigidBodyState, ref: RigidBodyState):
        if self.model == "geometric":
            return error_state(state, ref)
        return baseline_error_state(state, ref)

    def solve_stance(self, err0, ref_traj, ref_wrench, contacts: ContactState) -> MpcSolution:
        build = build_mpc_qp if self.model == "geometric" else build_baseline_qp
        prob = build(err0, ref_traj, ref_wrench, contacts, self.weights, self.params, cost=self._cost)
        sol = self.solver.solve(prob, warm_start=self.prev_solution)

        stats = {
            "status": sol.status.value,
            "iterations": sol.iterations,
            "primal_residual": sol.primal_residual,
            "dual_residual": sol.dual_residual,
            "solve_time": sol.solve_time,
        }
        usable = sol.status == QpStatus.SOLVED
        if sol.status == QpStatus.MAX_ITER and max(sol.primal_residual, sol.dual_residual) < 1e-3:
            log.warning(
                "stance QP hit max_iter (residuals %.2e/%.2e); using iterate",
                sol.primal_residual,
                sol.dual_residual,
            )
            usable = True
        if not usable:
            if self.prev_forces is None:
                raise RuntimeError(f"stance QP failed with {sol.status.value} and no fallback forces")
            log.warning("stance QP failed (%s); reusing previous forces for one step", sol.status.value)
            return MpcSolution(
                contact_forces=self.prev_forces.copy(),
                predicted_errors=[],
                wrench_corrections=[],
                qp_stats=stats,
            )

        self.prev_solution = sol
        N = self.weights.horizon
        x = sol.x
        errors = [ErrorState.from_vector(x[k * 12 : (k + 1) * 12]) for k in range(N)]
        off = N * 12
        corrections = [
            Wrench(x[off + k * 6 : off + k * 6 + 3], x[off + k * 6 + 3 : off + k * 6 + 6])
            for k in range(N)
        ]
        lam = x[off + N * 6 :].reshape(4, 3).copy()
        # exact feasibility on return: swing feet pinned to 0, stance forces
        # projected onto the box + pyramid (displacement <= solver residual),
        # and dF_0 recomputed so the grasp equality holds exactly
        mu = self.weights.mu
        for i in range(N_LEGS):
            if not contacts.in_contact[i]:
                lam[i] = 0.0
                continue
            lam[i, 2] = min(max(lam[i, 2], 0.0), self.weights.lambda_max)
            cap = mu * lam[i, 2]
            lam[i, 0] = min(max(lam[i, 0], -cap), cap)
            lam[i, 1] = min(max(lam[i, 1], -cap), cap)
        G = grasp_map(contacts, ref_traj[0].p, ref_traj[0].R)
        dF0 = G @ lam.reshape(12) - ref_wrench[0].as_vector()
        corrections[0] = Wrench(dF0[:3], dF0[3:])
        self.prev_forces = lam.copy()
        return MpcSolution(
            contact_forces=lam,
            predicted_errors=errors,
            wrench_corrections=corrections,
            qp_stats=stats,
        )


def stance_torques(solution: MpcSolution, jacobians, in_contact=None) -> np.ndarray:
    """Quasi-static stance torques tau_i = -J_i^T lambda_i, zeros for swing legs.

    `jacobians` are the 3x3 world-frame foot Jacobians in leg order; forces
    are already world frame so no frame change is needed.
    """
    tau = np.zeros(12)
    for i in range(N_LEGS):
        if in_contact is not None and not in_contact[i]:
            continue
        tau[3 * i : 3 * i + 3] = -jacobians[i].T @ solution.contact_forces[i]
    return tau
