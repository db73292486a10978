"""Two-step-periodic trot gaits: offline generation by direct collocation on
the reduced rigid-body model, a 4-D library over step-length pairs, and
multilinear interpolation queries.

Cycle structure (eight phases, two trotting steps A and B):

    DS, SS_FL_RR, DS, SS_FR_RL, DS, SS_FL_RR, DS, SS_FR_RL

Within each trotting step the leading diagonal's touchdown opens a gap of
that step's length (front/hind pair) and the trailing diagonal's touchdown
closes it, so the feet are aligned at every step boundary.  Per cycle each
front foot advances l0.front + l1.front, each hind foot l0.hind + l1.hind,
and the body advances the average of the two sums.

The collocation decision variables are the node states (position, velocity,
exponential orientation coordinates, body rate), per-interval per-foot
forces, and the eight phase durations.  Dynamics between nodes use the
variational step itself, so converged gaits replay exactly through the
simulator's propagator; the stored reference states are regenerated from an
open-loop rollout of the converged forces, which makes the replay residual
zero by construction and the periodicity residual an honest rollout
measurement.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .config import DEFAULT_CONFIG
from .dynamics import BodyParams, RigidBodyState, Wrench, reference_wrench, step
from .legs import LegConfig
from .qp import QpProblem, solve_box_qp
from .so3 import exp_so3, hat, jac_left, jac_right, log_so3

log = logging.getLogger(__name__)

LEG_NAMES = ("FR", "FL", "RR", "RL")
N_PHASES = 8
# stance flags per phase, leg order FR FL RR RL
PHASE_STANCE = (
    (True, True, True, True),
    (False, True, True, False),  # SS_FL_RR: FR + RL swing
    (True, True, True, True),
    (True, False, False, True),  # SS_FR_RL: FL + RR swing
    (True, True, True, True),
    (False, True, True, False),
    (True, True, True, True),
    (True, False, False, True),
)
PHASE_NAMES = ("DS1_A", "SS_FL_RR_A", "DS2_A", "SS_FR_RL_A", "DS1_B", "SS_FL_RR_B", "DS2_B", "SS_FR_RL_B")
STEP_LENGTH_LIMIT = 0.3


class GaitError(RuntimeError):
    pass


class NoConvergence(GaitError):
    def __init__(self, msg, residual=None, iterations=None):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


class InfeasibleSchedule(GaitError):
    pass


@dataclass(frozen=True)
class StepLengthPair:
    front: float
    hind: float

    def __post_init__(self):
        if not (abs(self.front) <= STEP_LENGTH_LIMIT and abs(self.hind) <= STEP_LENGTH_LIMIT):
            raise ValueError(f"step lengths must lie in [-{STEP_LENGTH_LIMIT}, {STEP_LENGTH_LIMIT}]")


def foot_x_schedule(l0: StepLengthPair, l1: StepLengthPair, hip_x: float) -> np.ndarray:
    """x position of each foot during each phase, (8, 4), leg order FR FL RR RL.

    Touchdowns land at the end of the single-stance phases; the entry for a
    swing phase is the foot's liftoff position.
    """
    fr = [hip_x, hip_x] + [hip_x + l0.front] * 4 + [hip_x + l0.front + l1.front] * 2
    fl = [hip_x] * 4 + [hip_x + l0.front] * 4
    rr = [-hip_x] * 4 + [-hip_x + l0.hind] * 4
    rl = [-hip_x, -hip_x] + [-hip_x + l0.hind] * 4 + [-hip_x + l0.hind + l1.hind] * 2
    return np.column_stack([fr, fl, rr, rl])


def cycle_displacement(l0: StepLengthPair, l1: StepLengthPair) -> float:
    """Body displacement per cycle: average of front and hind advances."""
    return 0.5 * ((l0.front + l1.front) + (l0.hind + l1.hind))


@dataclass
class CollocationSettings:
    nodes_per_phase: int = 8
    single_duration: float = 0.1
    double_duration: float = 0.05
    duration_bounds: tuple = (0.05, 0.4)
    min_height: float = 0.15
    stance_height: float = 0.28
    force_weight: float = 1.0
    moment_weight: float = 10.0
    max_sqp_iter: int = 200
    mu: float = 0.6
    lambda_max: float = 500.0
    lambda_reg: float = 1e-6
    step_tol: float = 1e-6
    merit_tol: float = 1e-9
    feas_tol: float = 1e-6
    periodicity_tol: float = 1e-4

    @property
    def intervals_per_phase(self) -> int:
        return self.nodes_per_phase - 1

    def __post_init__(self):
        if self.nodes_per_phase < 2:
            raise ValueError("need at least 2 nodes per phase")
        lo, hi = self.duration_bounds
        if not (lo <= self.double_duration <= hi and lo <= self.single_duration <= hi):
            raise InfeasibleSchedule("duration guesses conflict with the bounds")


@dataclass
class GaitParams:
    """One converged two-step-periodic gait."""

    l0: StepLengthPair
    l1: StepLengthPair
    ref_states: list  # M+1 RigidBodyState nodes
    ref_wrenches: list  # M Wrench samples (interval wrenches)
    foot_forces: np.ndarray  # (M, 4, 3) per-interval per-foot forces
    durations: np.ndarray  # (8,) phase durations
    phase_boundaries: np.ndarray  # (9,) node indices of phase starts + end
    stance_width: float
    hip_x: float
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0

    @property
    def cycle_duration(self) -> float:
        return float(self.durations.sum())

    @property
    def displacement(self) -> float:
        return cycle_displacement(self.l0, self.l1)

    @property
    def avg_velocity(self) -> np.ndarray:
        return np.array([self.displacement / self.cycle_duration, 0.0, 0.0])

    def node_times(self) -> np.ndarray:
        S = (len(self.ref_states) - 1) // N_PHASES
        times = [0.0]
        for ph in range(N_PHASES):
            h = self.durations[ph] / S
            times.extend(times[-1] + h * (k + 1) for k in range(S))
        return np.array(times)

    def phase_start_times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    def phase_at(self, t: float) -> tuple[int, float]:
        """(phase index, time into phase) for cycle time t in [0, T)."""
        starts = self.phase_start_times()
        t = t % starts[-1]
        ph = int(np.searchsorted(starts, t, side="right") - 1)
        ph = min(ph, N_PHASES - 1)
        return ph, t - starts[ph]

    def foot_xy(self, phase_index: int) -> np.ndarray:
        """(4, 2) stance foot positions during the phase, cycle frame."""
        xs = foot_x_schedule(self.l0, self.l1, self.hip_x)[phase_index]
        side = np.array([-1.0, 1.0, -1.0, 1.0]) * self.stance_width
        return np.column_stack([xs, side])

    def touchdown_position(self, leg: str, phase_index: int) -> np.ndarray:
        """Cycle-frame landing point of `leg` for the swing ending this phase."""
        i = LEG_NAMES.index(leg)
        if PHASE_STANCE[phase_index][i]:
            raise ValueError(f"{leg} is not swinging in phase {phase_index}")
        nxt = foot_x_schedule(self.l0, self.l1, self.hip_x)[(phase_index + 1) % N_PHASES]
        side = -self.stance_width if leg in ("FR", "RR") else self.stance_width
        return np.array([nxt[i], side, 0.0])

    def state_at(self, t: float) -> RigidBodyState:
        """Reference state at cycle time t; periodic extension shifts by the
        cycle displacement."""
        T = self.cycle_duration
        k, tm = divmod(t, T)
        times = self.node_times()
        j = min(int(np.searchsorted(times, tm, side="right") - 1), len(times) - 2)
        s = (tm - times[j]) / (times[j + 1] - times[j])
        a, b = self.ref_states[j], self.ref_states[j + 1]
        p = (1 - s) * a.p + s * b.p
        v = (1 - s) * a.v + s * b.v
        w = (1 - s) * a.w + s * b.w
        R = a.R @ exp_so3(s * log_so3(a.R.T @ b.R))
        shift = np.array([k * self.displacement, 0.0, 0.0])
        return RigidBodyState(p + shift, v, R, w)

    def wrench_at(self, t: float) -> Wrench:
        T = self.cycle_duration
        tm = t % T
        times = self.node_times()
        j = min(int(np.searchsorted(times, tm, side="right") - 1), len(self.ref_wrenches) - 1)
        return self.ref_wrenches[j]

    def periodicity_residual(self) -> float:
        a, b = self.ref_states[0], self.ref_states[-1]
        parts = np.concatenate(
            [
                b.p - a.p - np.array([self.displacement, 0.0, 0.0]),
                b.v - a.v,
                log_so3(a.R.T @ b.R),
                b.w - a.w,
            ]
        )
        return float(np.abs(parts).max())


# -- collocation --------------------------------------------------------------


class _Transcription:
    """Variable bookkeeping and residual/Jacobian evaluation for one gait."""

    def __init__(self, l0, l1, settings: CollocationSettings, params: BodyParams, stance_width):
        self.l0, self.l1 = l0, l1
        self.st = settings
        self.params = params
        self.S = settings.intervals_per_phase
        self.M = N_PHASES * self.S
        self.stance_width = stance_width
        self.hip_x = DEFAULT_CONFIG["legs"]["hip_x"]
        self.foot_x = foot_x_schedule(l0, l1, self.hip_x)
        self.displacement = cycle_displacement(l0, l1)
        M = self.M
        self.n_state = 12 * (M + 1)
        self.n_lam = 12 * M
        self.n = self.n_state + self.n_lam + N_PHASES
        self.i_lam = self.n_state
        self.i_dur = self.n_state + self.n_lam
        self.phase_of = np.repeat(np.arange(N_PHASES), self.S)
        # equalities: dynamics 12M + periodicity 12 + anchor 2
        self.m_eq = 12 * M + 14

    # state accessors ---------------------------------------------------
    def unpack(self, z):
        M = self.M
        states = z[: self.n_state].reshape(M + 1, 12)
        lams = z[self.i_lam : self.i_dur].reshape(M, 4, 3)
        durs = z[self.i_dur :]
        return states, lams, durs

    def node_state(self, states, j) -> RigidBodyState:
        s = states[j]
        return RigidBodyState(s[0:3], s[3:6], exp_so3(s[6:9]), s[9:12])

    def feet_positions(self, ph) -> np.ndarray:
        xy = self.foot_x[ph]
        side = np.array([-1.0, 1.0, -1.0, 1.0]) * self.stance_width
        return np.column_stack([xy, side, np.zeros(4)])

    def wrench_of(self, states, lams, j):
        """Interval wrench from the grasp map at the leading node."""
        ph = self.phase_of[j]
        feet = self.feet_positions(ph)
        s = states[j]
        p = s[0:3]
        R = exp_so3(s[6:9])
        f = lams[j].sum(axis=0)
        m_world = np.zeros(3)
        for i in range(4):
            m_world += np.cross(feet[i] - p, lams[j][i])
        return f, R.T @ m_world, feet, p, R

    # residuals ----------------------------------------------------------
    def residuals(self, z):
        st = self.st
        states, lams, durs = self.unpack(z)
        M = self.M
        m = self.params.mass
        I = self.params.inertia
        g = self.params.gravity
        r = np.zeros(self.m_eq)
        for j in range(M):
            h = durs[self.phase_of[j]] / self.S
            a, b = states[j], states[j + 1]
            f, tau, _, _, _ = self.wrench_of(states, lams, j)
            Ra = exp_so3(a[6:9])
            Rb = exp_so3(b[6:9])
            dR = exp_so3(h * a[9:12])
            row = 12 * j
            r[row : row + 3] = b[0:3] - a[0:3] - h * a[3:6]
            r[row + 3 : row + 6] = b[3:6] - a[3:6] - h * g - (h / m) * f
            r[row + 6 : row + 9] = log_so3((Ra @ dR).T @ Rb)
            r[row + 9 : row + 12] = I @ b[9:12] - dR.T @ (I @ a[9:12]) - h * tau
        row = 12 * M
        a, b = states[0], states[M]
        r[row : row + 3] = b[0:3] - a[0:3] - np.array([self.displacement, 0.0, 0.0])
        r[row + 3 : row + 6] = b[3:6] - a[3:6]
        r[row + 6 : row + 9] = log_so3(exp_so3(a[6:9]).T @ exp_so3(b[6:9]))
        r[row + 9 : row + 12] = b[9:12] - a[9:12]
        r[row + 12] = a[0]
        r[row + 13] = a[1]
        return r

    def cone_matrix(self):
        """Fixed sparse cone rows G z <= 0 over the lambda variables."""
        rows, cols, vals = [], [], []
        hrows = 0
        mu = self.st.mu
        face = [(0, 1.0), (2, -mu)], [(0, -1.0), (2, -mu)], [(1, 1.0), (2, -mu)], [(1, -1.0), (2, -mu)]
        for j in range(self.M):
            stance = PHASE_STANCE[self.phase_of[j]]
            for i in range(4):
                if not stance[i]:
                    continue
                base = self.i_lam + 12 * j + 3 * i
                for f in face:
                    for off, v in f:
                        rows.append(hrows)
                        cols.append(base + off)
                        vals.append(v)
                    hrows += 1
        G = sp.csc_matrix((vals, (rows, cols)), shape=(hrows, self.n))
        return G

    def bounds(self, z):
        """Bounds on the step dz so that z + dz stays box-feasible."""
        st = self.st
        states, lams, durs = self.unpack(z)
        lo = np.full(self.n, -np.inf)
        hi = np.full(self.n, np.inf)
        # body height
        for j in range(self.M + 1):
            k = 12 * j + 2
            lo[k] = st.min_height - z[k]
            hi[k] = 0.6 - z[k]
        # forces: swing feet pinned, stance flz in [0, lambda_max]
        for j in range(self.M):
            stance = PHASE_STANCE[self.phase_of[j]]
            for i in range(4):
                base = self.i_lam + 12 * j + 3 * i
                if stance[i]:
                    lo[base + 2] = -z[base + 2]
                    hi[base + 2] = st.lambda_max - z[base + 2]
                else:
                    lo[base : base + 3] = -z[base : base + 3]
                    hi[base : base + 3] = -z[base : base + 3]
        dlo, dhi = st.duration_bounds
        for ph in range(N_PHASES):
            k = self.i_dur + ph
            lo[k] = dlo - z[k]
            hi[k] = dhi - z[k]
        return lo, hi

    def jacobian(self, z):
        """Sparse Jacobian of the equality residuals at z (eta-chart for
        orientation columns: the step updates R <- R exp(hat(eta)))."""
        st = self.st
        states, lams, durs = self.unpack(z)
        M = self.M
        S = self.S
        m = self.params.mass
        I = self.params.inertia
        g = self.params.gravity
        eye = np.eye(3)
        rows, cols, vals = [], [], []

        def put(r0, c0, B):
            rr, cc = np.nonzero(B)
            rows.extend((r0 + rr).tolist())
            cols.extend((c0 + cc).tolist())
            vals.extend(np.asarray(B)[rr, cc].tolist())

        for j in range(M):
            ph = self.phase_of[j]
            h = durs[ph] / S
            a = states[j]
            va, wa = a[3:6], a[9:12]
            f, tau, feet, p, R = self.wrench_of(states, lams, j)
            dR = exp_so3(h * wa)
            row = 12 * j
            ca = 12 * j
            cb = 12 * (j + 1)
            cl = self.i_lam + 12 * j
            cd = self.i_dur + ph

            # r_p rows
            put(row, cb, eye)
            put(row, ca, -eye)
            put(row, ca + 3, -h * eye)
            put(row, cd, (-va / S).reshape(3, 1))
            # r_v rows
            put(row + 3, cb + 3, eye)
            put(row + 3, ca + 3, -eye)
            for i in range(4):
                put(row + 3, cl + 3 * i, (-h / m) * eye)
            put(row + 3, cd, (-(g + f / m) / S).reshape(3, 1))
            # r_R rows: residual measured as eta of (pred^T actual)
            put(row + 6, cb + 6, eye)
            put(row + 6, ca + 6, -dR.T)
            put(row + 6, ca + 9, -h * jac_right(h * wa))
            put(row + 6, cd, (-wa / S).reshape(3, 1))
            # r_w rows
            put(row + 9, cb + 9, I)
            put(row + 9, ca + 9, -dR.T @ (I + h * (hat(I @ wa) @ jac_left(h * wa))))
            Mw = np.zeros(3)
            for i in range(4):
                Mw += np.cross(feet[i] - p, lams[j][i])
                put(row + 9, cl + 3 * i, -h * (R.T @ hat(feet[i] - p)))
            put(row + 9, ca, -h * (R.T @ hat(lams[j].sum(axis=0))))
            put(row + 9, ca + 6, -h * hat(R.T @ Mw))
            put(row + 9, cd, ((hat(wa) @ (dR.T @ (I @ wa)) - tau) / S).reshape(3, 1))

        row = 12 * M
        c0, cM = 0, 12 * M
        for k, off in ((0, 0), (3, 3), (9, 9)):
            put(row + k, cM + off, eye)
            put(row + k, c0 + off, -eye)
        put(row + 6, cM + 6, eye)
        RM = exp_so3(states[M][6:9])
        R0 = exp_so3(states[0][6:9])
        put(row + 6, c0 + 6, -(R0.T @ RM).T)
        put(row + 12, 0, np.array([[1.0]]))
        put(row + 13, 1, np.array([[1.0]]))
        return sp.csc_matrix((vals, (rows, cols)), shape=(self.m_eq, self.n))

    # The solver works on the objective scaled by 1/(m g)^2: pure rescaling
    # (same argmin) that keeps gradients and constraint duals O(1) -- the
    # raw energy integral has gradients ~1e4 which, against the transcription
    # Jacobian's 1e-4 smallest singular value, blows the KKT duals up to 1e8.
    @property
    def obj_scale(self):
        return 1.0 / (self.params.mass * 9.81) ** 2

    def objective_terms(self, z):
        """(value, gradient, Gauss-Newton Hessian diag blocks as sparse)."""
        st = self.st
        states, lams, durs = self.unpack(z)
        W = np.array([st.force_weight] * 3 + [st.moment_weight] * 3)
        c = self.obj_scale
        val = 0.0
        grad = np.zeros(self.n)
        hdiag = np.full(self.n, 1e-9)  # keep the QP Hessian PD on flat blocks
        for j in range(self.M):
            ph = self.phase_of[j]
            h = durs[ph] / self.S
            f, tau, feet, p, R = self.wrench_of(states, lams, j)
            F = np.concatenate([f, tau])
            cost_j = c * ((W * F * F).sum() + st.lambda_reg * (lams[j] ** 2).sum())
            val += h * cost_j
            # gradient through lambda (Gauss-Newton: treat G fixed)
            gf = 2 * c * h * W[:3] * f
            gm = 2 * c * h * W[3:] * tau
            cl = self.i_lam + 12 * j
            for i in range(4):
                gi = gf + hat(feet[i] - p).T @ (R @ gm)
                grad[cl + 3 * i : cl + 3 * i + 3] = gi + 2 * c * h * st.lambda_reg * lams[j][i]
                hdiag[cl + 3 * i : cl + 3 * i + 3] += 2 * c * h * (W[:3] + W[3:].max() + st.lambda_reg)
            grad[self.i_dur + ph] += cost_j / self.S
        return val, grad, sp.diags(hdiag, format="csc")

    def objective_value(self, z):
        st = self.st
        states, lams, durs = self.unpack(z)
        W = np.array([st.force_weight] * 3 + [st.moment_weight] * 3)
        c = self.obj_scale
        val = 0.0
        for j in range(self.M):
            h = durs[self.phase_of[j]] / self.S
            f, tau, _, _, _ = self.wrench_of(states, lams, j)
            F = np.concatenate([f, tau])
            val += c * h * ((W * F * F).sum() + st.lambda_reg * (lams[j] ** 2).sum())
        return val

    def initial_guess(self):
        st = self.st
        M, S = self.M, self.S
        durs = np.array([st.double_duration, st.single_duration] * 4)
        T = durs.sum()
        z = np.zeros(self.n)
        states = np.zeros((M + 1, 12))
        t = 0.0
        vx = self.displacement / T
        j = 0
        for ph in range(N_PHASES):
            h = durs[ph] / S
            for k in range(S):
                states[j, 0] = vx * t
                states[j, 2] = st.stance_height
                states[j, 3] = vx
                t += h
                j += 1
        states[M, 0] = vx * t
        states[M, 2] = st.stance_height
        states[M, 3] = vx
        # cone-safe static guess: each stance foot carries an equal vertical
        # share; the single-stance moment imbalance is left to the SQP
        lams = np.zeros((M, 4, 3))
        weight = -self.params.mass * self.params.gravity[2]
        for j in range(M):
            stance = PHASE_STANCE[self.phase_of[j]]
            share = weight / sum(stance)
            for i in range(4):
                if stance[i]:
                    lams[j, i, 2] = share
        z[: self.n_state] = states.reshape(-1)
        z[self.i_lam : self.i_dur] = lams.reshape(-1)
        z[self.i_dur :] = durs
        return z

    def trust_bounds(self, lo, hi, state_trust=0.3, force_trust=200.0, dur_trust=0.01):
        """Intersect the box bounds with a per-block trust region."""
        lo = lo.copy()
        hi = hi.copy()
        lo[: self.n_state] = np.maximum(lo[: self.n_state], -state_trust)
        hi[: self.n_state] = np.minimum(hi[: self.n_state], state_trust)
        lo[self.i_lam : self.i_dur] = np.maximum(lo[self.i_lam : self.i_dur], -force_trust)
        hi[self.i_lam : self.i_dur] = np.minimum(hi[self.i_lam : self.i_dur], force_trust)
        lo[self.i_dur :] = np.maximum(lo[self.i_dur :], -dur_trust)
        hi[self.i_dur :] = np.minimum(hi[self.i_dur :], dur_trust)
        return lo, hi

    def apply_step(self, z, dz):
        """z + dz with the orientation columns updated on the manifold;
        None if a rotation update leaves the log chart."""
        out = z + dz
        states = z[: self.n_state].reshape(self.M + 1, 12)
        dstates = dz[: self.n_state].reshape(self.M + 1, 12)
        new_states = out[: self.n_state].reshape(self.M + 1, 12)
        for j in range(self.M + 1):
            eta = dstates[j, 6:9]
            if eta @ eta > 0:
                if eta @ eta > (np.pi - 0.2) ** 2:
                    return None
                try:
                    new_states[j, 6:9] = log_so3(exp_so3(states[j, 6:9]) @ exp_so3(eta))
                except ValueError:
                    return None
        return out


def generate_gait(
    l0: StepLengthPair,
    l1: StepLengthPair,
    settings: CollocationSettings | None = None,
    params: BodyParams | None = None,
    stance_width: float | None = None,
    guess: np.ndarray | None = None,
) -> GaitParams:
    """Direct collocation + SQP for one two-step-periodic gait.

    Raises NoConvergence with the final residuals if the SQP stalls.
    """
    settings = settings or CollocationSettings()
    params = params or BodyParams()
    if stance_width is None:
        stance_width = LegConfig().stance_width()
    tr = _Transcription(l0, l1, settings, params, stance_width)
    z = tr.initial_guess() if guess is None else guess.copy()
    if guess is not None and guess.shape != (tr.n,):
        raise ValueError("warm-start guess has the wrong dimension")

    cone = tr.cone_matrix()
    # The subproblems are equality-dominated near-LPs with a degenerate cone
    # corner (unloading a foot makes both pyramid faces and the z bound
    # dependent).  The cone therefore enters elastically (quadratic penalty
    # on near-active faces, escalated until exact satisfaction) and the box
    # bounds through a primal working set: one refined KKT solve per
    # iteration, partial steps up to the blocking bound, which then joins
    # the set; wrong-sign multipliers are released once per iteration.
    nu = 1e-4
    sigma_merit = 10.0
    mu_pen = 1.0
    cone_margin = 1.0  # faces within 1 N of active get penalty curvature

    def merit(zz):
        r = tr.residuals(zz)
        s = np.maximum(cone @ zz, 0.0)
        return (
            tr.objective_value(zz)
            + sigma_merit * np.abs(r).sum()
            + sigma_merit * s.sum()
            + mu_pen * (s @ s)
        )

    lo0, hi0 = tr.bounds(z)
    structural = np.isfinite(lo0) & (lo0 == hi0)  # swing-foot pins
    act_lo = structural.copy()
    act_up = np.zeros(tr.n, dtype=bool)

    converged = False
    feas = np.inf
    it = 0
    total_it = 0
    slow_obj = 0
    trust = 0.2  # state trust radius, adapted from line-search behaviour
    optimize = True  # phase 1 improves energy; phase 2 restores feasibility

    for it in range(1, settings.max_sqp_iter + 1):
        total_it = it
        r = tr.residuals(z)
        feas = float(np.abs(r).max())
        J = tr.jacobian(z)
        val, grad, H = tr.objective_terms(z)
        lo, hi = tr.bounds(z)
        structural = np.isfinite(lo) & (lo == hi)
        act_lo |= structural

        s = cone @ z
        near = np.where(s > -cone_margin)[0]
        nu_eff = max(nu, min(1e-2, feas))
        if not optimize:
            # restoration: drop the energy gradient, keep the cone penalty
            grad = np.zeros(tr.n)
        if near.size:
            Gact = cone[near]
            sact = np.maximum(s[near], 0.0)
            grad = grad + 2.0 * mu_pen * (Gact.T @ sact)
            P = (H + 2.0 * mu_pen * (Gact.T @ Gact) + nu_eff * sp.eye(tr.n)) * 2.0
        else:
            P = (H + nu_eff * sp.eye(tr.n)) * 2.0
        prob = QpProblem(
            P=P.tocsc(), q=grad, Aeq=J, beq=-r, lower=lo, upper=hi, trusted_symmetric=True
        )

        try:
            dz, y_eq, act_lo, act_up = solve_box_qp(prob, act_lo, act_up)
        except RuntimeError as exc:
            raise NoConvergence(
                f"subproblem factorization failed: {exc}", residual=feas, iterations=it
            )
        dual_max = float(np.abs(y_eq).max() if y_eq.size else 0.0)
        if dual_max > 1e7:
            nu = min(max(nu, 1e-3) * 10, 1e4)
            act_lo = structural.copy()
            act_up = np.zeros(tr.n, dtype=bool)
            continue
        sigma_merit = min(max(2.0 * dual_max + 1.0, 0.7 * sigma_merit), 1e7)

        # per-block trust scaling (keeps the merit-acceptable step size)
        ds = np.abs(dz[: tr.n_state]).max(initial=0.0)
        dl = np.abs(dz[tr.i_lam : tr.i_dur]).max(initial=0.0)
        dd = np.abs(dz[tr.i_dur :]).max(initial=0.0)
        beta = min(
            trust / ds if ds > trust else 1.0,
            200.0 / dl if dl > 200.0 else 1.0,
            0.02 / dd if dd > 0.02 else 1.0,
        )
        dz = beta * dz
        step_norm = float(np.abs(dz).max())

        phi0 = merit(z)
        alpha = 1.0
        accepted = False
        for _ in range(5):
            z_try = tr.apply_step(z, alpha * dz)
            if z_try is not None and merit(z_try) < phi0 - 1e-12:
                z = z_try
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            nu = min(max(nu, 1e-4) * 10, 1e5)
            trust = max(trust * 0.5, 0.01)
            if nu >= 1e5:
                break  # hand over to restoration / validation
            continue
        nu = nu / 4 if nu > 1e-6 else 0.0
        if alpha >= 1.0:
            trust = min(trust * 1.5, 0.5)
        elif alpha < 0.25:
            trust = max(trust * 0.5, 0.01)

        if optimize:
            obj_new = tr.objective_value(z)
            slow_obj = slow_obj + 1 if val - obj_new < 1e-2 * max(abs(val), 1e-3) else 0
            # energy phase ends when gains stall (or on budget); feasibility
            # is then restored by plain Newton steps, which converge fast
            if (slow_obj >= 2 and it >= 12) or it >= 30:
                optimize = False
                trust = max(trust, 0.2)
        else:
            if feas < settings.feas_tol and step_norm * alpha < 1e-4:
                converged = True
                break
            if feas < settings.feas_tol * 1e-2:
                converged = True
                break
        if step_norm * alpha < settings.step_tol and feas < settings.feas_tol:
            converged = True
            break

    feas = float(np.abs(tr.residuals(z)).max())
    if feas > settings.feas_tol:
        raise NoConvergence("SQP did not converge", residual=feas, iterations=total_it)

    cone_viol = float(np.maximum(cone @ z, 0.0).max(initial=0.0))
    if cone_viol > 1e-6:
        raise NoConvergence(
            f"converged point violates the friction cone by {cone_viol:.2e}",
            residual=feas, iterations=total_it,
        )

    it = total_it
    gait = _package(tr, z, it, feas)
    if gait.periodicity_residual() > settings.periodicity_tol:
        raise NoConvergence(
            f"rollout periodicity residual {gait.periodicity_residual():.2e} above tolerance",
            residual=feas, iterations=it,
        )
    return gait


def _package(tr: _Transcription, z, iterations, residual) -> GaitParams:
    """Re-simulate the converged forces open-loop and store the rollout."""
    states, lams, durs = tr.unpack(z)
    state = tr.node_state(states, 0)
    ref_states = [state]
    wrenches = []
    for j in range(tr.M):
        h = durs[tr.phase_of[j]] / tr.S
        f, tau, feet, p, R = tr.wrench_of(states, lams, j)
        w = Wrench(f, tau)
        wrenches.append(w)
        state = step(state, w, tr.params, h)
        ref_states.append(state)
    boundaries = np.arange(0, tr.M + 1, tr.S)
    gait = GaitParams(
        l0=tr.l0,
        l1=tr.l1,
        ref_states=ref_states,
        ref_wrenches=wrenches,
        foot_forces=lams.copy(),
        durations=durs.copy(),
        phase_boundaries=boundaries,
        stance_width=tr.stance_width,
        hip_x=tr.hip_x,
        converged=True,
        iterations=iterations,
        residual=residual,
    )
    return gait


# -- library ------------------------------------------------------------------


@dataclass
class GaitLibrary:
    axis: np.ndarray  # shared step-length axis L
    gaits: dict  # (i0f, i0h, i1f, i1h) -> GaitParams
    holes: dict  # index tuple -> reason string
    body_hash: str = ""
    nodes_per_phase: int = 8
    version: str = "gaitlib-v1"

    def key_of(self, l0: StepLengthPair, l1: StepLengthPair):
        def idx(v):
            i = int(np.argmin(np.abs(self.axis - v)))
            if abs(self.axis[i] - v) > 1e-9:
                raise KeyError(f"{v} not on the grid axis")
            return i

        return (idx(l0.front), idx(l0.hind), idx(l1.front), idx(l1.hind))

    def at(self, l0: StepLengthPair, l1: StepLengthPair) -> GaitParams:
        return self.gaits[self.key_of(l0, l1)]


def body_params_hash(params: BodyParams) -> str:
    h = hashlib.sha1()
    h.update(np.asarray([params.mass], dtype=float).tobytes())
    h.update(np.asarray(params.inertia, dtype=float).tobytes())
    h.update(np.asarray(params.gravity, dtype=float).tobytes())
    return h.hexdigest()[:16]


def build_library(
    grid,
    settings: CollocationSettings | None = None,
    params: BodyParams | None = None,
    parallel: int = 1,
    progress=None,
) -> GaitLibrary:
    """Generate every grid combination, warm-starting each solve from its
    predecessor within an axis-ordered strip.  Strips (fixed first index)
    are independent, so parallel execution reproduces the serial result.
    Fails hard when more than 10% of the entries are holes.
    """
    settings = settings or CollocationSettings()
    params = params or BodyParams()
    axis = np.asarray(sorted(float(v) for v in grid))
    if axis.size == 0:
        raise ValueError("grid must be non-empty")
    n = axis.size
    strips = [
        (i0f, [(i0f, i0h, i1f, i1h) for i0h in range(n) for i1f in range(n) for i1h in range(n)])
        for i0f in range(n)
    ]

    args = [(axis, keys, settings, params) for _, keys in strips]
    if parallel > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(parallel) as pool:
            results = pool.map(_solve_strip, args)
    else:
        results = [_solve_strip(a) for a in args]

    gaits, holes = {}, {}
    for strip_gaits, strip_holes in results:
        gaits.update(strip_gaits)
        holes.update(strip_holes)
        if progress:
            progress(len(gaits), len(holes))
    total = n**4
    if len(holes) > 0.1 * total:
        raise GaitError(f"{len(holes)}/{total} gaits failed to converge")
    return GaitLibrary(
        axis=axis,
        gaits=gaits,
        holes=holes,
        body_hash=body_params_hash(params),
        nodes_per_phase=settings.nodes_per_phase,
    )


def _solve_strip(arg):
    axis, keys, settings, params = arg
    gaits, holes = {}, {}
    guess = None
    for key in keys:
        i0f, i0h, i1f, i1h = key
        l0 = StepLengthPair(axis[i0f], axis[i0h])
        l1 = StepLengthPair(axis[i1f], axis[i1h])
        try:
            gait = generate_gait(l0, l1, settings, params, guess=guess)
            gaits[key] = gait
            guess = _pack_guess(gait, settings, params)
        except GaitError as exc:
            holes[key] = str(exc)
            guess = None
    return gaits, holes


def _pack_guess(gait: GaitParams, settings: CollocationSettings, params: BodyParams) -> np.ndarray:
    """Warm-start vector from a converged neighbour gait."""
    tr = _Transcription(gait.l0, gait.l1, settings, params, gait.stance_width)
    z = np.zeros(tr.n)
    states = np.zeros((tr.M + 1, 12))
    for j, s in enumerate(gait.ref_states):
        states[j, 0:3] = s.p
        states[j, 3:6] = s.v
        states[j, 6:9] = log_so3(s.R)
        states[j, 9:12] = s.w
    z[: tr.n_state] = states.reshape(-1)
    z[tr.i_lam : tr.i_dur] = gait.foot_forces.reshape(-1)
    z[tr.i_dur :] = gait.durations
    return z


# -- multilinear interpolation -------------------------------------------------


def query(lib: GaitLibrary, l0: StepLengthPair, l1: StepLengthPair, clamp: bool = False) -> GaitParams:
    """Multilinear interpolation over the 4-D grid cell containing the query.

    Orientations interpolate through exponential coordinates relative to the
    cell's base corner; footholds are recomputed from the interpolated step
    lengths.  Raises KeyError outside the hull unless clamp=True (logged).
    """
    axis = lib.axis
    vals = np.array([l0.front, l0.hind, l1.front, l1.hind])
    if clamp:
        clipped = np.clip(vals, axis[0], axis[-1])
        if not np.array_equal(clipped, vals):
            log.warning("gait query %s clamped to the grid hull", vals)
        vals = clipped
    elif (vals < axis[0] - 1e-12).any() or (vals > axis[-1] + 1e-12).any():
        raise KeyError(f"query {vals} outside the grid hull [{axis[0]}, {axis[-1]}]")

    cells = np.clip(np.searchsorted(axis, vals, side="right") - 1, 0, axis.size - 2)
    frac = (vals - axis[cells]) / (axis[cells + 1] - axis[cells])
    frac = np.clip(frac, 0.0, 1.0)

    corners = []
    weights = []
    for b in range(16):
        offs = [(b >> k) & 1 for k in range(4)]
        w = 1.0
        for k in range(4):
            w *= frac[k] if offs[k] else (1.0 - frac[k])
        key = tuple(int(cells[k] + offs[k]) for k in range(4))
        if w > 0.0 and key not in lib.gaits:
            raise KeyError(f"library hole at {key} blocks interpolation")
        corners.append(key)
        weights.append(w)

    active = [(lib.gaits[k], w) for k, w in zip(corners, weights) if w > 0.0]
    base = active[0][0]
    M = len(base.ref_states) - 1

    durations = sum(w * g.durations for g, w in active)
    ps = sum(w * np.array([s.p for s in g.ref_states]) for g, w in active)
    vs = sum(w * np.array([s.v for s in g.ref_states]) for g, w in active)
    ws_ = sum(w * np.array([s.w for s in g.ref_states]) for g, w in active)
    fs = sum(w * np.array([u.f for u in g.ref_wrenches]) for g, w in active)
    taus = sum(w * np.array([u.tau for u in g.ref_wrenches]) for g, w in active)
    lamsum = sum(w * g.foot_forces for g, w in active)

    states = []
    for j in range(M + 1):
        Rb = base.ref_states[j].R
        theta = np.zeros(3)
        for g, w in active:
            theta += w * log_so3(Rb.T @ g.ref_states[j].R)
        states.append(RigidBodyState(ps[j], vs[j], Rb @ exp_so3(theta), ws_[j]))
    wrenches = [Wrench(fs[j], taus[j]) for j in range(M)]

    return GaitParams(
        l0=l0,
        l1=l1,
        ref_states=states,
        ref_wrenches=wrenches,
        foot_forces=lamsum,
        durations=durations,
        phase_boundaries=base.phase_boundaries.copy(),
        stance_width=base.stance_width,
        hip_x=base.hip_x,
        converged=True,
        iterations=0,
        residual=max(g.residual for g, _ in active),
    )


# -- persistence ---------------------------------------------------------------


def save_library(lib: GaitLibrary, path) -> None:
    """gaitlib-v1 structured text with full-precision floats."""
    with open(path, "w") as fh:
        fh.write("gaitlib-v1\n")
        fh.write("axis " + " ".join("%.17g" % v for v in lib.axis) + "\n")
        fh.write(f"nodes_per_phase {lib.nodes_per_phase}\n")
        fh.write(f"body_hash {lib.body_hash}\n")
        fh.write(f"count {len(lib.gaits)} holes {len(lib.holes)}\n")
        for key in sorted(lib.gaits):
            g = lib.gaits[key]
            fh.write("gait %d %d %d %d\n" % key)
            fh.write("meta %.17g %.17g %.17g %.17g %d %.17g %.17g %.17g\n" % (
                g.l0.front, g.l0.hind, g.l1.front, g.l1.hind,
                g.iterations, g.residual, g.stance_width, g.hip_x,
            ))
            fh.write("durations " + " ".join("%.17g" % v for v in g.durations) + "\n")
            for s in g.ref_states:
                row = np.concatenate([s.p, s.v, s.R.reshape(-1), s.w])
                fh.write("state " + " ".join("%.17g" % v for v in row) + "\n")
            for u in g.ref_wrenches:
                fh.write("wrench " + " ".join("%.17g" % v for v in u.as_vector()) + "\n")
            for lam in g.foot_forces.reshape(len(g.ref_wrenches), 12):
                fh.write("forces " + " ".join("%.17g" % v for v in lam) + "\n")
        for key in sorted(lib.holes):
            fh.write("hole %d %d %d %d reason %s\n" % (*key, lib.holes[key].replace("\n", " ")))


class CorruptRecord(ValueError):
    def __init__(self, msg, gait_key=None):
        super().__init__(msg)
        self.gait_key = gait_key


class VersionMismatch(ValueError):
    pass


def load_library(path, expected_body_hash: str | None = None, allow_hash_mismatch: bool = False) -> GaitLibrary:
    """Load a gaitlib-v1 file; verifies version, grid completeness, and the
    body-parameter hash (warning + explicit override needed on mismatch)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "gaitlib-v1":
        raise VersionMismatch(f"unsupported library format {lines[0] if lines else '<empty>'!r}")
    axis = np.array([float(v) for v in lines[1].split()[1:]])
    nodes_per_phase = int(lines[2].split()[1])
    body_hash = lines[3].split()[1]
    count, holes_n = int(lines[4].split()[1]), int(lines[4].split()[3])
    if expected_body_hash is not None and body_hash != expected_body_hash:
        if not allow_hash_mismatch:
            raise ValueError(
                "library body-parameter hash mismatch; pass allow_hash_mismatch=True to override"
            )
        log.warning("gait library body hash %s != runtime %s", body_hash, expected_body_hash)

    M = N_PHASES * (nodes_per_phase - 1)
    gaits, holes = {}, {}
    i = 5
    try:
        for _ in range(count):
            key = tuple(int(v) for v in lines[i].split()[1:5])
            meta = lines[i + 1].split()[1:]
            l0 = StepLengthPair(float(meta[0]), float(meta[1]))
            l1 = StepLengthPair(float(meta[2]), float(meta[3]))
            iterations = int(meta[4])
            residual = float(meta[5])
            stance_width = float(meta[6])
            hip_x = float(meta[7])
            durations = np.array([float(v) for v in lines[i + 2].split()[1:]])
            i += 3
            states = []
            for _ in range(M + 1):
                row = np.array([float(v) for v in lines[i].split()[1:]])
                states.append(RigidBodyState(row[0:3], row[3:6], row[6:15].reshape(3, 3), row[15:18]))
                i += 1
            wrenches = []
            for _ in range(M):
                row = np.array([float(v) for v in lines[i].split()[1:]])
                wrenches.append(Wrench(row[:3], row[3:]))
                i += 1
            lams = np.zeros((M, 4, 3))
            for j in range(M):
                lams[j] = np.array([float(v) for v in lines[i].split()[1:]]).reshape(4, 3)
                i += 1
            gaits[key] = GaitParams(
                l0=l0, l1=l1, ref_states=states, ref_wrenches=wrenches,
                foot_forces=lams, durations=durations,
                phase_boundaries=np.arange(0, M + 1, nodes_per_phase - 1),
                stance_width=stance_width, hip_x=hip_x,
                converged=True, iterations=iterations, residual=residual,
            )
        for _ in range(holes_n):
            parts = lines[i].split()
            holes[tuple(int(v) for v in parts[1:5])] = " ".join(parts[6:])
            i += 1
    except (IndexError, ValueError) as exc:
        if isinstance(exc, VersionMismatch):
            raise
        raise CorruptRecord(f"truncated or corrupt record near line {i + 1}", gait_key=len(gaits)) from exc

    n = axis.size
    missing = [
        (a, b, c, d)
        for a in range(n) for b in range(n) for c in range(n) for d in range(n)
        if (a, b, c, d) not in gaits and (a, b, c, d) not in holes
    ]
    if missing:
        raise CorruptRecord(f"library incomplete: {len(missing)} grid entries missing", gait_key=missing[0])
    return GaitLibrary(
        axis=axis, gaits=gaits, holes=holes, body_hash=body_hash, nodes_per_phase=nodes_per_phase
    )
