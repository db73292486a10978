"""Closed-loop trotting simulator: 8-phase machine over two-step cycles,
per-step foothold planning and gait selection, GVMPC or baseline stance
control, kinematic swing feet, and success/failure adjudication.

Plant: the variational rigid-body step at 1 kHz driven by the grasp-mapped
contact forces (zero-order hold between 20 Hz control ticks).  Feet are
massless: stance feet never move, swing feet track their Bezier exactly and
land at the tracked position projected to the terrain (identity impact).

Controllers: "gvmpc" (geometric stance MPC + gait library), "jacobian"
(Euler-linearized stance MPC + gait library), "heuristic" (Raibert
footsteps + Euler MPC around a constant height/velocity reference, no
library).  Every run is single-threaded and deterministic given its config;
batch() may run configs in parallel.
"""

from __future__ import annotations

import logging
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT_CONFIG
from .dynamics import BodyParams, RigidBodyState, Wrench, step
from .gaits import (
    GaitLibrary,
    GaitParams,
    N_PHASES,
    PHASE_NAMES,
    PHASE_STANCE,
    StepLengthPair,
    query,
)
from .legs import LegConfig, SwingTrajectory, inverse_kinematics, leg_jacobian, plan_swing, swing_torques
from .linearize import error_state
from .mpc import ContactState, MpcWeights, StanceController, baseline_error_state, euler_zyx
from .terrain import (
    CellClass,
    HeightMap,
    NoFeasibleFoothold,
    TerrainScenario,
    classify,
    generate_terrain,
    plan_foothold,
)

log = logging.getLogger(__name__)

LEG_NAMES = ("FR", "FL", "RR", "RL")

OUTCOME_SUCCESS = "Success"
OUTCOME_FALL = "FallBodyHeight"
OUTCOME_GAP = "FootInGap"
OUTCOME_NO_FOOTHOLD = "NoFeasibleFoothold"
OUTCOME_CONTROLLER = "ControllerFailure"

TELEMETRY_COLUMNS = (
    ["tick", "time", "phase", "px", "py", "pz", "vx", "vy", "vz",
     "roll", "pitch", "yaw", "wx", "wy", "wz"]
    + [f"err{i}" for i in range(12)]
    + [f"lam_{leg}_{ax}" for leg in LEG_NAMES for ax in "xyz"]
    + ["qp_iterations", "foot_in_gap", "reached_goal"]
)


@dataclass
class SimConfig:
    controller: str = "gvmpc"  # gvmpc | jacobian | heuristic
    scenario: TerrainScenario | None = None  # None = flat unbounded ground
    seed: int = 0
    nominal_velocity: float = field(default_factory=lambda: DEFAULT_CONFIG["sim"]["nominal_velocity"])
    plant_dt: float = field(default_factory=lambda: DEFAULT_CONFIG["sim"]["plant_dt"])
    control_dt: float = field(default_factory=lambda: DEFAULT_CONFIG["sim"]["control_dt"])
    max_time: float = field(default_factory=lambda: DEFAULT_CONFIG["sim"]["max_time"])
    height_limits: tuple = field(default_factory=lambda: tuple(DEFAULT_CONFIG["sim"]["height_limits"]))

    def __post_init__(self):
        if self.controller not in ("gvmpc", "jacobian", "heuristic"):
            raise ValueError(f"unknown controller {self.controller!r}")
        ratio = self.control_dt / self.plant_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("control_dt must be an integer multiple of plant_dt")


@dataclass
class SimResult:
    outcome: str
    distance: float
    sim_time: float
    telemetry: list  # rows matching TELEMETRY_COLUMNS
    foothold_log: list  # (time, leg, nominal xy, planned xyz, realized xyz)
    phase_log: list  # (time, phase index) at each phase entry
    summary: dict

    @property
    def success(self) -> bool:
        return self.outcome == OUTCOME_SUCCESS


def adjudicate(telemetry, height_limits) -> str:
    """Outcome as a pure function of the telemetry rows."""
    cols = {name: i for i, name in enumerate(TELEMETRY_COLUMNS)}
    for row in telemetry:
        if row[cols["foot_in_gap"]] > 0:
            return OUTCOME_GAP
        z = row[cols["pz"]]
        if not (height_limits[0] <= z <= height_limits[1]):
            return OUTCOME_FALL
        if row[cols["reached_goal"]] > 0:
            return OUTCOME_SUCCESS
    return OUTCOME_SUCCESS  # survived to the time limit


class TrotSimulator:
    """One closed-loop run; construct fresh per simulation."""

    def __init__(
        self,
        config: SimConfig,
        library: GaitLibrary | None = None,
        params: BodyParams | None = None,
        weights: MpcWeights | None = None,
        leg_config: LegConfig | None = None,
    ):
        self.cfg = config
        self.params = params or BodyParams()
        self.weights = weights or MpcWeights()
        self.legs = leg_config or LegConfig()
        self.lib = library
        if config.controller in ("gvmpc", "jacobian") and library is None:
            raise ValueError(f"{config.controller} requires a gait library")
        model = "geometric" if config.controller == "gvmpc" else "euler"
        self.controller = StanceController(self.weights, self.params, model=model)

        if config.scenario is not None:
            self.hmap = generate_terrain(config.scenario)
            self.mask = classify(self.hmap)
            self.goal_x = config.scenario.length - config.scenario.lead_in - 0.45
        else:
            self.hmap = None
            self.mask = None
            self.goal_x = np.inf
        kp, kd = DEFAULT_CONFIG["swing"]["kp"], DEFAULT_CONFIG["swing"]["kd"]
        self.swing_kp = kp * np.eye(3)
        self.swing_kd = kd * np.eye(3)

    # -- terrain helpers -----------------------------------------------------

    def _ground_z(self, xy) -> float:
        if self.hmap is None:
            return 0.0
        try:
            return self.hmap.elevation_at(xy)
        except IndexError:
            return 0.0

    def _snap(self, nominal_xy) -> np.ndarray:
        if self.mask is None:
            return np.array([nominal_xy[0], nominal_xy[1], 0.0])
        return plan_foothold(self.mask, np.asarray(nominal_xy), hmap=self.hmap)

    # -- gait selection -------------------------------------------------------

    def _nominal_pair(self) -> StepLengthPair:
        """Step length matching the commanded velocity at the library's cadence."""
        if self.lib is None:
            v = self.cfg.nominal_velocity
            return StepLengthPair(np.clip(v * 0.3, -0.2, 0.2), np.clip(v * 0.3, -0.2, 0.2))
        ref = query(
            self.lib,
            StepLengthPair(0.0, 0.0),
            StepLengthPair(0.0, 0.0),
        )
        # pick l so that (l + l_next) / T approximates the commanded speed,
        # assuming a steady gait: l = v * T / 2 per step pair sum
        T = ref.cycle_duration
        l = np.clip(self.cfg.nominal_velocity * T / 2.0, self.lib.axis[0], self.lib.axis[-1])
        return StepLengthPair(float(l), float(l))

    def _plan_trotting_step(self, state, feet, yaw):
        """Plan the upcoming step: snapped touchdowns for all four events and
        the library query (realized l0, planned l1)."""
        c, s = np.cos(yaw), np.sin(yaw)
        Rz = np.array([[c, -s], [s, c]])
        fx = lambda leg: feet[LEG_NAMES.index(leg)]
        nominal_next = self._nominal_pair()

        # leading diagonal lands mid-step: FR level with... FR = FL + l0f
        log_entries = []

        def plan(leg, stance_leg, length):
            stance_pos = fx(stance_leg)
            nominal = stance_pos[:2] + Rz @ np.array([length, 0.0])
            try:
                snapped = self._snap(nominal)
            except NoFeasibleFoothold:
                raise
            log_entries.append((leg, nominal.copy(), snapped.copy()))
            return snapped

        fr_td = plan("FR", "FL", nominal_next.front)
        rl_td = plan("RL", "RR", nominal_next.hind)
        # catch-up events: level with the new leading foot on the own track
        fl_td = self._snap(np.array([fr_td[0], fx("FL")[1]]) + 0.0)
        rr_td = self._snap(np.array([rl_td[0], fx("RR")[1]]) + 0.0)
        log_entries.append(("FL", np.array([fr_td[0], fx("FL")[1]]), fl_td.copy()))
        log_entries.append(("RR", np.array([rl_td[0], fx("RR")[1]]), rr_td.copy()))

        # realized step lengths in the de-yawed frame
        def along(vec):
            return float(np.array([c, s]) @ vec)

        l0f = np.clip(along(fr_td[:2] - fx("FL")[:2]), -0.29, 0.29)
        l0h = np.clip(along(rl_td[:2] - fx("RR")[:2]), -0.29, 0.29)
        l0 = StepLengthPair(l0f, l0h)

        # provisional next step from the same nominal command
        l1 = nominal_next

        if self.lib is not None:
            gait = query(self.lib, l0, l1, clamp=True)
        else:
            gait = None
        touchdowns = {"FR": fr_td, "RL": rl_td, "FL": fl_td, "RR": rr_td}
        return gait, touchdowns, log_entries

    # -- main loop -------------------------------------------------------------

    def run(self) -> SimResult:
        cfg = self.cfg
        t_wall = _time.perf_counter()
        params = self.params
        dt = cfg.plant_dt
        steps_per_control = int(round(cfg.control_dt / dt))

        # Each trotting step re-queries the library and tracks the fresh
        # gait's first step (receding horizon): the logged phase counter runs
        # over the full 8-phase cycle, while gait-internal lookups use
        # phase % 4 relative to the last anchor.
        if cfg.controller == "heuristic":
            gait = None
            durations8 = np.array(
                [DEFAULT_CONFIG["gait"]["double_duration_guess"], DEFAULT_CONFIG["gait"]["single_duration_guess"]] * 4
            )
            body0_z = DEFAULT_CONFIG["gait"]["stance_height"]
        else:
            gait = query(self.lib, self._nominal_pair(), self._nominal_pair(), clamp=True)
            durations8 = None
            body0_z = gait.ref_states[0].p[2]

        w = self.legs.stance_width()
        hx = self.legs.hip_x
        feet = np.array(
            [[hx, -w, 0.0], [hx, w, 0.0], [-hx, -w, 0.0], [-hx, w, 0.0]]
        )
        for i in range(4):
            feet[i, 2] = self._ground_z(feet[i, :2])
        state = RigidBodyState(np.array([0.0, 0.0, body0_z]), np.zeros(3), np.eye(3), np.zeros(3))
        if gait is not None:
            state.v = gait.ref_states[0].v.copy()
            state.w = gait.ref_states[0].w.copy()
            state.R = gait.ref_states[0].R.copy()

        phase = 0  # 0..7 cycle counter
        phase_elapsed = 0.0
        gait_time = 0.0  # time since the current anchor (gait step A start)
        anchor_xy = np.zeros(2)
        anchor_yaw = 0.0
        swing: dict = {}
        touchdowns: dict = {}
        lam = np.zeros((4, 3))
        telemetry = []
        foothold_log = []
        phase_log = [(0.0, 0)]
        outcome = None
        qp_iters = 0
        err_vec = np.zeros(12)
        t = 0.0
        tick = 0

        def phase_duration(ph):
            if gait is None:
                return float(durations8[ph])
            return float(gait.durations[ph % 4])

        def set_anchor(g):
            nonlocal anchor_xy, anchor_yaw, gait_time
            yaw = euler_zyx(state.R)[2]
            anchor_yaw = yaw
            g_feet = g.foot_xy(0)
            c, s = np.cos(yaw), np.sin(yaw)
            Rz = np.array([[c, -s], [s, c]])
            anchor_xy = feet[:, :2].mean(axis=0) - Rz @ g_feet.mean(axis=0)
            gait_time = 0.0

        def ref_state_at(tau):
            if gait is not None:
                g = gait.state_at(tau)
                c, s = np.cos(anchor_yaw), np.sin(anchor_yaw)
                Rz2 = np.array([[c, -s], [s, c]])
                Rz3 = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
                p = np.array([*(anchor_xy + Rz2 @ (g.p[:2] - gait.ref_states[0].p[:2])), g.p[2]])
                return RigidBodyState(p, Rz3 @ g.v, Rz3 @ g.R, g.w)
            v = np.array([cfg.nominal_velocity, 0.0, 0.0])
            p = np.array(
                [state.p[0] + cfg.nominal_velocity * (tau - gait_time), 0.0,
                 DEFAULT_CONFIG["gait"]["stance_height"]]
            )
            return RigidBodyState(p, v, np.eye(3), np.zeros(3))

        def ref_wrench_at(tau):
            if gait is not None:
                u = gait.wrench_at(tau)
                c, s = np.cos(anchor_yaw), np.sin(anchor_yaw)
                Rz3 = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
                return Wrench(Rz3 @ u.f, u.tau)
            return Wrench(-params.mass * params.gravity, np.zeros(3))

        def plan_boundary():
            nonlocal gait, touchdowns
            if cfg.controller == "heuristic":
                touchdowns = self._heuristic_touchdowns(state, feet)
                return
            yaw = euler_zyx(state.R)[2]
            new_gait, tds, entries = self._plan_trotting_step(state, feet, yaw)
            touchdowns = tds
            for leg, nominal, snapped in entries:
                foothold_log.append((t, leg, nominal.tolist(), snapped.tolist()))
            if new_gait is not None:
                gait = new_gait
                set_anchor(gait)

        try:
            plan_boundary()
        except NoFeasibleFoothold:
            outcome = OUTCOME_NO_FOOTHOLD

        n_ticks = int(round(cfg.max_time / dt))
        control_countdown = 0
        while outcome is None and tick < n_ticks:
            # --- phase machine ---
            if phase_elapsed >= phase_duration(phase) - 1e-12:
                for leg, traj in list(swing.items()):
                    i = LEG_NAMES.index(leg)
                    pos = traj.position(1.0)
                    gz = self._ground_z(pos[:2])
                    feet[i] = [pos[0], pos[1], gz]
                    if gz < -0.05:
                        outcome = OUTCOME_GAP
                    foothold_log.append((t, leg + "_touchdown", pos[:2].tolist(), feet[i].tolist()))
                swing.clear()
                phase = (phase + 1) % N_PHASES
                phase_elapsed = 0.0
                phase_log.append((t, phase))
                if outcome is not None:
                    break
                if phase % 4 == 0:  # trotting-step boundary
                    try:
                        plan_boundary()
                    except NoFeasibleFoothold:
                        outcome = OUTCOME_NO_FOOTHOLD
                        break
                stance = PHASE_STANCE[phase]
                for i, leg in enumerate(LEG_NAMES):
                    if not stance[i]:
                        target = touchdowns.get(leg, feet[i])
                        swing[leg] = plan_swing(
                            feet[i].copy(), np.asarray(target, dtype=float),
                            duration=phase_duration(phase),
                        )

            # --- control tick ---
            if control_countdown == 0:
                control_countdown = steps_per_control
                stance = PHASE_STANCE[phase]
                contacts = ContactState(tuple(stance), feet.copy())
                horizon = self.weights.horizon
                ref_traj = [ref_state_at(gait_time + k * cfg.control_dt) for k in range(horizon + 1)]
                ref_wr = [ref_wrench_at(gait_time + k * cfg.control_dt) for k in range(horizon)]
                err0 = self.controller.initial_error(state, ref_traj[0])
                err_vec = err0.as_vector() if hasattr(err0, "as_vector") else np.asarray(err0)
                try:
                    sol = self.controller.solve_stance(err0, ref_traj, ref_wr, contacts)
                    lam = sol.contact_forces
                    qp_iters = sol.qp_stats["iterations"]
                except (RuntimeError, ValueError) as exc:
                    log.warning("controller failure at t=%.3f: %s", t, exc)
                    outcome = OUTCOME_CONTROLLER
                    break

                reached = state.p[0] >= self.goal_x
                z = state.p[2]
                row = [
                    float(tick), t, float(phase),
                    *state.p, *state.v, *euler_zyx(state.R), *state.w,
                    *err_vec, *lam.reshape(12),
                    float(qp_iters), 0.0, 1.0 if reached else 0.0,
                ]
                telemetry.append(row)
                if reached:
                    outcome = OUTCOME_SUCCESS
                    break
                if not (cfg.height_limits[0] <= z <= cfg.height_limits[1]):
                    outcome = OUTCOME_FALL
                    break

            # --- plant tick ---
            stance = PHASE_STANCE[phase]
            f_total = np.zeros(3)
            m_world = np.zeros(3)
            for i in range(4):
                if stance[i]:
                    f_total += lam[i]
                    m_world += np.cross(feet[i] - state.p, lam[i])
            wrench = Wrench(f_total, state.R.T @ m_world)
            state = step(state, wrench, params, dt)
            for leg, traj in swing.items():
                i = LEG_NAMES.index(leg)
                s_phase = min((phase_elapsed + dt) / phase_duration(phase), 1.0)
                feet[i] = traj.position(s_phase)

            t += dt
            tick += 1
            phase_elapsed += dt
            gait_time += dt
            control_countdown -= 1

        if outcome is None:
            outcome = OUTCOME_SUCCESS if self.goal_x == np.inf else OUTCOME_FALL
        if outcome == OUTCOME_GAP and telemetry:
            telemetry[-1][TELEMETRY_COLUMNS.index("foot_in_gap")] = 1.0

        wall = _time.perf_counter() - t_wall
        return SimResult(
            outcome=outcome,
            distance=float(state.p[0]),
            sim_time=t,
            telemetry=telemetry,
            foothold_log=foothold_log,
            phase_log=phase_log,
            summary={
                "outcome": outcome,
                "controller": cfg.controller,
                "seed": cfg.seed,
                "distance": float(state.p[0]),
                "sim_time": t,
                "ticks": tick,
                "timing": {"wall_time": wall},
            },
        )

    def _heuristic_touchdowns(self, state, feet):
        """Raibert-style targets snapped to the terrain for all four legs."""
        v_des = np.array([self.cfg.nominal_velocity, 0.0])
        t_stance = (
            DEFAULT_CONFIG["gait"]["single_duration_guess"]
            + DEFAULT_CONFIG["gait"]["double_duration_guess"]
        )
        yaw = euler_zyx(state.R)[2]
        c, s = np.cos(yaw), np.sin(yaw)
        Rz = np.array([[c, -s], [s, c]])
        tds = {}
        for i, leg in enumerate(LEG_NAMES):
            hip = self.legs.hip_offset(leg)
            hip_world = state.p[:2] + Rz @ np.array([hip[0], np.sign(hip[1]) * self.legs.stance_width()])
            nominal = heuristic_foothold(hip_world, state.v, v_des, t_stance)
            tds[leg] = self._snap(nominal)
        return tds


def run(config: SimConfig, library: GaitLibrary | None = None, **kw) -> SimResult:
    return TrotSimulator(config, library, **kw).run()


def heuristic_foothold(hip_xy, v, v_des, t_stance, kv=None):
    """Raibert-style target: hip + (T_st/2) v + kv (v - v_des)."""
    if kv is None:
        kv = DEFAULT_CONFIG["sim"]["raibert_kv"]
    return np.asarray(hip_xy) + (t_stance / 2.0) * np.asarray(v[:2]) + kv * (np.asarray(v[:2]) - np.asarray(v_des[:2]))


def batch(configs, library=None, params=None) -> dict:
    """Run every config; aggregate successes per (terrain kind, controller)."""
    rows = []
    table: dict = {}
    for cfg in configs:
        res = run(cfg, library=library, params=params)
        kind = cfg.scenario.kind if cfg.scenario else "flat"
        rows.append(
            {
                "terrain": kind,
                "controller": cfg.controller,
                "seed": cfg.seed,
                "outcome": res.outcome,
                "distance": res.distance,
            }
        )
        key = (kind, cfg.controller)
        succ, tot = table.get(key, (0, 0))
        table[key] = (succ + (1 if res.success else 0), tot + 1)
    return {"runs": rows, "table": {f"{k[0]}/{k[1]}": f"{v[0]}/{v[1]}" for k, v in table.items()}}
