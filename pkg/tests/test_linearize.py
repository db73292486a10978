import numpy as np

from geotrot.dynamics import BodyParams, RigidBodyState, Wrench, rollout, step
from geotrot.linearize import ErrorState, error_state, linearize, propagate_error
from geotrot.so3 import exp_so3, log_so3, orientation_error

RNG = np.random.default_rng(99)


def random_ref(rng=RNG, w_scale=1.5):
    return RigidBodyState(
        rng.standard_normal(3),
        rng.standard_normal(3),
        exp_so3(rng.standard_normal(3)),
        w_scale * rng.standard_normal(3),
    )


def fd_jacobians(ref, wrench, params, dt, eps=1e-5):
    """Central-difference oracle for (A, B) through the error chart.

    Inputs are perturbed as p+e*dp, v+e*dv, R exp(e*hat(eta)), w+e*dw,
    f+e*df, tau+e*dtau; the resulting states are measured in the same chart
    (eta via log of the relative rotation, rates as plain differences).
    """

    def measure(state, ref_next):
        return np.concatenate(
            [
                state.p - ref_next.p,
                state.v - ref_next.v,
                log_so3(ref_next.R.T @ state.R),
                state.w - ref_next.w,
            ]
        )

    ref_next = step(ref, wrench, params, dt)

    def perturbed(z):
        st = RigidBodyState(
            ref.p + z[0:3],
            ref.v + z[3:6],
            ref.R @ exp_so3(z[6:9]),
            ref.w + z[9:12],
        )
        u = Wrench(wrench.f + z[12:15], wrench.tau + z[15:18])
        return measure(step(st, u, params, dt), ref_next)

    J = np.zeros((12, 18))
    for j in range(18):
        e = np.zeros(18)
        e[j] = eps
        J[:, j] = (perturbed(e) - perturbed(-e)) / (2 * eps)
    return J[:, :12], J[:, 12:]


def test_linearize_zero_rate_double_integrator():
    params = BodyParams()
    ref = RigidBodyState.rest()
    dt = 0.05
    lin = linearize(ref, params, dt)
    eye = np.eye(3)
    assert np.allclose(lin.A[6:9, 6:9], eye, atol=1e-15)
    assert np.allclose(lin.A[6:9, 9:12], dt * eye, atol=1e-15)
    assert np.allclose(lin.A[9:12, 9:12], eye, atol=1e-15)


def test_position_block_exact_double_integrator():
    params = BodyParams()
    lin = linearize(random_ref(), params, 0.05)
    eye = np.eye(3)
    assert np.array_equal(lin.A[0:3, 0:3], eye)
    assert np.allclose(lin.A[0:3, 3:6], 0.05 * eye)
    assert np.array_equal(lin.A[3:6, 3:6], eye)


def test_block_sparsity_exact_zeros():
    params = BodyParams()
    lin = linearize(random_ref(), params, 0.05)
    A, B = lin.A, lin.B
    assert np.array_equal(A[0:6, 6:12], np.zeros((6, 6)))
    assert np.array_equal(A[6:12, 0:6], np.zeros((6, 6)))
    assert np.array_equal(A[3:6, 0:3], np.zeros((3, 3)))
    assert np.array_equal(A[9:12, 6:9], np.zeros((3, 3)))
    assert np.array_equal(B[0:3], np.zeros((3, 6)))
    assert np.array_equal(B[6:9], np.zeros((3, 6)))
    assert np.array_equal(B[3:6, 3:6], np.zeros((3, 3)))
    assert np.array_equal(B[9:12, 0:3], np.zeros((3, 3)))


def test_linearize_matches_finite_difference_oracle():
    params = BodyParams()
    dt = 0.05
    for _ in range(10):
        ref = random_ref()
        wrench = Wrench(RNG.standard_normal(3) * 10, RNG.standard_normal(3))
        lin = linearize(ref, params, dt)
        A_fd, B_fd = fd_jacobians(ref, wrench, params, dt)
        assert np.abs(lin.A - A_fd).max() < 1e-5
        assert np.abs(lin.B - B_fd).max() < 1e-5


def test_A_invertible_over_rate_range():
    params = BodyParams()
    rng = np.random.default_rng(5)
    for _ in range(50):
        w = rng.uniform(-10, 10, 3)
        ref = RigidBodyState(np.zeros(3), np.zeros(3), exp_so3(rng.standard_normal(3)), w)
        A = linearize(ref, params, 0.1).A
        assert abs(np.linalg.det(A)) > 1e-6


def test_error_state_cases():
    ref = random_ref()
    assert error_state(ref, ref).norm() < 1e-14
    shifted = RigidBodyState(ref.p + [0.1, 0, 0], ref.v, ref.R, ref.w)
    e = error_state(shifted, ref)
    assert np.allclose(e.dp, [0.1, 0, 0]) and e.dv @ e.dv == 0 and e.eta @ e.eta == 0


def test_error_state_small_angle():
    ref = random_ref()
    n = RNG.standard_normal(3)
    n /= np.linalg.norm(n)
    eps = 1e-4
    pert = RigidBodyState(ref.p, ref.v, ref.R @ exp_so3(eps * n), ref.w)
    e = error_state(pert, ref)
    assert np.linalg.norm(e.eta - eps * n) <= 5 * eps**2


def test_propagate_error_zero_and_force_row():
    params = BodyParams()
    dt = 0.05
    lin = linearize(random_ref(), params, dt)
    z = propagate_error(ErrorState.zero(), Wrench.zero(), lin)
    assert z.norm() == 0.0
    out = propagate_error(ErrorState.zero(), Wrench(np.array([0, 0, params.mass]), np.zeros(3)), lin)
    assert np.allclose(out.dv, [0, 0, dt], atol=1e-14)


def _horizon_residual(ref0, inputs, params, dt, eps, direction, steps=10):
    """max-norm residual between the nonlinear 10-step rollout error (plain
    chart) and the propagated linear prediction, for a perturbation eps*direction."""
    refs = rollout(ref0, inputs, params, dt)
    d = direction
    pert0 = RigidBodyState(
        ref0.p + eps * d[0:3],
        ref0.v + eps * d[3:6],
        ref0.R @ exp_so3(eps * d[6:9]),
        ref0.w + eps * d[9:12],
    )
    states = rollout(pert0, inputs, params, dt)
    pred = eps * d.copy()
    worst = 0.0
    for k in range(1, steps + 1):
        lin = linearize(refs[k - 1], params, dt)
        pred = lin.A @ pred
        meas = np.concatenate(
            [
                states[k].p - refs[k].p,
                states[k].v - refs[k].v,
                log_so3(refs[k].R.T @ states[k].R),
                states[k].w - refs[k].w,
            ]
        )
        worst = max(worst, np.linalg.norm(meas - pred))
    return worst


def test_ten_step_quadratic_contraction():
    params = BodyParams()
    dt = 0.05
    rng = np.random.default_rng(17)
    for _ in range(5):
        ref0 = RigidBodyState(
            rng.standard_normal(3), rng.standard_normal(3), exp_so3(rng.standard_normal(3)), rng.standard_normal(3)
        )
        inputs = [Wrench(rng.standard_normal(3) * 5, rng.standard_normal(3) * 0.5) for _ in range(10)]
        d = rng.standard_normal(12)
        d /= np.linalg.norm(d)
        eps = 0.1
        r1 = _horizon_residual(ref0, inputs, params, dt, eps, d)
        r2 = _horizon_residual(ref0, inputs, params, dt, eps / 2, d)
        assert 3.2 <= r1 / r2 <= 4.8


def test_propagated_error_matches_error_state_measurement():
    # spec form of the consistency check: measurement via error_state();
    # the transported rate term agrees with the plain chart to first order
    params = BodyParams()
    dt = 0.05
    rng = np.random.default_rng(23)
    ref0 = RigidBodyState(np.zeros(3), np.array([0.2, 0, 0]), np.eye(3), np.array([0.0, 0.2, 0.0]))
    inputs = [Wrench(rng.standard_normal(3) * 2, rng.standard_normal(3) * 0.2) for _ in range(10)]
    refs = rollout(ref0, inputs, params, dt)
    d = rng.standard_normal(12)
    d /= np.linalg.norm(d)

    def run(eps):
        pert0 = RigidBodyState(
            ref0.p + eps * d[0:3],
            ref0.v + eps * d[3:6],
            ref0.R @ exp_so3(eps * d[6:9]),
            ref0.w + eps * d[9:12],
        )
        states = rollout(pert0, inputs, params, dt)
        err = error_state(pert0, ref0)
        worst = 0.0
        for k in range(1, 11):
            lin = linearize(refs[k - 1], params, dt)
            err = propagate_error(err, Wrench.zero(), lin)
            meas = error_state(states[k], refs[k])
            worst = max(worst, np.linalg.norm(meas.as_vector() - err.as_vector()))
        return worst

    eps = 0.05
    assert run(eps) <= 10.0 * eps**2
