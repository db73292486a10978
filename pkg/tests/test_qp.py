import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from geotrot.qp import QpProblem, QpSettings, QpSolution, QpSolver, QpStatus, dump_problem, kkt_residuals

RNG = np.random.default_rng(2024)


def active_set_oracle(prob: QpProblem):
    """Brute-force reference: solve the KKT system for every candidate active
    set of inequality rows (ineqs + finite bounds), return the feasible
    optimum.  Only for tiny strictly-convex problems."""
    n = prob.n
    P = prob.P.toarray()
    rows = []
    rhs = []
    if prob.n_in:
        G = prob.Gin.toarray()
        for i in range(prob.n_in):
            rows.append(G[i])
            rhs.append(prob.hin[i])
    for j in range(n):
        if np.isfinite(prob.upper[j]):
            e = np.zeros(n)
            e[j] = 1.0
            rows.append(e)
            rhs.append(prob.upper[j])
        if np.isfinite(prob.lower[j]):
            e = np.zeros(n)
            e[j] = -1.0
            rows.append(e)
            rhs.append(-prob.lower[j])
    rows = np.array(rows) if rows else np.zeros((0, n))
    rhs = np.array(rhs)
    m_in = len(rhs)
    Ae = prob.Aeq.toarray() if prob.n_eq else np.zeros((0, n))

    best = None
    for k in range(0, min(n, m_in) + 1):
        for combo in itertools.combinations(range(m_in), k):
            Aact = np.vstack([Ae, rows[list(combo)]]) if combo else Ae
            bact = np.concatenate([prob.beq, rhs[list(combo)]]) if combo else prob.beq
            ma = Aact.shape[0]
            K = np.block([[P, Aact.T], [Aact, np.zeros((ma, ma))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-prob.q, bact]))
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            mu = sol[n + prob.n_eq :]
            if np.any(mu < -1e-9):
                continue
            if m_in and np.any(rows @ x - rhs > 1e-9):
                continue
            if prob.n_eq and np.abs(Ae @ x - prob.beq).max() > 1e-9:
                continue
            obj = prob.objective(x)
            if best is None or obj < best[0] - 1e-12:
                best = (obj, x)
    return best[1] if best else None


def random_small_qp(rng, n=None):
    # feasible by construction: constraints are anchored at a random interior point
    n = n or rng.integers(2, 9)
    M = rng.standard_normal((n, n))
    P = M @ M.T + n * np.eye(n)  # strictly convex
    q = rng.standard_normal(n) * 2
    x0 = rng.uniform(-1.0, 1.0, n)
    m_in = rng.integers(0, 7)
    Gin = rng.standard_normal((m_in, n)) if m_in else None
    hin = (Gin @ x0 + rng.uniform(0.05, 1.0, m_in)) if m_in else None
    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    for j in rng.choice(n, size=min(2, n), replace=False):
        lower[j] = x0[j] - 3.0
        upper[j] = x0[j] + 3.0
    use_eq = rng.random() < 0.4
    Aeq = rng.standard_normal((1, n)) if use_eq else None
    beq = Aeq @ x0 if use_eq else None
    return QpProblem(P=sp.csc_matrix(P), q=q, Aeq=Aeq, beq=beq, Gin=Gin, hin=hin, lower=lower, upper=upper)


def test_scalar_active_bound():
    # min (x-1)^2 s.t. x >= 2
    prob = QpProblem(P=sp.eye(1) * 2, q=np.array([-2.0]), lower=np.array([2.0]))
    sol = QpSolver().solve(prob)
    assert sol.status == QpStatus.SOLVED
    assert abs(sol.x[0] - 2.0) < 1e-6


def test_symmetric_equality():
    # min 0.5 x'x s.t. x1 + x2 = 1
    prob = QpProblem(P=sp.eye(2), q=np.zeros(2), Aeq=np.array([[1.0, 1.0]]), beq=np.array([1.0]))
    sol = QpSolver().solve(prob)
    assert sol.status == QpStatus.SOLVED
    assert np.allclose(sol.x, [0.5, 0.5], atol=1e-6)


def test_matches_active_set_oracle_small_batch():
    rng = np.random.default_rng(11)
    solver = QpSolver()
    for _ in range(40):
        prob = random_small_qp(rng)
        sol = solver.solve(prob)
        assert sol.status == QpStatus.SOLVED, sol.status
        x_ref = active_set_oracle(prob)
        assert x_ref is not None
        assert np.abs(sol.x - x_ref).max() < 1e-5


def test_kkt_residuals_on_equality_qp():
    # analytic solution of an equality-only QP has ~0 residuals
    P = np.diag([2.0, 4.0])
    A = np.array([[1.0, 1.0]])
    x = np.linalg.solve(
        np.block([[P, A.T], [A, np.zeros((1, 1))]]), np.array([0.0, 0.0, 1.0])
    )
    prob = QpProblem(P=sp.csc_matrix(P), q=np.zeros(2), Aeq=A, beq=np.array([1.0]))
    sol = QpSolution(
        x=x[:2], y_eq=x[2:], y_in=np.zeros(0), y_bounds=np.zeros(2),
        status=QpStatus.SOLVED, iterations=0, primal_residual=0, dual_residual=0,
    )
    prim, dual, comp = kkt_residuals(prob, sol)
    assert prim < 1e-12 and dual < 1e-12 and comp < 1e-12


def test_kkt_primal_residual_scales_with_perturbation():
    prob = QpProblem(
        P=sp.eye(3) * 2, q=np.zeros(3), Aeq=np.array([[1.0, 1.0, 1.0]]), beq=np.array([1.0])
    )
    sol = QpSolver().solve(prob)
    prim0, _, _ = kkt_residuals(prob, sol)
    for delta in (1e-4, 1e-2):
        pert = QpSolution(
            x=sol.x + delta, y_eq=sol.y_eq, y_in=sol.y_in, y_bounds=sol.y_bounds,
            status=sol.status, iterations=0, primal_residual=0, dual_residual=0,
        )
        prim, _, _ = kkt_residuals(prob, pert)
        assert abs(prim - (prim0 + 3 * delta)) < 1e-6  # ||Aeq d||_inf = 3 delta


def test_determinism_bit_identical():
    rng = np.random.default_rng(12)
    prob = random_small_qp(rng, n=6)
    s1 = QpSolver().solve(prob)
    s2 = QpSolver().solve(prob)
    assert np.array_equal(s1.x, s2.x)
    assert s1.iterations == s2.iterations
    ws1 = QpSolver()
    a = ws1.solve(prob)
    b = ws1.solve(prob, warm_start=a)
    ws2 = QpSolver()
    a2 = ws2.solve(prob)
    b2 = ws2.solve(prob, warm_start=a2)
    assert np.array_equal(b.x, b2.x) and b.iterations == b2.iterations


def test_row_scaling_invariance():
    rng = np.random.default_rng(13)
    base = random_small_qp(rng, n=5)
    scaled = QpProblem(
        P=base.P, q=base.q,
        Aeq=(base.Aeq * 10.0) if base.n_eq else None,
        beq=(base.beq * 10.0) if base.n_eq else None,
        Gin=base.Gin if base.n_in else None, hin=base.hin if base.n_in else None,
        lower=base.lower, upper=base.upper,
    )
    s1 = QpSolver().solve(base)
    s2 = QpSolver().solve(scaled)
    assert np.abs(s1.x - s2.x).max() < 1e-6


def test_primal_infeasible_certificate():
    # x >= 1 and x <= -1 simultaneously
    prob = QpProblem(
        P=sp.eye(1), q=np.zeros(1),
        Gin=np.array([[1.0], [-1.0]]), hin=np.array([-1.0, -1.0]),
    )
    sol = QpSolver().solve(prob)
    assert sol.status == QpStatus.PRIMAL_INFEASIBLE


def test_dual_infeasible_certificate():
    # unbounded below: linear objective along an unconstrained direction
    prob = QpProblem(
        P=sp.csc_matrix((2, 2)), q=np.array([0.0, -1.0]),
        Gin=np.array([[1.0, 0.0]]), hin=np.array([1.0]),
    )
    sol = QpSolver().solve(prob)
    assert sol.status == QpStatus.DUAL_INFEASIBLE


def test_warm_start_reduces_iterations():
    rng = np.random.default_rng(14)
    prob = random_small_qp(rng, n=8)
    solver = QpSolver()
    cold = solver.solve(prob)
    warm = solver.solve(prob, warm_start=cold)
    assert warm.iterations * 2 <= cold.iterations


def test_dump_problem_roundtrippable_header(tmp_path):
    prob = QpProblem(P=sp.eye(2), q=np.array([1.0, -1.0]))
    path = tmp_path / "dump.txt"
    dump_problem(prob, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "qpdump-v1"
    assert lines[1] == "n 2 n_eq 0 n_in 0"
    assert any(line.startswith("P 2 2") for line in lines)


def test_rejects_asymmetric_P():
    with pytest.raises(ValueError):
        QpProblem(P=sp.csc_matrix(np.array([[1.0, 0.5], [0.0, 1.0]])), q=np.zeros(2))


def test_rejects_crossed_bounds():
    with pytest.raises(ValueError):
        QpProblem(P=sp.eye(1), q=np.zeros(1), lower=np.array([1.0]), upper=np.array([0.0]))
