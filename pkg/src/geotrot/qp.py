"""Sparse convex QP solver shared by the stance MPC and the collocation SQP.

    minimize    0.5 x' P x + q' x
    subject to  Aeq x == beq,  Gin x <= hin,  lower <= x <= upper

Operator-splitting (ADMM) iteration on the stacked form l <= C x <= u with
over-relaxation, residual-based penalty adaptation at a fixed interval, and
the standard primal/dual infeasibility certificates.  The quasi-definite
KKT matrix is factorized sparsely and the factorization is cached: it only
depends on (P, C, sigma, rho), so consecutive warm-started solves that
change q / beq / hin / bounds only (the MPC steady state) skip the
factorization entirely.

A solver instance owns its workspace and is single-threaded; independent
instances may run concurrently.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

INF = np.inf


class QpStatus(Enum):
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"


@dataclass
class QpProblem:
    """Problem data; P is symmetrized on construction (asymmetry > 1e-6 is an
    error).  trusted_symmetric skips that check for callers that build P
    symmetric by construction (the MPC hot path)."""

    P: sp.csc_matrix
    q: np.ndarray
    Aeq: sp.csc_matrix | None = None
    beq: np.ndarray | None = None
    Gin: sp.csc_matrix | None = None
    hin: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    trusted_symmetric: bool = False

    def __post_init__(self):
        self.P = sp.csc_matrix(self.P)
        n = self.P.shape[0]
        self.q = np.asarray(self.q, dtype=float).reshape(n)
        if not self.trusted_symmetric:
            asym = abs(self.P - self.P.T).max() if self.P.nnz else 0.0
            if asym > 1e-6:
                raise ValueError("P asymmetry %g exceeds 1e-6" % asym)
            if asym > 0:
                self.P = ((self.P + self.P.T) * 0.5).tocsc()
        if self.Aeq is None:
            self.Aeq = sp.csc_matrix((0, n))
            self.beq = np.zeros(0)
        else:
            self.Aeq = sp.csc_matrix(self.Aeq)
            self.beq = np.asarray(self.beq, dtype=float).reshape(self.Aeq.shape[0])
        if self.Gin is None:
            self.Gin = sp.csc_matrix((0, n))
            self.hin = np.zeros(0)
        else:
            self.Gin = sp.csc_matrix(self.Gin)
            self.hin = np.asarray(self.hin, dtype=float).reshape(self.Gin.shape[0])
        self.lower = np.full(n, -INF) if self.lower is None else np.asarray(self.lower, dtype=float).reshape(n)
        self.upper = np.full(n, INF) if self.upper is None else np.asarray(self.upper, dtype=float).reshape(n)
        if self.Aeq.shape[1] != n or self.Gin.shape[1] != n:
            raise ValueError("constraint column count mismatch")
        if np.any(self.lower > self.upper):
            raise ValueError("lower > upper bound")

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def n_eq(self) -> int:
        return self.Aeq.shape[0]

    @property
    def n_in(self) -> int:
        return self.Gin.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    y_eq: np.ndarray
    y_in: np.ndarray
    y_bounds: np.ndarray
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    solve_time: float = 0.0
    y_stacked: np.ndarray | None = None  # full stacked dual, used for warm starts


@dataclass
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_infeas: float = 1e-8
    max_iter: int = 4000
    rho: float = 0.1
    rho_eq_scale: float = 1e3
    sigma: float = 1e-6
    alpha: float = 1.6
    adapt_interval: int = 25  # residual-based rho adaptation cadence
    check_interval: int = 5
    scaling_iters: int = 10  # Ruiz equilibration sweeps (0 disables)
    polish: bool = True  # active-set refinement after convergence; costs one
    # extra factorization per solve, so the MPC hot path disables it
    polish_delta: float = 1e-8
    polish_refine: int = 3


class QpSolver:
    """ADMM solver instance with factorization cache and warm-start support.

    Problem data are Ruiz-equilibrated before iterating; the scaling, the
    scaled matrices, and the KKT factorization are cached together, keyed on
    the raw (P, C) data, so repeated solves of the same matrices with new
    vectors (the warm-started MPC regime) pay no setup cost.
    """

    def __init__(self, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        self._cache_key = None
        self._ws = None  # cached workspace dict

    # -- internals ---------------------------------------------------------

    def _stack(self, prob: QpProblem):
        # bound rows only for variables with at least one finite bound
        n = prob.n
        bidx = np.where(np.isfinite(prob.lower) | np.isfinite(prob.upper))[0]
        I_b = sp.eye(n, format="csc")[bidx] if bidx.size else sp.csc_matrix((0, n))
        C = sp.vstack([prob.Aeq, prob.Gin, I_b], format="csc")
        l = np.concatenate([prob.beq, np.full(prob.n_in, -INF), prob.lower[bidx]])
        u = np.concatenate([prob.beq, prob.hin, prob.upper[bidx]])
        return C, l, u, bidx

    def _equilibrate(self, P: sp.csc_matrix, C: sp.csc_matrix, q: np.ndarray):
        """Ruiz equilibration of [[P, C'], [C, 0]] plus cost normalization.

        Returns (D, E, c): x = D x_scaled, y = (E / c) y_scaled... precisely
        P_s = c D P D, C_s = E C D, and duals map y = c E y_s.
        """
        n, m = P.shape[0], C.shape[0]
        D = np.ones(n)
        E = np.ones(m)
        Ps, Cs = P, C
        for _ in range(self.settings.scaling_iters):
            col_p = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(n)
            col_c = np.abs(Cs).max(axis=0).toarray().ravel() if Cs.nnz else np.zeros(n)
            dn = np.sqrt(np.maximum(np.maximum(col_p, col_c), 1e-8))
            row_c = np.abs(Cs).max(axis=1).toarray().ravel() if Cs.nnz else np.zeros(m)
            en = np.sqrt(np.maximum(row_c, 1e-8))
            D /= dn
            E /= en
            Dm = sp.diags(D)
            Ps = (Dm @ P @ Dm).tocsc()
            Cs = (sp.diags(E) @ C @ Dm).tocsc()
        qs = D * q
        norm_p = np.abs(Ps).max(axis=0).toarray().ravel().mean() if Ps.nnz else 0.0
        c = 1.0 / max(norm_p, np.abs(qs).max() if n else 0.0, 1e-8)
        Ps = (c * Ps).tocsc()
        return Ps, Cs, D, E, c

    def _factorize(self, ws, rho_vec: np.ndarray):
        n = ws["Ps"].shape[0]
        K = sp.bmat(
            [
                [ws["Ps"] + self.settings.sigma * sp.eye(n), ws["Cs"].T],
                [ws["Cs"], -sp.diags(1.0 / rho_vec)],
            ],
            format="csc",
        )
        ws["factor"] = spla.splu(K)
        ws["rho"] = rho_vec
        ws["rho_inv"] = 1.0 / rho_vec

    @staticmethod
    def _same_sparse(a: sp.csc_matrix, b: sp.csc_matrix) -> bool:
        if a is b:
            return True
        return (
            a.shape == b.shape
            and np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.data, b.data)
        )

    def _cache_matches(self, prob: QpProblem, bidx: np.ndarray) -> bool:
        key = self._cache_key
        if key is None:
            return False
        P, Aeq, Gin, bidx_old = key
        return (
            np.array_equal(bidx_old, bidx)
            and self._same_sparse(P, prob.P)
            and self._same_sparse(Aeq, prob.Aeq)
            and self._same_sparse(Gin, prob.Gin)
        )

    # -- public API ---------------------------------------------------------

    def solve(self, prob: QpProblem, warm_start: QpSolution | None = None) -> QpSolution:
        t_start = time.perf_counter()
        st = self.settings
        n, me, mi = prob.n, prob.n_eq, prob.n_in
        bidx = np.where(np.isfinite(prob.lower) | np.isfinite(prob.upper))[0]

        if not self._cache_matches(prob, bidx):
            C, _, _, _ = self._stack(prob)
            Ps, Cs, D, E, c = self._equilibrate(prob.P, C, prob.q)
            ws = {"Ps": Ps, "Cs": Cs, "D": D, "E": E, "c": c, "Cst": Cs.T.tocsc(), "C": C}
            rho_vec = np.full(C.shape[0], st.rho)
            rho_vec[:me] = st.rho * st.rho_eq_scale
            self._factorize(ws, rho_vec)
            self._ws = ws
            self._cache_key = (prob.P, prob.Aeq, prob.Gin, bidx)
        ws = self._ws
        C = ws["C"]
        m = C.shape[0]
        l = np.concatenate([prob.beq, np.full(mi, -INF), prob.lower[bidx]])
        u = np.concatenate([prob.beq, prob.hin, prob.upper[bidx]])
        Ps, Cs, Cst = ws["Ps"], ws["Cs"], ws["Cst"]
        D, E, c = ws["D"], ws["E"], ws["c"]
        rho = ws["rho"]
        rho_inv = ws["rho_inv"]

        qs = c * (D * prob.q)
        ls = E * l
        us = E * u
        Dinv = 1.0 / D
        Einv = 1.0 / E

        if warm_start is not None and warm_start.x.shape == (n,):
            x = Dinv * warm_start.x
            if warm_start.y_stacked is not None and warm_start.y_stacked.shape == (m,):
                y_u = warm_start.y_stacked
            else:
                y_u = np.concatenate(
                    [warm_start.y_eq, warm_start.y_in, warm_start.y_bounds[bidx]]
                )
                if y_u.shape != (m,):  # constraint structure changed: primal-only warm start
                    y_u = np.zeros(m)
            y = (c / E) * y_u
            z = np.clip(Cs @ x, ls, us)
        else:
            x = np.zeros(n)
            y = np.zeros(m)
            z = np.zeros(m)

        rhs = np.empty(n + m)
        best = None
        status = QpStatus.MAX_ITER
        r_prim = r_dual = np.inf
        it = 0
        for it in range(1, st.max_iter + 1):
            x_prev = x
            y_prev = y
            rhs[:n] = st.sigma * x - qs
            rhs[n:] = z - rho_inv * y
            sol = ws["factor"].solve(rhs)
            xt = sol[:n]
            zt = z + rho_inv * (sol[n:] - y)
            x = st.alpha * xt + (1.0 - st.alpha) * x
            zc = st.alpha * zt + (1.0 - st.alpha) * z + rho_inv * y
            z = np.clip(zc, ls, us)
            y = rho * (zc - z)  # zc already carries rho_inv * y_prev

            if it % st.check_interval == 0 or it == st.max_iter:
                # unscaled residuals
                Cx_u = Einv * (Cs @ x)
                z_u = Einv * z
                Px_u = Dinv * (Ps @ x) / c
                Cty_u = Dinv * (Cst @ y) / c
                r_prim = np.abs(Cx_u - z_u).max() if m else 0.0
                r_dual = np.abs(Px_u + prob.q + Cty_u).max()
                eps_prim = st.eps_abs + st.eps_rel * max(
                    np.abs(Cx_u).max() if m else 0.0, np.abs(z_u).max() if m else 0.0
                )
                eps_dual = st.eps_abs + st.eps_rel * max(
                    np.abs(Px_u).max(), np.abs(Cty_u).max(), np.abs(prob.q).max() if n else 0.0
                )
                score = max(r_prim / eps_prim, r_dual / eps_dual)
                if best is None or score < best[0]:
                    best = (score, x.copy(), y.copy(), r_prim, r_dual)
                if r_prim <= eps_prim and r_dual <= eps_dual:
                    status = QpStatus.SOLVED
                    break

                dy = y - y_prev
                dx = x - x_prev
                ndy = np.abs(dy).max()
                ndx = np.abs(dx).max()
                if ndy > 1e-14 and self._primal_infeasible(Cs, Cst, ls, us, dy, ndy):
                    status = QpStatus.PRIMAL_INFEASIBLE
                    break
                if ndx > 1e-14 and self._dual_infeasible_scaled(Ps, qs, Cs, ls, us, dx, ndx):
                    status = QpStatus.DUAL_INFEASIBLE
                    break

                if it % st.adapt_interval == 0:
                    scale = np.sqrt(
                        (r_prim / max(eps_prim, 1e-12)) / max(r_dual / max(eps_dual, 1e-12), 1e-12)
                    )
                    if scale > 5.0 or scale < 0.2:
                        new_rho = np.clip(ws["rho"] * scale, 1e-6, 1e6)
                        self._factorize(ws, new_rho)
                        rho = ws["rho"]
                        rho_inv = ws["rho_inv"]

        if status == QpStatus.MAX_ITER and best is not None:
            _, x, y, r_prim, r_dual = best

        if status in (QpStatus.SOLVED, QpStatus.MAX_ITER):
            x_u = D * x
            y_u = (E * y) * c
        else:
            x_u = D * x_prev
            y_u = (E * y_prev) * c

        if status == QpStatus.SOLVED and st.polish:
            polished = self._polish(prob, C, l, u, x_u, y_u)
            if polished is not None:
                xp, yp, rp, rd = polished
                if max(rp, rd) <= max(r_prim, r_dual):
                    x_u, y_u, r_prim, r_dual = xp, yp, rp, rd

        y_bounds_full = np.zeros(n)
        y_bounds_full[bidx] = y_u[me + mi :]
        elapsed = time.perf_counter() - t_start
        return QpSolution(
            x=x_u,
            y_eq=y_u[:me],
            y_in=y_u[me : me + mi],
            y_bounds=y_bounds_full,
            status=status,
            iterations=it,
            primal_residual=float(r_prim),
            dual_residual=float(r_dual),
            solve_time=elapsed,
            y_stacked=y_u.copy(),
        )

    def _polish(self, prob, C, l, u, x, y):
        """Solve the equality-constrained QP on the active set guessed from the
        dual signs; returns (x, y, r_prim, r_dual) or None if it failed."""
        st = self.settings
        n = prob.n
        low_act = np.where((y < 0) & np.isfinite(l))[0]
        up_act = np.where((y > 0) & np.isfinite(u))[0]
        rows = np.concatenate([low_act, up_act])
        if rows.size > 2 * n:
            return None
        A_red = C[rows]
        b_red = np.concatenate([l[low_act], u[up_act]])
        ma = rows.size
        delta = st.polish_delta
        K = sp.bmat(
            [
                [prob.P + delta * sp.eye(n), A_red.T],
                [A_red, -delta * sp.eye(ma) if ma else None],
            ],
            format="csc",
        )
        try:
            F = spla.splu(K)
        except RuntimeError:
            return None
        rhs = np.concatenate([-prob.q, b_red])
        sol = F.solve(rhs)
        # iterative refinement against the unregularized KKT system
        for _ in range(st.polish_refine):
            resid = rhs - np.concatenate(
                [prob.P @ sol[:n] + (A_red.T @ sol[n:] if ma else 0.0),
                 A_red @ sol[:n] if ma else np.zeros(0)]
            )
            sol = sol + F.solve(resid)
        xp = sol[:n]
        yp = np.zeros_like(y)
        yp[rows] = sol[n:]
        Cx = C @ xp
        rp = float(np.maximum(np.maximum(l - Cx, Cx - u), 0.0).max(initial=0.0))
        rd = float(np.abs(prob.P @ xp + prob.q + C.T @ yp).max())
        if not (np.isfinite(rp) and np.isfinite(rd)):
            return None
        return xp, yp, rp, rd

    def _primal_infeasible(self, C, Ct, l, u, dy, ndy) -> bool:
        eps = self.settings.eps_infeas * ndy
        if np.abs(Ct @ dy).max() > eps:
            return False
        dyp = np.maximum(dy, 0.0)
        dyn = np.minimum(dy, 0.0)
        # rows with infinite bound must not contribute support in that direction
        if np.any(dyp[np.isinf(u)] > eps) or np.any(dyn[np.isinf(l)] < -eps):
            return False
        support = float(u[np.isfinite(u)] @ dyp[np.isfinite(u)] + l[np.isfinite(l)] @ dyn[np.isfinite(l)])
        return support < -eps

    def _dual_infeasible_scaled(self, Ps, qs, Cs, l, u, dx, ndx) -> bool:
        eps = self.settings.eps_infeas * ndx
        if np.abs(Ps @ dx).max() > eps:
            return False
        if qs @ dx > -eps:
            return False
        Cdx = Cs @ dx
        ok_up = np.logical_or(np.isinf(u), Cdx <= eps)
        ok_lo = np.logical_or(np.isinf(l), Cdx >= -eps)
        return bool(np.all(ok_up) and np.all(ok_lo))


def solve_equality_step(
    prob: QpProblem,
    act_lo: np.ndarray,
    act_up: np.ndarray,
    delta: float = 1e-9,
    refine: int = 3,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One refined KKT solve of the QP with the given variable pins active.

    min 0.5 x'Px + q'x  s.t.  Aeq x = beq, x[act_lo] = lower, x[act_up] = upper.
    Returns (x, y_eq, y_lo, y_up).  The caller owns the working-set logic
    (ratio tests, blocking-bound activation, multiplier releases).
    """
    n, me = prob.n, prob.n_eq
    eye_n = sp.eye(n, format="csc")
    blocks = [prob.Aeq]
    rhs_rows = [prob.beq]
    if act_lo.size:
        blocks.append(eye_n[act_lo])
        rhs_rows.append(prob.lower[act_lo])
    if act_up.size:
        blocks.append(eye_n[act_up])
        rhs_rows.append(prob.upper[act_up])
    A = sp.vstack(blocks, format="csc")
    b = np.concatenate(rhs_rows)
    ma = A.shape[0]
    K = sp.bmat([[prob.P + delta * sp.eye(n), A.T], [A, -delta * sp.eye(ma)]], format="csc")
    F = spla.splu(K)
    rhs = np.concatenate([-prob.q, b])
    sol = F.solve(rhs)
    for _ in range(refine):
        resid = rhs - np.concatenate([prob.P @ sol[:n] + A.T @ sol[n:], A @ sol[:n]])
        sol = sol + F.solve(resid)
    x = sol[:n]
    y = sol[n:]
    y_lo = y[me : me + act_lo.size]
    y_up = y[me + act_lo.size :]
    return x, y[:me], y_lo, y_up


def solve_box_qp(
    prob: QpProblem,
    act_lo0: np.ndarray | None = None,
    act_up0: np.ndarray | None = None,
    max_rounds: int = 25,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Primal active-set solve of min 0.5 x'Px + q'x s.t. Aeq x = beq,
    lower <= x <= upper, starting from x = 0 (which must be box-feasible).

    Textbook scheme: equality step with the working set pinned, ratio test
    from the current iterate toward the step (one blocking bound joins the
    set per round), multiplier release at interior optima.  Returns
    (x, y_eq, act_lo, act_up) so the caller can warm-start the next solve.
    Equality feasibility is only exact when the returned point is the
    unclipped optimum; partial-progress exits leave x on the segment toward
    it (still bound-feasible).
    """
    n = prob.n
    lo, up = prob.lower, prob.upper
    structural = np.isfinite(lo) & (lo == up)
    act_lo = structural.copy() if act_lo0 is None else (act_lo0 | structural)
    act_up = np.zeros(n, dtype=bool) if act_up0 is None else (act_up0 & ~act_lo)
    x = np.clip(np.zeros(n), lo, up)
    y_eq = np.zeros(prob.n_eq)
    for _ in range(max_rounds):
        lo_idx = np.where(act_lo)[0]
        up_idx = np.where(act_up)[0]
        x_star, y_eq, y_lo, y_up = solve_equality_step(prob, lo_idx, up_idx)
        d = x_star - x
        if np.abs(d).max(initial=0.0) < 1e-12:
            release = np.zeros(n, dtype=bool)
            release[lo_idx[y_lo > 1e-9]] = True
            release[up_idx[y_up < -1e-9]] = True
            release &= ~structural
            if not release.any():
                return x_star, y_eq, act_lo, act_up
            act_lo &= ~release
            act_up &= ~release
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            pos = d > 1e-14
            neg = d < -1e-14
            b_up = np.where(pos & np.isfinite(up), (up - x) / np.where(pos, d, 1.0), np.inf)
            b_lo = np.where(neg & np.isfinite(lo), (lo - x) / np.where(neg, d, 1.0), np.inf)
        b_up[act_up | act_lo] = np.inf
        b_lo[act_lo | act_up] = np.inf
        i_up = int(np.argmin(b_up))
        i_lo = int(np.argmin(b_lo))
        beta = min(b_up[i_up], b_lo[i_lo], 1.0)
        x = x + max(beta, 0.0) * d
        if beta < 1.0:
            if b_up[i_up] <= b_lo[i_lo]:
                act_up[i_up] = True
                x[i_up] = up[i_up]
            else:
                act_lo[i_lo] = True
                x[i_lo] = lo[i_lo]
            continue
        # full step reached the candidate: release or finish
        release = np.zeros(n, dtype=bool)
        release[lo_idx[y_lo > 1e-9]] = True
        release[up_idx[y_up < -1e-9]] = True
        release &= ~structural
        if not release.any():
            return x, y_eq, act_lo, act_up
        act_lo &= ~release
        act_up &= ~release
    return x, y_eq, act_lo, act_up


def solve_active_set(
    prob: QpProblem,
    active0: tuple | None = None,
    max_rounds: int = 100,
    delta: float = 1e-9,
    feas_tol: float = 1e-9,
) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Direct sparse-KKT working-set solve for equality-dominated QPs.

    The splitting iteration stalls on the collocation subproblems (huge
    almost-flat null spaces make them near-LPs), so the SQP uses this
    second path: factor the quasi-definite KKT of the equalities plus the
    working set of bounds/inequality rows, then add violated rows / drop
    wrong-sign multipliers until optimal.  Returns (x, equality duals,
    active set) -- the active set warm-starts the next SQP iteration.
    """
    n, me, mi = prob.n, prob.n_eq, prob.n_in
    P = prob.P
    q = prob.q
    lo, up = prob.lower, prob.upper
    act_lo, act_up, act_in = (set(), set(), set()) if active0 is None else (
        set(active0[0]), set(active0[1]), set(active0[2])
    )
    # equality-pinned variables (lo == up) are always active
    pinned = np.where(np.isfinite(lo) & (lo == up))[0]
    act_lo |= set(pinned.tolist())

    x = np.zeros(n)
    y_eq = np.zeros(me)
    for _ in range(max_rounds):
        lo_idx = np.fromiter(sorted(act_lo), dtype=int) if act_lo else np.zeros(0, dtype=int)
        up_idx = np.fromiter(sorted(act_up - act_lo), dtype=int) if act_up else np.zeros(0, dtype=int)
        in_idx = np.fromiter(sorted(act_in), dtype=int) if act_in else np.zeros(0, dtype=int)
        blocks = [prob.Aeq]
        rhs_rows = [prob.beq]
        eye_n = sp.eye(n, format="csc")
        if lo_idx.size:
            blocks.append(eye_n[lo_idx])
            rhs_rows.append(lo[lo_idx])
        if up_idx.size:
            blocks.append(eye_n[up_idx])
            rhs_rows.append(up[up_idx])
        if in_idx.size:
            blocks.append(prob.Gin[in_idx])
            rhs_rows.append(prob.hin[in_idx])
        A = sp.vstack(blocks, format="csc")
        b = np.concatenate(rhs_rows)
        ma = A.shape[0]
        K = sp.bmat([[P + delta * sp.eye(n), A.T], [A, -delta * sp.eye(ma)]], format="csc")
        F = spla.splu(K)
        rhs = np.concatenate([-q, b])
        sol = F.solve(rhs)
        # refine against the unregularized KKT (the -delta I block biases the
        # equality rows by delta * ||y|| otherwise)
        for _ in range(3):
            resid = rhs - np.concatenate(
                [P @ sol[:n] + A.T @ sol[n:], A @ sol[:n]]
            )
            sol = sol + F.solve(resid)
        x = sol[:n]
        y = sol[n:]
        y_eq = y[:me]
        y_lo = y[me : me + lo_idx.size]
        y_up = y[me + lo_idx.size : me + lo_idx.size + up_idx.size]
        y_in = y[me + lo_idx.size + up_idx.size :]

        # add every violated constraint first; only once feasible, release the
        # single worst wrong-sign multiplier (mass drops cause cycling)
        added = False
        lo_gap = lo - x
        up_gap = x - up
        for i in np.where(lo_gap > feas_tol)[0]:
            if i not in act_lo:
                act_lo.add(int(i))
                added = True
        for i in np.where(up_gap > feas_tol)[0]:
            if i not in act_up:
                act_up.add(int(i))
                added = True
        if mi:
            s = prob.Gin @ x - prob.hin
            for rr in np.where(s > feas_tol)[0]:
                if rr not in act_in:
                    act_in.add(int(rr))
                    added = True
        if added:
            continue

        pinned_set = set(pinned.tolist())
        wrong = []
        for k, i in enumerate(lo_idx):
            if i not in pinned_set and y_lo[k] > feas_tol:
                wrong.append((y_lo[k], "lo", int(i)))
        for k, i in enumerate(up_idx):
            if -y_up[k] > feas_tol:
                wrong.append((-y_up[k], "up", int(i)))
        for k, rr in enumerate(in_idx):
            if -y_in[k] > feas_tol:
                wrong.append((-y_in[k], "in", int(rr)))
        if not wrong:
            break
        wrong.sort(reverse=True)
        for _, kind, idx in wrong[:256]:
            {"lo": act_lo, "up": act_up, "in": act_in}[kind].discard(idx)

    # failsafe: never hand back a bound-violating step
    x = np.clip(x, lo, up)
    return x, y_eq, (tuple(sorted(act_lo)), tuple(sorted(act_up)), tuple(sorted(act_in)))


def kkt_residuals(prob: QpProblem, sol: QpSolution) -> tuple[float, float, float]:
    """Infinity-norm stationarity, feasibility, and complementary-slackness residuals."""
    x = sol.x
    stat = prob.P @ x + prob.q
    if prob.n_eq:
        stat = stat + prob.Aeq.T @ sol.y_eq
    if prob.n_in:
        stat = stat + prob.Gin.T @ sol.y_in
    stat = stat + sol.y_bounds
    dual = float(np.abs(stat).max())

    viol = 0.0
    if prob.n_eq:
        viol = max(viol, float(np.abs(prob.Aeq @ x - prob.beq).max()))
    comp = 0.0
    if prob.n_in:
        s = prob.Gin @ x - prob.hin
        viol = max(viol, float(np.maximum(s, 0.0).max(initial=0.0)))
        comp = max(comp, float(np.abs(sol.y_in * s).max(initial=0.0)))
    lo_gap = np.where(np.isfinite(prob.lower), prob.lower - x, 0.0)
    up_gap = np.where(np.isfinite(prob.upper), x - prob.upper, 0.0)
    viol = max(viol, float(np.maximum(lo_gap, 0.0).max(initial=0.0)))
    viol = max(viol, float(np.maximum(up_gap, 0.0).max(initial=0.0)))
    yb = sol.y_bounds
    comp = max(comp, float(np.abs(np.maximum(yb, 0.0) * up_gap).max(initial=0.0)))
    comp = max(comp, float(np.abs(np.minimum(yb, 0.0) * lo_gap).max(initial=0.0)))
    return viol, dual, comp


def dump_problem(prob: QpProblem, path) -> None:
    """Write a dense qpdump-v1 listing for offline triage."""
    with open(path, "w") as fh:
        fh.write("qpdump-v1\n")
        fh.write(f"n {prob.n} n_eq {prob.n_eq} n_in {prob.n_in}\n")

        def block(name, arr):
            arr = np.atleast_2d(np.asarray(arr, dtype=float))
            fh.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                fh.write(" ".join("%.17g" % v for v in row) + "\n")

        block("P", prob.P.toarray())
        block("q", prob.q)
        block("Aeq", prob.Aeq.toarray() if prob.n_eq else np.zeros((0, prob.n)))
        block("beq", prob.beq)
        block("Gin", prob.Gin.toarray() if prob.n_in else np.zeros((0, prob.n)))
        block("hin", prob.hin)
        block("lower", prob.lower)
        block("upper", prob.upper)
