"""Dense QP kernels.

Two entry points: ``solve_eq_qp`` factors a single saddle-point (KKT) system,
``solve_iq_qp`` runs a primal active-set loop that pins inequality rows to
equality until the KKT conditions hold. Everything above (the MPC layers) is
built on these two solves. Solver objects hold no shared mutable state, so
independent solves can run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack, qr
from scipy.optimize import linprog

COND_THRESHOLD = 1e12   # condition estimate beyond this raises SingularKkt
FEAS_TOL = 1e-8         # inequality feasibility tolerance on Gz <= l
DUAL_TOL = 1e-10        # multipliers may dip this far below zero
SYM_RTOL = 1e-12        # relative asymmetry allowed in cost matrices


class QpError(Exception):
    """Base class for QP failures."""


class SingularKkt(QpError):
    """KKT matrix singular or conditioned worse than the threshold."""


class InconsistentConstraints(QpError):
    """Dependent equality rows with conflicting right-hand sides."""


def _vec(x, size=None, name="vector"):
    v = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if size is not None and v.size != size:
        raise ValueError(f"{name} has size {v.size}, expected {size}")
    return v


@dataclass
class EqQp:
    """minimize 1/2 z'Hz + g'z  subject to  Az = b.

    H must be symmetric (to within ``SYM_RTOL`` relative asymmetry). A may
    contain dependent rows: consistent duplicates are dropped during the
    solve with a diagnostic counter, inconsistent ones raise
    InconsistentConstraints.
    """

    H: np.ndarray
    g: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        self.g = _vec(self.g, name="g")
        n = self.g.size
        self.H = np.asarray(self.H, dtype=float)
        if self.H.shape != (n, n):
            raise ValueError(f"H has shape {self.H.shape}, expected ({n}, {n})")
        hmax = np.abs(self.H).max(initial=0.0)
        if np.abs(self.H - self.H.T).max(initial=0.0) > SYM_RTOL * (1.0 + hmax):
            raise ValueError("cost matrix H must be symmetric")
        if self.A is None:
            self.A = np.zeros((0, n))
            self.b = np.zeros(0)
        else:
            self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
            self.b = _vec(self.b if self.b is not None else np.zeros(0),
                          size=self.A.shape[0], name="b")

    @property
    def dim(self):
        return self.g.size


@dataclass
class IqQp:
    """An EqQp plus inequality rows Gz <= l. Feasibility is not assumed."""

    eq: EqQp
    G: np.ndarray
    l: np.ndarray

    def __post_init__(self):
        n = self.eq.dim
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.l = _vec(self.l, size=self.G.shape[0], name="l")


@dataclass
class QpResult:
    """Primal/dual solution of a QP.

    nu is zero on inactive rows; ``active_rows`` is the working set the
    solver ended on (rows pinned to equality). ``iterations`` counts
    active-set iterations (0 for pure equality solves).
    """

    z: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    active_rows: np.ndarray
    status: str
    iterations: int = 0
    metadata: dict = field(default_factory=dict)


def _reduce_equalities(A, b, rtol=1e-10):
    """Drop dependent equality rows; error if the dropped rows conflict.

    Returns (A_red, b_red, kept_indices, dropped_indices).
    """
    e, n = A.shape
    if e == 0:
        return A, b, np.arange(0), np.arange(0)
    _, R, piv = qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        rank = 0
    else:
        rank = int(np.count_nonzero(diag > rtol * max(e, n) * diag[0]))
    if rank == e:
        return A, b, np.arange(e), np.arange(0)
    kept = np.sort(piv[:rank])
    dropped = np.sort(piv[rank:])
    if rank == 0:
        x0 = np.zeros(n)
    else:
        x0 = np.linalg.lstsq(A[kept], b[kept], rcond=None)[0]
    resid = A[dropped] @ x0 - b[dropped]
    if np.abs(resid).max(initial=0.0) > 1e-8 * (1.0 + np.abs(b).max(initial=0.0)):
        raise InconsistentConstraints(
            f"{dropped.size} dependent equality rows with conflicting right-hand sides")
    return A[kept], b[kept], kept, dropped


class KktFactorization:
    """LU factorization of [[H, A'], [A, 0]], reusable across right-hand sides.

    The factorization is immutable after construction; ``rhs_solves`` counts
    how many right-hand-side columns it has been applied to.
    """

    def __init__(self, H, A, cond_threshold=COND_THRESHOLD):
        n = H.shape[0]
        e = A.shape[0]
        K = np.zeros((n + e, n + e))
        K[:n, :n] = H
        if e:
            K[:n, n:] = A.T
            K[n:, :n] = A
        anorm = np.abs(K).sum(axis=0).max(initial=0.0)
        lu, piv, info = lapack.dgetrf(K)
        if info > 0:
            raise SingularKkt("KKT matrix is exactly singular")
        rcond, _ = lapack.dgecon(lu, anorm, norm="1")
        if not np.isfinite(rcond) or rcond < 1.0 / cond_threshold:
            raise SingularKkt(
                f"KKT condition estimate {1.0 / max(rcond, 1e-300):.2e} exceeds threshold")
        self._lu = lu
        self._piv = piv
        self.n = n
        self.e = e
        self.rcond = rcond
        self.rhs_solves = 0

    def solve(self, g, b):
        """Solve for one right-hand side (-g, b); returns (z, lam)."""
        rhs = np.concatenate([-np.asarray(g, dtype=float), np.asarray(b, dtype=float)])
        sol, info = lapack.dgetrs(self._lu, self._piv, rhs)
        if info != 0:
            raise SingularKkt("KKT back-substitution failed")
        self.rhs_solves += 1
        return sol[: self.n], sol[self.n:]

    def solve_many(self, G_cols, B_cols):
        """Batched solve: columns of (-G_cols, B_cols); returns (Z, Lam)."""
        rhs = np.vstack([-np.asarray(G_cols, dtype=float),
                         np.asarray(B_cols, dtype=float)])
        sol, info = lapack.dgetrs(self._lu, self._piv, rhs)
        if info != 0:
            raise SingularKkt("KKT back-substitution failed")
        self.rhs_solves += rhs.shape[1]
        return sol[: self.n], sol[self.n:]


def solve_eq_qp(problem: EqQp, cond_threshold=COND_THRESHOLD,
                assume_full_rank=False) -> QpResult:
    """Solve an equality-constrained QP through one KKT factorization.

    ``assume_full_rank`` skips the rank-revealing row reduction for callers
    whose construction guarantees independent equality rows.
    """
    if assume_full_rank:
        fact = KktFactorization(problem.H, problem.A, cond_threshold)
        z, lam = fact.solve(problem.g, problem.b)
        dropped = 0
    else:
        A_r, b_r, kept, drop = _reduce_equalities(problem.A, problem.b)
        fact = KktFactorization(problem.H, A_r, cond_threshold)
        z, lam_r = fact.solve(problem.g, b_r)
        lam = np.zeros(problem.A.shape[0])
        lam[kept] = lam_r
        dropped = int(drop.size)
    meta = {"path": "eq", "rcond": fact.rcond, "dropped_eq_rows": dropped}
    return QpResult(z=z, lam=lam, nu=np.zeros(0), active_rows=np.zeros(0, dtype=int),
                    status="optimal", iterations=0, metadata=meta)


def kkt_residuals(problem, result):
    """Stationarity / feasibility / complementarity residuals of a result.

    Accepts an EqQp or IqQp. Returns a dict of infinity norms.
    """
    if isinstance(problem, IqQp):
        eq, G, l = problem.eq, problem.G, problem.l
    else:
        eq, G, l = problem, np.zeros((0, problem.dim)), np.zeros(0)
    z, lam, nu = result.z, result.lam, result.nu
    if nu.size == 0 and G.shape[0] > 0:
        nu = np.zeros(G.shape[0])
    stat = eq.H @ z + eq.g
    if eq.A.shape[0]:
        stat = stat + eq.A.T @ lam
    if G.shape[0]:
        stat = stat + G.T @ nu
    out = {"stationarity": np.abs(stat).max(initial=0.0)}
    out["eq_feasibility"] = np.abs(eq.A @ z - eq.b).max(initial=0.0) if eq.A.shape[0] else 0.0
    if G.shape[0]:
        slack = l - G @ z
        out["iq_feasibility"] = max(0.0, (-slack).max(initial=0.0))
        out["complementarity"] = np.abs(nu * slack).max(initial=0.0)
        out["dual_feasibility"] = max(0.0, (-nu).max(initial=0.0))
    else:
        out["iq_feasibility"] = 0.0
        out["complementarity"] = 0.0
        out["dual_feasibility"] = 0.0
    return out


def _null_space_basis(A, n):
    if A.shape[0] == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    tol = max(A.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.count_nonzero(s > tol))
    return vt[rank:].T


def _feasibility_probe(A, b, G, l):
    """LP feasibility check; returns a feasible point or None.

    Only used when the active-set loop stalls, never on the nominal path.
    """
    n = G.shape[1]
    res = linprog(c=np.zeros(n), A_ub=G, b_ub=l,
                  A_eq=A if A.shape[0] else None,
                  b_eq=b if A.shape[0] else None,
                  bounds=[(None, None)] * n, method="highs")
    if res.status == 2:
        return None
    if res.success:
        return np.asarray(res.x, dtype=float)
    return None


def solve_iq_qp(problem: IqQp, max_iter=None, warm_start=None,
                cond_threshold=COND_THRESHOLD, check_reduced_hessian=True,
                assume_full_rank=False) -> QpResult:
    """Primal active-set solve of an inequality-constrained QP.

    Requires H positive definite on the null space of A (checked unless
    ``check_reduced_hessian`` is False; callers solving many problems with
    one validated structure may skip the check). ``warm_start`` is an
    iterable of inequality rows used as the initial working set.
    ``assume_full_rank`` skips the equality-row reduction for callers whose
    construction guarantees independent rows. With zero inequality rows the
    call is forwarded to ``solve_eq_qp`` unchanged.
    """
    eq = problem.eq
    G, l = problem.G, problem.l
    q = G.shape[0]
    if q == 0:
        return solve_eq_qp(eq, cond_threshold, assume_full_rank=assume_full_rank)
    n = eq.dim
    if max_iter is None:
        max_iter = 20 * (n + q) + 100

    if assume_full_rank:
        A_r, b_r = eq.A, eq.b
        kept_eq = np.arange(eq.A.shape[0])
        dropped = np.arange(0)
    else:
        A_r, b_r, kept_eq, dropped = _reduce_equalities(eq.A, eq.b)
    if check_reduced_hessian:
        Z = _null_space_basis(A_r, n)
        Hr = Z.T @ eq.H @ Z
        try:
            np.linalg.cholesky(Hr + np.eye(Hr.shape[0]) * 0.0)
        except np.linalg.LinAlgError:
            return QpResult(z=np.full(n, np.nan), lam=np.zeros(A_r.shape[0]),
                            nu=np.zeros(q), active_rows=np.zeros(0, dtype=int),
                            status="unbounded",
                            metadata={"reason": "reduced Hessian not positive definite"})

    def eqp(work):
        if work:
            rows = np.fromiter(work, dtype=int)
            Aw = np.vstack([A_r, G[rows]])
            bw = np.concatenate([b_r, l[rows]])
        else:
            Aw, bw = A_r, b_r
        fact = KktFactorization(eq.H, Aw, cond_threshold)
        zz, mult = fact.solve(eq.g, bw)
        ne = A_r.shape[0]
        return zz, mult[:ne], mult[ne:]

    def objective(zz):
        return 0.5 * zz @ eq.H @ zz + eq.g @ zz

    work: list[int] = []
    warm_rows = [int(i) for i in warm_start] if warm_start is not None else []
    if warm_rows:
        base_rank = np.linalg.matrix_rank(A_r) if A_r.shape[0] else 0
        for idx in warm_rows:
            if idx < 0 or idx >= q or idx in work:
                continue
            rows = work + [idx]
            stacked = np.vstack([A_r, G[rows]])
            if np.linalg.matrix_rank(stacked) == base_rank + len(rows):
                work.append(idx)

    meta = {"path": "active_set", "bland_fallback": False,
            "dropped_eq_rows": int(dropped.size), "restarts": 0}
    z = None
    lam_cur = np.zeros(A_r.shape[0])
    bland = False
    stall = 0
    best_obj = np.inf
    restarted = False
    iterations = 0

    while iterations < max_iter:
        iterations += 1
        try:
            z_eqp, lam_w, nu_w = eqp(work)
        except SingularKkt:
            # Dependent working set can only arise from a warm start or a
            # repair add; drop the newest row and classify feasibility.
            if work:
                work.pop()
            probe = _feasibility_probe(A_r, b_r, G, l)
            if probe is None:
                return QpResult(z=np.full(n, np.nan), lam=np.zeros(eq.A.shape[0]),
                                nu=np.zeros(q), active_rows=np.zeros(0, dtype=int),
                                status="infeasible", iterations=iterations, metadata=meta)
            if restarted:
                break
            restarted = True
            meta["restarts"] += 1
            z, work = probe, []
            continue

        if z is None:
            z = z_eqp
        p = z_eqp - z
        step = np.abs(p).max(initial=0.0)

        if step <= 1e-12 * (1.0 + np.abs(z).max(initial=0.0)):
            z = z_eqp
            lam_cur = lam_w
            # Dual check: drop a row with a negative multiplier.
            neg = np.flatnonzero(nu_w < -DUAL_TOL)
            if neg.size:
                if bland:
                    pos = min(neg, key=lambda k: work[k])
                else:
                    pos = neg[np.argmin(nu_w[neg])]
                work.pop(int(pos))
                continue
            # Primal check: repair any violated row by pinning it.
            viol = G @ z - l
            viol[list(work)] = 0.0
            bad = np.flatnonzero(viol > FEAS_TOL)
            if bad.size:
                add = int(bad[0]) if bland else int(bad[np.argmax(viol[bad])])
                work.append(add)
                continue
            nu = np.zeros(q)
            rows = np.fromiter(work, dtype=int) if work else np.zeros(0, dtype=int)
            if rows.size:
                nu[rows] = nu_w
            lam = np.zeros(eq.A.shape[0])
            lam[kept_eq] = lam_cur
            order = np.sort(rows)
            return QpResult(z=z, lam=lam, nu=nu, active_rows=order,
                            status="optimal", iterations=iterations, metadata=meta)

        # Ratio test toward the EQP optimum over rows not in the working set.
        gp = G @ p
        slack = l - G @ z
        mask = np.ones(q, dtype=bool)
        if work:
            mask[list(work)] = False
        mask &= gp > 1e-12
        alpha = 1.0
        block = -1
        if mask.any():
            idx = np.flatnonzero(mask)
            ratios = slack[idx] / gp[idx]
            if bland:
                hit = idx[ratios <= min(ratios.min(), 1.0) + 1e-12]
                j = int(hit.min()) if hit.size and ratios.min() < 1.0 else -1
                amin = ratios.min()
            else:
                k = int(np.argmin(ratios))
                j, amin = int(idx[k]), ratios[k]
            if amin < 1.0:
                alpha, block = max(amin, 0.0), j
        z = z + alpha * p
        if block >= 0:
            work.append(block)

        obj = objective(z)
        if obj < best_obj - 1e-12 * (1.0 + abs(best_obj)):
            best_obj = obj
            stall = 0
        else:
            stall += 1
            if stall > 3 * n and not bland:
                bland = True
                meta["bland_fallback"] = True

    # Iteration budget exhausted: classify before giving up.
    probe = _feasibility_probe(A_r, b_r, G, l)
    status = "infeasible" if probe is None else "max_iter"
    zout = np.full(n, np.nan) if probe is None else z
    return QpResult(z=zout, lam=np.zeros(eq.A.shape[0]), nu=np.zeros(q),
                    active_rows=np.zeros(0, dtype=int), status=status,
                    iterations=iterations, metadata=meta)
