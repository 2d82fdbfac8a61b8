"""Analytical gradients of the first optimal control action.

The derivative of u*_1 with respect to a cost entry or the initial state is
read off an auxiliary equality-constrained problem: same stage cost matrices
and dynamics, zero dynamics residuals, inequality rows that were active at
the optimum pinned to zero, and a right-hand side (c_tilde, x_init_tilde)
selected by the target:

    target            c_tilde at stage t                     x_init_tilde
    C[t][i, j]        tau*_t[j] * e_i                        0
    c[t][i]           e_i                                    0
    x_init[i]         0                                      e_i
    Q[t][i, j]        ((x*_t - xref_t)[j] * e_i, 0)          0
    R[t][i, j]        (0, (u*_t - uref_t)[j] * e_i)          0

All other stages carry c_tilde = 0. Because the auxiliary problem has
equality constraints only, each target is one extra right-hand side of a
single KKT factorization (``GradientWorkspace``); a gradient never runs
active-set iterations.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import lmpc as _lmpc
from .lmpc import LmpcProblem, LmpcSolution, TOL_ACT, extract_active_sets, flatten, solve_lmpc
from .qp import KktFactorization, SingularKkt, _reduce_equalities, solve_iq_qp

STALE_TOL = 1e-6        # KKT residual beyond which a solution is stale
WEAK_NU_TOL = 1e-8      # pinned rows with |nu| below this are weakly active

VALID_KINDS = ("C", "c", "Q", "R", "x_init")


class StaleSolution(Exception):
    """The supplied solution does not satisfy the problem's KKT conditions."""


@dataclass(frozen=True)
class GradTarget:
    """One scalar parameter of the problem to differentiate u*_1 against.

    Stage ``t`` and indices ``i``, ``j`` are 0-based. ``symmetric_qr``
    selects the symmetric-matrix differential for Q/R entries (half the sum
    of the (i, j) and (j, i) single-entry recipes; identical on diagonals).
    """

    kind: str
    t: int = 0
    i: int = 0
    j: int = 0
    symmetric_qr: bool = False

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")

    @classmethod
    def C_entry(cls, t, i, j):
        return cls(kind="C", t=t, i=i, j=j)

    @classmethod
    def c_entry(cls, t, i):
        return cls(kind="c", t=t, i=i)

    @classmethod
    def Q_entry(cls, t, i, j, symmetric=False):
        return cls(kind="Q", t=t, i=i, j=j, symmetric_qr=symmetric)

    @classmethod
    def R_entry(cls, t, i, j, symmetric=False):
        return cls(kind="R", t=t, i=i, j=j, symmetric_qr=symmetric)

    @classmethod
    def x_init_entry(cls, i):
        return cls(kind="x_init", i=i)

    def check_bounds(self, problem: LmpcProblem):
        n, m, nm = problem.n, problem.m, problem.n + problem.m
        lims = {"C": (nm, nm), "c": (nm, 0), "Q": (n, n), "R": (m, m), "x_init": (n, 0)}
        di, dj = lims[self.kind]
        if not 0 <= self.i < di or (dj and not 0 <= self.j < dj):
            raise IndexError(f"target indices {(self.i, self.j)} out of range for {self.kind}")
        if self.kind != "x_init" and not 0 <= self.t < problem.T:
            raise IndexError(f"target stage {self.t} out of range")


@dataclass
class AuxCoefficients:
    """Right-hand side of the auxiliary problem: per-stage c_tilde and x_init_tilde."""

    c_tilde: np.ndarray
    x_init_tilde: np.ndarray


def aux_coefficients(problem: LmpcProblem, solution: LmpcSolution,
                     target: GradTarget) -> AuxCoefficients:
    """Coefficient recipe for one target (see the table in the module docstring)."""
    target.check_bounds(problem)
    n, m, nm = problem.n, problem.m, problem.n + problem.m
    c_tilde = np.zeros((problem.T, nm))
    x_tilde = np.zeros(n)
    t, i, j = target.t, target.i, target.j
    if target.kind == "x_init":
        x_tilde[i] = 1.0
    elif target.kind == "c":
        c_tilde[t, i] = 1.0
    elif target.kind == "C":
        c_tilde[t, i] = solution.tau[t, j]
    else:
        if problem.tau_ref is None:
            raise ValueError("Q/R targets need a problem built with a tracking reference")
        err = solution.tau[t] - problem.tau_ref[t]
        off = 0 if target.kind == "Q" else n
        if target.symmetric_qr:
            c_tilde[t, off + i] += 0.5 * err[off + j]
            c_tilde[t, off + j] += 0.5 * err[off + i]
        else:
            c_tilde[t, off + i] = err[off + j]
    return AuxCoefficients(c_tilde=c_tilde, x_init_tilde=x_tilde)


def _check_fresh(problem, solution, check_stale):
    if not check_stale:
        return
    resid = solution.kkt_residual(problem)
    scale = 1.0 + np.abs(problem.c).max(initial=0.0)
    if resid > STALE_TOL * scale:
        raise StaleSolution(f"KKT residual {resid:.2e} exceeds {STALE_TOL * scale:.2e}")


def build_aux_problem(problem: LmpcProblem, solution: LmpcSolution,
                      target: GradTarget, tol_act=TOL_ACT,
                      check_stale=True, active=None) -> LmpcProblem:
    """Auxiliary problem whose first optimal control equals the target gradient.

    Same C and F; zero dynamics residuals; active inequality rows pinned to
    equality with zero right-hand side; (c_tilde, x_init_tilde) per target.
    ``active`` overrides the residual-based active sets when already known.
    """
    _check_fresh(problem, solution, check_stale)
    coeff = aux_coefficients(problem, solution, target)
    if active is None:
        active = extract_active_sets(problem, solution.tau, tol_act)
    stage_eq = [problem.G[t][rows] for t, rows in enumerate(active)]
    stage_eq_rhs = [np.zeros(rows.size) for rows in active]
    return LmpcProblem(
        T=problem.T, n=problem.n, m=problem.m,
        C=problem.C, c=coeff.c_tilde, F=problem.F,
        f=np.zeros_like(problem.f),
        G=np.zeros((problem.T, 0, problem.n + problem.m)),
        l=np.zeros((problem.T, 0)),
        x_init=coeff.x_init_tilde,
        stage_eq=stage_eq, stage_eq_rhs=stage_eq_rhs)


@dataclass
class GradResult:
    """du1 = the gradient of u*_1; dtau = the full auxiliary trajectory,
    which equals the derivative of the whole optimal trajectory."""

    du1: np.ndarray
    dtau: np.ndarray
    weakly_active: bool = False
    dropped_rows: int = 0


class GradientWorkspace:
    """One KKT factorization shared by every gradient target of a solution.

    The auxiliary KKT matrix depends only on (C, F, active sets), not on the
    target, so M targets cost one factorization plus M right-hand sides.
    ``stats`` records the factorization and right-hand-side counts for
    instrumentation.
    """

    def __init__(self, problem: LmpcProblem, solution: LmpcSolution,
                 tol_act=TOL_ACT, check_stale=True):
        _check_fresh(problem, solution, check_stale)
        self.problem = problem
        self.solution = solution
        active = extract_active_sets(problem, solution.tau, tol_act)
        base = build_aux_problem(problem, solution,
                                 GradTarget.c_entry(0, 0), tol_act=tol_act,
                                 check_stale=False, active=active)
        base.c = np.zeros_like(base.c)
        qp_prob = flatten(base)
        self._A_full = qp_prob.eq.A
        if sum(rows.size for rows in active) == 0:
            A_r = qp_prob.eq.A
            self._kept = np.arange(A_r.shape[0])
            dropped = np.arange(0)
        else:
            A_r, _, self._kept, dropped = _reduce_equalities(
                qp_prob.eq.A, np.zeros(qp_prob.eq.A.shape[0]))
        self._fact = KktFactorization(qp_prob.eq.H, A_r)
        self.dropped_rows = int(dropped.size)
        self.weakly_active = any(
            rows.size and np.abs(solution.nu[t][rows]).min() <= WEAK_NU_TOL
            for t, rows in enumerate(active))
        self.T = problem.T
        self.n, self.m = problem.n, problem.m
        self.N = self.T * (self.n + self.m)

    @property
    def stats(self):
        return {"factorizations": 1, "rhs_solves": self._fact.rhs_solves,
                "active_set_iterations": 0}

    def solve_columns(self, c_cols, x_cols):
        """Solve the auxiliary KKT for a batch of targets.

        c_cols: (T*(n+m), k) stacked c_tilde columns; x_cols: (n, k)
        x_init_tilde columns. Returns dtau of shape (k, T, n+m).
        """
        k = c_cols.shape[1]
        b_full = np.zeros((self._A_full.shape[0], k))
        b_full[: self.n] = x_cols
        b_red = b_full[self._kept]
        z, _ = self._fact.solve_many(c_cols, b_red)
        resid = self._A_full @ z - b_full
        if np.abs(resid).max(initial=0.0) > 1e-7:
            raise SingularKkt(
                "pinned active rows are inconsistent with the requested perturbation")
        return np.moveaxis(z.reshape(self.T, self.n + self.m, k), 2, 0)

    def gradient(self, target: GradTarget) -> GradResult:
        coeff = aux_coefficients(self.problem, self.solution, target)
        dtau = self.solve_columns(coeff.c_tilde.reshape(-1, 1),
                                  coeff.x_init_tilde.reshape(-1, 1))[0]
        return GradResult(du1=dtau[0, self.n:], dtau=dtau,
                          weakly_active=self.weakly_active,
                          dropped_rows=self.dropped_rows)

    def u1_state_jacobian(self):
        """d u*_1 / d x_init, shape (m, n): one batched solve."""
        n = self.n
        c_cols = np.zeros((self.N, n))
        x_cols = np.eye(n)
        dtau = self.solve_columns(c_cols, x_cols)
        return dtau[:, 0, n:].T


def solve_gradient(problem: LmpcProblem, solution: LmpcSolution,
                   target: GradTarget, tol_act=TOL_ACT,
                   check_stale=True) -> GradResult:
    """Single-target gradient through the auxiliary problem.

    The flattened auxiliary problem has no inequality rows, so the solve
    dispatches to the pure equality path (zero active-set iterations).
    """
    aux = build_aux_problem(problem, solution, target, tol_act, check_stale)
    qp_prob = flatten(aux)
    res = solve_iq_qp(qp_prob)
    if res.metadata.get("path") != "eq" or res.iterations != 0:
        raise AssertionError("auxiliary problem took the inequality path")
    nm = problem.n + problem.m
    dtau = res.z.reshape(problem.T, nm)
    active = extract_active_sets(problem, solution.tau, tol_act)
    weak = any(rows.size and np.abs(solution.nu[t][rows]).min() <= WEAK_NU_TOL
               for t, rows in enumerate(active))
    return GradResult(du1=dtau[0, problem.n:], dtau=dtau, weakly_active=weak,
                      dropped_rows=int(res.metadata.get("dropped_eq_rows", 0)))


def gradient_map(problem, solution, targets, tol_act=TOL_ACT, max_workers=None):
    """Gradients for many targets off one shared factorization.

    Targets are independent, read-only work items; with max_workers > 1 (or
    the DIFFTUNE_THREADS environment variable) they are mapped over a thread
    pool.
    """
    ws = GradientWorkspace(problem, solution, tol_act)
    if max_workers is None:
        max_workers = int(os.environ.get("DIFFTUNE_THREADS", "1") or "1")
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(ws.gradient, targets)), ws
    return [ws.gradient(t) for t in targets], ws


def tracking_diag_columns(problem: LmpcProblem, solution: LmpcSolution):
    """c_tilde columns for the shared diagonal (Q, R) parameters.

    With time-invariant Q and R, d u*_1 / d Q[i, i] sums the per-stage
    single-entry recipes; by linearity of the auxiliary problem that is one
    right-hand side whose stage-t block carries the tracking error entry.
    Returns an (T*(n+m), n+m) column matrix ordered (q_1..q_n, r_1..r_m).
    """
    if problem.tau_ref is None:
        raise ValueError("tracking_diag_columns needs a problem with tau_ref")
    n, m = problem.n, problem.m
    nm = n + m
    err = solution.tau - problem.tau_ref
    cols = np.zeros((problem.T * nm, nm))
    for t in range(problem.T):
        blk = slice(t * nm, (t + 1) * nm)
        cols[blk, :][np.arange(nm), np.arange(nm)] = err[t]
    return cols


def apply_target_perturbation(problem: LmpcProblem, target: GradTarget,
                              delta: float) -> LmpcProblem:
    """Problem with the target parameter moved by delta.

    Matrix entries with i != j are perturbed as the symmetric pair
    (i, j) + (j, i), keeping the stage cost symmetric as the problem
    contract requires; Q/R perturbations also rebuild the linear cost
    c_t = -C_t tau_ref_t that the tracking parametrization couples to.
    """
    target.check_bounds(problem)
    t, i, j = target.t, target.i, target.j
    C = problem.C.copy()
    c = problem.c.copy()
    x_init = problem.x_init.copy()
    if target.kind == "x_init":
        x_init[i] += delta
    elif target.kind == "c":
        c[t, i] += delta
    elif target.kind == "C":
        C[t, i, j] += delta
        if i != j:
            C[t, j, i] += delta
    else:
        off = 0 if target.kind == "Q" else problem.n
        C[t, off + i, off + j] += delta
        if i != j:
            C[t, off + j, off + i] += delta
        c[t] = -C[t] @ problem.tau_ref[t]
    return replace(problem, C=C, c=c, x_init=x_init,
                   G=problem.G, l=problem.l)


def fd_gradient(problem: LmpcProblem, target: GradTarget, h=1e-5,
                warm_active=None) -> np.ndarray:
    """Central-difference gradient (u*_1(theta+h) - u*_1(theta-h)) / (2h).

    Re-solves the full problem at both perturbations, so it is the
    independent oracle for the auxiliary-problem gradients. For matrix
    entries with i != j the perturbation is the symmetric pair; compare
    against the sum of the two single-entry analytic gradients (or twice
    the symmetric-recipe gradient). Unreliable when the perturbation flips
    an active set.
    """
    plus = solve_lmpc(apply_target_perturbation(problem, target, +h),
                      warm_active=warm_active, validate=False)
    minus = solve_lmpc(apply_target_perturbation(problem, target, -h),
                       warm_active=warm_active, validate=False)
    return (plus.u1 - minus.u1) / (2.0 * h)


def constrain_operator_jacobian(G, l, u, tol_act=TOL_ACT):
    """Jacobian of the projection u -> argmin ||u - uhat|| s.t. G uhat <= l.

    The projection is the T = 1, state-free special case of the MPC
    problem, so its Jacobian comes from the same auxiliary construction:
    identity when nothing is active, and annihilating the normal directions
    of active rows otherwise.
    """
    u = np.asarray(u, dtype=float).ravel()
    m = u.size
    G = np.asarray(G, dtype=float).reshape(-1, m)
    l = np.asarray(l, dtype=float).ravel()
    from .qp import EqQp, IqQp
    res = solve_iq_qp(IqQp(eq=EqQp(H=np.eye(m), g=-u), G=G, l=l))
    if res.status == "infeasible":
        raise _lmpc.InfeasibleProblem("projection constraint set is empty")
    if res.status != "optimal":
        raise _lmpc.SolverFailure(f"projection solve ended with '{res.status}'")
    active = np.flatnonzero(np.abs(G @ res.z - l) <= tol_act) if G.shape[0] else np.zeros(0, int)
    if active.size == 0:
        return np.eye(m)
    A_r, _, _, _ = _reduce_equalities(G[active], np.zeros(active.size))
    fact = KktFactorization(np.eye(m), A_r)
    cols, _ = fact.solve_many(-np.eye(m), np.zeros((A_r.shape[0], m)))
    return cols
