"""Linear MPC with stagewise quadratic cost and linear inequality constraints.

A problem over composite stage variables tau_t = (x_t, u_t), t = 1..T:

    minimize    sum_t 1/2 tau_t' C_t tau_t + c_t' tau_t
    subject to  x_{t+1} = F_t tau_t + f_t,   x_1 = x_init,
                G_t tau_t <= l_t            (optionally E_t tau_t = e_t)

is condensed into one dense QP over the stacked trajectory and handed to the
``qp`` kernel. Stage index arguments and array layouts are 0-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .qp import EqQp, IqQp, solve_iq_qp

SCHEMA_VERSION = 1
TOL_ACT = 1e-6  # default |G tau - l| threshold for calling a row active


class DimensionMismatch(ValueError):
    """Stage arrays with mutually inconsistent shapes."""


class InfeasibleProblem(Exception):
    """No trajectory from x_init satisfies the constraints."""


class SolverFailure(Exception):
    """The underlying QP solve did not return an optimum."""


def _stack(arr, shape, name):
    a = np.asarray(arr, dtype=float)
    if a.shape != shape:
        raise DimensionMismatch(f"{name} has shape {a.shape}, expected {shape}")
    return a


@dataclass
class LmpcProblem:
    """Stage data of the linear MPC problem above.

    All stage arrays have length T; the dynamics entries F[T-1], f[T-1] are
    carried for uniformity but unused (there is no stage T+1). ``stage_eq``
    holds optional per-stage equality rows (used by the auxiliary gradient
    problems, where active inequality rows are pinned to equality).
    ``tau_ref`` records the tracking reference when the cost was built from
    a (Q, R) parametrization; it is required by Q/R gradient targets.
    """

    T: int
    n: int
    m: int
    C: np.ndarray
    c: np.ndarray
    F: np.ndarray
    f: np.ndarray
    G: np.ndarray
    l: np.ndarray
    x_init: np.ndarray
    tau_ref: np.ndarray | None = None
    stage_eq: list[np.ndarray] | None = None
    stage_eq_rhs: list[np.ndarray] | None = None

    def __post_init__(self):
        T, n, m = self.T, self.n, self.m
        nm = n + m
        self.C = _stack(self.C, (T, nm, nm), "C")
        self.c = _stack(self.c, (T, nm), "c")
        self.F = _stack(self.F, (T, n, nm), "F")
        self.f = _stack(self.f, (T, n), "f")
        self.G = np.asarray(self.G, dtype=float).reshape(T, -1, nm)
        self.l = np.asarray(self.l, dtype=float).reshape(T, -1)
        if self.l.shape[1] != self.G.shape[1]:
            raise DimensionMismatch("G and l disagree on the number of rows")
        self.x_init = _stack(self.x_init, (n,), "x_init")
        if self.tau_ref is not None:
            self.tau_ref = _stack(self.tau_ref, (T, nm), "tau_ref")
        asym = np.abs(self.C - np.transpose(self.C, (0, 2, 1))).max(initial=0.0)
        if asym > 1e-12 * (1.0 + np.abs(self.C).max(initial=0.0)):
            raise DimensionMismatch("stage cost matrices must be symmetric")

    @property
    def n_ineq(self):
        return self.G.shape[1]

    def validate(self):
        """Check PSD stage costs with positive definite control blocks."""
        n = self.n
        for t in range(self.T):
            w = np.linalg.eigvalsh(self.C[t])
            if w.min(initial=0.0) < -1e-10 * (1.0 + abs(w.max(initial=0.0))):
                raise ValueError(f"stage {t} cost matrix is not positive semidefinite")
            try:
                np.linalg.cholesky(self.C[t][n:, n:])
            except np.linalg.LinAlgError:
                raise ValueError(f"stage {t} control-block cost is not positive definite")
        return self


@dataclass
class LmpcSolution:
    """Optimal trajectory, multipliers and per-stage active sets.

    ``costate[t]`` is the multiplier of the dynamics row producing x_{t+1}
    (costate[0] multiplies the initial-condition row x_1 = x_init and is
    mainly of internal interest). ``nu`` are the inequality multipliers,
    zero on inactive rows.
    """

    tau: np.ndarray
    costate: np.ndarray
    nu: np.ndarray
    active: list[np.ndarray]
    objective: float
    n: int
    m: int
    qp_iterations: int = 0
    qp_metadata: dict = field(default_factory=dict)

    @property
    def x(self):
        return self.tau[:, : self.n]

    @property
    def u(self):
        return self.tau[:, self.n:]

    @property
    def u1(self):
        """First optimal control action (the one an MPC loop applies)."""
        return self.tau[0, self.n:]

    def kkt_residual(self, problem: LmpcProblem):
        """Infinity-norm stationarity residual of this solution for `problem`."""
        if problem.stage_eq is not None:
            raise ValueError("kkt_residual supports problems without pinned stage rows")
        qp_prob = flatten(problem)
        z = self.tau.reshape(-1)
        lam_qp = -self.costate.reshape(-1)
        nu = self.nu.reshape(-1) if self.nu.size else np.zeros(0)
        stat = qp_prob.eq.H @ z + qp_prob.eq.g + qp_prob.eq.A.T @ lam_qp
        if nu.size:
            stat = stat + qp_prob.G.T @ nu
        return np.abs(stat).max(initial=0.0)


def tracking_problem(T, F, f, Q, R, x_ref, u_ref, x_init, G=None, l=None):
    """Build an LmpcProblem with cost 1/2 (x-xref)'Q(x-xref) + 1/2 (u-uref)'R(u-uref).

    F, f may be a single (n, n+m) matrix / (n,) vector (time-invariant) or
    stage arrays. G, l are per-stage inequality data shared across stages.
    Records tau_ref so Q/R gradient targets can be formed later.
    """
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    n, m = Q.shape[0], R.shape[0]
    nm = n + m
    x_ref = np.asarray(x_ref, dtype=float).reshape(T, n)
    u_ref = np.asarray(u_ref, dtype=float).reshape(T, m)
    F = np.asarray(F, dtype=float)
    if F.ndim == 2:
        F = np.repeat(F[None], T, axis=0)
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = np.repeat(f[None], T, axis=0)
    Cstage = np.zeros((nm, nm))
    Cstage[:n, :n] = Q
    Cstage[n:, n:] = R
    C = np.repeat(Cstage[None], T, axis=0)
    tau_ref = np.hstack([x_ref, u_ref])
    c = -tau_ref @ Cstage.T
    if G is None:
        G = np.zeros((T, 0, nm))
        l = np.zeros((T, 0))
    else:
        G = np.asarray(G, dtype=float)
        if G.ndim == 2:
            G = np.repeat(G[None], T, axis=0)
        l = np.asarray(l, dtype=float)
        if l.ndim == 1:
            l = np.repeat(l[None], T, axis=0)
    return LmpcProblem(T=T, n=n, m=m, C=C, c=c, F=F, f=f, G=G, l=l,
                       x_init=x_init, tau_ref=tau_ref)


def flatten(problem: LmpcProblem) -> IqQp:
    """Condense the stage problem into one QP over z = (tau_1, ..., tau_T).

    Equality rows: n rows for x_1 = x_init, then n rows per dynamics stage,
    then any pinned stage_eq rows. Inequality rows are stage-major.
    """
    T, n, m = problem.T, problem.n, problem.m
    nm = n + m
    N = T * nm
    H = np.zeros((N, N))
    for t in range(T):
        H[t * nm:(t + 1) * nm, t * nm:(t + 1) * nm] = problem.C[t]
    g = problem.c.reshape(-1)

    extra = 0
    if problem.stage_eq is not None:
        extra = sum(E.shape[0] for E in problem.stage_eq)
    ne = n * T + extra
    A = np.zeros((ne, N))
    b = np.zeros(ne)
    A[:n, :n] = np.eye(n)
    b[:n] = problem.x_init
    for k in range(T - 1):
        r = n * (k + 1)
        A[r:r + n, k * nm:(k + 1) * nm] = -problem.F[k]
        A[r:r + n, (k + 1) * nm:(k + 1) * nm + n] = np.eye(n)
        b[r:r + n] = problem.f[k]
    if extra:
        row = n * T
        rhs = problem.stage_eq_rhs
        for t, E in enumerate(problem.stage_eq):
            k = E.shape[0]
            if k == 0:
                continue
            A[row:row + k, t * nm:(t + 1) * nm] = E
            if rhs is not None and rhs[t] is not None:
                b[row:row + k] = rhs[t]
            row += k

    q = problem.n_ineq
    Gf = np.zeros((T * q, N))
    for t in range(T):
        Gf[t * q:(t + 1) * q, t * nm:(t + 1) * nm] = problem.G[t]
    lf = problem.l.reshape(-1)
    return IqQp(eq=EqQp(H=H, g=g, A=A, b=b), G=Gf, l=lf)


def extract_active_sets(problem: LmpcProblem, tau, tol_act=TOL_ACT):
    """Per-stage index sets of rows with |G_t tau_t - l_t| <= tol_act.

    Activity is decided purely by the constraint residual; weakly active
    rows (zero multiplier) are included. tol_act must be positive to catch
    boundary rows computed in floating point.
    """
    tau = np.asarray(tau, dtype=float)
    if problem.n_ineq == 0:
        empty = np.zeros(0, dtype=int)
        return [empty] * problem.T
    resid = np.abs(np.einsum("tij,tj->ti", problem.G, tau) - problem.l)
    mask = resid <= tol_act
    return [np.flatnonzero(mask[t]) for t in range(problem.T)]


def objective_value(problem: LmpcProblem, tau):
    tau = np.asarray(tau, dtype=float)
    quad = 0.5 * np.einsum("ti,tij,tj->", tau, problem.C, tau)
    return float(quad + np.einsum("ti,ti->", problem.c, tau))


def solution_from_flat(problem, z, lam_qp, nu_flat, qp_iterations=0,
                       qp_metadata=None, tol_act=TOL_ACT):
    """Assemble an LmpcSolution from flattened QP output."""
    T, n, m = problem.T, problem.n, problem.m
    nm = n + m
    tau = z.reshape(T, nm).copy()
    tau[0, :n] = problem.x_init  # pinned by the first equality block; make it exact
    costate = -lam_qp[: n * T].reshape(T, n)
    q = problem.n_ineq
    nu = nu_flat.reshape(T, q) if q else np.zeros((T, 0))
    active = extract_active_sets(problem, tau, tol_act)
    return LmpcSolution(tau=tau, costate=costate, nu=nu, active=active,
                        objective=objective_value(problem, tau), n=n, m=m,
                        qp_iterations=qp_iterations,
                        qp_metadata=dict(qp_metadata or {}))


def solve_lmpc(problem: LmpcProblem, warm_active=None, tol_act=TOL_ACT,
               validate=True, max_iter=None) -> LmpcSolution:
    """Solve the linear MPC problem; returns trajectory, multipliers, active sets.

    ``warm_active`` is a per-stage list of inequality row indices used to
    warm-start the active-set solver (e.g. the previous MPC step's sets).
    """
    qp_prob = flatten(problem)
    warm = None
    if warm_active is not None:
        q = problem.n_ineq
        warm = [t * q + int(j) for t, rows in enumerate(warm_active) for j in rows]
    # The condensed equality rows carry identity blocks on fresh columns, so
    # they are independent by construction unless stage rows were pinned.
    res = solve_iq_qp(qp_prob, max_iter=max_iter, warm_start=warm,
                      check_reduced_hessian=validate,
                      assume_full_rank=problem.stage_eq is None)
    if res.status == "infeasible":
        raise InfeasibleProblem("no trajectory from x_init satisfies the constraints")
    if res.status != "optimal":
        raise SolverFailure(f"QP solve ended with status '{res.status}'")
    return solution_from_flat(problem, res.z, res.lam, res.nu,
                              qp_iterations=res.iterations,
                              qp_metadata=res.metadata, tol_act=tol_act)


def first_infeasible_stage(problem: LmpcProblem):
    """Best-effort diagnosis: first stage whose constraint set is empty.

    Checks each stage polytope {tau : G_t tau <= l_t} in isolation; returns
    the first empty one, or None when stagewise sets are all nonempty (the
    infeasibility then comes from their coupling through the dynamics).
    """
    from scipy.optimize import linprog
    nm = problem.n + problem.m
    for t in range(problem.T):
        if problem.n_ineq == 0:
            continue
        res = linprog(c=np.zeros(nm), A_ub=problem.G[t], b_ub=problem.l[t],
                      bounds=[(None, None)] * nm, method="highs")
        if res.status == 2:
            return t
    return None


# ---------------------------------------------------------------------------
# JSON schema (stage-major arrays, row-major matrices)

def problem_to_dict(problem: LmpcProblem) -> dict:
    d = {
        "schema_version": SCHEMA_VERSION,
        "T": problem.T,
        "n": problem.n,
        "m": problem.m,
        "C": problem.C.tolist(),
        "c": problem.c.tolist(),
        "F": problem.F.tolist(),
        "f": problem.f.tolist(),
        "G": problem.G.tolist(),
        "l": problem.l.tolist(),
        "x_init": problem.x_init.tolist(),
    }
    if problem.tau_ref is not None:
        d["tau_ref"] = problem.tau_ref.tolist()
    return d


def problem_from_dict(d: dict) -> LmpcProblem:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {d.get('schema_version')!r}")
    return LmpcProblem(
        T=int(d["T"]), n=int(d["n"]), m=int(d["m"]),
        C=d["C"], c=d["c"], F=d["F"], f=d["f"], G=d["G"], l=d["l"],
        x_init=d["x_init"], tau_ref=d.get("tau_ref"))


def solution_to_dict(solution: LmpcSolution) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "n": solution.n,
        "m": solution.m,
        "tau": solution.tau.tolist(),
        "costate": solution.costate.tolist(),
        "nu": solution.nu.tolist(),
        "active": [rows.tolist() for rows in solution.active],
        "objective": solution.objective,
    }


def solution_from_dict(d: dict) -> LmpcSolution:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {d.get('schema_version')!r}")
    return LmpcSolution(
        tau=np.asarray(d["tau"], dtype=float),
        costate=np.asarray(d["costate"], dtype=float),
        nu=np.asarray(d["nu"], dtype=float),
        active=[np.asarray(rows, dtype=int) for rows in d["active"]],
        objective=float(d["objective"]), n=int(d["n"]), m=int(d["m"]))


def save_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)
