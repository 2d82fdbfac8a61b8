"""Nonlinear MPC via sequential quadratic programming.

Each iteration Taylor-expands the stage costs to second order and the
dynamics/constraints to first order around the current trajectory, solves
the resulting linear MPC subproblem, and steps to its optimum. At
convergence the final subproblem's solution and multipliers are what the
gradient module differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradients import GradientWorkspace
from .lmpc import InfeasibleProblem, LmpcProblem, LmpcSolution, solve_lmpc

HESS_CLIP = 1e-8  # floor for eigenvalues when a stage Hessian is indefinite


class CallbackFailure(Exception):
    """A user callback raised or returned a wrongly shaped array."""


class SubproblemInfeasible(Exception):
    """A linearized subproblem has an empty feasible set."""


def _spot_check(label, fn, jac, point, tol=1e-5, h=1e-6):
    """Central-difference check of a callback Jacobian at one point."""
    f0 = np.atleast_1d(np.asarray(fn(point), dtype=float))
    J = np.asarray(jac(point), dtype=float).reshape(f0.size, point.size)
    for k in range(point.size):
        dp = point.copy()
        dm = point.copy()
        dp[k] += h
        dm[k] -= h
        col = (np.atleast_1d(fn(dp)) - np.atleast_1d(fn(dm))) / (2 * h)
        err = np.abs(col - J[:, k]).max(initial=0.0)
        if err > tol * (1.0 + np.abs(J[:, k]).max(initial=0.0)):
            raise CallbackFailure(f"{label} Jacobian fails a finite-difference "
                                  f"spot check (err {err:.2e} in column {k})")


@dataclass
class NmpcProblem:
    """Nonlinear MPC data: callbacks with analytic derivatives.

    dynamics(tau) -> next state (n,), dynamics_jac(tau) -> (n, n+m);
    cost(t, tau) -> scalar with cost_grad / cost_hess; optional ineq(tau)
    -> (g,) with ineq_jac -> (g, n+m). Callbacks must be reentrant: solves
    of distinct problems may run concurrently. Jacobians are spot-checked
    against finite differences at a fixed pseudo-random point on
    construction.
    """

    T: int
    n: int
    m: int
    x_init: np.ndarray
    dynamics: callable
    dynamics_jac: callable
    cost: callable
    cost_grad: callable
    cost_hess: callable
    ineq: callable | None = None
    ineq_jac: callable | None = None
    tau_ref: np.ndarray | None = None
    check_jacobians: bool = True

    def __post_init__(self):
        self.x_init = np.asarray(self.x_init, dtype=float).reshape(self.n)
        if self.tau_ref is not None:
            self.tau_ref = np.asarray(self.tau_ref, dtype=float).reshape(self.T, self.n + self.m)
        if (self.ineq is None) != (self.ineq_jac is None):
            raise ValueError("ineq and ineq_jac must be supplied together")
        if self.check_jacobians:
            rng = np.random.default_rng(1234)
            point = rng.standard_normal(self.n + self.m)
            try:
                _spot_check("dynamics", self.dynamics, self.dynamics_jac, point)
                _spot_check("cost(0)", lambda z: self.cost(0, z),
                            lambda z: self.cost_grad(0, z), point)
                _spot_check("cost gradient(0)", lambda z: self.cost_grad(0, z),
                            lambda z: self.cost_hess(0, z), point)
                if self.ineq is not None:
                    _spot_check("inequality", self.ineq, self.ineq_jac, point)
            except CallbackFailure:
                raise
            except Exception as exc:
                raise CallbackFailure(f"callback evaluation failed: {exc}") from exc

    @property
    def n_ineq(self):
        if self.ineq is None:
            return 0
        return np.atleast_1d(self.ineq(np.zeros(self.n + self.m))).size


@dataclass
class SqpOptions:
    tol_step: float = 1e-8      # infinity-norm step tolerance
    tol_kkt: float = 1e-10      # nonlinear KKT residual declaring convergence
    max_iter: int = 50
    max_halvings: int = 10      # step-halving backstop


@dataclass
class SqpState:
    tau: np.ndarray
    iterations: int
    merit: float
    step_norm: float
    converged: bool
    kkt_residual: float
    hessian_clipped: bool = False


@dataclass
class SqpResult:
    """Converged trajectory as the solution of the final linearization.

    ``solution`` and ``problem`` are the consistent (multipliers, active
    sets, stage data) pair the gradient module consumes.
    """

    solution: LmpcSolution
    problem: LmpcProblem
    state: SqpState


def project_psd(Hs, clip=HESS_CLIP):
    """Symmetrize; leave PSD matrices untouched, floor indefinite spectra.

    Returns (matrix, clipped_flag)."""
    Hs = 0.5 * (Hs + Hs.T)
    w, V = np.linalg.eigh(Hs)
    scale = max(abs(w[0]), abs(w[-1]), 1.0)
    if w[0] >= -1e-12 * scale:
        return Hs, False
    w = np.maximum(w, clip)
    return (V * w) @ V.T, True


def _linearize(problem: NmpcProblem, tau_p):
    """Expansion around tau_p; returns (LmpcProblem, hessian_clipped_flag)."""
    T, n, m = problem.T, problem.n, problem.m
    nm = n + m
    tau_p = np.asarray(tau_p, dtype=float).reshape(T, nm)
    q = problem.n_ineq
    C = np.zeros((T, nm, nm))
    c = np.zeros((T, nm))
    F = np.zeros((T, n, nm))
    f = np.zeros((T, n))
    G = np.zeros((T, q, nm))
    l = np.zeros((T, q))
    clipped = False
    t = 0
    try:
        for t in range(T):
            H, clip_t = project_psd(np.asarray(problem.cost_hess(t, tau_p[t]), dtype=float))
            clipped |= clip_t
            C[t] = H
            c[t] = np.asarray(problem.cost_grad(t, tau_p[t]), dtype=float) - H @ tau_p[t]
            Jf = np.asarray(problem.dynamics_jac(tau_p[t]), dtype=float)
            F[t] = Jf
            f[t] = np.asarray(problem.dynamics(tau_p[t]), dtype=float) - Jf @ tau_p[t]
            if q:
                Jg = np.asarray(problem.ineq_jac(tau_p[t]), dtype=float)
                G[t] = Jg
                l[t] = Jg @ tau_p[t] - np.asarray(problem.ineq(tau_p[t]), dtype=float)
    except Exception as exc:
        raise CallbackFailure(f"callback evaluation failed at stage {t}: {exc}") from exc
    out = LmpcProblem(T=T, n=n, m=m, C=C, c=c, F=F, f=f, G=G, l=l,
                      x_init=problem.x_init, tau_ref=problem.tau_ref)
    return out, clipped


def linearize(problem: NmpcProblem, tau_p) -> LmpcProblem:
    """Quadratic/linear expansion of the stage data around tau_p.

    The compensated linear term uses the projected Hessian so the model
    gradient at tau_p stays exact. The expansion is exact (independent of
    tau_p) for affine dynamics with quadratic cost.
    """
    return _linearize(problem, tau_p)[0]


def _true_merit(problem: NmpcProblem, tau):
    cost = sum(float(problem.cost(t, tau[t])) for t in range(problem.T))
    viol = 0.0
    for t in range(problem.T - 1):
        viol = max(viol, np.abs(tau[t + 1, : problem.n]
                                - np.asarray(problem.dynamics(tau[t]))).max(initial=0.0))
    if problem.ineq is not None:
        for t in range(problem.T):
            viol = max(viol, np.asarray(problem.ineq(tau[t])).max(initial=0.0))
    return cost, viol


def nonlinear_kkt_residual(problem: NmpcProblem, tau, solution: LmpcSolution):
    """Stationarity plus feasibility residual of the nonlinear problem.

    Uses the final subproblem's multipliers; only meaningful when tau is
    that subproblem's optimal trajectory.
    """
    T, n = problem.T, problem.n
    lam = solution.costate
    worst = np.abs(tau[0, :n] - problem.x_init).max(initial=0.0)
    for t in range(T):
        r = np.asarray(problem.cost_grad(t, tau[t]), dtype=float).copy()
        r[:n] -= lam[t]
        if t < T - 1:
            r += np.asarray(problem.dynamics_jac(tau[t])).T @ lam[t + 1]
            worst = max(worst, np.abs(tau[t + 1, :n]
                                      - np.asarray(problem.dynamics(tau[t]))).max(initial=0.0))
        if problem.ineq is not None and solution.nu.shape[1]:
            r += np.asarray(problem.ineq_jac(tau[t])).T @ solution.nu[t]
            worst = max(worst, np.asarray(problem.ineq(tau[t])).max(initial=0.0))
        worst = max(worst, np.abs(r).max(initial=0.0))
    return worst


def default_initial_trajectory(problem: NmpcProblem):
    """Zero trajectory with the stage-1 state block set to x_init."""
    tau = np.zeros((problem.T, problem.n + problem.m))
    tau[0, : problem.n] = problem.x_init
    return tau


def solve_nmpc(problem: NmpcProblem, tau_init=None, opts: SqpOptions | None = None,
               warm_active=None) -> SqpResult:
    """SQP loop; returns the final linearization and its solution.

    Full steps with a halving backstop (the step is halved when the true
    objective increases and the constraint violation grows). Convergence is
    declared on a small iterate step or a small nonlinear KKT residual; a
    non-converged run returns the best iterate with converged=False.
    """
    opts = opts or SqpOptions()
    tau = default_initial_trajectory(problem) if tau_init is None \
        else np.asarray(tau_init, dtype=float).reshape(problem.T, problem.n + problem.m).copy()
    tau[0, : problem.n] = problem.x_init
    lin = None
    sol = None
    active = warm_active
    clipped = False
    step = np.inf
    kkt = np.inf
    converged = False
    it = 0
    while it < opts.max_iter:
        it += 1
        lin, clip_it = _linearize(problem, tau)
        clipped |= clip_it
        try:
            sol = solve_lmpc(lin, warm_active=active, validate=(it == 1))
        except InfeasibleProblem as exc:
            raise SubproblemInfeasible(f"iteration {it}: {exc}") from exc
        active = sol.active
        tau_new = sol.tau
        cost_old, viol_old = _true_merit(problem, tau)
        cost_new, viol_new = _true_merit(problem, tau_new)
        halved = 0
        while (cost_new > cost_old + 1e-12 * (1 + abs(cost_old))
               and viol_new > viol_old + 1e-12
               and halved < opts.max_halvings):
            tau_new = 0.5 * (tau_new + tau)
            cost_new, viol_new = _true_merit(problem, tau_new)
            halved += 1
        step = np.abs(tau_new - tau).max(initial=0.0)
        tau = tau_new
        kkt = nonlinear_kkt_residual(problem, tau, sol) if halved == 0 else np.inf
        if step <= opts.tol_step or kkt <= opts.tol_kkt:
            converged = True
            break
    merit, _ = _true_merit(problem, tau)
    state = SqpState(tau=tau, iterations=it, merit=merit, step_norm=step,
                     converged=converged, kkt_residual=kkt, hessian_clipped=clipped)
    return SqpResult(solution=sol, problem=lin, state=state)


def nmpc_gradients(result: SqpResult, targets) -> list:
    """Gradients of u*_1 on the final linearization, one shared factorization."""
    ws = GradientWorkspace(result.problem, result.solution)
    return [ws.gradient(t) for t in targets]


def quadratic_tracking_cost(Q, R, tau_ref):
    """Stage cost 1/2 (tau - ref_t)' diag(Q, R) (tau - ref_t) as callbacks.

    Returns (cost, grad, hess) suitable for NmpcProblem; hess is constant,
    so the SQP subproblem cost is exact.
    """
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    n = Q.shape[0]
    nm = n + R.shape[0]
    C = np.zeros((nm, nm))
    C[:n, :n] = Q
    C[n:, n:] = R
    ref = np.asarray(tau_ref, dtype=float)

    def cost(t, tau):
        e = tau - ref[t]
        return 0.5 * e @ C @ e

    def grad(t, tau):
        return C @ (tau - ref[t])

    def hess(t, tau):
        return C

    return cost, grad, hess
