"""Closed-loop learning of MPC cost matrices.

Rolls the plant out under the MPC controller, propagates the sensitivities
of states and controls with respect to the learnable parameters through the
closed loop,

    du_k/dtheta   = dh/dx * dx_k/dtheta + dh/dtheta
    dx_{k+1}/dtheta = (df/dx + df/du dh/dx) dx_k/dtheta + df/du dh/dtheta

(with dx_0/dtheta = 0, dh/dx and dh/dtheta being the MPC's first-action
Jacobians), assembles the loss gradient by the chain rule, and updates the
parameters by projected gradient descent. Also implements the open-loop
baseline that learns from a single MPC solve's predicted trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gradients import (GradientWorkspace, SingularKkt, tracking_diag_columns)
from .lmpc import (InfeasibleProblem, SolverFailure, TOL_ACT, flatten,
                   solve_lmpc, tracking_problem)
from .nmpc import (CallbackFailure, NmpcProblem, SqpOptions,
                   SubproblemInfeasible, quadratic_tracking_cost, solve_nmpc)
from .qp import KktFactorization


class ControllerFailure(Exception):
    """MPC solve failed at a closed-loop step; carries the step index."""

    def __init__(self, step_index, message, partial_log=None):
        super().__init__(f"controller failed at step {step_index}: {message}")
        self.step_index = step_index
        self.partial_log = partial_log


@dataclass
class QuadCostParams:
    """Learnable diagonals of Q and R, kept inside a box by projection."""

    q_diag: np.ndarray
    r_diag: np.ndarray
    bounds: tuple = (0.01, 1000.0)

    def __post_init__(self):
        lo, hi = self.bounds
        self.q_diag = np.clip(np.asarray(self.q_diag, dtype=float).ravel(), lo, hi)
        self.r_diag = np.clip(np.asarray(self.r_diag, dtype=float).ravel(), lo, hi)

    @property
    def M(self):
        return self.q_diag.size + self.r_diag.size

    def vector(self):
        return np.concatenate([self.q_diag, self.r_diag])

    def with_vector(self, vec):
        n = self.q_diag.size
        return QuadCostParams(q_diag=vec[:n], r_diag=vec[n:], bounds=self.bounds)

    def Q(self):
        return np.diag(self.q_diag)

    def R(self):
        return np.diag(self.r_diag)


@dataclass
class SensitivityState:
    """Running Jacobians of the closed loop against the M learnable scalars.

    dx_dtheta is d x_k / d theta (zero at k = 0); du_dtheta is
    d u_k / d theta for the control applied at the same step.
    """

    dx_dtheta: np.ndarray
    du_dtheta: np.ndarray

    @classmethod
    def zero(cls, n, m, M):
        return cls(dx_dtheta=np.zeros((n, M)), du_dtheta=np.zeros((m, M)))


def propagate_sensitivity(state: SensitivityState, plant_jacobians,
                          controller_jacobians) -> SensitivityState:
    """One step of the forward recursion; pure function of its inputs.

    plant_jacobians = (df/dx, df/du) at (x_k, u_k); controller_jacobians =
    (dh/dx, dh/dtheta) from the MPC gradient solve. Returns the state at
    k+1: dx_dtheta of x_{k+1} paired with du_dtheta of the control u_k that
    produced it.
    """
    Jx, Ju = plant_jacobians
    Hx, Ht = controller_jacobians
    du = Hx @ state.dx_dtheta + Ht
    dx_next = Jx @ state.dx_dtheta + Ju @ du
    return SensitivityState(dx_dtheta=dx_next, du_dtheta=du)


@dataclass
class LossSpec:
    """Quadratic closed-loop loss: sum_k |w*(x_k - ref_k)|^2 + lam sum_k |u_k|^2.

    state_weights masks/weights the state error (typically 1 on position
    components); control_penalty lam >= 0. The gradient callbacks are
    finite-difference checked on construction.
    """

    state_weights: np.ndarray
    control_penalty: float = 0.0

    def __post_init__(self):
        self.state_weights = np.asarray(self.state_weights, dtype=float).ravel()
        rng = np.random.default_rng(99)
        x = rng.standard_normal(self.state_weights.size)
        r = rng.standard_normal(self.state_weights.size)
        h = 1e-6
        for k in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            fd = (self._state_term(xp, r) - self._state_term(xm, r)) / (2 * h)
            if abs(fd - self.state_grad(x, r)[k]) > 1e-5 * (1 + abs(fd)):
                raise ValueError("state gradient disagrees with the loss")

    def _state_term(self, x, ref):
        e = self.state_weights * (x - ref)
        return float(e @ (x - ref))

    def state_grad(self, x, ref):
        return 2.0 * self.state_weights * (x - ref)

    def control_grad(self, u):
        return 2.0 * self.control_penalty * u

    def value(self, states, refs, controls):
        e = (states[1:] - refs[1:])
        v = float(np.einsum("ki,i,ki->", e, self.state_weights, e))
        if self.control_penalty:
            v += self.control_penalty * float(np.sum(controls ** 2))
        return v

    def rmse(self, states, refs):
        """Root-mean-square weighted tracking error over k = 1..N."""
        e = (states[1:] - refs[1:]) * np.sqrt(np.maximum(self.state_weights, 0.0))
        return float(np.sqrt(np.mean(np.sum(e ** 2, axis=1))))


@dataclass
class ClosedLoopLog:
    """Trajectory, references, per-step solver diagnostics and scores."""

    states: np.ndarray
    controls: np.ndarray
    references: np.ndarray
    solve_status: list
    loss: float
    rmse: float
    saturated_steps: int = 0

    @property
    def n_steps(self):
        return self.controls.shape[0]


@dataclass
class StepResult:
    """One MPC solve: applied control, first-action Jacobians, diagnostics."""

    u: np.ndarray
    du_dx: np.ndarray
    du_dtheta: np.ndarray
    saturated: bool = False
    grad_ok: bool = True
    info: dict = field(default_factory=dict)


class LinearMpcController:
    """Receding-horizon controller for a linear plant with quadratic tracking cost.

    Stage costs use the learnable diagonals of params; the reference for
    stage s of the solve at time k is the trajectory sample at k + s. For
    unconstrained problems the KKT matrix is the same at every step and for
    every gradient target, so one factorization per controller serves the
    whole rollout.
    """

    def __init__(self, system, params: QuadCostParams, reference, T,
                 u_bd=None, tol_act=TOL_ACT):
        self.system = system
        self.params = params
        self.reference = reference
        self.T = T
        self.n, self.m = system.n, system.m
        Ad, Bd = system.discrete()
        self.Fmat = np.hstack([Ad, Bd])
        self.u_bd = u_bd
        if u_bd is not None:
            from .systems import box_control_constraints
            self.Gstage, self.lstage = box_control_constraints(self.n, self.m, u_bd)
        else:
            self.Gstage, self.lstage = None, None
        self.tol_act = tol_act
        self._warm = None
        self._validated = False
        self._fact = None
        self._b_template = None

    def _stage_refs(self, k):
        xr = np.array([self.reference.state(k + s) for s in range(self.T)])
        ur = np.array([self.reference.control(k + s) for s in range(self.T)])
        return xr, ur

    def _problem(self, x, k):
        xr, ur = self._stage_refs(k)
        return tracking_problem(self.T, self.Fmat, np.zeros(self.n),
                                self.params.Q(), self.params.R(), xr, ur, x,
                                G=self.Gstage, l=self.lstage)

    def solve(self, x, k) -> StepResult:
        if self.Gstage is None:
            return self._solve_unconstrained(x, k)
        problem = self._problem(x, k)
        sol = solve_lmpc(problem, warm_active=self._warm, tol_act=self.tol_act,
                         validate=not self._validated)
        self._validated = True
        self._warm = sol.active
        saturated = sol.active[0].size > 0
        try:
            ws = GradientWorkspace(problem, sol, tol_act=self.tol_act,
                                   check_stale=False)
            cols = tracking_diag_columns(problem, sol)
            k_par = cols.shape[1]
            c_cols = np.hstack([cols, np.zeros((cols.shape[0], self.n))])
            x_cols = np.hstack([np.zeros((self.n, k_par)), np.eye(self.n)])
            dtau = ws.solve_columns(c_cols, x_cols)
            du_dtheta = dtau[:k_par, 0, self.n:].T
            du_dx = dtau[k_par:, 0, self.n:].T
            grad_ok = True
        except SingularKkt:
            du_dtheta = np.zeros((self.m, self.params.M))
            du_dx = np.zeros((self.m, self.n))
            grad_ok = False
        return StepResult(u=sol.u1, du_dx=du_dx, du_dtheta=du_dtheta,
                          saturated=saturated, grad_ok=grad_ok,
                          info={"qp_iterations": sol.qp_iterations,
                                "objective": sol.objective})

    def _solve_unconstrained(self, x, k):
        n, m, T = self.n, self.m, self.T
        nm = n + m
        if self._fact is None:
            template = self._problem(np.zeros(n), 0)
            qp0 = flatten(template)
            self._fact = KktFactorization(qp0.eq.H, qp0.eq.A)
            self._b_template = qp0.eq.b.copy()
        xr, ur = self._stage_refs(k)
        tau_ref = np.hstack([xr, ur])
        Cstage = np.zeros((nm, nm))
        Cstage[:n, :n] = self.params.Q()
        Cstage[n:, n:] = self.params.R()
        g = (-tau_ref @ Cstage).reshape(-1)
        b = self._b_template.copy()
        b[:n] = x
        z, _ = self._fact.solve(g, b)
        tau = z.reshape(T, nm)
        err = tau - tau_ref
        M = self.params.M
        cols = np.zeros((T * nm, M + n))
        idx = np.arange(nm)
        for t in range(T):
            cols[t * nm + idx, idx] = err[t]
        b_cols = np.zeros((self._b_template.size, M + n))
        b_cols[:n, M:] = np.eye(n)
        dz, _ = self._fact.solve_many(cols, b_cols)
        dtau = np.moveaxis(dz.reshape(T, nm, M + n), 2, 0)
        return StepResult(u=tau[0, n:], du_dx=dtau[M:, 0, n:].T,
                          du_dtheta=dtau[:M, 0, n:].T, saturated=False,
                          info={"qp_iterations": 0})


class NonlinearMpcController:
    """Receding-horizon SQP controller over a nonlinear model.

    Warm-starts each step from the previous step's shifted trajectory and
    active sets; the first step holds the current state with the reference
    control. Gradients come from the final linearization of each solve.
    """

    def __init__(self, system, params: QuadCostParams, reference, T,
                 constraints=None, sqp_opts: SqpOptions | None = None,
                 tol_act=TOL_ACT):
        self.system = system
        self.params = params
        self.reference = reference
        self.T = T
        self.n, self.m = system.n, system.m
        self.dyn, self.dyn_jac = system.model_dynamics()
        self.constraints = constraints
        self.sqp_opts = sqp_opts or SqpOptions()
        self.tol_act = tol_act
        self._prev_tau = None
        self._prev_active = None
        self._checked = False

    def _make_problem(self, x, k):
        xr = np.array([self.reference.state(k + s) for s in range(self.T)])
        ur = np.array([self.reference.control(k + s) for s in range(self.T)])
        tau_ref = np.hstack([xr, ur])
        cost, grad, hess = quadratic_tracking_cost(self.params.Q(), self.params.R(), tau_ref)
        ineq = ineq_jac = None
        if self.constraints is not None:
            G, l = self.constraints
            ineq = lambda tau: G @ tau - l
            ineq_jac = lambda tau: G
        problem = NmpcProblem(T=self.T, n=self.n, m=self.m, x_init=x,
                              dynamics=self.dyn, dynamics_jac=self.dyn_jac,
                              cost=cost, cost_grad=grad, cost_hess=hess,
                              ineq=ineq, ineq_jac=ineq_jac, tau_ref=tau_ref,
                              check_jacobians=not self._checked)
        self._checked = True
        return problem, tau_ref

    def _initial_guess(self, x, tau_ref):
        if self._prev_tau is not None:
            tau = np.vstack([self._prev_tau[1:], self._prev_tau[-1:]])
        else:
            tau = tau_ref.copy()
            tau[:, : self.n] = x
        tau[0, : self.n] = x
        return tau

    def solve(self, x, k) -> StepResult:
        problem, tau_ref = self._make_problem(x, k)
        res = solve_nmpc(problem, tau_init=self._initial_guess(x, tau_ref),
                         opts=self.sqp_opts, warm_active=self._prev_active)
        self._prev_tau = res.state.tau
        self._prev_active = res.solution.active
        sol, lin = res.solution, res.problem
        saturated = sol.active[0].size > 0
        try:
            ws = GradientWorkspace(lin, sol, tol_act=self.tol_act, check_stale=False)
            cols = tracking_diag_columns(lin, sol)
            k_par = cols.shape[1]
            c_cols = np.hstack([cols, np.zeros((cols.shape[0], self.n))])
            x_cols = np.hstack([np.zeros((self.n, k_par)), np.eye(self.n)])
            dtau = ws.solve_columns(c_cols, x_cols)
            du_dtheta = dtau[:k_par, 0, self.n:].T
            du_dx = dtau[k_par:, 0, self.n:].T
            grad_ok = True
        except SingularKkt:
            du_dtheta = np.zeros((self.m, self.params.M))
            du_dx = np.zeros((self.m, self.n))
            grad_ok = False
        return StepResult(u=sol.u1, du_dx=du_dx, du_dtheta=du_dtheta,
                          saturated=saturated, grad_ok=grad_ok,
                          info={"sqp_iterations": res.state.iterations,
                                "converged": res.state.converged,
                                "kkt_residual": res.state.kkt_residual})


def rollout(plant, controller, x0, n_steps, reference, loss: LossSpec,
            rng=None, collect_sensitivities=True):
    """Closed-loop simulation: at each step the MPC is solved from the
    current state and only its first action is applied.

    Returns (ClosedLoopLog, [SensitivityState]) where entry k pairs
    dx_dtheta of x_k with du_dtheta of u_k (the final entry has no
    control). When an MPC solve fails, raises ControllerFailure carrying
    the step index and the truncated log. If a gradient solve fails, the
    previous step's controller Jacobians are reused and the step flagged.
    """
    n, m = plant.n, plant.m
    M = controller.params.M
    x = np.asarray(x0, dtype=float).copy()
    states = [x.copy()]
    controls = []
    refs = [reference.state(0)]
    status = []
    sens = SensitivityState.zero(n, m, M)
    sens_steps = []
    prev_du_dx = np.zeros((m, n))
    prev_du_dtheta = np.zeros((m, M))
    saturated = 0
    for k in range(n_steps):
        try:
            step = controller.solve(x, k)
        except (InfeasibleProblem, SolverFailure, SingularKkt,
                SubproblemInfeasible, CallbackFailure) as exc:
            log = _finish_log(states, controls, refs, status, loss, saturated)
            raise ControllerFailure(k, str(exc), partial_log=log) from exc
        du_dx, du_dtheta = step.du_dx, step.du_dtheta
        if not step.grad_ok:
            du_dx, du_dtheta = prev_du_dx, prev_du_dtheta
        prev_du_dx, prev_du_dtheta = du_dx, du_dtheta
        plant_jac = plant.jacobians(x, step.u)
        nxt = propagate_sensitivity(sens, plant_jac, (du_dx, du_dtheta))
        if collect_sensitivities:
            sens_steps.append(SensitivityState(sens.dx_dtheta, nxt.du_dtheta))
        x = plant.step(x, step.u, rng=rng)
        sens = SensitivityState(nxt.dx_dtheta, nxt.du_dtheta)
        states.append(x.copy())
        controls.append(np.asarray(step.u, dtype=float).copy())
        refs.append(reference.state(k + 1))
        saturated += int(step.saturated)
        status.append({"saturated": step.saturated, "grad_ok": step.grad_ok,
                       **step.info})
    if collect_sensitivities:
        sens_steps.append(SensitivityState(sens.dx_dtheta, np.zeros((m, M))))
    log = _finish_log(states, controls, refs, status, loss, saturated)
    return log, (sens_steps if collect_sensitivities else None)


def _finish_log(states, controls, refs, status, loss, saturated):
    states = np.asarray(states)
    controls = np.asarray(controls).reshape(len(controls), -1)
    refs = np.asarray(refs)
    lval = loss.value(states, refs, controls) if states.shape[0] > 1 else 0.0
    rmse = loss.rmse(states, refs) if states.shape[0] > 1 else 0.0
    return ClosedLoopLog(states=states, controls=controls, references=refs,
                         solve_status=status, loss=lval, rmse=rmse,
                         saturated_steps=saturated)


def loss_gradient(log: ClosedLoopLog, sens_steps, loss: LossSpec):
    """Chain-rule assembly of dL/dtheta from the sensitivity stream."""
    N = log.n_steps
    M = sens_steps[0].dx_dtheta.shape[1]
    g = np.zeros(M)
    for k in range(1, N + 1):
        g += loss.state_grad(log.states[k], log.references[k]) @ sens_steps[k].dx_dtheta
    if loss.control_penalty:
        for k in range(N):
            g += loss.control_grad(log.controls[k]) @ sens_steps[k].du_dtheta
    return g


def update_params(params: QuadCostParams, grad, alpha) -> QuadCostParams:
    """Projected gradient step: clamp theta - alpha * grad onto the box."""
    vec = params.vector() - alpha * np.asarray(grad, dtype=float)
    return params.with_vector(vec)


@dataclass
class TrialRecord:
    trial: int
    rmse: float
    loss: float
    params: QuadCostParams
    saturated_steps: int = 0


@dataclass
class TuneResult:
    params: QuadCostParams
    history: list
    logs: list

    @property
    def rmse(self):
        return [rec.rmse for rec in self.history]


def tune(plant, controller_factory, params0: QuadCostParams, loss: LossSpec,
         trials, alpha, n_steps, reference, x0, rng=None,
         keep_logs=(0, -1)) -> TuneResult:
    """Repeat rollout -> gradient -> projected update for `trials` rounds.

    Each trial's RMSE/loss is scored with the parameters before that
    trial's update. keep_logs selects which trial logs are retained
    (default first and last); pass "all" to keep every one. A failed trial
    raises ControllerFailure with the partial history attached.
    """
    params = params0
    history = []
    logs = []
    for trial in range(trials):
        controller = controller_factory(params)
        try:
            log, sens = rollout(plant, controller, x0, n_steps, reference, loss, rng=rng)
        except ControllerFailure as exc:
            exc.history = history
            raise
        grad = loss_gradient(log, sens, loss)
        history.append(TrialRecord(trial=trial, rmse=log.rmse, loss=log.loss,
                                   params=params, saturated_steps=log.saturated_steps))
        if keep_logs == "all" or trial in _resolve_keep(keep_logs, trials):
            logs.append((trial, log))
        params = update_params(params, grad, alpha)
    return TuneResult(params=params, history=history, logs=logs)


def _resolve_keep(keep, trials):
    return {k % trials for k in keep}


@dataclass
class OpenLoopResult:
    params: QuadCostParams
    history: list


def open_loop_tune(problem_factory, params0: QuadCostParams, loss: LossSpec,
                   trials, alpha, loss_horizon) -> OpenLoopResult:
    """Open-loop baseline: learn from one MPC solve's predicted trajectory.

    problem_factory(params) must return an LmpcProblem with tau_ref from a
    fixed initial state. The loss horizon must not exceed the MPC horizon
    (the predicted trajectory is all there is); the gradient uses the full
    auxiliary trajectory of each parameter target.
    """
    params = params0
    history = []
    for trial in range(trials):
        problem = problem_factory(params)
        if loss_horizon > problem.T:
            raise ValueError("open-loop loss horizon must be <= the MPC horizon")
        sol = solve_lmpc(problem)
        ws = GradientWorkspace(problem, sol, check_stale=False)
        cols = tracking_diag_columns(problem, sol)
        dtau = ws.solve_columns(cols, np.zeros((problem.n, cols.shape[1])))
        n = problem.n
        err = sol.x - problem.tau_ref[:, :n]
        w = loss.state_weights
        dl_dtau = np.zeros((problem.T, n + problem.m))
        dl_dtau[:loss_horizon, :n] = 2.0 * w * err[:loss_horizon]
        if loss.control_penalty:
            dl_dtau[:loss_horizon, n:] = 2.0 * loss.control_penalty * sol.u[:loss_horizon]
        grad = np.einsum("ti,kti->k", dl_dtau, dtau)
        e = err[:loss_horizon] * np.sqrt(np.maximum(w, 0.0))
        rmse = float(np.sqrt(np.mean(np.sum(e ** 2, axis=1))))
        lval = float(np.einsum("ti,i,ti->", err[:loss_horizon], w, err[:loss_horizon]))
        history.append(TrialRecord(trial=trial, rmse=rmse, loss=lval, params=params))
        params = update_params(params, grad, alpha)
    return OpenLoopResult(params=params, history=history)
