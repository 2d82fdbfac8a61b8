"""Differentiable linear/nonlinear MPC with closed-loop cost-matrix autotuning.

The gradient of the first optimal control action with respect to cost
parameters and the initial state is obtained from an auxiliary
equality-constrained problem built on the solved MPC's active sets; a
sensitivity-propagation loop uses those gradients to learn Q/R diagonals
against a closed-loop tracking loss.
"""

__version__ = "0.1.0"

from .qp import (EqQp, IqQp, KktFactorization, QpResult, SingularKkt,
                 InconsistentConstraints, solve_eq_qp, solve_iq_qp)
from .lmpc import (LmpcProblem, LmpcSolution, InfeasibleProblem, SolverFailure,
                   extract_active_sets, flatten, solve_lmpc, tracking_problem)
from .gradients import (AuxCoefficients, GradResult, GradTarget,
                        GradientWorkspace, StaleSolution, build_aux_problem,
                        constrain_operator_jacobian, fd_gradient, gradient_map,
                        solve_gradient)
from .nmpc import (NmpcProblem, SqpOptions, SqpResult, SqpState,
                   CallbackFailure, SubproblemInfeasible, linearize,
                   nmpc_gradients, quadratic_tracking_cost, solve_nmpc)
from .systems import (LinearSystem, QuadrotorSystem, ReferenceTrajectory,
                      UnicycleSystem, box_control_constraints,
                      double_integrator, make_reference, reference)
from .tuner import (ClosedLoopLog, ControllerFailure, LinearMpcController,
                    LossSpec, NonlinearMpcController, QuadCostParams,
                    SensitivityState, TuneResult, loss_gradient, open_loop_tune,
                    propagate_sensitivity, rollout, tune, update_params)
