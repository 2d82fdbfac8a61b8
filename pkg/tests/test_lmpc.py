import json

import numpy as np
import pytest

from mpctune.lmpc import (DimensionMismatch, InfeasibleProblem, LmpcProblem,
                          extract_active_sets, flatten, problem_from_dict,
                          problem_to_dict, solution_from_dict, solution_to_dict,
                          solve_lmpc, tracking_problem)
from mpctune.systems import box_control_constraints, double_integrator

from oracles import enumerate_qp, random_tracking_problem, riccati_trajectory


def scalar_chain(T, x_init=10.0, q=1.0, r=0.01, u_bd=1.0):
    G, l = box_control_constraints(1, 1, u_bd)
    return tracking_problem(T, np.array([[1.0, 1.0]]), np.zeros(1),
                            np.eye(1) * q, np.eye(1) * r,
                            np.zeros((T, 1)), np.zeros((T, 1)),
                            [x_init], G=G, l=l)


def test_flatten_dimensions_single_stage():
    prob = tracking_problem(1, np.array([[1.0, 1.0]]), np.zeros(1), np.eye(1),
                            np.eye(1), np.zeros((1, 1)), np.zeros((1, 1)),
                            [0.5], G=np.array([[0.0, 1.0]]), l=np.array([2.0]))
    qp = flatten(prob)
    assert qp.eq.g.size == 2
    assert qp.eq.A.shape == (1, 2)
    np.testing.assert_allclose(qp.eq.A, [[1.0, 0.0]])
    np.testing.assert_allclose(qp.eq.b, [0.5])
    assert qp.G.shape == (1, 2)


def test_flatten_equality_row_count():
    prob = random_tracking_problem(np.random.default_rng(0), T=2, n=2, m=1)
    qp = flatten(prob)
    assert qp.eq.g.size == 6
    assert qp.eq.A.shape[0] == 4  # 2 initial + 2 dynamics rows


def test_flatten_roundtrip_dynamics():
    rng = np.random.default_rng(1)
    prob = random_tracking_problem(rng, T=5, n=3, m=2)
    sol = solve_lmpc(prob)
    from oracles import rollout_states
    tau_re = rollout_states(prob, sol.u)
    np.testing.assert_allclose(sol.tau, tau_re, atol=1e-8)


def test_dimension_mismatch_raises():
    with pytest.raises(DimensionMismatch):
        LmpcProblem(T=2, n=1, m=1, C=np.zeros((2, 2, 2)), c=np.zeros((2, 2)),
                    F=np.zeros((1, 1, 2)), f=np.zeros((2, 1)),
                    G=np.zeros((2, 0, 2)), l=np.zeros((2, 0)), x_init=[0.0])


def test_zero_problem_zero_solution():
    T, n, m = 4, 2, 1
    nm = n + m
    C = np.repeat(np.eye(nm)[None], T, axis=0)
    prob = LmpcProblem(T=T, n=n, m=m, C=C, c=np.zeros((T, nm)),
                       F=np.zeros((T, n, nm)), f=np.zeros((T, n)),
                       G=np.repeat(np.array([[[0.0, 0.0, 1.0]]]), T, axis=0),
                       l=np.ones((T, 1)), x_init=np.zeros(n))
    sol = solve_lmpc(prob)
    np.testing.assert_allclose(sol.tau, 0.0, atol=1e-12)
    assert sol.objective == pytest.approx(0.0, abs=1e-15)


def test_riccati_equivalence_double_integrator():
    di = double_integrator(dt=0.01)
    Ad, Bd = di.discrete()
    T = 20
    prob = tracking_problem(T, np.hstack([Ad, Bd]), np.zeros(2), np.eye(2),
                            np.eye(1), np.zeros((T, 2)), np.zeros((T, 1)),
                            [1.0, -0.5])
    sol = solve_lmpc(prob)
    tau_oracle = riccati_trajectory(prob)
    np.testing.assert_allclose(sol.u1, tau_oracle[0, 2:], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(sol.tau, tau_oracle, rtol=1e-7, atol=1e-8)


def test_riccati_equivalence_random_tracking():
    rng = np.random.default_rng(8)
    for _ in range(10):
        prob = random_tracking_problem(rng)
        sol = solve_lmpc(prob)
        tau_oracle = riccati_trajectory(prob)
        np.testing.assert_allclose(sol.u1, tau_oracle[0, prob.n:],
                                   rtol=1e-8, atol=1e-8)


def test_initial_state_block_exact():
    prob = random_tracking_problem(np.random.default_rng(2), T=4, n=2, m=1)
    sol = solve_lmpc(prob)
    assert np.array_equal(sol.x[0], prob.x_init)


def test_dynamics_residual_invariant():
    prob = random_tracking_problem(np.random.default_rng(3), T=6, n=3, m=2)
    sol = solve_lmpc(prob)
    resid = sol.x[1:] - (np.einsum("tij,tj->ti", prob.F[:-1], sol.tau[:-1])
                         + prob.f[:-1])
    assert np.abs(resid).max() <= 1e-8


def test_costate_terminal_recursion():
    # the terminal costate equals the state rows of the stage-T stationarity
    prob = random_tracking_problem(np.random.default_rng(4), T=5, n=2, m=2)
    sol = solve_lmpc(prob)
    n = prob.n
    lam_T = prob.C[-1][:n] @ sol.tau[-1] + prob.c[-1][:n]
    np.testing.assert_allclose(sol.costate[-1], lam_T, atol=1e-8)


def test_saturated_scalar_matches_enumeration():
    prob = scalar_chain(T=3)
    sol = solve_lmpc(prob)
    qp = flatten(prob)
    z, nu, _ = enumerate_qp(qp.eq.H, qp.eq.g, qp.eq.A, qp.eq.b, qp.G, qp.l)
    np.testing.assert_allclose(sol.tau.reshape(-1), z, atol=1e-8)
    # far from the origin the early controls saturate at the lower bound
    assert sol.u[0, 0] == pytest.approx(-1.0, abs=1e-9)
    assert sol.u[1, 0] == pytest.approx(-1.0, abs=1e-9)
    assert 1 in sol.active[0]


def test_extract_active_sets_interior_empty():
    prob = random_tracking_problem(np.random.default_rng(5), T=3, n=2, m=1,
                                   constrained=True, margin=100.0)
    sol = solve_lmpc(prob)
    assert all(rows.size == 0 for rows in sol.active)


def test_extract_active_sets_tolerance_behavior():
    # optimum lands within 1e-9 of the bound: tol 0 misses it, 1e-6 finds it
    T = 1
    target = 1.0 - 1e-9
    prob = tracking_problem(T, np.array([[1.0, 1.0]]), np.zeros(1),
                            np.eye(1) * 1e-6, np.eye(1),
                            np.zeros((T, 1)), np.full((T, 1), target),
                            [0.0], G=np.array([[0.0, 1.0]]), l=np.array([1.0]))
    sol = solve_lmpc(prob)
    at_zero = extract_active_sets(prob, sol.tau, tol_act=0.0)
    at_default = extract_active_sets(prob, sol.tau, tol_act=1e-6)
    assert at_zero[0].size == 0
    assert at_default[0].tolist() == [0]


def test_boxed_controls_respected():
    prob = scalar_chain(T=6, x_init=5.0, u_bd=0.7)
    sol = solve_lmpc(prob)
    assert (np.abs(sol.u) <= 0.7 + 1e-8).all()


def test_time_invariant_duplication_consistency():
    rng = np.random.default_rng(9)
    base = random_tracking_problem(rng, T=2, n=2, m=1)
    T = 6
    prob = LmpcProblem(T=T, n=2, m=1,
                       C=np.repeat(base.C[:1], T, axis=0),
                       c=np.repeat(base.c[:1], T, axis=0),
                       F=np.repeat(base.F[:1], T, axis=0),
                       f=np.repeat(base.f[:1], T, axis=0),
                       G=np.zeros((T, 0, 3)), l=np.zeros((T, 0)),
                       x_init=base.x_init)
    sol = solve_lmpc(prob)
    assert sol.kkt_residual(prob) <= 1e-8


def test_infeasible_problem_raises():
    G = np.array([[0.0, 1.0], [0.0, -1.0]])
    l = np.array([-1.0, -1.0])  # u <= -1 and u >= 1
    prob = tracking_problem(2, np.array([[1.0, 1.0]]), np.zeros(1), np.eye(1),
                            np.eye(1), np.zeros((2, 1)), np.zeros((2, 1)),
                            [0.0], G=G, l=l)
    with pytest.raises(InfeasibleProblem):
        solve_lmpc(prob)


def test_json_round_trip():
    prob = random_tracking_problem(np.random.default_rng(10), T=3, n=2, m=1,
                                   constrained=True)
    sol = solve_lmpc(prob)
    p2 = problem_from_dict(json.loads(json.dumps(problem_to_dict(prob))))
    s2 = solution_from_dict(json.loads(json.dumps(solution_to_dict(sol))))
    np.testing.assert_array_equal(p2.C, prob.C)
    np.testing.assert_array_equal(p2.l, prob.l)
    np.testing.assert_array_equal(p2.tau_ref, prob.tau_ref)
    np.testing.assert_array_equal(s2.tau, sol.tau)
    assert s2.objective == sol.objective
    assert [a.tolist() for a in s2.active] == [a.tolist() for a in sol.active]


def test_schema_version_checked():
    d = problem_to_dict(random_tracking_problem(np.random.default_rng(0), T=2))
    d["schema_version"] = 99
    with pytest.raises(ValueError, match="schema_version"):
        problem_from_dict(d)
