"""Command-line interface.

Subcommands:
  tune      run a tuning experiment from a JSON config; writes results.csv,
            trajectory dumps, run metadata and report figures to --out
  gradcheck analytic-versus-finite-difference gradient verification table
  solve     solve one linear MPC problem file and write the solution

Exit codes: 0 ok, 1 internal error, 2 input error, 3 infeasible,
4 gradcheck failure. DIFFTUNE_THREADS caps the parallel gradient map used
by gradcheck.
"""

import os

# Dense problems here are small (KKT dims in the hundreds); BLAS threading
# only adds spin-wait overhead, so default it off before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse
import csv
import json
import platform
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .gradients import GradTarget, fd_gradient, gradient_map
from .lmpc import (InfeasibleProblem, first_infeasible_stage, load_json,
                   problem_from_dict, save_json, solution_to_dict, solve_lmpc,
                   tracking_problem)
from .nmpc import solve_nmpc
from .systems import (QuadrotorSystem, UnicycleSystem, box_control_constraints,
                      double_integrator, make_reference)
from .tuner import (ControllerFailure, LinearMpcController, LossSpec,
                    NonlinearMpcController, QuadCostParams, open_loop_tune,
                    rollout, tune)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_GRADCHECK = 4

SYSTEMS = ("double_integrator", "unicycle", "quadrotor")


class ConfigInvalid(Exception):
    """Experiment config missing fields or violating a constraint."""


@dataclass
class ExperimentConfig:
    system: str
    T: int
    N: int
    dt: float
    trials: int
    alpha: float
    q_init: list
    r_init: list
    u_bd: float | None = None
    bounds: tuple = (0.01, 1000.0)
    seed: int = 0
    mode: str = "closed_loop"
    loss_horizon: int | None = None
    x0: list | None = None
    control_penalty: float = 0.0
    targets: list | None = None

    @classmethod
    def from_dict(cls, d):
        required = ("system", "T", "N", "dt", "trials", "alpha", "q_init", "r_init")
        missing = [k for k in required if k not in d]
        if missing:
            raise ConfigInvalid(f"config missing fields: {', '.join(missing)}")
        if d["system"] not in SYSTEMS:
            raise ConfigInvalid(f"unknown system {d['system']!r}; expected one of {SYSTEMS}")
        if d.get("mode", "closed_loop") not in ("closed_loop", "open_loop"):
            raise ConfigInvalid("mode must be closed_loop or open_loop")
        cfg = cls(system=d["system"], T=int(d["T"]), N=int(d["N"]), dt=float(d["dt"]),
                  trials=int(d["trials"]), alpha=float(d["alpha"]),
                  q_init=list(d["q_init"]), r_init=list(d["r_init"]),
                  u_bd=(None if d.get("u_bd") is None else float(d["u_bd"])),
                  bounds=tuple(d.get("bounds", (0.01, 1000.0))),
                  seed=int(d.get("seed", 0)), mode=d.get("mode", "closed_loop"),
                  loss_horizon=(None if d.get("loss_horizon") is None
                                else int(d["loss_horizon"])),
                  x0=d.get("x0"), control_penalty=float(d.get("control_penalty", 0.0)),
                  targets=d.get("targets"))
        if cfg.trials < 1:
            raise ConfigInvalid("trials must be >= 1")
        if cfg.mode == "open_loop":
            if cfg.system != "double_integrator":
                raise ConfigInvalid("open_loop mode is implemented for the linear "
                                    "double_integrator benchmark")
            horizon = cfg.loss_horizon if cfg.loss_horizon is not None else cfg.T
            if horizon > cfg.T:
                raise ConfigInvalid(
                    "open-loop learning scores the predicted trajectory of a single "
                    "solve, so its loss horizon must be shorter than or equal to "
                    f"the MPC horizon (got {horizon} > T={cfg.T})")
        return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigInvalid(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def build_experiment(cfg: ExperimentConfig):
    """Instantiate plant, reference, loss and controller factory for a config."""
    if cfg.system == "double_integrator":
        plant = double_integrator(dt=cfg.dt)
        ref = make_reference("di_sine", cfg.dt)
        weights = np.array([1.0, 0.0])
    elif cfg.system == "unicycle":
        plant = UnicycleSystem(dt=cfg.dt)
        ref = make_reference("unicycle_circle", cfg.dt)
        weights = np.array([1.0, 1.0, 0.0])
    else:
        plant = QuadrotorSystem(dt=cfg.dt)
        ref = make_reference("figure8_3d", cfg.dt, system=plant)
        weights = np.zeros(13)
        weights[:3] = 1.0
    if len(cfg.q_init) != plant.n or len(cfg.r_init) != plant.m:
        raise ConfigInvalid(f"q_init/r_init must have lengths {plant.n}/{plant.m} "
                            f"for {cfg.system}")
    loss = LossSpec(state_weights=weights, control_penalty=cfg.control_penalty)
    params0 = QuadCostParams(q_diag=cfg.q_init, r_diag=cfg.r_init, bounds=cfg.bounds)
    x0 = np.asarray(cfg.x0, dtype=float) if cfg.x0 is not None else ref.state(0)

    if cfg.system == "double_integrator":
        def factory(p):
            return LinearMpcController(plant, p, ref, T=cfg.T, u_bd=cfg.u_bd)
    elif cfg.system == "unicycle":
        constraints = plant.constraints()

        def factory(p):
            return NonlinearMpcController(plant, p, ref, T=cfg.T, constraints=constraints)
    else:
        def factory(p):
            return NonlinearMpcController(plant, p, ref, T=cfg.T)

    return {"plant": plant, "reference": ref, "loss": loss, "params0": params0,
            "x0": x0, "factory": factory}


def _csv_rows(history, n, m):
    header = ["trial", "rmse", "loss"] + [f"q_{i+1}" for i in range(n)] \
        + [f"r_{i+1}" for i in range(m)]
    rows = [header]
    for rec in history:
        vec = rec.params.vector()
        rows.append([rec.trial + 1, repr(float(rec.rmse)), repr(float(rec.loss))]
                    + [repr(float(v)) for v in vec])
    return rows


def _write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def log_to_dict(log):
    return {
        "schema_version": 1,
        "states": log.states.tolist(),
        "controls": log.controls.tolist(),
        "references": log.references.tolist(),
        "rmse": log.rmse,
        "loss": log.loss,
        "saturated_steps": log.saturated_steps,
    }


def cmd_tune(args):
    cfg = load_config(args.config)
    parts = build_experiment(cfg)
    out = args.out
    os.makedirs(out, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    t_start = time.time()
    meta = {"schema_version": 1, "config": json.load(open(args.config)),
            "versions": {"mpctune": __version__, "numpy": np.__version__,
                         "python": platform.python_version()}}
    history = []
    logs = []
    error = None
    params = parts["params0"]
    try:
        if cfg.mode == "open_loop":
            plant = parts["plant"]
            ref = parts["reference"]
            F = np.hstack(plant.discrete())
            x0 = parts["x0"]
            horizon = cfg.loss_horizon if cfg.loss_horizon is not None else cfg.T

            def problem_factory(p):
                xr = np.array([ref.state(s) for s in range(cfg.T)])
                ur = np.array([ref.control(s) for s in range(cfg.T)])
                G = l = None
                if cfg.u_bd is not None:
                    G, l = box_control_constraints(plant.n, plant.m, cfg.u_bd)
                return tracking_problem(cfg.T, F, np.zeros(plant.n), p.Q(), p.R(),
                                        xr, ur, x0, G=G, l=l)

            result = open_loop_tune(problem_factory, params, parts["loss"],
                                    cfg.trials, cfg.alpha, horizon)
            history = result.history
            params = result.params
            eval_log, _ = rollout(plant, parts["factory"](params), x0, cfg.N,
                                  ref, parts["loss"], collect_sensitivities=False)
            meta["closed_loop_eval_rmse"] = eval_log.rmse
            logs = [(cfg.trials - 1, eval_log)]
        else:
            result = tune(parts["plant"], parts["factory"], params, parts["loss"],
                          cfg.trials, cfg.alpha, cfg.N, parts["reference"],
                          parts["x0"], rng=rng)
            history = result.history
            params = result.params
            logs = result.logs
    except ControllerFailure as exc:
        history = getattr(exc, "history", [])
        error = str(exc)
        if exc.partial_log is not None:
            logs = [(len(history), exc.partial_log)]
    n, m = len(cfg.q_init), len(cfg.r_init)
    _write_csv(_csv_rows(history, n, m), os.path.join(out, "results.csv"))
    if logs:
        save_json(log_to_dict(logs[0][1]), os.path.join(out, "trajectory_trial_first.json"))
        save_json(log_to_dict(logs[-1][1]), os.path.join(out, "trajectory_trial_last.json"))
    meta["final_params"] = {"q_diag": params.q_diag.tolist(),
                            "r_diag": params.r_diag.tolist()}
    meta["wall_seconds"] = time.time() - t_start
    if error is not None:
        meta["error"] = error
    save_json(meta, os.path.join(out, "run_metadata.json"))
    if not args.no_figures and history:
        from . import figures
        figures.save_rmse_curve(history, os.path.join(out, "rmse_curve.png"))
        if logs and cfg.mode == "closed_loop":
            n_pos = {"double_integrator": (0,), "unicycle": (0, 1),
                     "quadrotor": (0, 1, 2)}[cfg.system]
            figures.save_tracking_figure(logs[0][1], logs[-1][1],
                                         os.path.join(out, "tracking.png"), n_pos)
            figures.save_control_figure(logs, os.path.join(out, "controls.png"),
                                        u_bd=cfg.u_bd)
    if error is not None:
        print(f"experiment failed: {error} (partial results in {out})", file=sys.stderr)
        return EXIT_INTERNAL
    print(f"wrote {out}/results.csv ({len(history)} trials)")
    return EXIT_OK


def _default_targets(n, m, T):
    mid = T // 2  # stage-0 state cost cannot move u*_1 (that state is pinned)
    targets = [{"kind": "Q", "t": mid, "i": i, "j": i} for i in range(n)]
    targets += [{"kind": "R", "t": 0, "i": j, "j": j} for j in range(m)]
    targets += [{"kind": "x_init", "i": i} for i in range(n)]
    return targets


def cmd_gradcheck(args):
    cfg = load_config(args.config)
    parts = build_experiment(cfg)
    plant, ref = parts["plant"], parts["reference"]
    params = parts["params0"]
    x0 = parts["x0"]
    if cfg.system == "double_integrator":
        ctrl = parts["factory"](params)
        problem = ctrl._problem(x0, 0)
    else:
        nl = parts["factory"](params)
        nproblem, tau_ref = nl._make_problem(x0, 0)
        res = solve_nmpc(nproblem, tau_init=nl._initial_guess(x0, tau_ref))
        problem = res.problem
    solution = solve_lmpc(problem)
    raw = cfg.targets if cfg.targets is not None \
        else _default_targets(plant.n, plant.m, cfg.T)
    targets = []
    for d in raw:
        kind = d["kind"]
        if kind == "x_init":
            targets.append(GradTarget.x_init_entry(int(d["i"])))
        elif kind == "c":
            targets.append(GradTarget.c_entry(int(d["t"]), int(d["i"])))
        else:
            targets.append(GradTarget(kind=kind, t=int(d.get("t", 0)),
                                      i=int(d["i"]), j=int(d.get("j", d["i"]))))
    if not targets:
        print("no targets requested; nothing to check")
        return EXIT_OK
    saturated = solution.active[0].size > 0
    results, _ = gradient_map(problem, solution, targets)
    width = 46
    print(f"{'target':{width}} {'analytic':>12} {'fd':>12} {'rel err':>10}  flag")
    failed = False
    for tg, res in zip(targets, results):
        ana = res.du1
        label = f"{tg.kind}[t={tg.t},i={tg.i},j={tg.j}]" if tg.kind != "x_init" \
            else f"x_init[i={tg.i}]"
        if saturated and tg.kind in ("C", "c", "Q", "R"):
            print(f"{label:{width}} {np.abs(ana).max():12.3e} {'n/a':>12} {'n/a':>10}  "
                  f"saturated (finite differences unreliable)")
            continue
        fd = fd_gradient(problem, tg, h=args.h)
        if tg.kind in ("C", "Q", "R") and tg.i != tg.j:
            pair = GradTarget(kind=tg.kind, t=tg.t, i=tg.j, j=tg.i)
            ana = ana + gradient_map(problem, solution, [pair])[0][0].du1
        rel = float(np.abs(ana - fd).max(initial=0.0) / (1.0 + np.abs(fd).max(initial=0.0)))
        flag = ""
        if rel > args.tol:
            failed = True
            flag = "FAIL"
        print(f"{label:{width}} {np.abs(ana).max():12.3e} {np.abs(fd).max():12.3e} "
              f"{rel:10.2e}  {flag}")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_solve(args):
    try:
        data = load_json(args.infile)
        problem = problem_from_dict(data)
    except (json.JSONDecodeError, KeyError, ValueError, OSError) as exc:
        print(f"cannot parse problem file: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        solution = solve_lmpc(problem)
    except InfeasibleProblem:
        stage = first_infeasible_stage(problem)
        where = (f"stage {stage} constraints are contradictory" if stage is not None
                 else "stagewise sets are nonempty; the dynamics coupling is infeasible")
        print(f"problem is infeasible: {where}", file=sys.stderr)
        return EXIT_INFEASIBLE
    save_json(solution_to_dict(solution), args.out)
    active_total = sum(rows.size for rows in solution.active)
    print(f"objective {solution.objective:.9g}; "
          f"{active_total} active constraint rows across "
          f"{sum(1 for rows in solution.active if rows.size)} stages; "
          f"wrote {args.out}")
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(prog="mpctune",
                                     description="Differentiable MPC autotuning")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_tune = sub.add_parser("tune", help="run a tuning experiment")
    p_tune.add_argument("--config", required=True)
    p_tune.add_argument("--out", required=True)
    p_tune.add_argument("--no-figures", action="store_true",
                        help="skip PNG report figures")
    p_tune.set_defaults(func=cmd_tune)

    p_grad = sub.add_parser("gradcheck", help="verify analytic gradients")
    p_grad.add_argument("--config", required=True)
    p_grad.add_argument("--h", type=float, default=1e-5, help="FD step")
    p_grad.add_argument("--tol", type=float, default=1e-3,
                        help="relative error treated as failure")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_solve = sub.add_parser("solve", help="solve one problem file")
    p_solve.add_argument("--in", dest="infile", required=True)
    p_solve.add_argument("--out", required=True)
    p_solve.set_defaults(func=cmd_solve)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InfeasibleProblem as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # pragma: no cover - unexpected internal error
        import traceback
        traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
