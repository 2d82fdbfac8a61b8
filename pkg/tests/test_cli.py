import json
import os

import numpy as np
import pytest

from mpctune import cli
from mpctune.lmpc import load_json, problem_to_dict, save_json, tracking_problem

from conftest import read_results_csv


def write_config(tmp_path, name="cfg.json", **overrides):
    base = {
        "schema_version": 1,
        "system": "double_integrator",
        "T": 10,
        "N": 40,
        "dt": 0.05,
        "trials": 2,
        "alpha": 0.05,
        "u_bd": 2.0,
        "q_init": [1.0, 1.0],
        "r_init": [1.0],
        "bounds": [0.01, 1000.0],
        "seed": 0,
        "mode": "closed_loop",
        "x0": [0.0, 0.0],
    }
    base.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(base))
    return str(path)


def test_tune_writes_bundle(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["tune", "--config", cfg, "--out", str(out)]) == 0
    rows = read_results_csv(out)
    assert len(rows) == 2
    assert set(rows[0]) == {"trial", "rmse", "loss", "q_1", "q_2", "r_1"}
    assert all(r["rmse"] > 0 for r in rows)
    for name in ("trajectory_trial_first.json", "trajectory_trial_last.json",
                 "run_metadata.json", "rmse_curve.png", "tracking.png",
                 "controls.png"):
        assert (out / name).exists(), name
    meta = load_json(out / "run_metadata.json")
    assert meta["versions"]["mpctune"]
    traj = load_json(out / "trajectory_trial_first.json")
    assert len(traj["states"]) == 41
    assert len(traj["controls"]) == 40


def test_tune_deterministic_csv_bytes(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["tune", "--config", cfg, "--out", str(out1), "--no-figures"]) == 0
    assert cli.main(["tune", "--config", cfg, "--out", str(out2), "--no-figures"]) == 0
    assert (out1 / "results.csv").read_bytes() == (out2 / "results.csv").read_bytes()


def test_tune_zero_alpha_constant_rmse(tmp_path):
    cfg = write_config(tmp_path, trials=1, alpha=0.0)
    out = tmp_path / "out"
    assert cli.main(["tune", "--config", cfg, "--out", str(out), "--no-figures"]) == 0
    rows = read_results_csv(out)
    assert len(rows) == 1


def test_tune_open_loop_mode(tmp_path):
    cfg = write_config(tmp_path, mode="open_loop", T=20, loss_horizon=20,
                       N=60, u_bd=None, trials=3)
    out = tmp_path / "out"
    assert cli.main(["tune", "--config", cfg, "--out", str(out), "--no-figures"]) == 0
    rows = read_results_csv(out)
    assert len(rows) == 3
    meta = load_json(out / "run_metadata.json")
    assert meta["closed_loop_eval_rmse"] > 0


def test_open_loop_horizon_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, mode="open_loop", T=10, loss_horizon=30)
    assert cli.main(["tune", "--config", cfg, "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT
    err = capsys.readouterr().err
    assert "shorter than or equal to" in err


def test_config_missing_field_rejected(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"system": "double_integrator"}))
    assert cli.main(["tune", "--config", str(path), "--out", str(tmp_path / "o")]) \
        == cli.EXIT_INPUT


def test_gradcheck_interior_exit_zero(repo_root, capsys):
    cfg = os.path.join(repo_root, "configs", "gradcheck_di.json")
    assert cli.main(["gradcheck", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "rel err" in out
    assert "FAIL" not in out


def test_gradcheck_saturated_flag(repo_root, capsys):
    cfg = os.path.join(repo_root, "configs", "gradcheck_di_saturated.json")
    assert cli.main(["gradcheck", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "saturated" in out


def test_gradcheck_empty_targets(tmp_path, capsys):
    cfg = write_config(tmp_path, targets=[])
    assert cli.main(["gradcheck", "--config", cfg]) == 0
    assert "nothing to check" in capsys.readouterr().out


def test_gradcheck_unicycle_targets(tmp_path):
    cfg = write_config(tmp_path, system="unicycle", T=8, q_init=[1.0] * 3,
                       r_init=[1.0] * 2, x0=None, u_bd=None,
                       targets=[{"kind": "Q", "t": 4, "i": 0, "j": 0},
                                {"kind": "R", "t": 0, "i": 1, "j": 1},
                                {"kind": "x_init", "i": 2}])
    assert cli.main(["gradcheck", "--config", cfg]) == 0


def test_solve_golden_double_integrator(repo_root, tmp_path):
    problem_path = os.path.join(repo_root, "tests", "data", "di_golden_problem.json")
    golden_path = os.path.join(repo_root, "tests", "data", "di_golden_solution.json")
    out = tmp_path / "solution.json"
    assert cli.main(["solve", "--in", problem_path, "--out", str(out)]) == 0
    got = load_json(out)
    gold = load_json(golden_path)
    np.testing.assert_allclose(np.array(got["tau"]), np.array(gold["tau"]),
                               rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(np.array(got["costate"]), np.array(gold["costate"]),
                               rtol=1e-8, atol=1e-9)
    assert got["objective"] == pytest.approx(gold["objective"], rel=1e-10)


def test_solve_infeasible_exit_3(tmp_path, capsys):
    T = 3
    G = np.array([[0.0, 1.0], [0.0, -1.0]])
    l = np.array([-1.0, -1.0])
    prob = tracking_problem(T, np.array([[1.0, 1.0]]), np.zeros(1), np.eye(1),
                            np.eye(1), np.zeros((T, 1)), np.zeros((T, 1)),
                            [0.0], G=G, l=l)
    path = tmp_path / "infeasible.json"
    save_json(problem_to_dict(prob), path)
    code = cli.main(["solve", "--in", str(path), "--out", str(tmp_path / "s.json")])
    assert code == cli.EXIT_INFEASIBLE
    assert "stage 0" in capsys.readouterr().err


def test_solve_malformed_json_exit_2(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert cli.main(["solve", "--in", str(path), "--out", str(tmp_path / "s.json")]) \
        == cli.EXIT_INPUT


def test_solution_json_roundtrip_through_cli(repo_root, tmp_path):
    from mpctune.lmpc import solution_from_dict, solution_to_dict
    problem_path = os.path.join(repo_root, "tests", "data", "di_golden_problem.json")
    out = tmp_path / "solution.json"
    cli.main(["solve", "--in", problem_path, "--out", str(out)])
    sol = solution_from_dict(load_json(out))
    again = json.loads(json.dumps(solution_to_dict(sol)))
    assert again == load_json(out)


def test_bundled_di_ubd2_smoke(cli_experiment):
    out = cli_experiment("di_ubd2")
    rows = read_results_csv(out)
    assert len(rows) == 20
    assert all(r["rmse"] > 0 for r in rows)


def test_bundled_unicycle_reduction(cli_experiment):
    out = cli_experiment("unicycle")
    rows = read_results_csv(out)
    assert len(rows) == 20
    assert rows[-1]["rmse"] <= 0.7 * rows[0]["rmse"]
