import json

import numpy as np
import pytest

from adsched import experiments as E
from adsched.cli import main
from adsched.linear_policy import phi_to_theta


def run(*argv):
    return main([str(a) for a in argv])


def test_experiment_tables_match_published_values():
    assert E.SYNTHETIC_P == ((0.2, 0.1, 0.7), (0.1, 0.1, 0.8), (0.0, 0.1, 0.9))
    assert E.SYNTHETIC_G == (12.0, 7.0, 2.0) and E.SYNTHETIC_R == (9.0, 3.0, 1.0)
    assert E.YOUTUBE_G == (184.0, 139.0, 102.0, 66.0, 37.0)
    assert E.YOUTUBE_P[3] == (0.00, 0.00, 0.06, 0.91, 0.03)
    assert E.TWITCH_G == (55.24, 42.40, 34.65, 28.30, 20.6)
    assert E.TWITCH_P[4] == (0.00, 0.00, 0.00, 0.02, 0.98)
    assert E.BUZZ_P == ((1.0, 0.0), (0.1462, 0.8538))
    assert E.BUZZ_B == ((0.1489, 0.4467, 0.4044), (0.3727, 0.5325, 0.0947))
    assert E.BUZZ_R == (10.0, 1.0)
    for name in E.EXPERIMENTS:
        model = E.get(name).build_model()
        np.testing.assert_allclose(model.P.sum(axis=1), 1.0)


def test_solve_synthetic(tmp_path, capsys):
    assert run("--out-dir", tmp_path, "solve", "--experiment", "synthetic", "--M", 30) == 0
    out = capsys.readouterr().out
    assert "A4 holds" in out
    assert sorted(p.name for p in tmp_path.glob("stop_set_l*.csv")) == [f"stop_set_l{l}.csv" for l in range(1, 6)]


def test_solve_zero_discount_stops_everywhere(tmp_path):
    assert run("--out-dir", tmp_path, "solve", "--experiment", "synthetic", "--rho", 0, "--M", 10) == 0
    rows = (tmp_path / "stop_set_l1.csv").read_text().splitlines()[1:]
    assert all(r.endswith(",1") for r in rows)


def test_solve_refuses_five_states(tmp_path, capsys):
    assert run("--out-dir", tmp_path, "solve", "--experiment", "youtube") == 2
    assert "impractical" in capsys.readouterr().err


def test_fit_missing_file(capsys):
    assert run("fit", "does_not_exist.csv") == 2
    assert "does_not_exist.csv" in capsys.readouterr().err


def test_fit_malformed_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("viewers\n4\n5\nseven\n")
    assert run("fit", bad) == 2
    assert ":4:" in capsys.readouterr().err


def test_fit_constant_csv_selects_one_state(tmp_path, capsys):
    data = tmp_path / "c.csv"
    data.write_text("\n".join(["9"] * 40) + "\n")
    assert run("--out-dir", tmp_path / "o", "fit", data, "--s-max", 3) == 0
    doc = json.loads((tmp_path / "o" / "model.json").read_text())
    assert doc["S"] == 1
    assert (tmp_path / "o" / "scores.csv").exists() and (tmp_path / "o" / "qq.csv").exists()


def test_fit_simulated_series(tmp_path):
    assert run("--out-dir", tmp_path, "simulate", "--experiment", "synthetic", "--length", 1500) == 0
    assert run("--out-dir", tmp_path, "fit", tmp_path / "series.csv", "--s-min", 2, "--s-max", 4) == 0
    scores = (tmp_path / "scores.csv").read_text().splitlines()
    assert scores[0] == "S,loglik,AIC,BIC" and len(scores) == 4


def test_optimize_and_compare_are_deterministic(tmp_path):
    args = ["--seed", 3, "optimize", "--experiment", "synthetic", "--iterations", 3, "--restarts", 2, "--batch", 30, "--N", 40]
    assert run("--out-dir", tmp_path / "a", *args) == 0
    assert run("--out-dir", tmp_path / "b", *args) == 0
    for name in ("trace.csv", "policy.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    cmp_args = ["--seed", 3, "compare", "--experiment", "synthetic", "--policy", tmp_path / "a" / "policy.json", "--batch", 200, "--N", 40]
    assert run("--out-dir", tmp_path / "c", *cmp_args) == 0
    assert run("--out-dir", tmp_path / "d", *cmp_args) == 0
    assert (tmp_path / "c" / "comparison.csv").read_bytes() == (tmp_path / "d" / "comparison.csv").read_bytes()
    lines = (tmp_path / "c" / "comparison.csv").read_text().splitlines()
    assert lines[0] == "policy,mean,stderr,batch,seed"
    assert [l.split(",")[0] for l in lines[1:]] == ["LinearThreshold", "Periodic", "Random"]


def test_optimize_zero_iterations_echoes_warm_start(tmp_path):
    phi = np.array([[0.5, 1.2], [0.4, 0.3]])
    phi_to_theta(phi).save(tmp_path / "warm.json")
    assert run("--out-dir", tmp_path / "o", "optimize", "--experiment", "synthetic", "--L", 2,
               "--iterations", 0, "--restarts", 1, "--batch", 20, "--warm-start", tmp_path / "warm.json") == 0
    doc = json.loads((tmp_path / "o" / "policy.json").read_text())
    np.testing.assert_allclose(doc["phi"], phi)


def test_optimize_rejects_infeasible_warm_start(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"L": 1, "S": 3, "theta": [[0.5, 1.0]], "phi": [[0.1, 0.2]]}))
    assert run("optimize", "--experiment", "synthetic", "--L", 1, "--warm-start", tmp_path / "bad.json") == 2
    assert "rejected" in capsys.readouterr().err


def test_compare_same_policy_twice(tmp_path, capsys):
    phi_to_theta(np.full((5, 2), 0.8)).save(tmp_path / "p.json")
    p = tmp_path / "p.json"
    assert run("--out-dir", tmp_path, "compare", "--experiment", "synthetic", "--policy", p, "--policy", p, "--batch", 100, "--N", 30) == 0
    rows = [l.split(",") for l in (tmp_path / "comparison.csv").read_text().splitlines()[1:]]
    assert rows[0][1] == rows[1][1]


def test_compare_dimension_mismatch(tmp_path, capsys):
    phi_to_theta(np.full((5, 4), 0.8)).save(tmp_path / "p.json")
    assert run("compare", "--experiment", "synthetic", "--policy", tmp_path / "p.json") == 2
    assert "dimension mismatch" in capsys.readouterr().err


def test_detect_outputs(tmp_path, capsys):
    obs = tmp_path / "obs.csv"
    obs.write_text("symbol\n" + "\n".join(["1"] * 5 + ["2"] * 20) + "\n")
    assert run("--out-dir", tmp_path, "detect", "--observations", obs, "--rho", 0.99) == 0
    assert "detection:" in capsys.readouterr().out
    assert (tmp_path / "beliefs.csv").read_text().startswith("t,observation,pi_1,pi_2\n")


def test_detect_empty_series_is_usage_error(tmp_path):
    obs = tmp_path / "obs.csv"
    obs.write_text("symbol\n")
    assert run("detect", "--observations", obs) == 2


def test_detect_none_status(tmp_path, capsys):
    model = {"S": 2, "P": [[1.0, 0.0], [0.0, 1.0]], "pi0": [0.0, 1.0],
             "emission": {"kind": "categorical", "B": [[0.5, 0.5], [0.5, 0.5]]}}
    (tmp_path / "m.json").write_text(json.dumps(model))
    obs = tmp_path / "obs.csv"
    obs.write_text("\n".join(["0"] * 10) + "\n")
    assert run("--out-dir", tmp_path, "detect", "--model", tmp_path / "m.json", "--observations", obs, "--reward", 10, -1) == 0
    assert "detection: none" in capsys.readouterr().out


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("experiment: synthetic\nL: 2\nrho: 0.5\ngrid:\n  M: 12\nsim:\n  N: 30\n  batch: 50\n")
    assert run("--config", cfg, "--out-dir", tmp_path / "a", "solve") == 0
    rows = (tmp_path / "a" / "solution.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 91  # L = 2 from the config, M = 12 grid
    assert run("--config", cfg, "--out-dir", tmp_path / "b", "solve", "--L", 1) == 0
    assert len((tmp_path / "b" / "solution.csv").read_text().splitlines()) == 1 + 91


def test_config_errors(tmp_path, capsys):
    assert run("--config", tmp_path / "nope.yaml", "solve") == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment: synthetic\nmodel_file: x.json\n")
    assert run("--config", bad, "solve") == 2
    bad.write_text("colour: blue\n")
    assert run("--config", bad, "solve") == 2


def test_unknown_subcommand_is_usage_error():
    assert run("frobnicate") == 2


def test_experiment_buzz_change(tmp_path, capsys):
    assert run("--out-dir", tmp_path, "experiment", "buzz-change", "--rho", 0.99) == 0
    assert "switch at t=" in capsys.readouterr().out
