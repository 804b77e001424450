import json

import numpy as np
import pytest

from collapsar.cli import main
from collapsar.errors import ConfigError, ShapeError
from collapsar.scenario import DEFAULTS, ScenarioShapeError, parse_scenario


def write(tmp_path, tree, name="sc.json"):
    p = tmp_path / name
    p.write_text(json.dumps(tree))
    return str(p)


def test_minimal_scenario_echoes_defaults():
    sc = parse_scenario({"run": {"mode": "oracle"}})
    assert sc.echo["discretization"] == DEFAULTS["discretization"]
    assert sc.echo["system"]["A"] == ["sigma_z"]
    assert sc.grid.steps == 1000 and sc.system.dim == 2
    assert np.allclose(sc.psi0, [0.6, 0.8])


def test_negative_gamma_names_field():
    with pytest.raises(ConfigError, match="system.gamma"):
        parse_scenario({"system": {"gamma": -1}})


def test_every_problem_is_listed():
    with pytest.raises(ConfigError) as exc:
        parse_scenario({"system": {"gamma": -1}, "run": {"mode": "bogus", "n_traj": 0}, "extra": 1})
    msg = str(exc.value)
    for field in ("system.gamma", "run.mode", "run.n_traj", "extra"):
        assert field in msg


def test_dimension_mismatch_is_shape_error():
    tree = {"system": {"H": "sigma_x", "A": ["sigma_z", [[1, 0, 0], [0, 1, 0], [0, 0, 1]]]},
            "kernel": {"type": "cosine_sum", "weights": [[[1.0, 0.0], [0.0, 1.0]]], "omegas": [2.0]}}
    with pytest.raises(ScenarioShapeError, match=r"system\.A\[1\]") as exc:
        parse_scenario(tree)
    assert isinstance(exc.value, ShapeError)


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "run": {\n    "mode": "oracle",\n  }\n}')
    with pytest.raises(ConfigError, match="line 4"):
        parse_scenario(str(p))


def test_explicit_operator_forms():
    sc = parse_scenario({"system": {"H": {"preset": "sigma_x", "scale": 0.5}, "A": [[[1, 0], [0, [-1, 0]]]],
                                    "psi0": "+i"}})
    assert np.allclose(sc.system.H.data, 0.5 * np.array([[0, 1], [1, 0]]))
    assert np.allclose(sc.psi0, np.array([1, 1j]) / np.sqrt(2))


def test_dt_must_divide_T():
    with pytest.raises(ConfigError, match="multiple"):
        parse_scenario({"discretization": {"dt": 0.3, "T": 1.0}})
    with pytest.raises(ConfigError, match="T"):
        parse_scenario({"discretization": {"dt": 0.5, "T": 0.1}})


SMALL = {"discretization": {"dt": 0.01, "T": 0.2, "n_max": 6}, "run": {"n_traj": 8}}


def with_mode(mode, **run):
    tree = json.loads(json.dumps(SMALL))
    tree["run"]["mode"] = mode
    tree["run"].update(run)
    return tree


@pytest.mark.parametrize("mode", ["oracle", "markov", "nonmarkov", "bohm", "compare", "noise-stats"])
def test_run_modes_are_byte_reproducible(tmp_path, mode):
    sc = write(tmp_path, with_mode(mode))
    assert main(["run", "--scenario", sc, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--scenario", sc, "--out", str(tmp_path / "b")]) == 0
    man_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    man_b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man_a["files"] == man_b["files"] and man_a["files"]
    for name in man_a["files"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert {"scenario", "seed", "versions", "wall_time_s", "checks"} <= set(man_a)
    for c in man_a["checks"]:
        assert c["tag"] and isinstance(c["passed"], bool)


def test_csv_headers(tmp_path):
    sc = write(tmp_path, with_mode("compare"))
    main(["compare", "--scenario", sc, "--out", str(tmp_path / "o")])
    bohm = (tmp_path / "o" / "bohm_trajectory_0.csv").read_text().splitlines()
    assert bohm[0] == "t,xplus_0_0,xminus_0_0,<A_0>,fidelity_vs_collapse"
    assert all(len(r.split(",")) == 5 and r.split(",")[-1] for r in bohm[1:])
    assert (tmp_path / "o" / "compare.csv").read_text().startswith("t,min_fidelity,mean_fidelity\n")


def test_subcommands(tmp_path):
    sc = write(tmp_path, SMALL)
    for cmd in ("factorize-kernel", "sample-noise", "run-markov", "run-nonmarkov", "run-bohm", "run-oracle"):
        out = tmp_path / cmd
        assert main([cmd, "--scenario", sc, "--out", str(out)]) == 0
        assert (out / "manifest.json").exists()
    assert json.loads((tmp_path / "factorize-kernel" / "modes.json").read_text())["omega"] == [2.0]


def test_seed_override_changes_data(tmp_path):
    sc = write(tmp_path, with_mode("markov"))
    main(["run", "--scenario", sc, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["run", "--scenario", sc, "--out", str(tmp_path / "b"), "--seed", "2"])
    a = (tmp_path / "a" / "markov_trajectory_0.csv").read_bytes()
    b = (tmp_path / "b" / "markov_trajectory_0.csv").read_bytes()
    assert a != b
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 2


def test_threads_do_not_change_output(tmp_path, monkeypatch):
    sc = write(tmp_path, with_mode("nonmarkov"))
    main(["run", "--scenario", sc, "--out", str(tmp_path / "a"), "--threads", "1"])
    monkeypatch.setenv("COLLAPSAR_THREADS", "3")
    main(["run", "--scenario", sc, "--out", str(tmp_path / "b")])
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["scenario"]["run"]["threads"] == 3
    for name in ("nonmarkov_rho_final.json", "nonmarkov_weights.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_exit_code_config_error(tmp_path, capsys):
    sc = write(tmp_path, {"system": {"gamma": -1}})
    assert main(["run", "--scenario", sc, "--out", str(tmp_path / "o")]) == 2
    assert "system.gamma" in capsys.readouterr().err
    assert main(["run", "--scenario", str(tmp_path / "missing.json")]) == 2


def test_exit_code_numerical_failure(tmp_path):
    # 2 oscillators per mode pair at n_max = 40 exceed the joint-dimension cap
    tree = with_mode("bohm")
    tree["discretization"]["n_max"] = 40
    assert main(["run", "--scenario", write(tmp_path, tree), "--out", str(tmp_path / "o")]) == 3


def test_exit_code_check_failure(tmp_path):
    # coarse grid: the dephasing closed form is missed by more than 1e-6
    tree = with_mode("oracle")
    tree["discretization"].update({"dt": 0.05, "T": 1.0})
    sc = write(tmp_path, tree)
    assert main(["run", "--scenario", sc, "--out", str(tmp_path / "o")]) == 0
    assert main(["run", "--scenario", sc, "--out", str(tmp_path / "o"), "--check"]) == 4
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert not man["all_checks_passed"]


def test_default_oracle_scenario_passes_checks(tmp_path):
    sc = write(tmp_path, {"run": {"mode": "oracle"}})
    assert main(["run-oracle", "--scenario", sc, "--out", str(tmp_path / "o"), "--check"]) == 0
