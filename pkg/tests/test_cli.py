import json

import pytest

from appf.cases import build_reference_case
from appf.cli import EXIT_CONFIG, EXIT_OK, EXIT_SIMULATION, main
from appf.grid import network_to_dict, save_network


def read_summary(out, run="case1_none"):
    return json.loads((out / run / "summary.json").read_text())


def test_list_scenarios(capsys):
    assert main(["list-scenarios"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "case1" in text and "simultaneous" in text and "hierarchical" in text


def test_validate_reference_case(capsys):
    assert main(["validate-case"]) == EXIT_OK
    assert "buses=33 areas=3 sg=9 ibr=6 ties=3" in capsys.readouterr().out


def test_validate_rejects_broken_case_file(tmp_path):
    data = network_to_dict(build_reference_case())
    data["branches"][0]["is_tie_line"] = not data["branches"][0]["is_tie_line"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    assert main(["validate-case", str(path)]) == EXIT_CONFIG


def test_run_writes_artifacts(tmp_path):
    out = tmp_path / "out"
    rc = main(["run", "-s", "case1", "-m", "none", "--duration", "11", "-o", str(out)])
    assert rc == EXIT_OK
    names = {p.name for p in (out / "case1_none").iterdir()}
    assert {"trajectory.csv", "metadata.json", "summary.json", "plot_data.json"} <= names
    assert read_summary(out)["duration_s"] == 11.0


def test_config_file_overrides_flags(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"duration": 10.5, "output_dir": str(tmp_path / "from-file")}))
    rc = main(["run", "-s", "case1", "-m", "none", "--duration", "12", "-o", str(tmp_path / "from-flags"),
               "--config", str(cfg)])
    assert rc == EXIT_OK
    assert read_summary(tmp_path / "from-file")["duration_s"] == 10.5
    assert not (tmp_path / "from-flags").exists()


def test_case_file_round_trip_through_cli(tmp_path):
    path = tmp_path / "case.json"
    save_network(build_reference_case(), path)
    out = tmp_path / "o"
    assert main(["run", "-s", "case1", "-m", "none", "--duration", "10.5", "--case-file", str(path),
                 "-o", str(out)]) == EXIT_OK
    assert (out / "case1_none" / "trajectory.csv").exists()


@pytest.mark.parametrize("argv", [
    ["run", "-s", "nope"],
    ["run", "-m", "telepathy"],
    ["run", "--duration", "5"],
    ["run", "--case-file", "/nonexistent/case.json"],
])
def test_configuration_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["-o", str(tmp_path)]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_bad_config_file_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    bad.write_text(json.dumps({"colour": "blue"}))
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG


def test_simulation_failure_exits_3(tmp_path, capsys):
    rc = main(["run", "-s", "case1", "-m", "none", "--event-mw", "3000", "--duration", "10.5",
               "-o", str(tmp_path)])
    assert rc == EXIT_SIMULATION
    assert "SimulationAbort" in capsys.readouterr().err


def test_compare_writes_table(tmp_path, capsys):
    assert main(["compare", "-s", "case1", "-o", str(tmp_path)]) == EXIT_OK
    util = json.loads((tmp_path / "case1_utilization.json").read_text())
    assert util["appf_contingent_area"] > util["rpf_contingent_area"]
    header = (tmp_path / "case1_steady_state.csv").read_text().splitlines()[0]
    assert header.startswith("bus,pre_p")


def test_figures_without_matplotlib_is_a_config_error(tmp_path, monkeypatch):
    import importlib.util
    real = importlib.util.find_spec
    monkeypatch.setattr(importlib.util, "find_spec", lambda name, *a: None if name == "matplotlib" else real(name, *a))
    assert main(["run", "-s", "case1", "-m", "none", "--figures", "-o", str(tmp_path)]) == EXIT_CONFIG
