import json

import pytest

from rtca.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "ctde": {"algo": "qmix", "checkpoint": str(root / "qmix"),
                 "train": {"hidden": [8], "log_every": 5}},
        "jointq": {"checkpoint": str(root / "qjt.json"), "train": {"hidden": [8]}},
        "de": {"population_size": 12, "T": 2, "M": 1},
        "eval": {"episodes": 2, "seeds": [0]},
    }
    path = root / "run.json"
    path.write_text(json.dumps(cfg))
    assert main(["train", "--config", str(path), "--episodes", "10"]) == 0
    assert main(["train", "--config", str(path), "--episodes", "10", "--algo", "vdn",
                 "--out", str(root / "vdn")]) == 0
    assert main(["train-sarsa-q", "--config", str(path), "--steps", "200"]) == 0
    return root, path


def test_evaluate_sweep(workspace, capsys):
    root, path = workspace
    assert main(["evaluate", "--config", str(path), "--method", "none,random,rtca",
                 "--victims", "1,2", "--out", str(root / "ev")]) == 0
    out = capsys.readouterr().out
    assert "rtca WR" in out and "random Reward" in out
    lines = (root / "ev" / "report.csv").read_text().splitlines()
    assert len(lines) == 7


def test_ablate_and_transfer(workspace, capsys):
    root, path = workspace
    assert main(["ablate", "--config", str(path), "--out", str(root / "ab")]) == 0
    assert "VDN/QMIX WR" in capsys.readouterr().out
    vdn_cfg = json.loads(path.read_text())
    vdn_cfg["ctde"]["checkpoint"] = str(root / "vdn")
    vdn_path = root / "vdn.json"
    vdn_path.write_text(json.dumps(vdn_cfg))
    assert main(["transfer", "--config", str(vdn_path), "--qnet", str(root / "qjt.json"),
                 "--out", str(root / "tr")]) == 0
    assert "Q~jt(QMIX) WR" in capsys.readouterr().out


def test_report_merges(workspace, capsys):
    root, path = workspace
    main(["evaluate", "--config", str(path), "--method", "none", "--out", str(root / "a")])
    main(["evaluate", "--config", str(path), "--method", "random", "--out", str(root / "b")])
    capsys.readouterr()
    merged = root / "merged.csv"
    assert main(["report", str(root / "a" / "report.csv"), str(root / "b" / "report.csv"),
                 "--out", str(merged)]) == 0
    assert len(merged.read_text().splitlines()) == 3
    assert "random" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["evaluate", "--config", "/nonexistent/run.json"],
    ["train-sarsa-q"],
    ["report", "/nonexistent.csv"],
])
def test_errors_exit_nonzero(argv, capsys):
    assert main(argv) != 0
    assert "error" in capsys.readouterr().err


def test_bad_config_key(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"attack": {"radius": 1}}))
    assert main(["evaluate", "--config", str(path)]) == 2
    assert "radius" in capsys.readouterr().err
