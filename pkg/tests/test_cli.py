import json

import pytest

from graph_metamers.cli import main

SBM = {"blocks": 2, "nodes_per_block": 10, "p_in": 0.3, "p_out": 0.05, "d": 8, "seed": 2}


@pytest.fixture
def trained_run(tmp_path):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"dataset": {"sbm": SBM}, "model": {"arch": "gcn", "hidden_dim": 8},
                               "train": {"epochs": 10, "lr": 0.01}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    return tmp_path / "run"


def test_train_outputs(trained_run):
    for name in ("model.json", "train_log.csv", "graph.json", "metrics.json"):
        assert (trained_run / name).exists()
    assert len((trained_run / "train_log.csv").read_text().splitlines()) == 11


@pytest.mark.parametrize("mode", ["feat-bin", "feat-cont", "struct"])
def test_metamer_command(trained_run, tmp_path, mode):
    out = tmp_path / mode
    rc = main(["metamer", "--model", str(trained_run / "model.json"), "--graph", str(trained_run / "graph.json"),
               "--mode", mode, "--layer", "1", "--steps", "5", "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    key = "cs_struct" if mode == "struct" else "cs_feat"
    assert report[key] is not None and (out / "metamer.json").exists()


def test_analyze_command(trained_run, tmp_path, capsys):
    rc = main(["analyze", "--model", str(trained_run / "model.json"), "--graph", str(trained_run / "graph.json"),
               "--nodes", "0,2-4", "--out", str(tmp_path / "an")])
    assert rc == 0
    lines = (tmp_path / "an" / "ranks.csv").read_text().splitlines()
    assert lines[0] == "node,rank,local_metamer_dim,sigma_max,sigma_min"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "2", "3", "4"]
    rc = main(["analyze", "--model", str(trained_run / "model.json"), "--graph", str(trained_run / "graph.json"),
               "--nodes", "1"])
    assert rc == 0 and json.loads(capsys.readouterr().out)[0]["node"] == 1


def test_generate_command(tmp_path):
    assert main(["generate", "--seed", "3", "--out", str(tmp_path / "g.json")]) == 0
    assert json.loads((tmp_path / "g.json").read_text())["n"] == 300


def test_experiment_command_is_deterministic(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"experiment": "feature-invariance", "dataset": {"sbm": SBM}, "seeds": [0, 1],
                                "train": {"epochs": 5}, "synth": {"steps": 5}, "model": {"hidden_dim": 8}}))
    for out in ("a", "b"):
        assert main(["experiment", "--spec", str(spec), "--out", str(tmp_path / out)]) == 0
    for name in ("results.csv", "table.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_exit_codes(trained_run, tmp_path):
    model, graph = str(trained_run / "model.json"), str(trained_run / "graph.json")
    # configuration errors
    assert main(["metamer", "--model", model, "--graph", graph, "--mode", "struct", "--layer", "9",
                 "--out", str(tmp_path / "x")]) == 2
    assert main(["analyze", "--model", model, "--graph", graph, "--nodes", "999"]) == 2
    bad = tmp_path / "bad_spec.json"
    bad.write_text(json.dumps({"experiment": "unknown"}))
    assert main(["experiment", "--spec", str(bad), "--out", str(tmp_path / "y")]) == 2
    # numeric divergence
    assert main(["metamer", "--model", model, "--graph", graph, "--mode", "feat-cont", "--lr", "1e300",
                 "--steps", "5", "--out", str(tmp_path / "z")]) == 3
    # missing or malformed files
    assert main(["analyze", "--model", str(tmp_path / "missing.json"), "--graph", graph, "--nodes", "0"]) == 4
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    assert main(["train", "--config", str(broken), "--out", str(tmp_path / "w")]) == 4


def test_argparse_rejects_unknown_mode(trained_run):
    with pytest.raises(SystemExit) as exc:
        main(["metamer", "--model", "m", "--graph", "g", "--mode", "feature", "--out", "o"])
    assert exc.value.code == 2
