import json

import pytest

from rgpl.cli import main


def run(tmp_path, *args):
    return main(list(args) + ["--out", str(tmp_path)])


def test_free_energy_command(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"potential": {"name": "quadratic"}, "F_grid": [[0.0], [0.1]]}))
    assert run(tmp_path, "free-energy", "--config", str(cfg), "--seed", "3") == 0
    out = json.loads((tmp_path / "free-energy.json").read_text())
    assert out["seed"] == 3 and len(out["result"]["rows"]) == 2
    assert json.loads(capsys.readouterr().out) == out


def test_missing_seed_is_precondition(tmp_path):
    assert run(tmp_path, "free-energy") == 2


def test_bad_beta_is_precondition(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"beta": 0.5}))
    assert run(tmp_path, "free-energy", "--config", str(cfg), "--seed", "1") == 2


def test_unreadable_config(tmp_path):
    assert run(tmp_path, "frd", "--config", str(tmp_path / "missing.json"), "--seed", "1") == 2


def test_global_flags_before_subcommand(tmp_path):
    assert main(["--seed", "1", "--out", str(tmp_path), "frd"]) == 0
    assert (tmp_path / "frd.npz").exists()


def test_nonconvex_scan_is_inconclusive_or_nonconvex(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"potential": {"name": "double-well", "c": 0.5}, "beta": 64.0,
                               "F_grid": [[0.775]], "samples": 512, "replicates": 4}))
    assert run(tmp_path, "convexity", "--config", str(cfg), "--seed", "1") == 4


def test_polymers_command(tmp_path):
    assert run(tmp_path, "polymers", "--seed", "1", "--max-blocks", "2") == 0
    lines = (tmp_path / "polymers.jsonl").read_text().splitlines()
    assert len(lines) > 0 and all(json.loads(l) for l in lines)


@pytest.mark.parametrize("cmd", ["null-lagrangian", "elasticity"])
def test_elasticity_commands(tmp_path, cmd):
    extra = ["--trials", "10"] if cmd == "null-lagrangian" else ["--fields", "3"]
    assert run(tmp_path, cmd, "--seed", "2", *extra) == 0
