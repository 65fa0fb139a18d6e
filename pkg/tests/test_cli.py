import csv
import json
import subprocess
import sys

import pytest

from ctxfer.cli import main


def test_verify_exits_zero(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 5 and all(line.startswith("PASS") for line in out)


def test_pretrain_then_run(tmp_path, capsys):
    bundle = tmp_path / "src"
    assert main(["pretrain", "--env", "maze-2room", "--out", str(bundle)]) == 0
    out = tmp_path / "out"
    code = main(["run", "--env", "maze-2room", "--strategy", "mars", "--trials", "2",
                 "--steps", "2000", "--sources", str(bundle), "--out", str(out), "--seed", "4"])
    assert code == 0
    for k in range(2):
        trial = out / f"trial_{k:03d}"
        assert {p.name for p in trial.iterdir()} == {"curve.csv", "gate_snapshots.csv", "meta.json"}
    meta = json.loads((out / "trial_000" / "meta.json").read_text())
    assert meta["config"]["seed"] == 4 and meta["config"]["strategy"] == "mars"
    with open(out / "curve.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["steps", "metric_mean", "metric_stderr"]
    assert [r[0] for r in rows[1:]] == ["1000", "2000"]


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"env": "maze-2room", "steps": 1000, "eval_every": 500, "trials": 3}))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--trials", "1", "--out", str(out)]) == 0
    assert [p.name for p in out.iterdir() if p.is_dir()] == ["trial_000"]
    meta = json.loads((out / "trial_000" / "meta.json").read_text())
    assert meta["config"]["eval_every"] == 500 and meta["config"]["trials"] == 1


def test_error_codes_reach_stderr(tmp_path, capsys):
    code = main(["run", "--env", "maze-2room", "--strategy", "mars", "--out", str(tmp_path)])
    assert code == 2
    assert "error [sources-not-found]" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"env": "maze", "gamma": 2.0}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "error [bad-config]" in capsys.readouterr().err


def test_unknown_env_is_a_usage_error():
    with pytest.raises(SystemExit):
        main(["pretrain", "--env", "lunar", "--out", "x"])


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ctxfer", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "verify" in proc.stdout
