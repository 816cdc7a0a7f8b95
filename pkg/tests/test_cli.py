import csv
import json

import numpy as np

from noma_deepsic.cli import main


def run(tmp_path, name, *extra):
    out = tmp_path / name
    code = main([*extra[:1], "--output-dir", str(out), *extra[1:]])
    return code, out


def read_bytes(out, name):
    return (out / name).read_bytes()


def test_estimate_twice_identical(tmp_path):
    a = run(tmp_path, "a", "estimate", "--snr-db", "0", "--trials", "1", "--seed", "7")
    b = run(tmp_path, "b", "estimate", "--snr-db", "0", "--trials", "1", "--seed", "7")
    assert a[0] == b[0] == 0
    assert read_bytes(a[1], "estimate_nrmse.csv") == read_bytes(b[1], "estimate_nrmse.csv")
    rows = list(csv.DictReader(open(a[1] / "estimate_nrmse.csv")))
    assert len(rows) == 1 and rows[0]["snr_db"] == "0.0"


def test_manifest_contents(tmp_path):
    code, out = run(tmp_path, "m", "complexity-sweep", "--k", "1..4")
    assert code == 0
    m = json.loads((out / "manifest.json").read_text())
    assert set(m) >= {"config", "artifacts", "versions", "wall_clock_s", "seed"}
    assert set(m["artifacts"]) == {"complexity.csv", "complexity_fit.json"}
    assert m["config"]["complexity"] == {"k_min": 1, "k_max": 4}


def test_complexity_sweep_laws(tmp_path):
    code, out = run(tmp_path, "c", "complexity-sweep", "--k", "1..8")
    assert code == 0
    rows = np.loadtxt(out / "complexity.csv", delimiter=",", skiprows=1)
    K, deepsic, joint = rows.T
    lin = np.polyfit(K, deepsic, 1)
    resid = deepsic - np.polyval(lin, K)
    assert 1 - resid @ resid / np.sum((deepsic - deepsic.mean()) ** 2) >= 0.99
    assert np.polyfit(K, joint, 2)[0] > 0


def test_replay(tmp_path):
    code, out = run(tmp_path, "r", "handover-sweep", "--trials", "10", "--velocities", "0", "60")
    assert code == 0
    assert main(["replay", str(out / "manifest.json"), "--output-dir", str(tmp_path / "r2")]) == 0


def test_jobs_do_not_change_output(tmp_path):
    a = run(tmp_path, "j1", "handover-sweep", "--trials", "10", "--velocities", "0", "60", "--jobs", "1")
    b = run(tmp_path, "j2", "handover-sweep", "--trials", "10", "--velocities", "0", "60", "--jobs", "2")
    assert read_bytes(a[1], "handover_sweep.csv") == read_bytes(b[1], "handover_sweep.csv")
    assert read_bytes(a[1], "handover_events.ndjson") == read_bytes(b[1], "handover_events.ndjson")


def test_config_file_and_errors(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[complexity]\nk_max = 3\n")
    code, out = run(tmp_path, "f", "complexity-sweep", "--config", str(cfg))
    assert code == 0
    assert len((out / "complexity.csv").read_text().splitlines()) == 4
    cfg.write_text("[complexity]\nk_top = 3\n")
    assert run(tmp_path, "g", "complexity-sweep", "--config", str(cfg))[0] == 2
    assert "complexity.k_top" in capsys.readouterr().err


def test_strict_certification_passes(tmp_path):
    code, _ = run(tmp_path, "s", "estimate", "--snr-db", "0", "--trials", "2", "--strict")
    assert code == 0


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("NOMA_DEEPSIC_OUT", str(tmp_path / "env"))
    assert main(["complexity-sweep", "--k", "1..2"]) == 0
    assert (tmp_path / "env" / "complexity.csv").exists()


def test_set_override(tmp_path):
    code, out = run(tmp_path, "o", "complexity-sweep", "--set", "complexity.k_max=2")
    assert code == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["complexity"]["k_max"] == 2
