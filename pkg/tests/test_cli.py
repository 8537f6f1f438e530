import csv
import json
import shutil
import statistics
import subprocess
import sys

import pytest

from calibrex import cli

FAST = {"trials": 3, "batch_size": 2, "pool_size": 150, "hyper_starts": 2, "hyper_sweeps": 1,
        "parallelism": 2}


def write_config(tmp_path, name="quad", **extra):
    cfg = {"simulator": {"kind": "builtin", "name": "quad2"}, **FAST, **extra}
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def calibrate(cfg, out, *extra):
    return cli.main(["calibrate", "--config", str(cfg), "--out", str(out), *extra])


def test_calibrate_writes_all_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert calibrate(write_config(tmp_path), out) == 0
    assert "best loss" in capsys.readouterr().out
    for name in ("trace.csv", "curve.csv", "report.json", "state.json", "config.json"):
        assert (out / name).is_file()
    trace = read_csv(out / "trace.csv")
    assert trace[0] == ["iteration", "point_id", "theta_1", "theta_2", "latent", "loss", "wall_time", "status"]
    assert len(trace) - 1 == 20 + 3 * 2
    assert [int(r[1]) for r in trace[1:]] == list(range(26))
    curve = read_csv(out / "curve.csv")
    assert curve[0] == ["iteration", "min_loss"]
    values = [float(r[1]) for r in curve[1:]]
    assert [int(r[0]) for r in curve[1:]] == [0, 1, 2, 3]
    assert values == sorted(values, reverse=True)
    report = json.loads((out / "report.json").read_text())
    assert report["best"]["loss"] == values[-1]
    assert min(float(r[5]) for r in trace[1:] if r[7] == "ok") == values[-1]


def test_rerun_refused_without_force(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert calibrate(cfg, out) == 0
    assert calibrate(cfg, out) == 2
    assert calibrate(cfg, out, "--force") == 0


def test_same_seed_gives_byte_identical_curve(tmp_path):
    cfg = write_config(tmp_path)
    assert calibrate(cfg, tmp_path / "a", "--seed", "4") == 0
    assert calibrate(cfg, tmp_path / "b", "--seed", "4") == 0
    assert (tmp_path / "a" / "curve.csv").read_bytes() == (tmp_path / "b" / "curve.csv").read_bytes()


def test_interrupted_run_resumes_to_the_same_curve(tmp_path):
    cfg = write_config(tmp_path, trials=4)
    assert calibrate(cfg, tmp_path / "full") == 0
    assert calibrate(cfg, tmp_path / "part", "--stop-after", "2") == 0
    assert not json.loads((tmp_path / "part" / "state.json").read_text())["finished"]
    assert calibrate(cfg, tmp_path / "part") == 0
    assert (tmp_path / "part" / "curve.csv").read_bytes() == (tmp_path / "full" / "curve.csv").read_bytes()


def test_resume_with_changed_config_needs_force(tmp_path):
    out = tmp_path / "part"
    assert calibrate(write_config(tmp_path, trials=4), out, "--stop-after", "1") == 0
    assert calibrate(write_config(tmp_path, trials=4), out, "--seed", "9") == 2


@pytest.mark.parametrize("mutate", [
    lambda c: c.update(simulator={"kind": "builtin", "name": "quad2",
                                  "bounds": {"lower": [0, 0], "upper": [1, -1]}}),
    lambda c: c.update(trials=0),
    lambda c: c.update(dr_mode="pca"),
    lambda c: c.update(unknown_key=1),
    lambda c: c.pop("simulator"),
])
def test_bad_configs_exit_2(tmp_path, mutate, capsys):
    cfg = {"simulator": {"kind": "builtin", "name": "quad2"}, **FAST}
    mutate(cfg)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    assert calibrate(path, tmp_path / "out") == 2
    assert "error" in capsys.readouterr().err


def test_missing_and_malformed_files_exit_2(tmp_path):
    assert calibrate(tmp_path / "nope.json", tmp_path / "out") == 2
    (tmp_path / "broken.json").write_text("{not json")
    assert calibrate(tmp_path / "broken.json", tmp_path / "out") == 2
    assert cli.main(["calibrate", "--config"]) == 2


def test_simulator_abort_exit_3(tmp_path, child):
    cmd = child("sys.exit(1)\n")
    path = write_config(tmp_path, simulator={
        "kind": "external", "command": cmd, "observed": [0.0, 0.0],
        "bounds": {"lower": [-1, -1], "upper": [1, 1]}})
    assert calibrate(path, tmp_path / "out") == 3


def test_observed_series_from_file(tmp_path, child):
    (tmp_path / "obs.csv").write_text("0.5, 1.5\n")
    cmd = child("""
req = json.loads(sys.stdin.readline())
print(json.dumps({"id": req["id"], "y": req["theta"]}))
""")
    path = write_config(tmp_path, trials=1, simulator={
        "kind": "external", "command": cmd, "observed": "obs.csv",
        "bounds": {"lower": [-2, -2], "upper": [2, 2]}})
    assert calibrate(path, tmp_path / "out") == 0
    cfg = json.loads((tmp_path / "out" / "config.json").read_text())
    assert cfg["simulator"]["observed"] == [0.5, 1.5]


def test_subspace_finds_one_active_direction(tmp_path, capsys):
    path = tmp_path / "la.json"
    path.write_text(json.dumps({"simulator": {"kind": "builtin", "name": "linear_active"}}))
    assert cli.main(["subspace", "--config", str(path), "--out", str(tmp_path / "s")]) == 0
    assert "active_dim 1" in capsys.readouterr().out
    rows = read_csv(tmp_path / "s" / "eigvals.csv")
    assert rows[0] == ["index", "eigenvalue"]
    vals = [float(r[1]) for r in rows[1:]]
    assert len(vals) == 9 and vals == sorted(vals, reverse=True)
    assert json.loads((tmp_path / "s" / "subspace.json").read_text())["active_dim"] == 1


def test_subspace_on_one_dimension(tmp_path, capsys):
    path = tmp_path / "q1.json"
    path.write_text(json.dumps({"simulator": {"kind": "builtin", "name": "quad1"}}))
    assert cli.main(["subspace", "--config", str(path), "--out", str(tmp_path / "s")]) == 0
    assert "active_dim 1" in capsys.readouterr().out


def test_compare_shape_and_summary(tmp_path):
    a = write_config(tmp_path, "alpha")
    b = write_config(tmp_path, "beta", acquisition={"family": "ucb"})
    out = tmp_path / "cmp"
    argv = ["compare", "--config", str(a), "--config", str(b), "--seeds", "0,1", "--out", str(out)]
    assert cli.main(argv) == 0
    rows = read_csv(out / "compare.csv")
    assert rows[0] == ["config", "seed", "iteration", "min_loss"]
    body = rows[1:]
    assert len(body) == 2 * 2 * (3 + 1)
    assert {(r[0], r[1]) for r in body} == {("alpha", "0"), ("alpha", "1"), ("beta", "0"), ("beta", "1")}
    summary = read_csv(out / "summary.csv")
    assert summary[0] == ["config", "seeds", "median_final_min_loss", "min_final_min_loss", "max_final_min_loss"]
    for name, seeds, med, lo, hi in summary[1:]:
        finals = [float(r[3]) for r in body if r[0] == name and r[2] == "3"]
        assert int(seeds) == 2
        assert float(med) == statistics.median(finals)
        assert (float(lo), float(hi)) == (min(finals), max(finals))
    assert cli.main(argv) == 2
    assert cli.main(argv + ["--force"]) == 0


def test_compare_mode_cross_product(tmp_path):
    a = write_config(tmp_path, "alpha", trials=1)
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", str(a), "--dr", "original,as-static",
                     "--mean", "zero", "--out", str(out)]) == 0
    names = {r[0] for r in read_csv(out / "summary.csv")[1:]}
    assert names == {"original/mean=zero", "as-static/mean=zero"}


def test_floats_round_trip_exactly(tmp_path):
    out = tmp_path / "run"
    assert calibrate(write_config(tmp_path), out) == 0
    state = json.loads((out / "state.json").read_text())
    by_id = {r["id"]: r for r in state["evaluated"]}
    for row in read_csv(out / "trace.csv")[1:]:
        rec = by_id[row[1]]
        assert [float(row[2]), float(row[3])] == rec["theta"]
        assert float(row[5]) == rec["loss"]
        assert [float(v) for v in row[4].split(";")] == rec["latent"]


@pytest.mark.skipif(shutil.which("calibrex") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["calibrex", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("calibrex ")
    proc = subprocess.run([sys.executable, "-m", "calibrex.cli", "calibrate", "--config",
                           str(tmp_path / "missing.json"), "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2
