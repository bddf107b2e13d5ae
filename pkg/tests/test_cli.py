import hashlib
import json
import subprocess
import sys

import pytest

from whittlesched.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY, main
from whittlesched.net import WhittleNetwork


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_run_writes_reports_and_figures(tmp_path, capsys):
    out = tmp_path / "r.json"
    code = main(["run", "--scenario", "scenario4", "--policy", "pf", "--horizon", "200",
                 "--out", str(out), "--plot", str(tmp_path / "fig")])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["policy"] == "prop_fair"
    report = json.loads(out.read_text())
    assert report["horizon"] == 200 and len(report["ues"]) == 6
    assert (tmp_path / "r.csv").read_text().startswith("ue_id,class_id,")
    for name in ("fig_violations.png", "fig_throughput.png"):
        assert (tmp_path / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_run_outputs_reproducible(tmp_path):
    hashes = []
    for k in range(2):
        out = tmp_path / f"r{k}.json"
        assert main(["run", "--scenario", "scenario4", "--policy", "windex", "--horizon", "150",
                     "--seed", "7", "--out", str(out), "--plot", str(tmp_path / f"f{k}")]) == EXIT_OK
        hashes.append([sha(out), sha(tmp_path / f"r{k}.csv"), sha(tmp_path / f"f{k}_violations.png"),
                       sha(tmp_path / f"f{k}_throughput.png")])
    assert hashes[0] == hashes[1]


def test_sliced_run(tmp_path):
    out = tmp_path / "s.json"
    assert main(["run", "--scenario", "slicing_ues", "--slices", "slicing3", "--policy", "pf",
                 "--horizon", "50", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["policy"].startswith("sliced:")


def test_train_reduced_budget(tmp_path, capsys):
    out = tmp_path / "xr.json"
    args = ["train", "--config", "train_xr", "--out", str(out), "--episodes", "4", "--episode-len", "40",
            "--batch-size", "2", "--seed", "3", "--plot", str(tmp_path / "curve.png")]
    assert main(args) == EXIT_OK
    assert WhittleNetwork.load(out).class_id == "xr"
    assert (tmp_path / "xr.log.csv").read_text().splitlines()[0] == "batch,mean_return,mean_tpt_mbps,grad_norm"
    assert (tmp_path / "curve.png").exists()
    first = sha(out)
    assert main(args) == EXIT_OK
    assert sha(out) == first


def test_trained_model_drives_run(tmp_path):
    assert main(["train", "--class", "embb", "--out", str(tmp_path / "embb.json"), "--episodes", "2",
                 "--episode-len", "20", "--batch-size", "2"]) == EXIT_OK
    cfg = tmp_path / "sc.yaml"
    cfg.write_text("scenario:\n  total_rbgs: 13\n  horizon: 30\n  ues:\n"
                   "    - {class: embb, count: 2, model: embb.json}\n")
    assert main(["run", "--scenario", str(cfg), "--policy", "windex", "--out", str(tmp_path / "o.json")]) == EXIT_OK
    cfg.write_text("scenario:\n  total_rbgs: 13\n  horizon: 30\n  ues:\n"
                   "    - {class: xr, count: 2, model: embb.json}\n")
    assert main(["run", "--scenario", str(cfg), "--policy", "windex", "--out", str(tmp_path / "o.json")]) \
        == EXIT_INVALID


def test_verify_oracle_and_failure_code(tmp_path, monkeypatch):
    out = tmp_path / "v.json"
    assert main(["verify-oracle", "--instances", "3", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["passed"] is True

    import whittlesched.cli as cli

    class Failed:
        passed = False
        concavity_failures = [(0, 3, 0.5)]
        threshold_failures = indexability_failures = []
        max_dv_excess = 0.0

    monkeypatch.setattr(cli, "verify_sweep", lambda *a, **k: Failed())
    assert main(["verify-oracle", "--instances", "1"]) == EXIT_VERIFY


def test_index_table_output(tmp_path, capsys):
    assert main(["index-table", "--config", "oracle", "--tol", "1e-9", "--out", str(tmp_path / "i.csv")]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 9 and lines[0].startswith("0,")
    assert float(lines[8].split(",")[1]) == pytest.approx(8.0, abs=1e-6)
    assert main(["index-table", "--max-queue", "5"]) == EXIT_INVALID


def test_bench_inference(tmp_path, capsys):
    assert main(["bench-inference", "--repeats", "20", "--out", str(tmp_path / "b.json")]) == EXIT_OK
    res = json.loads((tmp_path / "b.json").read_text())
    assert res["n_ues"] == 20 and res["single"]["p99_us"] > 0


@pytest.mark.parametrize("argv", [
    [],
    ["run", "--scenario", "scenario4"],
    ["run", "--scenario", "scenario4", "--policy", "fifo", "--out", "x.json"],
    ["run", "--scenario", "nosuchscenario", "--policy", "rr", "--out", "x.json"],
    ["train", "--out", "m.json"],
    ["train", "--class", "video", "--out", "m.json"],
])
def test_invalid_invocations(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_INVALID


def test_bad_config_message(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("scenario:\n  total_rbgs: 17\n  ues: [{class: xr}]\n  horizon: -4\n")
    assert main(["run", "--scenario", str(cfg), "--policy", "rr", "--out", str(tmp_path / "o.json")]) == EXIT_INVALID
    assert "scenario.horizon" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path):
    cfg = tmp_path / "t.yaml"
    cfg.write_text("train:\n  class: urllc\n  episodes_total: 4\n  episode_len: 20\n  batch_size: 2\n  lr: 1.0e+8\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m.json")]) == EXIT_RUNTIME
    assert (tmp_path / "m.last_good.json").exists()


def test_console_entry_point_verbose_flag(tmp_path):
    res = subprocess.run([sys.executable, "-m", "whittlesched", "run", "-v", "--scenario", "scenario4",
                          "--policy", "rr", "--horizon", "20", "--out", str(tmp_path / "o.json")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["policy"] == "round_robin"
