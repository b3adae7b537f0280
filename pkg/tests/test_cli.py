import csv
import json

import numpy as np
import pytest

from oar.cli import main, read_pairs
from oar.errors import ParseError
from oar.pointcloud_io import PointCloud, load_cloud, save_cloud
from oar.synthetic import fibonacci_sphere, radial_warp

FAST = ["--epochs", "6", "--k", "8"]


@pytest.fixture(scope="module")
def clouds(tmp_path_factory):
    d = tmp_path_factory.mktemp("clouds")
    src = fibonacci_sphere(300)
    gt = radial_warp(src) * 3.0 + [2.0, 0.0, -1.0]
    save_cloud(PointCloud(src), d / "source.ply")
    save_cloud(PointCloud(gt), d / "gt.ply")
    save_cloud(PointCloud(gt[30:]), d / "target.xyz")
    return d


@pytest.fixture(scope="module")
def run(clouds, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["register", "--source", str(clouds / "source.ply"), "--target", str(clouds / "target.xyz"),
                 "--gt", str(clouds / "gt.ply"), "--out-dir", str(out), *FAST])
    assert code == 0
    return out


def test_register_outputs(run):
    for name in ("deformed.ply", "displacement.csv", "loss.csv", "metrics.json", "manifest.json",
                 "network.oarn", "loss.png", "errors.png"):
        assert (run / name).is_file(), name
    assert len(load_cloud(run / "deformed.ply")) == 300
    assert len((run / "loss.csv").read_text().splitlines()) == 7
    metrics = json.loads((run / "metrics.json").read_text())
    assert 0 <= metrics["acc_r"] <= 100


def test_register_manifest(run, clouds):
    man = json.loads((run / "manifest.json").read_text())
    assert man["subcommand"] == "register" and man["status"] == "ok"
    cfg = man["config"]
    assert (cfg["lr"], cfg["sigma2"], cfg["alpha1"], cfg["alpha2"]) == (1e-4, 1.0, 1e4, 1e2)
    assert cfg["epochs"] == 6 and cfg["k"] == 8
    assert man["inputs"]["source"]["sha256"] and len(man["inputs"]["source"]["sha256"]) == 64
    assert set(man["transforms"]) == {"source", "target"}
    assert man["started"] <= man["finished"]


def test_register_defaults_echo(clouds, tmp_path, monkeypatch):
    import oar.cli as cli
    seen = {}

    def fake(source, target, pairs, cfg):
        seen["cfg"] = cfg
        raise ValueError("stop")

    monkeypatch.setattr(cli, "register", fake)
    code = main(["register", "--source", str(clouds / "source.ply"), "--target", str(clouds / "target.xyz"),
                 "--out-dir", str(tmp_path)])
    assert code == 1
    c = seen["cfg"]
    assert (c.epochs, c.lr, c.sigma2, c.k, c.alpha1, c.alpha2) == (200, 1e-4, 1.0, 30, 1e4, 1e2)
    assert c.loss == "mcc" and c.kernel == "per_coordinate"


def test_manifest_reproduces_run(run, tmp_path):
    code = main(["register", "--config", str(run / "manifest.json"), "--out-dir", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "loss.csv").read_bytes() == (run / "loss.csv").read_bytes()
    assert (tmp_path / "deformed.ply").read_bytes() == (run / "deformed.ply").read_bytes()


def test_config_file_and_precedence(clouds, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"source": str(clouds / "source.ply"), "target": str(clouds / "target.xyz"),
                               "epochs": 2, "k": 8, "loss": "cd", "alpha2": 0}))
    out = tmp_path / "o"
    assert main(["register", "--config", str(cfg), "--out-dir", str(out), "--epochs", "3", "--no-plot"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["epochs"] == 3 and man["config"]["loss"] == "cd"
    assert not (out / "loss.png").exists()
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["register", "--config", str(cfg), "--out-dir", str(out)]) == 1


def test_missing_target_is_usage_error(clouds, tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["register", "--source", str(clouds / "source.ply"), "--out-dir", str(tmp_path)])
    assert info.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_bad_flag_value_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["register", "--epochs", "many"])
    assert info.value.code == 1


def test_unreadable_input(tmp_path):
    bad = tmp_path / "bad.xyz"
    bad.write_text("1 2\n")
    assert main(["register", "--source", str(bad), "--target", str(bad), "--out-dir", str(tmp_path)]) == 1
    assert main(["register", "--source", str(tmp_path / "none.xyz"), "--target", str(bad),
                 "--out-dir", str(tmp_path)]) == 1


def test_non_finite_loss_exit_code(clouds, tmp_path, monkeypatch):
    import oar.registration as reg
    real = reg.total_loss
    calls = []

    def poisoned(*args, **kwargs):
        out = real(*args, **kwargs)
        calls.append(1)
        if len(calls) == 3:
            out.total = float("inf")
        return out

    monkeypatch.setattr(reg, "total_loss", poisoned)
    code = main(["register", "--source", str(clouds / "source.ply"), "--target", str(clouds / "target.xyz"),
                 "--out-dir", str(tmp_path), *FAST])
    assert code == 2
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["status"].startswith("non_finite") and man["epochs_run"] == 2
    assert (tmp_path / "deformed.ply").is_file()


def test_pairs_file(clouds, tmp_path):
    pairs = tmp_path / "pairs.csv"
    gt = load_cloud(clouds / "gt.ply").points
    with open(pairs, "w") as fh:
        fh.write("source_idx,x,y,z\n")
        for i in (0, 5, 9):
            fh.write(",".join([str(i)] + [repr(float(c)) for c in gt[i]]) + "\n")
    p = read_pairs(pairs)
    assert list(p.source_idx) == [0, 5, 9]
    out = tmp_path / "o"
    assert main(["register", "--source", str(clouds / "source.ply"), "--target", str(clouds / "target.xyz"),
                 "--pairs", str(pairs), "--out-dir", str(out), "--epochs", "2", "--k", "8", "--no-plot"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["beta_resolved"] == 1.0
    rows = list(csv.DictReader(open(out / "loss.csv")))
    assert float(rows[0]["match"]) > 0
    pairs.write_text("0,1,2\n")
    with pytest.raises(ParseError):
        read_pairs(pairs)


def test_evaluate_identical(clouds, capsys):
    assert main(["evaluate", "--pred", str(clouds / "gt.ply"), "--gt", str(clouds / "gt.ply")]) == 0
    m = json.loads(capsys.readouterr().out)
    assert (m["epe"], m["acc_s"], m["acc_r"], m["outlier"]) == (0.0, 100.0, 100.0, 0.0)


def test_evaluate_thresholds_and_raw(tmp_path, capsys):
    save_cloud(PointCloud([[0, 0, 0], [0, 0, 0]]), tmp_path / "gt.xyz")
    save_cloud(PointCloud([[0.01, 0, 0], [0, 0.03, 0]]), tmp_path / "pred.xyz")
    args = ["evaluate", "--pred", str(tmp_path / "pred.xyz"), "--gt", str(tmp_path / "gt.xyz"), "--raw"]
    assert main(args) == 0
    m = json.loads(capsys.readouterr().out)
    assert (m["acc_s"], m["acc_r"], m["outlier"]) == (50.0, 100.0, 0.0)
    assert main(args + ["--thresholds", "0.04,0.05,0.3", "--out", str(tmp_path / "m.json")]) == 0
    assert json.loads(capsys.readouterr().out)["acc_s"] == 100.0
    assert json.loads((tmp_path / "m.json").read_text())["acc_s"] == 100.0


def test_evaluate_size_mismatch(clouds):
    assert main(["evaluate", "--pred", str(clouds / "target.xyz"), "--gt", str(clouds / "gt.ply")]) == 1


def test_perturb_noop_keeps_coordinates(clouds, tmp_path):
    out = tmp_path / "same.ply"
    assert main(["perturb", "--in", str(clouds / "gt.ply"), "--out", str(out),
                 "--occlude", "0", "--noise", "0", "--outliers", "0"]) == 0
    np.testing.assert_array_equal(load_cloud(out).points, load_cloud(clouds / "gt.ply").points)
    assert (tmp_path / "same.ply.json").is_file()


def test_perturb_and_replay(clouds, tmp_path):
    out = tmp_path / "p.xyz"
    assert main(["perturb", "--in", str(clouds / "gt.ply"), "--out", str(out), "--occlude", "0.2",
                 "--noise", "0.5", "--outliers", "50", "--seed", "3", "--manifest", str(tmp_path / "m.json")]) == 0
    man = json.loads((tmp_path / "m.json").read_text())
    assert man["output_points"] == 240 + 50
    assert len(load_cloud(out)) == 290
    again = tmp_path / "again.xyz"
    assert main(["perturb", "--in", str(clouds / "gt.ply"), "--out", str(again),
                 "--replay", str(tmp_path / "m.json")]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_perturb_bad_fraction(clouds, tmp_path):
    assert main(["perturb", "--in", str(clouds / "gt.ply"), "--out", str(tmp_path / "x.ply"),
                 "--occlude", "1.2"]) == 1


def test_interpolate(run, clouds, tmp_path):
    ts = "0,0.1,0.3,0.5,0.9,1"
    assert main(["interpolate", "--source", str(clouds / "source.ply"), "--checkpoint", str(run / "network.oarn"),
                 "--t-list", ts, "--out-dir", str(tmp_path), "--run-manifest", str(run / "manifest.json")]) == 0
    files = sorted(tmp_path.glob("interp_t*.ply"))
    assert len(files) == 6
    # t = 1 reproduces the registration output byte for byte
    assert (tmp_path / "interp_t1.ply").read_bytes() == (run / "deformed.ply").read_bytes()
    p0, p5, p1 = (load_cloud(tmp_path / f"interp_t{t}.ply").points for t in ("0", "0.5", "1"))
    np.testing.assert_allclose(p5, 0.5 * (p0 + p1), rtol=0, atol=1e-12)


def test_interpolate_without_manifest_starts_at_source(run, clouds, tmp_path):
    assert main(["interpolate", "--source", str(clouds / "source.ply"), "--checkpoint", str(run / "network.oarn"),
                 "--t-list", "0", "--out-dir", str(tmp_path), "--format", "xyz"]) == 0
    np.testing.assert_allclose(load_cloud(tmp_path / "interp_t0.xyz").points,
                               load_cloud(clouds / "source.ply").points, rtol=0, atol=1e-12)


def test_interpolate_bad_checkpoint(clouds, tmp_path):
    bad = tmp_path / "bad.oarn"
    bad.write_bytes(b"garbage")
    assert main(["interpolate", "--source", str(clouds / "source.ply"), "--checkpoint", str(bad),
                 "--t-list", "0.5", "--out-dir", str(tmp_path)]) == 1
    assert main(["interpolate", "--source", str(clouds / "source.ply"), "--checkpoint", str(bad),
                 "--t-list", "1.5", "--out-dir", str(tmp_path)]) == 1


def test_synth(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path), "--n-points", "200", "--occlude", "0.25"]) == 0
    assert len(load_cloud(tmp_path / "source.ply")) == 200
    assert len(load_cloud(tmp_path / "target.ply")) == 150
    assert json.loads((tmp_path / "manifest.json").read_text())["warp"] == "radial"


@pytest.mark.parametrize("jobs", ["1", "2"])
def test_sweep(clouds, tmp_path, jobs):
    assert main(["sweep", "--source", str(clouds / "source.ply"), "--gt", str(clouds / "gt.ply"),
                 "--out-dir", str(tmp_path), "--occlusions", "0,0.2", "--jobs", jobs,
                 "--epochs", "2", "--k", "8"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert len(rows) == 8
    assert {(r["loss"], r["reg"]) for r in rows} == {("mcc", "llr"), ("mcc", "none"), ("cd", "llr"), ("cd", "none")}
    assert {r["target_points"] for r in rows} == {"300", "240"}
    assert (tmp_path / "sweep.png").is_file()
    assert (tmp_path / "runs" / "cd_none_occ0.2" / "loss.csv").is_file()


def test_sweep_is_deterministic_across_jobs(clouds, tmp_path):
    outs = []
    for jobs in ("1", "2"):
        out = tmp_path / jobs
        main(["sweep", "--source", str(clouds / "source.ply"), "--gt", str(clouds / "gt.ply"), "--out-dir", str(out),
              "--occlusions", "0.1", "--losses", "mcc", "--jobs", jobs, "--epochs", "2", "--k", "8", "--no-plot"])
        outs.append([{k: v for k, v in r.items() if k != "seconds"} for r in csv.DictReader(open(out / "sweep.csv"))])
    assert outs[0] == outs[1]


def test_module_entry_point(clouds):
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "oar", "evaluate", "--pred", str(clouds / "gt.ply"),
                           "--gt", str(clouds / "gt.ply")], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["acc_r"] == 100.0
