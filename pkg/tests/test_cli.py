import json
import subprocess
import sys

import pytest

from freewaytt import __version__
from freewaytt.cli import main, manifest_path, sha256_file


def run(tmp_path, *argv):
    return main([str(a).replace("@", str(tmp_path) + "/") for a in argv])


def pipeline(d, seed=7):
    """Full synth -> estimate -> features -> tune -> train -> predict -> evaluate -> importance run."""
    assert run(d, "--seed", seed, "synth", "--days", 1, "--noise-sd", 0.05, "--segments-out", "@segs.csv",
               "--out", "@bsm.csv") == 0
    assert run(d, "estimate", "--bsm", "@bsm.csv", "--segments", "@segs.csv", "--partitions", 2, "--out",
               "@m.csv") == 0
    assert run(d, "features", "--matrix", "@m.csv", "--out", "@ds.csv") == 0
    (d / "g.cfg").write_text("t = 5, 10\nd = 2, 3\nL = 0.1\n")
    assert run(d, "--seed", seed, "tune", "--algo", "xgb", "--grid", "@g.cfg", "--dataset", "@ds.csv", "--k", 3,
               "--out", "@tune.csv") == 0
    assert run(d, "--seed", seed, "train", "--algo", "rf", "--dataset", "@ds.csv", "--param", "t=5",
               "--out", "@model.json") == 0
    assert run(d, "predict", "--model", "@model.json", "--dataset", "@ds.csv", "--out", "@pred.csv") == 0
    assert run(d, "importance", "--model", "@model.json", "--out", "@imp.csv") == 0
    assert run(d, "--seed", seed, "evaluate", "--matrix", "@m.csv", "--horizons", "1..2", "--param", "t=10",
               "--predictions-out", "@ev_pred.csv", "--out", "@ev.csv") == 0
    assert run(d, "screen", "--matrix", "@m.csv", "--out", "@screen.csv") == 0
    outs = ["bsm.csv", "truth_bsm.csv", "segs.csv", "m.csv", "ds.csv", "tune.csv", "model.json", "pred.csv",
            "imp.csv", "ev.csv", "ev_pred.csv", "screen.csv"]
    return {name: sha256_file(d / name) for name in outs}


class TestPipeline:
    def test_rerun_gives_identical_digests(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        assert pipeline(a) == pipeline(b)

    def test_manifests(self, tmp_path):
        pipeline(tmp_path)
        doc = json.loads(manifest_path(tmp_path / "model.json").read_text())
        assert doc["command"] == "train" and doc["seed"] == 7 and doc["version"] == __version__
        assert doc["outputs"] == {str(tmp_path / "model.json"): sha256_file(tmp_path / "model.json")}
        assert str(tmp_path / "ds.csv") in doc["inputs"]
        assert doc["config"]["resolved_params"]["t"] == 5
        for name in ("bsm.csv", "truth_bsm.csv", "m.csv", "ev.csv", "ev_pred.csv"):
            assert manifest_path(tmp_path / name).is_file()


class TestCommands:
    def test_train_defaults(self, tmp_path):
        run(tmp_path, "--seed", 1, "synth", "--kind", "matrix", "--days", 2, "--noise-sd", 0.05, "--out", "@m.csv")
        run(tmp_path, "features", "--matrix", "@m.csv", "--out", "@ds.csv")
        assert run(tmp_path, "train", "--algo", "xgb", "--dataset", "@ds.csv", "--seed", 1, "--out", "@x.json") == 0
        doc = json.loads((tmp_path / "x.json").read_text())
        assert doc["hyperparams"] == {"t": 40, "L": 0.1, "d": 6, "min_leaf": 1, "lam": 1.0, "gamma": 1.0}

    def test_train_with_grid(self, tmp_path):
        run(tmp_path, "--seed", 1, "synth", "--kind", "matrix", "--days", 2, "--noise-sd", 0.05, "--out", "@m.csv")
        run(tmp_path, "features", "--matrix", "@m.csv", "--out", "@ds.csv")
        (tmp_path / "g.cfg").write_text("t = 3, 6\nd = 2\nL = 0.5\n")
        assert run(tmp_path, "--seed", 1, "train", "--algo", "gb", "--grid", "@g.cfg", "--k", 3, "--dataset",
                   "@ds.csv", "--out", "@g.json") == 0
        hp = json.loads((tmp_path / "g.json").read_text())["hyperparams"]
        assert hp["d"] == 2 and hp["L"] == 0.5 and hp["t"] in (3, 6)

    def test_evaluate_table_shape(self, tmp_path):
        run(tmp_path, "--seed", 1, "synth", "--kind", "matrix", "--days", 3, "--noise-sd", 0.05, "--ar-coef", 0.8,
            "--out", "@m.csv")
        assert run(tmp_path, "--seed", 2, "evaluate", "--matrix", "@m.csv", "--horizons", "1..6", "--peak",
                   "6:9,16:19", "--param", "t=10", "--out", "@ev.csv") == 0
        lines = (tmp_path / "ev.csv").read_text().splitlines()
        assert lines[0] == "horizon_steps,horizon_min,peak_mape,non_peak_mape,all_mape,train_mape"
        assert [ln.split(",")[1] for ln in lines[1:]] == ["5", "10", "15", "20", "25", "30"]

    def test_synth_stats(self, tmp_path):
        assert run(tmp_path, "--seed", 1, "synth", "--kind", "matrix", "--days", 2, "--stats-out", "@st.csv",
                   "--out", "@m.csv") == 0
        header = (tmp_path / "st.csv").read_text().splitlines()[0]
        assert header == "segment_id,length_km,peak_mean,peak_sd,non_peak_mean,non_peak_sd"

    def test_estimate_workers_flag_after_subcommand(self, tmp_path):
        run(tmp_path, "--seed", 3, "synth", "--days", 1, "--segments-out", "@s.csv", "--out", "@b.csv")
        assert run(tmp_path, "estimate", "--bsm", "@b.csv", "--segments", "@s.csv", "--partitions", 6,
                   "--workers", 4, "--out", "@m6.csv") == 0
        assert run(tmp_path, "estimate", "--bsm", "@b*.csv", "--segments", "@s.csv", "--out", "@m1.csv") == 0
        assert (tmp_path / "m6.csv").read_bytes() == (tmp_path / "m1.csv").read_bytes()


class TestErrors:
    def test_seed_required(self, tmp_path, capsys):
        assert run(tmp_path, "synth", "--out", "@b.csv") != 0
        err = capsys.readouterr().err.strip()
        assert err.startswith("error[usage]:") and len(err.splitlines()) == 1

    def test_unknown_flag(self, tmp_path, capsys):
        assert run(tmp_path, "estimate", "--bogus") != 0
        assert capsys.readouterr().err.startswith("error[usage]:")

    def test_missing_file(self, tmp_path, capsys):
        assert run(tmp_path, "features", "--matrix", "@nope.csv", "--out", "@d.csv") != 0
        assert capsys.readouterr().err.startswith("error[io]:")

    def test_schema_mismatch(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("x,y\n1,2\n")
        assert run(tmp_path, "features", "--matrix", "@m.csv", "--out", "@d.csv") != 0
        assert capsys.readouterr().err.startswith("error[format]:")

    def test_corrupt_model(self, tmp_path, capsys):
        (tmp_path / "m.json").write_text("{not json")
        assert run(tmp_path, "importance", "--model", "@m.json", "--out", "@i.csv") != 0
        assert capsys.readouterr().err.startswith("error[corrupt]:")

    def test_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "freewaytt.cli", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and __version__ in out.stdout
        bad = subprocess.run([sys.executable, "-m", "freewaytt.cli", "nosuch"], capture_output=True, text=True)
        assert bad.returncode != 0 and bad.stderr.startswith("error[usage]:")
