import csv
import io
import time

import numpy as np
import pytest

from trafficpredict import cli
from trafficpredict import data as D
from trafficpredict import train as T

SMALL = """
edge_hidden = 6
node_hidden = 6
super_edge_hidden = 4
super_hidden = 4
embed_dim = 4
attention_dim = 3
duration = 16
n_pedestrians = 2
n_bicycles = 1
n_vehicles = 2
batch_size = 4
"""


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    data = root / "scene.csv"
    code, out, err = run("generate", "--config", str(cfg), "--seed", "3", "--out", str(data))
    assert code == 0, err
    start = time.perf_counter()
    code, train_out, err = run("train", "--config", str(cfg), "--seed", "3", "--epochs", "2",
                               "--data", str(data), "--out", str(root / "runs"))
    elapsed = time.perf_counter() - start
    assert code == 0, err
    return {"root": root, "cfg": cfg, "data": data, "gen_out": out, "train_out": train_out,
            "train_seconds": elapsed, "ckpt": root / "runs" / "full.ckpt"}


class TestGenerate:
    def test_deterministic(self, workspace, tmp_path):
        again = tmp_path / "again.csv"
        assert run("generate", "--config", str(workspace["cfg"]), "--seed", "3", "--out", str(again))[0] == 0
        assert again.read_bytes() == workspace["data"].read_bytes()
        other = tmp_path / "other.csv"
        run("generate", "--config", str(workspace["cfg"]), "--seed", "4", "--out", str(other))
        assert other.read_bytes() != again.read_bytes()

    def test_header_and_summary(self, workspace):
        text = workspace["data"].read_text()
        assert text.splitlines()[0] == "frame,agent_id,category,x,y"
        recs = D.load_trajectories(workspace["data"])
        cats = {}
        for r in recs:
            cats.setdefault(r.category, set()).add(r.agent_id)
        frames = len({r.frame for r in recs})
        expect = (f"{len(recs)} records, {frames} frames, agents pedestrian={len(cats.get(1, ()))} "
                  f"bicycle={len(cats.get(2, ()))} vehicle={len(cats.get(3, ()))}")
        assert expect in workspace["gen_out"]

    def test_missing_out(self):
        assert run("generate")[0] == cli.EXIT_CONFIG


class TestTrain:
    def test_smoke(self, workspace):
        out = workspace["train_out"]
        assert workspace["train_seconds"] < 60
        assert "beta1=0.9 beta2=0.999 lr=0.001" in out and "clip=±10" in out
        assert "epoch 2: mean_nll=" in out
        assert workspace["ckpt"].is_file()
        rows = (workspace["root"] / "runs" / "full_loss.csv").read_text().splitlines()
        assert rows[0] == "epoch,mean_nll,lr" and len(rows) == 3

    def test_resume(self, workspace, tmp_path):
        runs = tmp_path / "runs"
        common = ("--config", str(workspace["cfg"]), "--seed", "3", "--data", str(workspace["data"]),
                  "--out", str(runs))
        assert run("train", *common, "--epochs", "2")[0] == 0
        _, _, first, meta = T.load_training_checkpoint(runs / "full.ckpt")
        code, out, err = run("train", *common, "--epochs", "1", "--checkpoint", str(runs / "full.ckpt"))
        assert code == 0, err
        _, _, second, meta2 = T.load_training_checkpoint(runs / "full.ckpt")
        assert meta2["epoch"] == 3 and second.step > first.step
        epochs = [int(l.split(",")[0]) for l in (runs / "full_loss.csv").read_text().splitlines()[1:]]
        assert epochs == [1, 2, 3]

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_key = 1\n")
        code, _, err = run("train", "--config", str(cfg), "--data", "x", "--out", "y")
        assert code == cli.EXIT_CONFIG and "no_such_key" in err

    def test_missing_data_is_io_error(self, tmp_path):
        code, _, err = run("train", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path))
        assert code == cli.EXIT_IO

    def test_malformed_data(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("frame,agent_id,category,x,y\n0,1,9,0.0,0.0\n")
        assert run("train", "--data", str(bad), "--out", str(tmp_path))[0] == cli.EXIT_DATA


class TestPredict:
    def predict(self, workspace, out, *extra):
        return run("predict", "--data", str(workspace["data"]), "--checkpoint", str(workspace["ckpt"]),
                   "--out", str(out), *extra)

    def test_output(self, workspace, tmp_path):
        out = tmp_path / "pred.csv"
        code, _, err = self.predict(workspace, out)
        assert code == 0, err
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        last = max(r.frame for r in D.load_trajectories(workspace["data"]))
        assert sorted({int(r["frame"]) for r in rows}) == list(range(last + 1, last + 9))
        assert all(float(r["sigma_x"]) > 0 and float(r["sigma_y"]) > 0 for r in rows)
        assert all(abs(float(r["rho"])) < 1 for r in rows)
        assert all(np.isfinite(float(r["x"])) for r in rows)
        again = tmp_path / "again.csv"
        self.predict(workspace, again)
        assert again.read_bytes() == out.read_bytes()

    def test_mode_mismatch(self, workspace, tmp_path):
        code, _, err = self.predict(workspace, tmp_path / "p.csv", "--mode", "ed_baseline")
        assert code == cli.EXIT_CONFIG and "full" in err


class TestEval:
    def test_oracle_and_baseline(self, workspace, tmp_path):
        out = tmp_path / "rep"
        code, text, err = run("eval", "--data", str(workspace["data"]), "--mode", "oracle,constant_velocity",
                              "--out", str(out), "--config", str(workspace["cfg"]))
        assert code == 0, err
        with open(out / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["method"] for r in rows} == {"oracle", "constant_velocity"}
        for r in rows:
            if r["method"] == "oracle" and int(r["n_agents"]):
                assert float(r["ade"]) == 0 and float(r["fde"]) == 0
        assert "Avg. disp. error" in text and "Final disp. error" in text
        out2 = tmp_path / "rep2"
        run("eval", "--data", str(workspace["data"]), "--mode", "oracle,constant_velocity",
            "--out", str(out2), "--config", str(workspace["cfg"]))
        assert (out2 / "report.csv").read_bytes() == (out / "report.csv").read_bytes()

    def test_learned_method(self, workspace, tmp_path):
        code, _, err = run("eval", "--data", str(workspace["data"]), "--mode", "full,constant_velocity",
                           "--checkpoint", str(workspace["root"] / "runs"), "--out", str(tmp_path))
        assert code == 0, err
        methods = [l.split(",")[0] for l in (tmp_path / "report.csv").read_text().splitlines()[1:]]
        assert sorted(set(methods)) == ["constant_velocity", "full"]

    def test_missing_checkpoint(self, workspace, tmp_path):
        code, _, err = run("eval", "--data", str(workspace["data"]), "--mode", "full,ed_baseline",
                           "--checkpoint", str(workspace["root"] / "runs"), "--out", str(tmp_path))
        assert code == cli.EXIT_CONFIG and "ed_baseline" in err and "full," not in err

    def test_unknown_mode(self, workspace, tmp_path):
        code, _, err = run("eval", "--data", str(workspace["data"]), "--mode", "magic", "--out", str(tmp_path))
        assert code == cli.EXIT_CONFIG


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "trafficpredict", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "generate" in res.stdout
