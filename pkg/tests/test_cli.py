import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from skillflow import cli
from skillflow import diffusion as dif
from skillflow.geometry import RigidTransform
from skillflow.synth import load_demo, load_manifest


def run(*argv):
    return cli.main([str(a) for a in argv])


def read(path):
    with open(path) as f:
        return json.load(f)


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Small dataset, bank and 2-epoch checkpoint shared by the plan / eval tests."""
    root = tmp_path_factory.mktemp("cli")
    data, bank, ckpt = root / "data", root / "bank.json", root / "model.json"
    assert run("gen-data", "--per-skill", 5, "--T", 16, "--seed", 3, "--out", data) == 0
    assert run("build-bank", "--data", data, "--out", bank) == 0
    assert run("train", "--data", data, "--out", ckpt, "--epochs", 2, "--D", 16, "--heads", 2) == 0
    _, entries = load_manifest(data / "manifest.json")
    return {"root": root, "data": data, "bank": bank, "ckpt": ckpt,
            "demos": {load_demo(p).skill.index: p for p, s in entries if s == "eval"}}


class TestGenData:
    def test_counts_and_splits(self, tmp_path):
        assert run("gen-data", "--skills", 3, "--per-skill", 5, "--T", 8, "--out", tmp_path) == 0
        m = read(tmp_path / "manifest.json")
        assert len(m["demos"]) == 15
        for s in range(3):
            splits = [e["split"] for e in m["demos"] if e["skill"] == s]
            assert splits.count("eval") == 1 and splits.count("train") == 4
        assert m["config"]["per_skill"] == 5

    def test_rerun_is_byte_identical(self, tmp_path, monkeypatch):
        # same relative --out so the embedded argument echo matches too
        for d in ("a", "b"):
            (tmp_path / d).mkdir()
            monkeypatch.chdir(tmp_path / d)
            assert run("gen-data", "--per-skill", 2, "--T", 8, "--seed", 9, "--out", "data") == 0
        names = sorted(os.listdir(tmp_path / "a" / "data"))
        assert names == sorted(os.listdir(tmp_path / "b" / "data"))
        for n in names:
            assert read_bytes(tmp_path / "a" / "data" / n) == read_bytes(tmp_path / "b" / "data" / n)

    def test_zero_per_skill_is_usage_error(self, tmp_path, capsys):
        assert run("gen-data", "--per-skill", 0, "--out", tmp_path) == 2
        assert "--per-skill" in capsys.readouterr().err

    def test_too_many_skills(self, tmp_path):
        assert run("gen-data", "--skills", 6, "--out", tmp_path) == 2


class TestBuildBank:
    def test_missing_manifest_is_io_error(self, tmp_path):
        assert run("build-bank", "--data", tmp_path / "nope", "--out", tmp_path / "b.json") == 3

    def test_horizon_and_echo(self, ws):
        b = read(ws["bank"])
        assert b["config"]["command"] == "build-bank"
        assert b["dataset_seed"] == 3
        from skillflow.skillbank import load_bank
        bank = load_bank(ws["bank"])
        assert bank.horizon == 16 and len(bank.skills) == 5


class TestTrain:
    def test_zero_epochs_saves_init(self, ws, tmp_path):
        out = tmp_path / "m0.json"
        assert run("train", "--data", ws["data"], "--out", out, "--epochs", 0, "--D", 16, "--heads", 2,
                   "--seed", 4) == 0
        params, cfg, _ = dif.load_checkpoint(out)
        ref = dif.init_params(cfg, 4)
        assert sorted(params) == sorted(ref)
        for k in ref:
            np.testing.assert_array_equal(params[k], ref[k])
        with open(tmp_path / "m0_metrics.csv") as f:
            assert len(list(csv.reader(f))) == 1

    def test_metrics_rows(self, ws):
        with open(ws["root"] / "model_metrics.csv") as f:
            rows = list(csv.reader(f))
        assert len(rows) == 3
        assert [int(r[0]) for r in rows[1:]] == [1, 2]

    def test_checkpoint_echoes_config(self, ws):
        c = read(ws["ckpt"])
        assert c["config"]["epochs"] == 2 and c["config"]["D"] == 16

    def test_grad_check_flag(self, ws, tmp_path, capsys):
        assert run("train", "--data", ws["data"], "--out", tmp_path / "g.json", "--epochs", 0, "--grad-check") == 0
        assert "grad-check: worst relative error" in capsys.readouterr().out

    def test_negative_batch_size(self, ws, tmp_path):
        assert run("train", "--data", ws["data"], "--out", tmp_path / "x.json", "--batch-size", 0) == 2


def final_truth(demo):
    return demo.cam.cam_to_base.apply(demo.truth_traj[-1])


def actions(path):
    return [RigidTransform.from_dict(p) for p in read(path)["poses"]]


class TestPlan:
    def test_noiseless_flow_file_at_lambda_zero(self, ws, tmp_path):
        path = ws["demos"][2]
        demo = load_demo(path)
        assert run("plan", "--checkpoint", ws["ckpt"], "--bank", ws["bank"], "--demo", path,
                   "--flow-from-file", path, "--lambda", 0, "--skill", 2, "--out", tmp_path) == 0
        poses = actions(tmp_path / "actions.json")
        assert len(poses) == demo.T
        truth = demo.cam.cam_to_base.apply(demo.truth_traj)
        got = np.array([p.translation for p in poses])
        np.testing.assert_allclose(got, truth, atol=1e-6)
        assert read(tmp_path / "flow.json")["source"] == "file"

    def test_lambda_changes_only_transforms(self, ws, tmp_path):
        path = ws["demos"][0]
        outs = []
        for name, lam in (("a", 0.0), ("b", 0.1)):
            assert run("plan", "--checkpoint", ws["ckpt"], "--bank", ws["bank"], "--demo", path,
                       "--flow-from-file", path, "--lambda", lam, "--skill", 0, "--out", tmp_path / name) == 0
            outs.append(tmp_path / name)
        fa, fb = read(outs[0] / "flow.json"), read(outs[1] / "flow.json")
        assert fa["tracks"] == fb["tracks"]
        la, lb = read(outs[0] / "lifted.json"), read(outs[1] / "lifted.json")
        assert la["anchor"] == lb["anchor"] and la["prior"] == lb["prior"]
        assert la["transforms"] != lb["transforms"]

    def test_sampled_flow_runs(self, ws, tmp_path, capsys):
        path = ws["demos"][1]
        assert run("plan", "--checkpoint", ws["ckpt"], "--bank", ws["bank"], "--demo", path, "--out", tmp_path) == 0
        out = capsys.readouterr().out
        f = read(tmp_path / "flow.json")
        assert f["source"] == "sampled" and f["T"] == 16 and f["N"] == 25
        assert "time lift:" in out

    def test_all_equal_logits_exit_5_and_skill_bypass(self, ws, tmp_path):
        params, cfg, echo = dif.load_checkpoint(ws["ckpt"])
        params["enc.cls.W2"] = np.zeros_like(params["enc.cls.W2"])
        params["enc.cls.b2"] = np.zeros_like(params["enc.cls.b2"])
        ckpt = tmp_path / "flat.json"
        dif.save_checkpoint(ckpt, params, cfg, {"config": echo})
        path = ws["demos"][3]
        common = ("plan", "--checkpoint", ckpt, "--bank", ws["bank"], "--demo", path, "--flow-from-file", path)
        assert run(*common, "--out", tmp_path / "a") == 5
        assert run(*common, "--skill", 3, "--out", tmp_path / "b") == 0

    def test_missing_checkpoint(self, ws, tmp_path):
        path = ws["demos"][0]
        assert run("plan", "--checkpoint", tmp_path / "none.json", "--bank", ws["bank"], "--demo", path,
                   "--out", tmp_path) == 3


class TestSeedEnv:
    def test_env_overrides_flag(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SKILLFLOW_SEED", "11")
        assert run("gen-data", "--per-skill", 1, "--T", 8, "--seed", 0, "--out", tmp_path / "a") == 0
        monkeypatch.delenv("SKILLFLOW_SEED")
        assert run("gen-data", "--per-skill", 1, "--T", 8, "--seed", 11, "--out", tmp_path / "b") == 0
        a, b = read(tmp_path / "a" / "manifest.json"), read(tmp_path / "b" / "manifest.json")
        assert a["seed"] == b["seed"] == 11 and a["demos"] == b["demos"]

    def test_bad_env_value(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SKILLFLOW_SEED", "x")
        assert run("gen-data", "--per-skill", 1, "--out", tmp_path) == 2


class TestEval:
    def test_outputs_and_aggregates(self, ws, tmp_path):
        out = tmp_path / "ev"
        assert run("eval", "--data", ws["data"], "--bank", ws["bank"], "--lambdas", "0,0.1",
                   "--noise-factors", "0,1", "--out", out) == 0
        for name in ("report.json", "records.csv", "error_vs_lambda.svg", "error_vs_noise.svg"):
            assert (out / name).exists()
        rep = read(out / "report.json")
        with open(out / "records.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == len(rep["records"]) == 5 * (1 + 2 + 4)
        # recompute one aggregate from the raw records
        row = next(a for a in rep["aggregates"] if a["skill"] == "all" and a["prior"] and a["lam"] == 0.1
                   and a["noise_px"] == 0.0)
        vals = {(r["demo"]): r["traj_rmse"] for r in rep["records"]
                if r["prior"] and r["lam"] == 0.1 and r["noise_px"] == 0.0}
        assert row["count"] == len(vals) == 5
        assert row["traj_rmse"]["mean"] == pytest.approx(np.mean(list(vals.values())), rel=1e-12)

    def test_no_eval_split(self, tmp_path):
        assert run("gen-data", "--per-skill", 2, "--T", 8, "--eval-fraction", 0, "--out", tmp_path / "d") == 0
        assert run("build-bank", "--data", tmp_path / "d", "--out", tmp_path / "b.json") == 0
        assert run("eval", "--data", tmp_path / "d", "--bank", tmp_path / "b.json", "--out", tmp_path / "e") == 2


def test_console_script_version():
    r = subprocess.run([sys.executable, "-m", "skillflow.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "skillflow" in r.stdout


def test_unknown_command():
    assert cli.main(["bogus"]) == 2
