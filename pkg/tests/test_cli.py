import json
import subprocess
import sys
from pathlib import Path

import pytest

from headsteer import cli
from headsteer.store import file_digest, read_selection

TINY = {
    "policy": {"n_layers": 2, "n_heads": 2, "d_model": 16, "mlp_ratio": 2},
    "pretrain_demos": {"n": 4},
    "demos": {"n": 4},
    "pretrain": {"total_steps": 20, "warmup_steps": 2, "batch_size": 8},
    "selection": {"k": [2, 3], "m": 2},
    "finetune": {"total_steps": 10, "warmup_steps": 2, "batch_size": 8, "rank": 2},
    "eval": {"perturbations": ["none", "lighting"]},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    wd = tmp_path_factory.mktemp("run")
    cfg = wd / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert cli.main(["run", "--config", str(cfg), "--seed", "3", "--workdir", str(wd / "out")]) == 0
    return wd, cfg


def test_pipeline_artifacts_and_manifests(pipeline):
    wd, _ = pipeline
    out = wd / "out"
    man = json.loads((out / "pipeline.manifest.json").read_text())
    assert man["kind"] == "pipeline" and man["seed"] == 3
    commands = [json.loads(Path(s).read_text())["command"] for s in man["steps"]]
    assert commands[:6] == ["gen-demos", "gen-demos", "gen-demos", "pretrain", "cache-acts", "select-heads"]
    assert commands[6:] == ["finetune", "eval", "finetune", "eval"]
    for s in man["steps"]:
        step = json.loads(Path(s).read_text())
        assert {"args", "inputs", "outputs", "seed", "wall_clock", "version"} <= set(step)
        for p, h in {**step["inputs"], **step["outputs"]}.items():
            assert file_digest(p) == h
    sel = json.loads((out / "selection.json").read_text())
    assert sel["k"] in (2, 3) and len(sel["heads"]) == 2
    rep = json.loads((out / "report-queries_plus_mlp.json").read_text())
    assert [r["perturbation"] for r in rep["reports"]] == ["none", "lighting"]
    assert all(len(r["bitmap"]) == 40 for r in rep["reports"])


def test_repro_pipeline_and_single_step(pipeline, capsys):
    wd, _ = pipeline
    assert cli.main(["repro", "--manifest", str(wd / "out" / "pipeline.manifest.json")]) == 0
    assert cli.main(["repro", "--manifest", str(wd / "out" / "selection.json.manifest.json")]) == 0


def test_repro_detects_tampered_output(pipeline, tmp_path):
    wd, _ = pipeline
    src = json.loads((wd / "out" / "selection.json.manifest.json").read_text())
    src["outputs"] = {k: "0" * 64 for k in src["outputs"]}
    bad = tmp_path / "bad.manifest.json"
    bad.write_text(json.dumps(src))
    assert cli.main(["repro", "--manifest", str(bad)]) == cli.EXIT_REPRO


def test_select_heads_records_k(pipeline, tmp_path):
    wd, cfg = pipeline
    out = tmp_path / "sel.json"
    code = cli.main(["select-heads", "--config", str(cfg), "--cache", str(wd / "out" / "cache.hsac"),
                     "--method", "knn", "--k", "1,2,3", "--m", "3", "--out", str(out)])
    assert code == 0
    sel = read_selection(out)
    assert sel.m == 3 and sel.table.k_used in (1, 2, 3)
    assert Path(str(out) + ".manifest.json").exists()


def test_cma_selection_via_cli(pipeline, tmp_path):
    wd, cfg = pipeline
    o = wd / "out"
    out = tmp_path / "cma.json"
    code = cli.main(["select-heads", "--config", str(cfg), "--cache", str(o / "cache.hsac"), "--method", "cma",
                     "--checkpoint", str(o / "base.hsck"), "--demos", str(o / "demos-pick_place-green.hsdm"),
                     "--m", "2", "--out", str(out)])
    assert code == 0 and read_selection(out).table.method == "cma"
    code = cli.main(["select-heads", "--config", str(cfg), "--cache", str(o / "cache.hsac"), "--method", "cma",
                     "--m", "2", "--out", str(out)])
    # an absent required flag is a configuration problem, not a missing file
    assert code == cli.EXIT_CONFIG


def test_baseline_finetune_ignores_selection_with_warning(pipeline, tmp_path, caplog):
    wd, cfg = pipeline
    o = wd / "out"
    out = tmp_path / "b.hsck"
    args = ["finetune", "--config", str(cfg), "--checkpoint", str(o / "base.hsck"),
            "--demos", str(o / "demos-pick_place-green.hsdm"), "--steps", "3", "--warmup", "1",
            "--variant", "full_head_baseline", "--out", str(out)]
    assert cli.main(args + ["--selection", str(o / "selection.json")]) == 0
    assert any("ignor" in r.message for r in caplog.records)
    other = tmp_path / "c.hsck"
    args[-1] = str(other)
    assert cli.main(args) == 0
    assert file_digest(out) == file_digest(other)
    assert (tmp_path / "b.hsck.log.csv").exists()


def test_error_exit_codes(pipeline, tmp_path):
    wd, cfg = pipeline
    o = wd / "out"
    assert cli.main(["select-heads", "--cache", str(tmp_path / "nope.hsac"), "--out", str(tmp_path / "s")]) == 3
    corrupt = tmp_path / "bad.hsac"
    data = bytearray((o / "cache.hsac").read_bytes())
    data[-20] ^= 0xFF
    corrupt.write_bytes(bytes(data))
    assert cli.main(["select-heads", "--cache", str(corrupt), "--out", str(tmp_path / "s")]) == 4
    badcfg = tmp_path / "bad.json"
    badcfg.write_text(json.dumps({"selection": {"colour": 1}}))
    assert cli.main(["gen-demos", "--config", str(badcfg), "--out", str(tmp_path / "d")]) == 2
    assert cli.main(["select-heads", "--config", str(cfg), "--cache", str(o / "cache.hsac"),
                     "--k", "500", "--out", str(tmp_path / "s")]) == 2
    badseed = tmp_path / "bad.json"
    badseed.write_text("{not json")
    assert cli.main(["gen-demos", "--config", str(badseed), "--out", str(tmp_path / "d")]) == 2


def test_seed_precedence(monkeypatch):
    cfg = cli.load_config(None)
    monkeypatch.delenv("HEADSTEER_SEED", raising=False)
    assert cli.resolve_seed(None, cfg) == 0
    monkeypatch.setenv("HEADSTEER_SEED", "11")
    assert cli.resolve_seed(None, cfg) == 11
    assert cli.resolve_seed(None, dict(cfg, seed=5)) == 5
    assert cli.resolve_seed(7, dict(cfg, seed=5)) == 7


def test_flags_override_config(tmp_path):
    cfgp = tmp_path / "c.json"
    cfgp.write_text(json.dumps({"demos": {"n": 3, "noise": 0.1}}))
    out = tmp_path / "d.hsdm"
    assert cli.main(["gen-demos", "--config", str(cfgp), "--n", "2", "--task", "reach-red", "--out", str(out)]) == 0
    args = json.loads(Path(str(out) + ".manifest.json").read_text())["args"]
    assert args["n"] == 2 and args["noise"] == 0.1 and args["task"] == "reach-red"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "headsteer", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
