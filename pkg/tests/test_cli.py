import json
import subprocess
import sys

import numpy as np
import pytest

from idm.cli import main
from idm.extrinsic import DatasetManifest
from idm.imaging import load_png, sha256_file

TINY_MODEL = {"base_channels": 4, "channel_multipliers": [1, 2], "attention_scales": [2],
              "gamma_embed_dim": 16, "norm_groups": 2}


@pytest.fixture
def toy_dir(tmp_path):
    out = tmp_path / "toy"
    assert main(["gen-toy", "--out", str(out), "--count", "4", "--size", "16", "--seed", "2"]) == 0
    return out


def _config(tmp_path, **train):
    cfg = {"model": TINY_MODEL, "train": {"total_steps": 2, "batch_size": 2, "log_every": 0, **train}}
    p = tmp_path / f"cfg_{train.get('total_steps', 2)}.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def test_gen_toy_deterministic(tmp_path, toy_dir):
    other = tmp_path / "again"
    assert main(["gen-toy", "--out", str(other), "--count", "4", "--size", "16", "--seed", "2"]) == 0
    a = DatasetManifest.load(str(toy_dir / "manifest.json"))
    b = DatasetManifest.load(str(other / "manifest.json"))
    assert [r.sha256 for r in a.images] == [r.sha256 for r in b.images]
    assert (toy_dir / "run_info.json").exists()
    assert load_png(a.resolve(a.images[0])).shape == (16, 16, 3)


def test_argument_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["gen-toy", "--out", str(tmp_path), "--count", "2", "--size", "8"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 2


def test_unknown_config_key_exit_2(tmp_path, toy_dir):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rat": 1e-4}}))
    assert main(["train", "--out", str(tmp_path / "run"), "--data", str(toy_dir / "manifest.json"),
                 "--config", str(bad)]) == 2


def test_runtime_error_exit_1(tmp_path):
    assert main(["restore", "--out", str(tmp_path / "o"), "--ckpt", str(tmp_path / "missing.idmc"),
                 "--input", str(tmp_path / "missing.png")]) == 1


def test_degrade_replay_bit_exact(tmp_path, toy_dir):
    data = str(toy_dir / "manifest.json")
    assert main(["degrade", "--out", str(tmp_path / "d1"), "--data", data, "--seed", "9"]) == 0
    side = tmp_path / "d1" / "degradation.json"
    assert main(["degrade", "--out", str(tmp_path / "d2"), "--data", data, "--replay", str(side),
                 "--workers", "2"]) == 0
    a = DatasetManifest.load(str(tmp_path / "d1" / "manifest.json"))
    b = DatasetManifest.load(str(tmp_path / "d2" / "manifest.json"))
    assert [r.sha256 for r in a.images] == [r.sha256 for r in b.images]
    rows = json.loads(side.read_text())["images"]
    assert {"sigma", "r", "delta", "q"} <= set(rows[0]["params"])


def test_train_restore_and_resume(tmp_path, toy_dir):
    data = str(toy_dir / "manifest.json")
    cfg = _config(tmp_path, total_steps=3)
    run = tmp_path / "run"
    assert main(["train", "--out", str(run), "--data", data, "--config", cfg]) == 0
    full = sha256_file(run / "final.idmc")
    rows = (run / "loss_trace.csv").read_text().splitlines()
    assert rows[0] == "step,loss,learning_rate,wall_ms" and len(rows) == 4
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["train"]["learning_rate"] == 1e-4 and resolved["infer"]["K"] == 10

    part = tmp_path / "part"
    assert main(["train", "--out", str(part), "--data", data, "--config", _config(tmp_path, total_steps=2)]) == 0
    assert main(["train", "--out", str(part), "--data", data, "--config", cfg, "--resume"]) == 0
    assert sha256_file(part / "final.idmc") == full

    out = tmp_path / "restored"
    assert main(["restore", "--out", str(out), "--ckpt", str(run / "final.idmc"), "--data", data,
                 "--steps", "2"]) == 0
    assert len(list(out.glob("*.png"))) == 4


def test_enhance_and_round1_training(tmp_path, toy_dir):
    data = str(toy_dir / "manifest.json")
    run = tmp_path / "r0"
    assert main(["train", "--out", str(run), "--data", data, "--config", _config(tmp_path)]) == 0
    enh = tmp_path / "enh"
    assert main(["enhance", "--out", str(enh), "--ckpt", str(run / "final.idmc"), "--data", data,
                 "--steps", "2"]) == 0
    m1 = DatasetManifest.load(str(enh / "manifest_round1.json"))
    assert m1.round == 1 and len(m1.images) == 4
    r1 = tmp_path / "r1"
    assert main(["train", "--out", str(r1), "--data", str(enh / "manifest_round1.json"), "--round", "1",
                 "--original", data, "--init", str(run / "final.idmc"),
                 "--config", _config(tmp_path)]) == 0
    from idm.denoiser import load_checkpoint
    assert load_checkpoint(str(r1 / "final.idmc")).training_round == 1
    # round 1 without parents is a configuration error
    assert main(["train", "--out", str(tmp_path / "r1b"), "--data", str(enh / "manifest_round1.json"),
                 "--round", "1", "--init", str(run / "final.idmc"), "--config", _config(tmp_path)]) == 2


def test_authtest_baselines(tmp_path, toy_dir, capsys):
    data = str(toy_dir / "manifest.json")
    assert main(["authtest", "--out", str(tmp_path / "a"), "--baseline", "identity", "--data", data]) == 0
    rep = json.loads((tmp_path / "a" / "authenticity.json").read_text())
    assert rep["clean_fidelity_db"] == 99.0 and rep["pass"] is False
    assert main(["authtest", "--out", str(tmp_path / "b"), "--baseline", "blur", "--data", data]) == 0
    rep = json.loads((tmp_path / "b" / "authenticity.json").read_text())
    assert rep["clean_fidelity_db"] < 30.0 and rep["pass"] is False


def test_eval_identity_on_clean_pairs(tmp_path, toy_dir):
    data = str(toy_dir / "manifest.json")
    assert main(["eval", "--out", str(tmp_path / "e"), "--baseline", "identity", "--degraded", data,
                 "--clean", data]) == 0
    js = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert js["aggregates"]["psnr_db"]["mean"] == 99.0
    assert js["n_images"] == 4


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "idm.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
