import hashlib
import json
import os

import numpy as np
import pytest

from disentango.cli import main
from disentango.config import ConfigError, hash_config, load_config


def write_cfg(path, data_path, outdir, extra=""):
    path.write_text(f"""
[data]
path = {data_path}
d_z = 2
m_kind = affine-basis
num_tasks = 10
n_train = 2
n_eval = 1
grid = 16
seed = 1
with_labels = true
with_b = true

[model]
d_z = 2
channels = 4
modes = 3
depth = 1
enc_hidden = 8
dec_hidden = 8

[train]
epochs = 2
seed = 1

[run]
outdir = {outdir}
{extra}
""")
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "run.cfg", root / "data.dsgo", root / "out")
    assert main(["gen", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    return root, cfg


# -- config ---------------------------------------------------------------------


def test_config_defaults_and_overrides():
    cfg = load_config(None, ["train.epochs=7", "data.grid=8,8", "loss.beta_d=2.5"])
    assert cfg["train"]["epochs"] == 7
    assert cfg["data"]["grid"] == (8, 8)
    assert cfg["loss"]["beta_d"] == 2.5


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(None, ["train.velocity=3"])
    with pytest.raises(ConfigError, match="section.key=value"):
        load_config(None, ["nonsense"])


def test_config_bad_value_rejected():
    with pytest.raises(ConfigError, match="bad value"):
        load_config(None, ["train.epochs=three"])


def test_config_hash_stable_and_sensitive():
    a = load_config(None, [])
    b = load_config(None, ["train.seed=99"])
    assert hash_config(a) == hash_config(load_config(None, []))
    assert hash_config(a) != hash_config(b)


# -- gen ---------------------------------------------------------------------------


def test_gen_outputs_roundtrip(workspace):
    root, _ = workspace
    from disentango.datagen import load_dataset
    tasks, manifest = load_dataset(str(root / "data.dsgo"))
    assert len(tasks) == 10
    summary = json.loads((root / "data.dsgo.json").read_text())
    assert summary["max_residual"] < 1e-8
    assert "config_hash" in summary


def test_gen_same_seed_identical(tmp_path):
    def checksum(name):
        cfg = write_cfg(tmp_path / f"{name}.cfg", tmp_path / f"{name}.dsgo",
                        tmp_path / f"{name}_out")
        assert main(["gen", "--config", cfg]) == 0
        return hashlib.sha256((tmp_path / f"{name}.dsgo").read_bytes()).hexdigest()

    assert checksum("a") == checksum("b")


def test_gen_identifiability_guard(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "bad.cfg", tmp_path / "bad.dsgo", tmp_path / "o")
    rc = main(["gen", "--config", cfg, "--set", "data.for_identifiability=true",
               "--set", "data.num_tasks=3"])
    assert rc == 1
    assert "2*d_z+1" in capsys.readouterr().err


def test_gen_invalid_spec_exit_one(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "bad2.cfg", tmp_path / "bad2.dsgo", tmp_path / "o")
    rc = main(["gen", "--config", cfg, "--set", "data.m_kind=unknown-kind"])
    assert rc == 1
    assert "error" in capsys.readouterr().err


# -- train / eval ------------------------------------------------------------------


def test_train_artifacts(workspace):
    root, _ = workspace
    out = root / "out"
    assert (out / "model.ckpt").exists()
    assert (out / "model_last.ckpt").exists()
    report = json.loads((out / "report.json").read_text())
    assert len(report["epochs"]) == 2
    assert report["mode"] == "disentango"
    csv_lines = (out / "losses.csv").read_text().strip().split("\n")
    assert csv_lines[0].startswith("epoch,")
    assert len(csv_lines) == 3


def test_train_deterministic_rerun(tmp_path):
    def run(name):
        cfg = write_cfg(tmp_path / f"{name}.cfg", tmp_path / f"{name}.dsgo",
                        tmp_path / name)
        assert main(["gen", "--config", cfg]) == 0
        assert main(["train", "--config", cfg]) == 0
        return json.loads((tmp_path / name / "report.json").read_text())

    r1, r2 = run("r1"), run("r2")
    assert r1["epochs"] == r2["epochs"]


def test_eval_command(workspace, capsys):
    root, cfg = workspace
    ckpt = str(root / "out" / "model.ckpt")
    rc = main(["eval", "--config", cfg, "--checkpoint", ckpt, "--split", "train"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert np.isfinite(out["mean_rel_l2"])
    saved = json.loads((root / "out" / "eval_train.json").read_text())
    assert saved["mean_rel_l2"] == out["mean_rel_l2"]
    assert "config_hash" in saved


def test_eval_missing_checkpoint(workspace, capsys):
    _, cfg = workspace
    rc = main(["eval", "--config", cfg, "--checkpoint", "/nonexistent.ckpt"])
    assert rc == 1


def test_mode_label_in_report(tmp_path):
    cfg = write_cfg(tmp_path / "m.cfg", tmp_path / "m.dsgo", tmp_path / "m_out",
                    extra="")
    assert main(["gen", "--config", cfg]) == 0
    assert main(["train", "--config", cfg, "--set", "train.mode=metano"]) == 0
    report = json.loads((tmp_path / "m_out" / "report.json").read_text())
    assert report["mode"] == "metano"


# -- adapt / traverse / identcheck ----------------------------------------------------


def test_adapt_command(workspace, capsys):
    root, cfg = workspace
    ckpt = str(root / "out" / "model.ckpt")
    rc = main(["adapt", "--config", cfg, "--checkpoint", ckpt,
               "--split", "test", "--steps", "5"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["adapt_loss_last"] < out["adapt_loss_first"]
    assert "supervised_latent_error_pct" in out
    assert (root / "out" / "adapt_test.json").exists()
    assert (root / "out" / "model_adapted.ckpt").exists()


def test_traverse_command(workspace, capsys):
    root, cfg = workspace
    ckpt = str(root / "out" / "model.ckpt")
    rc = main(["traverse", "--config", cfg, "--checkpoint", ckpt,
               "--task", "0", "--dims", "0", "--steps", "3"])
    assert rc == 0
    tdir = root / "out" / "traversal"
    idx = json.loads((tdir / "traversal_index.json").read_text())
    assert len(idx["points"]) == 3
    assert (tdir / "traversal_0000.csv").exists()


def test_traverse_single_point(workspace, capsys):
    root, cfg = workspace
    ckpt = str(root / "out" / "model.ckpt")
    rc = main(["traverse", "--config", cfg, "--checkpoint", ckpt,
               "--steps", "1"])
    assert rc == 0
    idx = json.loads((root / "out" / "traversal" /
                      "traversal_index.json").read_text())
    assert len(idx["points"]) == 1


def test_identcheck_generic_satisfied(capsys):
    rc = main(["identcheck", "--d-z", "2", "--trials", "50", "--seed", "0"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["satisfied_fraction"] >= 0.99


def test_identcheck_mean_only_never_satisfied(capsys):
    rc = main(["identcheck", "--d-z", "2", "--trials", "20", "--mean-only"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["satisfied_fraction"] == 0.0
    assert out["last_rank"] <= 2


def test_metrics_command(workspace, capsys):
    root, cfg = workspace
    ckpt = str(root / "out" / "model.ckpt")
    rc = main(["metrics", "--config", cfg, "--checkpoint", ckpt])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert 0.0 <= out["mcc"] <= 1.0
    assert (root / "out" / "latents.csv").exists()


def test_threads_env_var_same_bytes(tmp_path):
    def checksum(name, threads):
        cfg = write_cfg(tmp_path / f"{name}.cfg", tmp_path / f"{name}.dsgo",
                        tmp_path / f"{name}_o")
        old = os.environ.get("DISENTANGO_THREADS")
        os.environ["DISENTANGO_THREADS"] = threads
        try:
            assert main(["gen", "--config", cfg]) == 0
        finally:
            if old is None:
                os.environ.pop("DISENTANGO_THREADS", None)
            else:
                os.environ["DISENTANGO_THREADS"] = old
        return hashlib.sha256((tmp_path / f"{name}.dsgo").read_bytes()).hexdigest()

    assert checksum("t1", "1") == checksum("t4", "4")
