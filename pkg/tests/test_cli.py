import json
import os

import numpy as np
import pytest

from agerestore import synthface as sf
from agerestore.cli import EXIT_GATE, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, build_parser, run_command
from agerestore.config import AppConfig, ConfigError

TINY = {
    "data": {"train_ids": 6, "train_imgs_per_id": 3, "test_ids": 3, "test_imgs_per_id": 1, "bucket_ids": 1},
    "oracles": {"age_steps": 20, "identity_steps": 20, "encoder_steps": 20, "n_ids": 10, "per_id": 3},
    "denoiser": {"base_channels": 8, "attn_dim": 16, "num_heads": 2, "id_token_count": 4},
    "prior": {"max_steps": 3, "batch_size": 4, "checkpoint_every": 3, "warmup_steps": 0},
    "identity": {"max_steps": 2, "batch_size": 4, "checkpoint_every": 2, "eval_every": 0, "warmup_steps": 0},
    "guidance": {"ddim_steps": 4, "inner_steps": 2},
}


def _write_config(tmp_path, root="ws", **override):
    cfg = dict(TINY, root=root, **override)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_help_for_every_subcommand(capsys):
    assert run_command(["--help"]) == EXIT_OK
    for name in ("synth-data", "train-oracles", "train", "degrade", "restore", "eval", "ablate"):
        assert run_command([name, "--help"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "usage" in out


def test_usage_errors():
    assert run_command(["nope"]) == EXIT_USAGE
    assert run_command(["restore", "--modulation", "fixed:3", "--root", "/nonexistent/x"]) != EXIT_OK


def test_strict_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"guidance": {"inner_step": 5}}))
    with pytest.raises(ConfigError):
        AppConfig.load(str(p))
    p.write_text(json.dumps({"extra": {}}))
    with pytest.raises(ConfigError):
        AppConfig.load(str(p))
    assert run_command(["--config", str(p), "synth-data"]) == EXIT_USAGE


def test_config_roundtrip_and_hash(tmp_path):
    cfg = AppConfig.from_dict(TINY)
    cfg.save(str(tmp_path / "c.json"))
    again = AppConfig.load(str(tmp_path / "c.json"))
    assert again.digest() == cfg.digest()
    moved = AppConfig.from_dict(dict(TINY, root="elsewhere"))
    assert moved.digest() == cfg.digest()


def test_degrade_command(tmp_path):
    rng = np.random.default_rng(0)
    img, _ = sf.render_face(sf.sample_spec(rng, sf.identity_vector(0, 1), 30))
    sf.save_png(str(tmp_path / "a.png"), img)
    out = tmp_path / "out"
    assert run_command(["degrade", str(tmp_path / "a.png"), "--out-dir", str(out), "--seed", "3"]) == EXIT_OK
    params = json.loads((out / "degradation.json").read_text())["a.png"]
    assert 1 <= params["r"] <= 4 and sf.load_png(str(out / "a.png")).shape == img.shape
    assert run_command(["degrade", str(tmp_path / "missing.png"), "--out-dir", str(out)]) == EXIT_RUNTIME


def test_restore_without_training_fails(tmp_path):
    cfg = _write_config(tmp_path)
    assert run_command(["--config", cfg, "restore"]) == EXIT_RUNTIME


def _pipeline(tmp_path, root):
    cfg = _write_config(tmp_path, root=root)
    assert run_command(["--config", cfg, "synth-data"]) == EXIT_OK
    assert run_command(["--config", cfg, "train-oracles"]) in (EXIT_OK, EXIT_GATE)
    assert run_command(["--config", cfg, "train"]) == EXIT_OK
    assert run_command(["--config", cfg, "restore", "--target-age", "24", "--inner-steps", "5", "--out", "g"]) == 0
    assert run_command(["--config", cfg, "eval", "--outputs", "g"]) == EXIT_OK
    return tmp_path / root


def test_pipeline_sidecar_and_reproducibility(tmp_path):
    a = _pipeline(tmp_path, "ws_a")
    side = json.loads(next((a / "outputs" / "g").glob("00000_*.json")).read_text())
    assert side["cfg"]["inner_steps"] == 5 and side["target_age"] == 24
    assert len(side["correction_norms"]) == 4
    b = _pipeline(tmp_path, "ws_b")
    ra = (a / "outputs" / "g" / "report.json").read_bytes()
    rb = (b / "outputs" / "g" / "report.json").read_bytes()
    assert ra == rb


def test_prompt_only_equals_null_guidance(tmp_path):
    cfg = _write_config(tmp_path)
    assert run_command(["--config", cfg, "train"]) == EXIT_OK
    assert run_command(["--config", cfg, "restore", "--inner-steps", "0", "--prompt-only", "--seed", "7",
                        "--out", "p"]) == EXIT_OK
    assert run_command(["--config", cfg, "restore", "--inner-steps", "0", "--null-guidance", "--seed", "7",
                        "--out", "n"]) == EXIT_OK
    assert run_command(["--config", cfg, "restore", "--inner-steps", "3", "--null-guidance", "--seed", "7",
                        "--out", "n3"]) == EXIT_OK
    root = tmp_path / "ws" / "outputs"
    pngs = sorted(p.name for p in (root / "p").glob("*.png"))
    assert pngs
    for name in pngs:
        ref = (root / "p" / name).read_bytes()
        assert (root / "n" / name).read_bytes() == ref
        assert (root / "n3" / name).read_bytes() == ref


def test_train_resumes_interrupted_stage(tmp_path):
    cfg_path = _write_config(tmp_path)
    assert run_command(["--config", cfg_path, "train", "--stage", "prior"]) == EXIT_OK
    stamp = tmp_path / "ws" / "runs" / "prior" / "stamp.json"
    first = json.load(open(stamp))["checkpoint"]
    os.remove(stamp)  # looks interrupted after the final checkpoint
    assert run_command(["--config", cfg_path, "train", "--stage", "prior"]) == EXIT_OK
    assert json.load(open(stamp))["checkpoint"] == first


def test_paired_seeds_share_initial_noise(tmp_path):
    from dataclasses import replace

    from agerestore import pipeline

    cfg = AppConfig.load(_write_config(tmp_path, root=str(tmp_path / "ws")))
    assert run_command(["--config", str(tmp_path / "config.json"), "train"]) == EXIT_OK
    model = pipeline.load_model(cfg, "grf")[0]
    man = pipeline.prepare_data(cfg)["test_same_age"]
    rec = man.records[0]
    twin = sf.RunManifest(man.split, [rec, rec], man.root)
    g = replace(cfg.guidance, inner_steps=0)
    same = pipeline.restore_manifest(model, twin, g, str(tmp_path / "a"), seeds=[5, 5], sidecars=False)
    diff = pipeline.restore_manifest(model, twin, g, str(tmp_path / "b"), sidecars=False)
    assert np.array_equal(same[0], same[1])
    assert not np.array_equal(diff[0], diff[1])
    with pytest.raises(ValueError):
        pipeline.restore_manifest(model, twin, g, str(tmp_path / "c"), seeds=[1])


def test_copied_workspace_keeps_training_cache(tmp_path):
    import shutil

    from agerestore import pipeline

    assert run_command(["--config", _write_config(tmp_path, root=str(tmp_path / "a")), "train"]) == EXIT_OK
    shutil.copytree(tmp_path / "a", tmp_path / "b")
    shutil.rmtree(tmp_path / "a")
    cfg = AppConfig.load(_write_config(tmp_path, root=str(tmp_path / "b")))
    before = {p: p.stat().st_mtime_ns for p in (tmp_path / "b" / "runs").rglob("*.ckpt")}
    paths = pipeline.train_models(cfg, pipeline.prepare_oracles(cfg)[1], variants=("grf",))
    assert all(p.startswith(str(tmp_path / "b")) for p in paths.values())
    assert {p: p.stat().st_mtime_ns for p in (tmp_path / "b" / "runs").rglob("*.ckpt")} == before
    assert pipeline.load_model(cfg, "grf")[1].startswith(str(tmp_path / "b"))
