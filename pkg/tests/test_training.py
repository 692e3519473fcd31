import json
import os
import shutil

import numpy as np
import pytest
import torch

from agerestore import synthface as sf
from agerestore.denoiser import load_checkpoint
from agerestore.identity import FaceEncoder
from agerestore.model import RestorationModel
from agerestore.training import (TrainConfig, TrainData, TrainingDivergedError, make_batch, make_optimizer,
                                 run_training, step_loss, training_step)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    return sf.build_dataset(6, 3, "train_same_age", size=16, out_dir=str(d))


@pytest.fixture
def data(manifest, tiny_cfg):
    d = TrainData.from_manifest(manifest)
    torch.manual_seed(0)
    d.compute_embeddings(FaceEncoder(tiny_cfg.id_dim, image_size=16))
    return d


def _cfg(tmp_path, **kw):
    base = dict(lr=1e-3, batch_size=4, max_steps=4, checkpoint_every=2, eval_every=2, log_every=1,
                checkpoint_dir=str(tmp_path / "ck"), val_records=4, warmup_steps=0)
    return TrainConfig(**dict(base, **kw))


def test_batch_contents(data, tmp_path):
    cfg = _cfg(tmp_path)
    b = make_batch(data, cfg, np.random.default_rng(0))
    assert b["hq"].shape == b["lq"].shape == (4, 1, 16, 16)
    assert b["id_emb"].shape == (4, 16)
    assert torch.allclose(b["id_emb"].norm(dim=-1), torch.ones(4), atol=1e-5)
    prior = make_batch(data, _cfg(tmp_path, stage="prior", prior_descriptor_p=1.0), np.random.default_rng(0))
    assert prior["id_emb"] is None and prior["prompt"].shape[0] == 4


def test_training_step_gradient_matches_finite_difference(data, tiny_model, tmp_path, schedule):
    model = tiny_model.double()
    cfg = _cfg(tmp_path)
    batch = make_batch(data, cfg, np.random.default_rng(0))
    batch = {k: v.double() if isinstance(v, torch.Tensor) and v.is_floating_point() else v for k, v in batch.items()}
    param = model.denoiser.dec_blocks[0].conv1.weight
    idx = (0, 0, 1, 1)

    def loss():
        return step_loss(batch, model, schedule, torch.Generator().manual_seed(5), 0.0)

    model.zero_grad()
    loss().backward()
    analytic = param.grad[idx].item()
    h = 1e-6
    with torch.no_grad():
        param[idx] += h
        up = loss().item()
        param[idx] -= 2 * h
        down = loss().item()
        param[idx] += h
    numeric = (up - down) / (2 * h)
    assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-8)


def test_identity_dropout_blocks_identity_gradients(data, tiny_model, tmp_path, schedule):
    batch = make_batch(data, _cfg(tmp_path), np.random.default_rng(1))
    tiny_model.zero_grad()
    step_loss(batch, tiny_model.train(), schedule, torch.Generator().manual_seed(0), 1.0).backward()
    grads = [m.to_k_id.weight.grad for m in tiny_model.denoiser.modules() if hasattr(m, "to_k_id")]
    assert all(g is None or not g.any() for g in grads)
    assert tiny_model.projector.fc1.weight.grad is None or not tiny_model.projector.fc1.weight.grad.any()


def test_non_finite_loss_aborts(data, tiny_model, tmp_path, schedule):
    cfg = _cfg(tmp_path)
    opt = make_optimizer(tiny_model, cfg)
    with torch.no_grad():
        tiny_model.denoiser.conv_out.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        training_step(make_batch(data, cfg, np.random.default_rng(0)), tiny_model, opt, schedule,
                      torch.Generator().manual_seed(0))


def test_adapter_scope_freezes_base(tiny_model, tmp_path):
    make_optimizer(tiny_model, _cfg(tmp_path))
    assert not tiny_model.denoiser.conv_in.weight.requires_grad
    assert tiny_model.denoiser.control.conv_in.weight.requires_grad
    assert tiny_model.projector.fc1.weight.requires_grad


def test_resume_reproduces_losses(data, tiny_cfg, tmp_path):
    enc = FaceEncoder(tiny_cfg.id_dim, image_size=16)
    full = run_training(_cfg(tmp_path, checkpoint_dir=str(tmp_path / "a")), data, tiny_cfg, enc)
    shutil.copytree(tmp_path / "a", tmp_path / "b")
    for f in ("step_0000004.ckpt", "optim_0000004.pt", "summary.json"):
        os.remove(tmp_path / "b" / f)
    resumed = run_training(_cfg(tmp_path, checkpoint_dir=str(tmp_path / "b")), data, tiny_cfg, enc)
    ha, sa = load_checkpoint(full)
    hb, sb = load_checkpoint(resumed)
    assert ha["losses"] == hb["losses"]
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    log = [json.loads(x) for x in open(tmp_path / "a" / "train_log.jsonl")]
    assert [r["step"] for r in log] == [0, 1, 2, 3]
    val = [json.loads(x) for x in open(tmp_path / "a" / "val_log.jsonl")]
    assert {"val_mse", "val_mse_no_id"} <= set(val[0])
    summary = json.load(open(tmp_path / "a" / "summary.json"))
    assert summary["steps"] == 4


def test_prior_then_identity_stage(data, tiny_cfg, tmp_path):
    enc = FaceEncoder(tiny_cfg.id_dim, image_size=16)
    prior = run_training(_cfg(tmp_path, stage="prior", checkpoint_dir=str(tmp_path / "p"), eval_every=0,
                              use_grf=False), data, tiny_cfg, enc)
    ident = run_training(_cfg(tmp_path, init_from=prior, checkpoint_dir=str(tmp_path / "i")), data, tiny_cfg, enc)
    model, header = RestorationModel.load(ident)
    assert model.trained and model.cfg.use_grf
    _, prior_state = load_checkpoint(prior)
    # base weights are frozen in the identity stage
    assert torch.equal(model.denoiser.conv_in.weight, prior_state["denoiser.conv_in.weight"])


def test_wrong_split_rejected(tmp_path, tiny_cfg):
    m = sf.build_dataset(2, 1, "test_cross_age", size=16)
    with pytest.raises(ValueError):
        run_training(_cfg(tmp_path), m, tiny_cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(id_dropout_p=1.5)
    with pytest.raises(ValueError):
        TrainConfig(stage="other")


def test_v_weighting_and_lq_dropout(data, tiny_model, tmp_path, schedule):
    batch = make_batch(data, _cfg(tmp_path), np.random.default_rng(0))
    gen = lambda: torch.Generator().manual_seed(3)
    plain = step_loss(batch, tiny_model, schedule, gen(), 0.0)
    weighted = step_loss(batch, tiny_model, schedule, gen(), 0.0, weighting="v")
    assert weighted > plain  # dividing by sqrt(abar) <= 1 only enlarges errors
    with torch.no_grad():
        for out in tiny_model.denoiser.control.outs:
            out.weight.normal_(0, 0.2)
    dropped = step_loss(batch, tiny_model, schedule, gen(), 0.0, lq_dropout_p=1.0)
    other_lq = dict(batch, lq=torch.randn(batch["lq"].shape))
    assert torch.equal(dropped, step_loss(other_lq, tiny_model, schedule, gen(), 0.0, lq_dropout_p=1.0))
    assert not torch.equal(step_loss(batch, tiny_model, schedule, gen(), 0.0),
                           step_loss(other_lq, tiny_model, schedule, gen(), 0.0))
    with pytest.raises(ValueError):
        TrainConfig(loss_weighting="x0")
    with pytest.raises(ValueError):
        TrainConfig(lq_dropout_p=2.0)
