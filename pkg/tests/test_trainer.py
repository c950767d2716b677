import os

import numpy as np
import pytest
import torch

from shipfuse.dataio import synth_scene
from shipfuse.model import ABLATIONS
from shipfuse.trainer import (CheckpointError, TrainConfig, TrainingDiverged, build_model, dataset_losses,
                              format_config, load_checkpoint, lr_at, parse_config, random_crop, save_checkpoint, train)

PAIRS = [synth_scene(300 + k, 1 + k % 2) for k in range(4)]


def tiny(**kw):
    base = dict(total_iters=3, warmup_iters=1, batch_size=2, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_at(cfg.warmup_iters, cfg) == 1e-4
    assert lr_at(cfg.warmup_iters // 2, cfg) == pytest.approx(0.5e-4)
    assert lr_at(0, cfg) == 0.0
    last = lr_at(cfg.total_iters - 1, cfg)
    assert 0 < last <= cfg.lr / (cfg.total_iters - cfg.warmup_iters) + 1e-18
    with pytest.raises(ValueError):
        lr_at(cfg.total_iters, cfg)


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(warmup_iters=10, total_iters=5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_config_text_roundtrip():
    cfg = tiny(seed=5, ablation=ABLATIONS["M4"]).replace(sigma=0.3)
    text = format_config(cfg)
    assert all(line.startswith("#") or "=" in line for line in text.splitlines())
    assert parse_config(text) == cfg
    with pytest.raises(ValueError, match="unknown"):
        parse_config("nonsense = 1\n")
    with pytest.raises(ValueError, match="line 2"):
        parse_config("lr = 0.1\nbroken\n")


def test_zero_iterations_keeps_init(tmp_path):
    cfg = tiny(total_iters=0, warmup_iters=0)
    res = train(PAIRS, cfg, out_dir=str(tmp_path))
    init = build_model(cfg)
    for k, v in init.state_dict().items():
        assert torch.equal(v, res.model.state_dict()[k])
    assert os.path.exists(tmp_path / "checkpoint_final.pt")


def test_lr_zero_step_changes_nothing():
    cfg = tiny(total_iters=1, warmup_iters=1)  # lr_at(0) == 0 during warm-up
    before = {k: v.clone() for k, v in build_model(cfg).state_dict().items()}
    res = train(PAIRS, cfg)
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_checkpoint_roundtrip_and_errors(tmp_path):
    cfg = tiny()
    model = build_model(cfg)
    path = str(tmp_path / "c.pt")
    save_checkpoint(path, model, cfg, 7)
    back, back_cfg, step = load_checkpoint(path)
    assert step == 7 and back_cfg == cfg
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])

    data = open(path, "rb").read()
    (tmp_path / "t.pt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "t.pt"))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "missing.pt"))

    payload = torch.load(path, weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, str(tmp_path / "v.pt"))
    with pytest.raises(CheckpointError, match="99.*version 1"):
        load_checkpoint(str(tmp_path / "v.pt"))


def test_checkpoint_flags_take_precedence(tmp_path):
    cfg = tiny(ablation=ABLATIONS["M6"])
    path = str(tmp_path / "c.pt")
    save_checkpoint(path, build_model(cfg), cfg, 0)
    with pytest.warns(UserWarning, match="checkpoint"):
        model, got, _ = load_checkpoint(path, tiny())
    assert got.ablation == ABLATIONS["M6"] and model.flags == ABLATIONS["M6"]


def test_divergence_aborts():
    with pytest.raises(TrainingDiverged, match="at step"):
        train(PAIRS, tiny(lr=1e30, total_iters=5, warmup_iters=1))


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_every_ablation_runs(name):
    res = train(PAIRS, tiny(total_iters=2, ablation=ABLATIONS[name]))
    assert len(res.history) == 2 and all(np.isfinite(h.total) for h in res.history)


def test_training_is_deterministic(tmp_path):
    a = train(PAIRS, tiny(seed=3), out_dir=str(tmp_path / "a"))
    b = train(PAIRS, tiny(seed=3), out_dir=str(tmp_path / "b"))
    assert a.log_lines == b.log_lines
    assert (tmp_path / "a" / "checkpoint_final.pt").read_bytes() == (tmp_path / "b" / "checkpoint_final.pt").read_bytes()


def test_checkpoint_interval(tmp_path):
    res = train(PAIRS, tiny(total_iters=4, checkpoint_every=2), out_dir=str(tmp_path))
    names = sorted(os.path.basename(p) for p in res.checkpoints)
    assert names == ["checkpoint_000002.pt", "checkpoint_000004.pt", "checkpoint_final.pt"]
    header = (tmp_path / "train_log.tsv").read_text().splitlines()[0].split("\t")
    assert header[0] == "step" and header[-1] == "lr" and "l_det" in header


def test_random_crop_keeps_boxes_consistent():
    big = synth_scene(9, 3, size=(96, 128))
    rng = np.random.default_rng(0)
    c = random_crop(big, 64, rng)
    assert c.shape == (64, 64)
    for b in c.boxes:
        assert 0 <= b.cx - b.w / 2 and b.cx + b.w / 2 <= 1 + 1e-9


@pytest.mark.slow
def test_loss_decreases_early_in_most_seeds():
    ok = 0
    seeds = range(10)
    for s in seeds:
        cfg = tiny(seed=s, total_iters=50, warmup_iters=5, batch_size=4, lr=1e-3)
        before = dataset_losses(build_model(cfg), PAIRS, cfg).total
        after = dataset_losses(train(PAIRS, cfg).model, PAIRS, cfg).total
        ok += after < before
    assert ok >= 9
