import json
import math

import numpy as np
import pytest
import torch

from ichseg.inference import ConfigurationError
from ichseg.loss import deep_supervision_loss
from ichseg.network import NetworkConfig, build_model
from ichseg.preprocessing import AugmentConfig, CropConfig, InputStrategy
from ichseg.training import (TrainConfig, TrainingError, cosine_lr, reload_and_validate, run_cross_validation,
                             train_fold)
from ichseg.volume_io import FoldAssignment, load_manifest, make_folds


def test_cosine_lr_values():
    assert cosine_lr(0, 1600, 2e-4) == 2e-4
    assert cosine_lr(1600, 1600, 2e-4) == 0.0
    assert abs(cosine_lr(800, 1600, 2e-4) - 1e-4) <= 1e-12
    lrs = [cosine_lr(e, 1600, 2e-4) for e in range(1601)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(1601, 1600, 2e-4)
    with pytest.raises(ValueError):
        cosine_lr(-1, 10, 1.0)


def tiny_config(tmp_path, **kw):
    base = dict(lr0=2e-3, epochs=2, batch_size=4, seed=0, crop=CropConfig((32, 32)),
                net=NetworkConfig(init_filters=4), checkpoint_dir=str(tmp_path), slices_per_case=2)
    base.update(kw)
    return TrainConfig(**base)


def test_config_round_trip_and_channel_sync(tmp_path):
    cfg = tiny_config(tmp_path, strategy=InputStrategy.combined())
    assert cfg.net.in_channels == 9
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_train_fold_loop_contract(small_dataset, tmp_path):
    manifest = load_manifest(small_dataset)
    folds = make_folds(list(manifest), 3, seed=0)
    result = train_fold(manifest, folds, 0, tiny_config(tmp_path))
    assert len(result.history) == 2
    assert (tmp_path / "fold_0" / "best.pt").exists()
    assert json.loads((tmp_path / "fold_0" / "history.json").read_text()) == result.history
    assert result.best_val_dice == max(h["val_dice"] for h in result.history)
    assert 0.0 <= result.best_val_dice <= 1.0


def test_train_fold_deterministic(small_dataset, tmp_path):
    folds = make_folds(list(load_manifest(small_dataset)), 3, seed=0)
    a = train_fold(small_dataset, folds, 1, tiny_config(tmp_path / "a"))
    b = train_fold(small_dataset, folds, 1, tiny_config(tmp_path / "b"))
    assert a.history == b.history


def test_checkpoint_reproduces_best_dice(small_dataset, tmp_path):
    folds = make_folds(list(load_manifest(small_dataset)), 3, seed=0)
    result = train_fold(small_dataset, folds, 2, tiny_config(tmp_path, epochs=3))
    again = reload_and_validate(result.checkpoint_path, small_dataset, folds.cases_in(2))
    assert abs(again - result.best_val_dice) <= 1e-6


def test_train_fold_errors(small_dataset, tmp_path):
    manifest = load_manifest(small_dataset)
    folds = make_folds(list(manifest), 3, seed=0)
    with pytest.raises(ValueError):
        train_fold(manifest, folds, 3, tiny_config(tmp_path))
    only_val = FoldAssignment(2, 0, {c: 0 for c in manifest})
    with pytest.raises(ConfigurationError):
        train_fold(manifest, only_val, 0, tiny_config(tmp_path))
    with pytest.raises(ConfigurationError):
        train_fold({}, folds, 0, tiny_config(tmp_path))


def test_non_finite_loss_aborts(small_dataset, tmp_path):
    folds = make_folds(list(load_manifest(small_dataset)), 3, seed=0)
    with pytest.raises(TrainingError, match="non-finite"):
        train_fold(small_dataset, folds, 0, tiny_config(tmp_path, lr0=1e30))


def test_one_batch_learning_signal():
    torch.manual_seed(0)
    model = build_model(NetworkConfig(init_filters=4), seed=0)
    x = torch.rand(4, 3, 32, 32)
    y = (x[:, 0] > 0.6).long()
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3, weight_decay=1e-5)
    model.train()
    before = deep_supervision_loss(model(x), y).item()
    for _ in range(5):
        opt.zero_grad()
        deep_supervision_loss(model(x), y).backward()
        opt.step()
    assert deep_supervision_loss(model(x), y).item() < before


def test_cross_validation_aggregation(small_dataset, tmp_path):
    report = run_cross_validation(small_dataset, 2, tiny_config(tmp_path, epochs=1))
    assert len(report.fold_results) == 2
    assert report.mean_dice == pytest.approx(sum(report.fold_dice) / 2, abs=1e-15)
    saved = json.loads((tmp_path / "cv_report.json").read_text())
    assert saved["fold_dice"] == report.fold_dice
    assert saved["folds"][0]["checkpoint"] == "fold_0/best.pt"
    assert (tmp_path / "folds.json").exists()
    with pytest.raises(ValueError):
        run_cross_validation(small_dataset, 1, tiny_config(tmp_path))
