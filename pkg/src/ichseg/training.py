"""Per-fold training (AdamW + cosine annealing) and the k-fold driver."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .inference import ConfigurationError, binarize, predict_volume
from .loss import LossConfig, deep_supervision_loss
from .metrics import dice
from .network import NetworkConfig, build_model, load_checkpoint, save_checkpoint
from .preprocessing import AugmentConfig, CropConfig, InputStrategy, sample_slices
from .volume_io import FoldAssignment, Mask, Volume, load_manifest, load_mask, load_volume, make_folds

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when the loss becomes non-finite."""


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * epoch / total)) / 2: lr0 at epoch 0, exactly 0 at ``total_epochs``."""
    if total_epochs < 1 or not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if epoch == total_epochs:
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 1600
    batch_size: int = 32
    seed: int = 0
    strategy: InputStrategy = field(default_factory=InputStrategy.adjacent_slices)
    crop: CropConfig = field(default_factory=CropConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    checkpoint_dir: str = "checkpoints"
    slices_per_case: int = 4
    threshold: float = 0.5
    keep_snapshots: bool = True

    def __post_init__(self):
        if not self.lr0 > 0 or self.epochs < 1 or self.batch_size < 1 or self.slices_per_case < 1:
            raise ValueError("lr0 > 0, epochs >= 1, batch_size >= 1, slices_per_case >= 1 required")
        if self.net.in_channels != self.strategy.n_channels:
            # the network input width always follows the strategy
            object.__setattr__(self, "net", replace(self.net, in_channels=self.strategy.n_channels))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["strategy"] = self.strategy.to_dict()
        d["net"] = self.net.to_dict()
        for key in ("crop", "aug", "loss"):
            d[key] = asdict(d[key])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "strategy" in d:
            d["strategy"] = InputStrategy.from_dict(d["strategy"])
        for key, typ in (("crop", CropConfig), ("aug", AugmentConfig), ("loss", LossConfig),
                         ("net", NetworkConfig)):
            if key in d and not isinstance(d[key], typ):
                d[key] = typ(**{k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()})
        return cls(**d)


@dataclass
class FoldResult:
    fold: int
    best_val_dice: float
    best_epoch: int
    checkpoint_path: str
    history: list[dict] = field(default_factory=list)
    snapshots: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _load_cases(manifest: Mapping, case_ids) -> list[tuple[Volume, Mask]]:
    cases = []
    for cid in case_ids:
        entry = manifest[cid]
        cases.append((load_volume(entry["image"], cid), load_mask(entry["label"], cid)))
    return cases


def validate(model, cases, strategy: InputStrategy, input_size, threshold: float = 0.5) -> float:
    """Mean full-volume foreground Dice over ``cases``."""
    scores = []
    for volume, mask in cases:
        pred = binarize(predict_volume(model, volume, strategy, input_size), threshold)
        scores.append(dice(pred, mask))
    return float(np.mean(scores))


def train_fold(manifest, folds: FoldAssignment, fold: int, cfg: TrainConfig) -> FoldResult:
    """Train on every case outside ``fold``, validate on the cases inside it.

    A checkpoint is written whenever validation Dice improves (``best.pt`` plus an
    ``epoch_XXXX.pt`` snapshot when ``keep_snapshots``); ``history.json`` is
    rewritten after every epoch.
    """
    if not 0 <= fold < folds.k:
        raise ValueError(f"fold {fold} outside [0, {folds.k})")
    if not isinstance(manifest, Mapping):
        manifest = load_manifest(manifest)
    if not manifest:
        raise ConfigurationError("empty manifest")
    train_ids = [c for c in folds.cases_not_in(fold) if c in manifest]
    val_ids = [c for c in folds.cases_in(fold) if c in manifest]
    if not train_ids:
        raise ConfigurationError(f"fold {fold} leaves no training cases")
    if not val_ids:
        raise ConfigurationError(f"fold {fold} has no validation cases")

    out_dir = Path(cfg.checkpoint_dir) / f"fold_{fold}"
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in list(out_dir.glob("*.pt")) + [out_dir / "history.json"]:
        stale.unlink(missing_ok=True)

    train_cases = _load_cases(manifest, train_ids)
    val_cases = _load_cases(manifest, val_ids)
    rng = np.random.default_rng([cfg.seed, fold])
    torch.manual_seed(cfg.seed)
    model = build_model(cfg.net, seed=cfg.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr0, weight_decay=cfg.weight_decay)
    meta = {"fold": fold, "input_size": list(cfg.crop.size), "train_config": cfg.to_dict()}

    result = FoldResult(fold, -1.0, -1, "")
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        for group in optimizer.param_groups:
            group["lr"] = lr

        samples = []
        for volume, mask in train_cases:
            samples += sample_slices(volume, mask.data, cfg.slices_per_case, cfg.strategy,
                                     cfg.crop, cfg.aug, rng)
        order = rng.permutation(len(samples))
        model.train()
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            x = torch.from_numpy(np.stack([s.image for s in batch]))
            y = torch.from_numpy(np.stack([s.label for s in batch]).astype(np.int64))
            loss = deep_supervision_loss(model(x), y, cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at fold {fold}, epoch {epoch}, batch {start // cfg.batch_size}, "
                    f"lr {lr:.3g}; cases {sorted({s.case_id for s in batch})}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        val_dice = validate(model, val_cases, cfg.strategy, cfg.crop.size, cfg.threshold)
        result.history.append({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                               "val_dice": val_dice})
        log.info("fold %d epoch %d loss %.4f val dice %.4f", fold, epoch, np.mean(losses), val_dice)
        if val_dice > result.best_val_dice:
            result.best_val_dice, result.best_epoch = val_dice, epoch
            info = dict(meta, epoch=epoch, val_dice=val_dice)
            save_checkpoint(out_dir / "best.pt", model, info, cfg.strategy.to_dict())
            result.checkpoint_path = str(out_dir / "best.pt")
            if cfg.keep_snapshots:
                snap = out_dir / f"epoch_{epoch:04d}.pt"
                save_checkpoint(snap, model, info, cfg.strategy.to_dict())
                result.snapshots.append(str(snap))
        (out_dir / "history.json").write_text(json.dumps(result.history, indent=2) + "\n")
    return result


@dataclass
class CVReport:
    fold_results: list[FoldResult]
    mean_dice: float

    @property
    def fold_dice(self) -> list[float]:
        return [r.best_val_dice for r in self.fold_results]

    def to_dict(self, root=None) -> dict:
        """JSON-ready summary; paths are made relative to ``root`` when given."""
        def rel(p):
            if root is None:
                return p
            try:
                return str(Path(p).relative_to(root))
            except ValueError:
                return p
        folds = []
        for r in self.fold_results:
            folds.append({"fold": r.fold, "best_val_dice": r.best_val_dice, "best_epoch": r.best_epoch,
                          "checkpoint": rel(r.checkpoint_path),
                          "snapshots": [rel(s) for s in r.snapshots], "history": r.history})
        return {"k": len(self.fold_results), "fold_dice": self.fold_dice,
                "mean_dice": self.mean_dice, "folds": folds}


def run_cross_validation(manifest, k: int, cfg: TrainConfig, fold_seed: int | None = None,
                         folds: FoldAssignment | None = None) -> CVReport:
    """Train every fold; writes ``folds.json`` and ``cv_report.json`` to ``cfg.checkpoint_dir``."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if not isinstance(manifest, Mapping):
        manifest = load_manifest(manifest)
    if folds is None:
        folds = make_folds(list(manifest), k, cfg.seed if fold_seed is None else fold_seed)
    elif folds.k != k:
        raise ValueError(f"fold assignment has k={folds.k}, expected {k}")
    root = Path(cfg.checkpoint_dir)
    root.mkdir(parents=True, exist_ok=True)
    folds.save(root / "folds.json")
    results = [train_fold(manifest, folds, f, cfg) for f in range(k)]
    report = CVReport(results, float(np.mean([r.best_val_dice for r in results])))
    (root / "cv_report.json").write_text(json.dumps(report.to_dict(root), indent=2) + "\n")
    return report


def reload_and_validate(checkpoint, manifest, case_ids, threshold: float = 0.5) -> float:
    """Recompute validation Dice from a saved checkpoint (checkpoint fidelity check)."""
    if not isinstance(manifest, Mapping):
        manifest = load_manifest(manifest)
    model, info = load_checkpoint(checkpoint)
    strategy = InputStrategy.from_dict(info["strategy"])
    return validate(model, _load_cases(manifest, case_ids), strategy,
                    tuple(info["metadata"]["input_size"]), threshold)
