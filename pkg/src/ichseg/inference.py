"""Slice-wise volume prediction, mean ensembling and thresholding."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .network import SegResNet2D, load_checkpoint
from .preprocessing import InputStrategy, build_input, pad_to
from .volume_io import Mask, Volume, load_volume, save_volume


class ConfigurationError(ValueError):
    pass


@dataclass
class ProbabilityVolume:
    probs: np.ndarray
    spacing: tuple[float, float, float]
    case_id: str = ""
    affine: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float32)
        if self.probs.ndim != 3:
            raise ValueError("probability volume must be 3D")
        if self.probs.size and (self.probs.min() < 0 or self.probs.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.probs.shape


def _padded_size(h: int, w: int, input_size, divisor: int) -> tuple[int, int]:
    def up(n, m):
        return -(-n // m) * m
    return (up(max(h, input_size[0]), divisor), up(max(w, input_size[1]), divisor))


def predict_volume(model: SegResNet2D, volume: Volume, strategy: InputStrategy,
                   input_size=(384, 384), batch_size: int = 8) -> ProbabilityVolume:
    """Foreground probability for every voxel, one slice at a time.

    Slices are padded symmetrically to ``input_size`` (rounded up to the network's
    size divisor) and cropped back afterwards; the voxel grid is never resampled.
    """
    if model.cfg.in_channels != strategy.n_channels:
        raise ConfigurationError(
            f"model takes {model.cfg.in_channels} channels, strategy produces {strategy.n_channels}")
    h, w, n_slices = volume.shape
    size = _padded_size(h, w, input_size, model.cfg.divisor)
    dtype = next(model.parameters()).dtype
    probs = np.empty(volume.shape, dtype=np.float32)
    model.eval()
    with torch.no_grad():
        for start in range(0, n_slices, batch_size):
            idx = range(start, min(start + batch_size, n_slices))
            batch = []
            for i in idx:
                image, _, (top, left) = pad_to(build_input(volume, i, strategy), None, size)
                batch.append(image)
            logits = model(torch.as_tensor(np.stack(batch), dtype=dtype))[0]
            fg = torch.softmax(logits, dim=1)[:, 1].numpy()
            probs[:, :, idx.start:idx.stop] = np.moveaxis(fg[:, top:top + h, left:left + w], 0, 2)
    return ProbabilityVolume(np.clip(probs, 0.0, 1.0), volume.spacing, volume.case_id, volume.affine)


def predict_with_checkpoint(path, volume: Volume, input_size=None) -> ProbabilityVolume:
    """Load a checkpoint and predict with the input strategy stored inside it."""
    model, info = load_checkpoint(path)
    if info.get("strategy") is None:
        raise ConfigurationError(f"checkpoint {path} carries no input strategy")
    strategy = InputStrategy.from_dict(info["strategy"])
    if input_size is None:
        input_size = info.get("metadata", {}).get("input_size", (384, 384))
    return predict_volume(model, volume, strategy, tuple(input_size))


def ensemble_mean(members: Sequence[ProbabilityVolume]) -> ProbabilityVolume:
    """Voxelwise arithmetic mean of the members' foreground probabilities."""
    if not members:
        raise ValueError("ensemble needs at least one member")
    first = members[0]
    for m in members[1:]:
        if m.shape != first.shape:
            raise ValueError(f"member shape {m.shape} != {first.shape}")
        if m.case_id != first.case_id:
            raise ValueError(f"members mix cases {first.case_id!r} and {m.case_id!r}")
    # float64 accumulation, sorted summation order -> permutation-invariant bit for bit
    stacked = np.sort(np.stack([m.probs.astype(np.float64) for m in members]), axis=0)
    mean = stacked.sum(axis=0) / len(members)
    return ProbabilityVolume(np.clip(mean, 0.0, 1.0).astype(np.float32), first.spacing,
                             first.case_id, first.affine)


def binarize(pv: ProbabilityVolume, threshold: float = 0.5) -> Mask:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return Mask((pv.probs >= threshold).astype(np.uint8), pv.spacing, pv.case_id, pv.affine)


def save_probability(pv: ProbabilityVolume, path) -> None:
    save_volume(Volume(pv.probs, pv.spacing, pv.case_id, pv.affine), path)


def load_probability(path, case_id: str | None = None) -> ProbabilityVolume:
    v = load_volume(path, case_id)
    return ProbabilityVolume(v.data, v.spacing, v.case_id, v.affine)


def cached_prediction(checkpoint, volume: Volume, cache_dir=None) -> ProbabilityVolume:
    """``predict_with_checkpoint`` with an optional on-disk NIfTI cache keyed by
    (checkpoint file name, case id)."""
    if cache_dir is None:
        return predict_with_checkpoint(checkpoint, volume)
    key = hashlib.sha1(str(Path(checkpoint).resolve()).encode()).hexdigest()[:10]
    path = Path(cache_dir) / f"{Path(checkpoint).stem}-{key}" / f"{volume.case_id}.nii.gz"
    if path.exists():
        return load_probability(path, volume.case_id)
    pv = predict_with_checkpoint(checkpoint, volume)
    save_probability(pv, path)
    return pv
