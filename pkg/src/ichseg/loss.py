"""Dice + cross-entropy loss and its deep-supervision weighted sum."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    dice_smooth: float = 1e-5
    ce_class_weights: tuple[float, ...] | None = None
    include_background_in_dice: bool = False

    def __post_init__(self):
        if not self.dice_smooth > 0:
            raise ValueError("dice_smooth must be > 0")
        if self.ce_class_weights is not None:
            object.__setattr__(self, "ce_class_weights", tuple(float(w) for w in self.ce_class_weights))


def deep_supervision_weights(ds_levels: int) -> tuple[float, ...]:
    """1, 1/2, 1/4, ... for the full-resolution output and each of ``ds_levels`` sublevels."""
    return tuple(1.0 / 2 ** i for i in range(ds_levels + 1))


def _batched(logits: torch.Tensor, target: torch.Tensor):
    if logits.ndim == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    if logits.ndim != 4 or target.ndim != 3 or logits.shape[:1] + logits.shape[2:] != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} are not aligned")
    return logits, target.long()


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """1 - (2 sum(p g) + s) / (sum p + sum g + s), sums over batch and pixels,
    averaged over the scored classes."""
    logits, target = _batched(logits, target)
    k = logits.shape[1]
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(target, k).permute(0, 3, 1, 2).to(probs.dtype)
    if not cfg.include_background_in_dice:
        probs, onehot = probs[:, 1:], onehot[:, 1:]
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    s = cfg.dice_smooth
    return (1.0 - (2.0 * inter + s) / (denom + s)).mean()


def dice_ce_loss(logits, target, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Soft Dice + mean pixelwise cross-entropy for (K, H, W) or (B, K, H, W) logits."""
    logits, target = _batched(torch.as_tensor(logits), torch.as_tensor(target))
    if target.numel() and (target.min() < 0 or target.max() >= logits.shape[1]):
        raise ValueError("target class index out of range")
    weight = None
    if cfg.ce_class_weights is not None:
        weight = torch.tensor(cfg.ce_class_weights, dtype=logits.dtype)
    ce = F.cross_entropy(logits, target, weight=weight)
    return soft_dice_loss(logits, target, cfg) + ce


def downsample_target(target, factor: int):
    """Nearest-neighbour subsampling by a power of two; output pixel i takes source
    pixel floor((i + 0.5) * factor), the centre-aligned nearest sample."""
    factor = int(factor)
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    h, w = target.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"target size {(h, w)} not divisible by {factor}")
    if factor == 1:
        return target
    start = factor // 2
    return target[..., start::factor, start::factor]


def deep_supervision_loss(outputs: Sequence[torch.Tensor], target, cfg: LossConfig = LossConfig(),
                          loss_fn: Callable = dice_ce_loss) -> torch.Tensor:
    """Sum over levels i of 2^-i * loss(outputs[i], target downsampled by 2^i).

    The sum is not renormalised by the total weight.
    """
    if len(outputs) == 0:
        raise ValueError("no outputs")
    target = torch.as_tensor(target)
    h, w = outputs[0].shape[-2:]
    if target.shape[-2:] != (h, w):
        raise ValueError(f"target {tuple(target.shape[-2:])} does not match output {(h, w)}")
    total = 0.0
    for i, (out, weight) in enumerate(zip(outputs, deep_supervision_weights(len(outputs) - 1))):
        f = 2 ** i
        if out.shape[-2:] != (h // f, w // f) or h % f or w % f:
            raise ValueError(f"output {i} has size {tuple(out.shape[-2:])}, expected {(h // f, w // f)}")
        total = total + weight * loss_fn(out, downsample_target(target, f), cfg)
    return total
