"""2D residual encoder-decoder with deep-supervision heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = 1


class Norm(str, Enum):
    INSTANCE = "instance"
    BATCH = "batch"


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    out_classes: int = 2
    init_filters: int = 32
    stage_blocks: tuple[int, ...] = (2, 4, 4, 4, 4)
    norm: Norm = Norm.INSTANCE
    ds_levels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "norm", Norm(self.norm))
        if len(self.stage_blocks) != 5 or min(self.stage_blocks) < 1:
            raise ValueError(f"stage_blocks must be 5 positive counts, got {self.stage_blocks}")
        if self.in_channels < 1 or self.out_classes < 2 or self.init_filters < 1:
            raise ValueError("in_channels >= 1, out_classes >= 2 and init_filters >= 1 required")
        if not 0 <= self.ds_levels < len(self.stage_blocks):
            raise ValueError(f"ds_levels must be in [0, {len(self.stage_blocks)}), got {self.ds_levels}")

    @property
    def stage_filters(self) -> list[int]:
        return [self.init_filters * 2 ** i for i in range(len(self.stage_blocks))]

    @property
    def divisor(self) -> int:
        return 2 ** len(self.stage_blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norm"] = self.norm.value
        d["stage_blocks"] = list(self.stage_blocks)
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkConfig":
        return cls(**d)


class InstanceNorm(nn.Module):
    """Per-sample, per-channel normalisation with affine parameters.

    Unlike ``nn.InstanceNorm2d`` it accepts 1x1 feature maps (bottleneck of a
    32x32 input), where it reduces to the bias.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def _norm(kind: Norm, channels: int) -> nn.Module:
    if kind is Norm.BATCH:
        return nn.BatchNorm2d(channels)
    return InstanceNorm(channels)


class ResBlock(nn.Module):
    """(norm -> ReLU -> conv3x3) x 2 with an additive identity skip."""

    def __init__(self, channels: int, norm: Norm):
        super().__init__()
        self.norm1 = _norm(norm, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = _norm(norm, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)

    def forward(self, x):
        y = self.conv1(F.relu(self.norm1(x)))
        y = self.conv2(F.relu(self.norm2(y)))
        return x + y


class EncoderStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, n_blocks: int, norm: Norm):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False)
        self.blocks = nn.Sequential(*[ResBlock(out_ch, norm) for _ in range(n_blocks)])

    def forward(self, x):
        return self.blocks(self.down(x))


class DecoderLevel(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, norm: Norm):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.block = ResBlock(out_ch, norm)

    def forward(self, x, skip):
        x = self.proj(F.interpolate(x, scale_factor=2, mode="nearest"))
        return self.block(x + skip)


class SegResNet2D(nn.Module):
    """Stem conv at full resolution, five stride-2 encoder stages and a mirrored
    decoder with one residual block per level.

    ``forward`` returns a list of logit maps, full resolution first, each further
    entry at half the previous size (``ds_levels + 1`` entries in total).
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.stage_filters
        self.stem = nn.Conv2d(cfg.in_channels, cfg.init_filters, 3, padding=1, bias=False)
        widths = [cfg.init_filters] + f
        self.encoder = nn.ModuleList(
            EncoderStage(widths[i], widths[i + 1], n, cfg.norm) for i, n in enumerate(cfg.stage_blocks))
        # decoder levels from coarse to fine; skip widths are widths[-2], ..., widths[0]
        self.decoder = nn.ModuleList(
            DecoderLevel(widths[i + 1], widths[i], cfg.norm) for i in reversed(range(len(f))))
        self.final_norm = _norm(cfg.norm, cfg.init_filters)
        self.head = nn.Conv2d(cfg.init_filters, cfg.out_classes, 1)
        # heads[i - 1] projects the decoder output at scale 1/2^i
        self.ds_heads = nn.ModuleList(
            nn.Conv2d(widths[i], cfg.out_classes, 1) for i in range(1, cfg.ds_levels + 1))

    def forward(self, x):
        d = self.cfg.divisor
        if x.shape[-2] % d or x.shape[-1] % d:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} must be divisible by {d}")
        skips = [self.stem(x)]
        for stage in self.encoder:
            skips.append(stage(skips[-1]))
        y = skips.pop()
        by_scale = {}
        for level in self.decoder:
            y = level(y, skips.pop())
            by_scale[len(skips)] = y
        out = [self.head(F.relu(self.final_norm(by_scale[0])))]
        out += [head(by_scale[i + 1]) for i, head in enumerate(self.ds_heads)]
        return out


def build_model(cfg: NetworkConfig, seed: int | None = 0) -> SegResNet2D:
    """Construct the network; parameter init is seeded (without touching the global RNG state)."""
    if seed is None:
        return SegResNet2D(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SegResNet2D(cfg)
    model.init_seed = seed
    return model


def encoder_stage_blocks(model: SegResNet2D) -> list[int]:
    return [len(stage.blocks) for stage in model.encoder]


def encoder_stage_filters(model: SegResNet2D) -> list[int]:
    return [stage.down.out_channels for stage in model.encoder]


def forward(model: SegResNet2D, input, training: bool = False) -> list[torch.Tensor]:
    """Run one (C, H, W) or batched (B, C, H, W) input; unbatched in, unbatched out."""
    x = torch.as_tensor(input, dtype=next(model.parameters()).dtype)
    unbatched = x.ndim == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.shape[1] != model.cfg.in_channels:
        raise ValueError(f"model expects {model.cfg.in_channels} channels, got {x.shape[1]}")
    model.train(training)
    if training:
        out = model(x)
    else:
        with torch.no_grad():
            out = model(x)
    return [o[0] for o in out] if unbatched else out


def save_checkpoint(path, model: SegResNet2D, metadata: dict | None = None,
                    strategy: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_FORMAT,
        "network": model.cfg.to_dict(),
        "strategy": strategy,
        "init_seed": getattr(model, "init_seed", None),
        "metadata": metadata or {},
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_checkpoint(path) -> tuple[SegResNet2D, dict]:
    """Returns the model (eval mode) and the checkpoint dict minus the weights."""
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    if ckpt.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {ckpt.get('format_version')!r} in {path}")
    model = SegResNet2D(NetworkConfig.from_dict(ckpt["network"]))
    model.load_state_dict(ckpt.pop("state_dict"))
    model.init_seed = ckpt.get("init_seed")
    model.eval()
    return model, ckpt
