"""HU windowing, slice stacking, cropping and augmentation for 2D inputs.

All functions are pure given an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .volume_io import Volume


@dataclass(frozen=True)
class WindowSpec:
    center: float
    width: float
    name: str = ""

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be > 0, got {self.width}")


BRAIN = WindowSpec(40.0, 80.0, "brain")
SUBDURAL = WindowSpec(80.0, 200.0, "subdural")
BONE = WindowSpec(600.0, 2800.0, "bone")
WINDOWS = {w.name: w for w in (BRAIN, SUBDURAL, BONE)}


def get_window(name_or_spec) -> WindowSpec:
    if isinstance(name_or_spec, WindowSpec):
        return name_or_spec
    if isinstance(name_or_spec, dict):
        return WindowSpec(float(name_or_spec["center"]), float(name_or_spec["width"]),
                          name_or_spec.get("name", ""))
    try:
        return WINDOWS[name_or_spec]
    except KeyError:
        raise ValueError(f"unknown window {name_or_spec!r}; known: {sorted(WINDOWS)}") from None


def apply_window(values, window: WindowSpec) -> np.ndarray:
    """Linear map of [center - width/2, center + width/2] onto [0, 1], clamped."""
    lo = window.center - window.width / 2.0
    out = (np.asarray(values, dtype=np.float64) - lo) / window.width
    return np.clip(out, 0.0, 1.0)


class StrategyKind(str, Enum):
    ADJACENT_SLICES = "adjacent_slices"
    MULTI_WINDOW = "multi_window"
    COMBINED = "combined"


_EXPECTED = {
    StrategyKind.ADJACENT_SLICES: (1, 3),
    StrategyKind.MULTI_WINDOW: (3, 1),
    StrategyKind.COMBINED: (3, 3),
}


@dataclass(frozen=True)
class InputStrategy:
    kind: StrategyKind
    windows: tuple[WindowSpec, ...]
    n_adjacent: int

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        object.__setattr__(self, "windows", tuple(get_window(w) for w in self.windows))
        n_win, n_adj = _EXPECTED[self.kind]
        if len(self.windows) != n_win or self.n_adjacent != n_adj:
            raise ValueError(
                f"{self.kind.value} needs {n_win} window(s) and n_adjacent={n_adj}, "
                f"got {len(self.windows)} and {self.n_adjacent}")

    @property
    def n_channels(self) -> int:
        return len(self.windows) * self.n_adjacent

    @classmethod
    def adjacent_slices(cls, window=BRAIN) -> "InputStrategy":
        return cls(StrategyKind.ADJACENT_SLICES, (window,), 3)

    @classmethod
    def multi_window(cls, windows=(BRAIN, SUBDURAL, BONE)) -> "InputStrategy":
        return cls(StrategyKind.MULTI_WINDOW, tuple(windows), 1)

    @classmethod
    def combined(cls, windows=(BRAIN, SUBDURAL, BONE)) -> "InputStrategy":
        return cls(StrategyKind.COMBINED, tuple(windows), 3)

    @classmethod
    def from_name(cls, name: str) -> "InputStrategy":
        return {"adjacent_slices": cls.adjacent_slices, "multi_window": cls.multi_window,
                "combined": cls.combined}[StrategyKind(name).value]()

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "n_adjacent": self.n_adjacent,
                "windows": [{"center": w.center, "width": w.width, "name": w.name}
                            for w in self.windows]}

    @classmethod
    def from_dict(cls, d) -> "InputStrategy":
        if isinstance(d, str):
            return cls.from_name(d)
        kind = StrategyKind(d["kind"])
        if "windows" not in d:
            return cls.from_name(kind.value)
        n_adj = d.get("n_adjacent", _EXPECTED[kind][1])
        return cls(kind, tuple(get_window(w) for w in d["windows"]), int(n_adj))


def _slice_indices(index: int, n: int, n_slices: int) -> np.ndarray:
    if n < 1 or n % 2 == 0:
        raise ValueError(f"n must be a positive odd number, got {n}")
    if not 0 <= index < n_slices:
        raise ValueError(f"slice index {index} out of range [0, {n_slices})")
    half = n // 2
    return np.clip(np.arange(index - half, index + half + 1), 0, n_slices - 1)


def stack_adjacent_slices(volume_norm: np.ndarray, index: int, n: int) -> np.ndarray:
    """Slices ``index - n//2 .. index + n//2`` as channels, edges replicated. Returns (n, H, W)."""
    volume_norm = np.asarray(volume_norm)
    idx = _slice_indices(index, n, volume_norm.shape[2])
    return np.moveaxis(volume_norm[:, :, idx], 2, 0)


def build_input(volume: Volume | np.ndarray, index: int, strategy: InputStrategy) -> np.ndarray:
    """(C, H, W) float32 network input; window-major channel order."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    idx = _slice_indices(index, strategy.n_adjacent, data.shape[2])
    raw = np.moveaxis(data[:, :, idx], 2, 0)
    return np.concatenate([apply_window(raw, w) for w in strategy.windows]).astype(np.float32)


@dataclass
class SliceSample:
    image: np.ndarray
    label: np.ndarray
    case_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        if self.image.ndim != 3 or self.label.ndim != 2 or self.image.shape[1:] != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} not aligned")


@dataclass(frozen=True)
class CropConfig:
    size: tuple[int, int] = (384, 384)
    p_foreground: float = 0.66
    pad_value: float = 0.0

    def __post_init__(self):
        if len(self.size) != 2 or min(self.size) <= 0:
            raise ValueError(f"crop size must be two positive ints, got {self.size}")
        if not 0.0 <= self.p_foreground <= 1.0:
            raise ValueError("p_foreground must be in [0, 1]")


def pad_to(image: np.ndarray, label: np.ndarray | None, size, pad_value: float = 0.0):
    """Symmetric padding up to at least ``size`` (extra pixel goes after).
    Returns padded image, padded label and the (top, left) offsets."""
    h, w = image.shape[-2:]
    ph, pw = max(size[0] - h, 0), max(size[1] - w, 0)
    top, left = ph // 2, pw // 2
    pads = ((top, ph - top), (left, pw - left))
    if ph or pw:
        image = np.pad(image, ((0, 0),) * (image.ndim - 2) + pads, constant_values=pad_value)
        if label is not None:
            label = np.pad(label, pads, constant_values=0)
    return image, label, (top, left)


def foreground_biased_crop(image: np.ndarray, label: np.ndarray, cfg: CropConfig,
                           rng: np.random.Generator, case_id: str = "",
                           slice_index: int = 0) -> SliceSample:
    image, label, _ = pad_to(image, label, cfg.size, cfg.pad_value)
    h, w = label.shape
    ch, cw = cfg.size
    use_fg = rng.random() < cfg.p_foreground
    fg = np.argwhere(label > 0)
    if use_fg and len(fg):
        r, c = fg[rng.integers(len(fg))]
        top = int(np.clip(r - ch // 2, 0, h - ch))
        left = int(np.clip(c - cw // 2, 0, w - cw))
    else:
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
    return SliceSample(image[:, top:top + ch, left:left + cw].copy(),
                       label[top:top + ch, left:left + cw].copy(), case_id, slice_index)


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    rotation_max_deg: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    noise_std: float = 0.05
    intensity_scale_range: tuple[float, float] = (0.9, 1.1)
    intensity_shift_range: tuple[float, float] = (-0.1, 0.1)
    p_patch_shuffle: float = 0.2
    shuffle_patch_px: int = 16
    max_shuffled_patches: int = 8

    def __post_init__(self):
        for p in (self.p_flip, self.p_patch_shuffle):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of [0, 1]: {p}")
        for lo, hi in (self.scale_range, self.intensity_scale_range, self.intensity_shift_range):
            if lo > hi:
                raise ValueError(f"range ({lo}, {hi}) is not ordered")
        if self.rotation_max_deg < 0 or self.noise_std < 0 or self.shuffle_patch_px < 1:
            raise ValueError("negative magnitude in augmentation config")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(p_flip=0.0, rotation_max_deg=0.0, scale_range=(1.0, 1.0), noise_std=0.0,
                   intensity_scale_range=(1.0, 1.0), intensity_shift_range=(0.0, 0.0),
                   p_patch_shuffle=0.0)


def flip(sample: SliceSample, axis: int) -> SliceSample:
    """Flip along in-plane ``axis`` (0 = rows, 1 = columns)."""
    return replace(sample, image=np.flip(sample.image, axis=axis + 1).copy(),
                   label=np.flip(sample.label, axis=axis).copy())


def _rotate_scale(sample: SliceSample, angle_deg: float, scale: float) -> SliceSample:
    h, w = sample.label.shape
    theta = np.deg2rad(angle_deg)
    # output -> input mapping about the slice center
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]) / scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - rot @ center
    image = np.stack([ndimage.affine_transform(ch, rot, offset, order=1, mode="nearest")
                      for ch in sample.image])
    label = ndimage.affine_transform(sample.label, rot, offset, order=0, mode="constant", cval=0)
    return replace(sample, image=image, label=label)


def _patch_shuffle(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    # local permutation: patches come from one small neighbourhood of the grid
    p = cfg.shuffle_patch_px
    rows, cols = image.shape[1] // p, image.shape[2] // p
    if rows * cols < 2:
        return image
    bh, bw = min(rows, 2), min(cols, 4)
    r0 = int(rng.integers(0, rows - bh + 1))
    c0 = int(rng.integers(0, cols - bw + 1))
    cells = [(r0 + i, c0 + j) for i in range(bh) for j in range(bw)]
    n = int(rng.integers(2, min(cfg.max_shuffled_patches, len(cells)) + 1))
    # random subset in random order, each patch takes its successor's content
    chosen = [cells[i] for i in rng.choice(len(cells), size=n, replace=False)]
    out = image.copy()
    for (r, c), (sr, sc) in zip(chosen, chosen[1:] + chosen[:1]):
        out[:, r * p:(r + 1) * p, c * p:(c + 1) * p] = image[:, sr * p:(sr + 1) * p, sc * p:(sc + 1) * p]
    return out


def augment(sample: SliceSample, cfg: AugmentConfig, rng: np.random.Generator) -> SliceSample:
    """Random flips, rotation/scaling (shared by image and label), then image-only
    noise, intensity scale/shift and patch shuffle. Output is clamped to [0, 1]."""
    out = replace(sample, image=sample.image.astype(np.float32, copy=True),
                  label=sample.label.copy())
    for axis in (0, 1):
        if rng.random() < cfg.p_flip:
            out = flip(out, axis)

    angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)
    scale = rng.uniform(*cfg.scale_range)
    if angle != 0.0 or scale != 1.0:
        out = _rotate_scale(out, angle, scale)

    image = out.image
    if cfg.noise_std > 0:
        image = image + rng.normal(0.0, cfg.noise_std, size=image.shape)
    image = image * rng.uniform(*cfg.intensity_scale_range) + rng.uniform(*cfg.intensity_shift_range)
    if rng.random() < cfg.p_patch_shuffle:
        image = _patch_shuffle(image, cfg, rng)
    return replace(out, image=np.clip(image, 0.0, 1.0).astype(np.float32),
                   label=out.label.astype(sample.label.dtype))


def sample_slices(volume: Volume, label, n: int, strategy: InputStrategy,
                  crop: CropConfig, aug: AugmentConfig | None,
                  rng: np.random.Generator) -> list[SliceSample]:
    """Draw ``n`` training samples from one case; slices picked uniformly.

    ``label`` may be a :class:`Mask` or a plain (H, W, S) array.
    """
    label = np.asarray(getattr(label, "data", label))
    samples = []
    for index in rng.integers(0, volume.shape[2], size=n):
        image = build_input(volume, int(index), strategy)
        s = foreground_biased_crop(image, label[:, :, index], crop, rng, volume.case_id, int(index))
        if aug is not None:
            s = augment(s, aug, rng)
        samples.append(s)
    return samples
