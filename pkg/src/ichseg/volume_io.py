"""NIfTI volume/mask I/O, dataset manifests, k-fold splits and synthetic cases.

Arrays are stored in (row, column, slice) order; the slice axis is the
low-resolution one and is never resampled.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import nibabel as nib
import numpy as np
from scipy import ndimage


class VolumeFormatError(ValueError):
    """File is not a readable 3D NIfTI image."""


class AlignmentError(ValueError):
    """Mask and reference volume do not share a voxel grid."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    return spacing


def _default_affine(spacing) -> np.ndarray:
    return np.diag([*spacing, 1.0])


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float]
    case_id: str = ""
    affine: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class Mask:
    data: np.ndarray
    spacing: tuple[float, float, float]
    case_id: str = ""
    affine: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {data.shape}")
        if not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        self.data = data.astype(np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def from_volume(cls, volume: Volume) -> "Mask":
        """Reinterpret a loaded label volume as a binary mask (nonzero -> 1)."""
        return cls((volume.data != 0).astype(np.uint8), volume.spacing,
                   volume.case_id, volume.affine)


def _case_id_from_path(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def load_volume(path, case_id: str | None = None) -> Volume:
    """Read a 3D NIfTI file. Values are returned exactly as stored (HU for images)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume: {path}")
    if not (path.name.endswith(".nii") or path.name.endswith(".nii.gz")):
        raise VolumeFormatError(f"not a NIfTI file: {path}")
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise VolumeFormatError(f"cannot read {path}: {exc}") from exc
    if data.ndim != 3:
        raise VolumeFormatError(f"{path} has {data.ndim} dimensions, expected 3")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return Volume(np.asarray(data), spacing, case_id or _case_id_from_path(path),
                  np.asarray(img.affine))


def load_mask(path, case_id: str | None = None) -> Mask:
    return Mask.from_volume(load_volume(path, case_id))


def _write_nifti(data: np.ndarray, spacing, affine, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    affine = _default_affine(spacing) if affine is None else np.asarray(affine, dtype=np.float64)
    img = nib.Nifti1Image(data, affine)
    img.header.set_zooms(tuple(spacing))
    img.header.set_data_dtype(data.dtype)
    nib.save(img, str(path))


def save_volume(volume: Volume, path) -> None:
    _write_nifti(np.asarray(volume.data), volume.spacing, volume.affine, path)


def save_mask(mask: Mask, reference: Volume, path) -> None:
    """Write ``mask`` using the reference volume's geometry (spacing + affine)."""
    if mask.shape != reference.shape:
        raise AlignmentError(f"mask shape {mask.shape} != reference shape {reference.shape}")
    _write_nifti(mask.data.astype(np.uint8), reference.spacing, reference.affine, path)


# --- manifest -----------------------------------------------------------------

def load_manifest(path) -> dict[str, dict[str, str]]:
    """Load ``{case_id: {"image": path, "label": path}}``; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    raw = json.loads(path.read_text())
    base = path.parent
    out = {}
    for case_id, entry in raw.items():
        out[case_id] = {k: str((base / v) if not Path(v).is_absolute() else Path(v))
                        for k, v in entry.items()}
    return out


def save_manifest(manifest: Mapping[str, Mapping[str, str]], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    out = {}
    for case_id in sorted(manifest):
        entry = {}
        for key, value in manifest[case_id].items():
            p = Path(value).resolve()
            try:
                entry[key] = str(p.relative_to(base))
            except ValueError:
                entry[key] = str(p)
        out[case_id] = entry
    path.write_text(json.dumps(out, indent=2) + "\n")


# --- folds --------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    seed: int
    mapping: dict[str, int]

    def cases_in(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.mapping.items() if f == fold)

    def cases_not_in(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.mapping.items() if f != fold)

    def fold_sizes(self) -> list[int]:
        return [sum(1 for f in self.mapping.values() if f == i) for i in range(self.k)]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed,
                "mapping": {c: self.mapping[c] for c in sorted(self.mapping)}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldAssignment":
        return cls(int(d["k"]), int(d["seed"]), {str(c): int(f) for c, f in d["mapping"].items()})

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FoldAssignment":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_folds(case_ids: Sequence[str], k: int, seed: int) -> FoldAssignment:
    """Seeded shuffle of the sorted ids, dealt round-robin into ``k`` folds."""
    ids = sorted(case_ids)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    if k > len(ids):
        raise ValueError(f"cannot split {len(ids)} cases into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    mapping = {ids[j]: i % k for i, j in enumerate(order)}
    return FoldAssignment(k, seed, mapping)


# --- synthetic cases ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    shape: tuple[int, int, int] = (64, 64, 12)
    n_lesions: int = 2
    lesion_hu_range: tuple[float, float] = (50.0, 90.0)
    background_hu_range: tuple[float, float] = (0.0, 40.0)
    lesion_radius_range_mm: tuple[float, float] = (2.0, 6.0)
    spacing: tuple[float, float, float] = (0.46, 0.46, 5.0)

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"bad shape {self.shape}")
        if self.n_lesions < 0:
            raise ValueError("n_lesions must be >= 0")
        blo, bhi = self.background_hu_range
        llo, lhi = self.lesion_hu_range
        rlo, rhi = self.lesion_radius_range_mm
        if blo > bhi or llo > lhi or not 0 < rlo <= rhi:
            raise ValueError("ranges must be ordered (and radii positive)")
        if llo <= bhi:
            raise ValueError("lesion HU range must lie above the background HU range")
        _check_spacing(self.spacing)


def generate_synthetic_case(spec: SyntheticSpec, seed: int,
                            case_id: str | None = None) -> tuple[Volume, Mask]:
    """Smooth textured background plus ``n_lesions`` hyperdense ellipsoids."""
    rng = np.random.default_rng(seed)
    shape = tuple(spec.shape)
    spacing = np.asarray(spec.spacing)
    blo, bhi = spec.background_hu_range
    llo, lhi = spec.lesion_hu_range

    # uniform base + low-frequency texture, kept inside the background range
    base = rng.uniform(blo, bhi, size=shape)
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=(4.0, 4.0, 1.0))
    texture /= max(np.abs(texture).max(), 1e-12)
    image = np.clip(base + 0.25 * (bhi - blo) * texture, blo, bhi)

    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    mask = np.zeros(shape, dtype=bool)
    for _ in range(spec.n_lesions):
        center = np.array([rng.integers(0, n) for n in shape])
        radii_mm = rng.uniform(*spec.lesion_radius_range_mm, size=3)
        radii_vox = np.maximum(radii_mm / spacing, 0.5)
        r2 = (((grid - center) / radii_vox) ** 2).sum(axis=-1)
        blob = r2 <= 1.0
        hu = rng.uniform(llo, lhi)
        noise = rng.normal(0.0, 0.05 * (lhi - llo), size=int(blob.sum()))
        image[blob] = np.clip(hu + noise, llo, lhi)
        mask |= blob

    cid = case_id if case_id is not None else f"synth_{seed:05d}"
    vol = Volume(image.astype(np.float32), tuple(spec.spacing), cid)
    return vol, Mask(mask.astype(np.uint8), tuple(spec.spacing), cid)


def write_synthetic_dataset(out_dir, n_cases: int, spec: SyntheticSpec | None = None,
                            seed: int = 0) -> Path:
    """Write ``n_cases`` image/label pairs plus ``manifest.json``; returns the manifest path."""
    spec = spec or SyntheticSpec()
    out_dir = Path(out_dir)
    manifest = {}
    for i in range(n_cases):
        case_id = f"case_{i:03d}"
        vol, mask = generate_synthetic_case(spec, seed * 100_003 + i, case_id)
        img_path = out_dir / "images" / f"{case_id}.nii.gz"
        lbl_path = out_dir / "labels" / f"{case_id}.nii.gz"
        save_volume(vol, img_path)
        save_mask(mask, vol, lbl_path)
        manifest[case_id] = {"image": str(img_path), "label": str(lbl_path)}
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
