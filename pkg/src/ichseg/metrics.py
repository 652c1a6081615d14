"""Dice, relative volume difference, normalized surface Dice and Hausdorff distance.

Surfaces use face (6-) connectivity: a foreground voxel is on the surface when at
least one face neighbour is background or lies outside the grid. Distances are
Euclidean in mm.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

CONNECTIVITY = 6


class EmptySurfaceError(ValueError):
    """A mask with no foreground has no surface."""


def _as_bool(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "data", mask)).astype(bool)


def _pair(pred, gt):
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def _spacing(spacing, ndim):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing {spacing} invalid for {ndim}D masks")
    return spacing


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    n_p, n_g = int(p.sum()), int(g.sum())
    if n_p + n_g == 0:
        return 1.0
    return 2 * int(np.logical_and(p, g).sum()) / (n_p + n_g)


def rvd(pred, gt) -> float:
    """Unsigned relative volume difference | |P| - |G| | / |G|."""
    p, g = _pair(pred, gt)
    n_p, n_g = int(p.sum()), int(g.sum())
    if n_g == 0:
        return 0.0 if n_p == 0 else math.inf
    return abs(n_p - n_g) / n_g


def surface(mask) -> np.ndarray:
    m = _as_bool(mask)
    structure = ndimage.generate_binary_structure(m.ndim, 1)
    return m & ~ndimage.binary_erosion(m, structure, border_value=0)


def surface_distances(a, b, spacing) -> tuple[np.ndarray, np.ndarray]:
    """Distances (mm) from each surface voxel of ``a`` to the nearest surface voxel
    of ``b``, and vice versa. Raises EmptySurfaceError if either mask is empty."""
    a, b = _pair(a, b)
    spacing = _spacing(spacing, a.ndim)
    if not a.any() or not b.any():
        raise EmptySurfaceError("surface distances need two nonempty masks")
    sa, sb = surface(a), surface(b)
    dt_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dt_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    return dt_b[sa], dt_a[sb]


def nsd(pred, gt, spacing, tau_mm: float = 1.0) -> float:
    if not tau_mm > 0:
        raise ValueError("tau_mm must be > 0")
    p, g = _pair(pred, gt)
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    d_pg, d_gp = surface_distances(p, g, spacing)
    return (int((d_pg <= tau_mm).sum()) + int((d_gp <= tau_mm).sum())) / (d_pg.size + d_gp.size)


def hausdorff(pred, gt, spacing, percentile: float = 100.0) -> float:
    """Symmetric Hausdorff distance in mm; ``percentile < 100`` gives the robust
    variant (percentile of each directed distance set, then the max)."""
    p, g = _pair(pred, gt)
    _spacing(spacing, p.ndim)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return math.inf
    d_pg, d_gp = surface_distances(p, g, spacing)
    if percentile >= 100:
        return float(max(d_pg.max(), d_gp.max()))
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


def _encode(x: float):
    return "inf" if math.isinf(x) else x


def _decode(x) -> float:
    return math.inf if x == "inf" else float(x)


@dataclass
class MetricReport:
    case_id: str
    dice: float
    rvd: float
    nsd: float
    hd: float
    nsd_tolerance_mm: float = 1.0

    def __post_init__(self):
        if min(self.dice, self.rvd, self.nsd, self.hd) < 0 or self.dice > 1 or self.nsd > 1:
            raise ValueError(f"metric values out of range: {self}")

    def to_dict(self) -> dict:
        return {k: _encode(v) if isinstance(v, float) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "MetricReport":
        return cls(d["case_id"], *(_decode(d[k]) for k in ("dice", "rvd", "nsd", "hd")),
                   float(d.get("nsd_tolerance_mm", 1.0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def evaluate_case(pred, gt, spacing=None, tau_mm: float = 1.0, case_id: str = "",
                  hd_percentile: float = 100.0) -> MetricReport:
    if spacing is None:
        spacing = getattr(gt, "spacing")
    case_id = case_id or getattr(gt, "case_id", "")
    return MetricReport(case_id, dice(pred, gt), rvd(pred, gt), nsd(pred, gt, spacing, tau_mm),
                        hausdorff(pred, gt, spacing, hd_percentile), float(tau_mm))


_FIELDS = ("dice", "rvd", "nsd", "hd")


def aggregate(reports: Sequence[MetricReport]) -> dict[str, float]:
    """Per-metric arithmetic mean (an infinite HD/RVD makes the mean infinite)."""
    if not reports:
        return {k: math.nan for k in _FIELDS}
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in _FIELDS}


def write_metrics_report(reports: Sequence[MetricReport], out_dir, tau_mm: float = 1.0,
                         hd_percentile: float = 100.0) -> tuple[Path, Path]:
    """Write ``metrics_report.json`` and ``metrics_report.csv`` (infinity as "inf")."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {"nsd_tolerance_mm": tau_mm, "connectivity": CONNECTIVITY, "hd_percentile": hd_percentile}
    mean = {k: _encode(v) for k, v in aggregate(reports).items()}
    json_path = out_dir / "metrics_report.json"
    json_path.write_text(json.dumps({"header": header, "cases": [r.to_dict() for r in reports],
                                     "mean": mean}, indent=2) + "\n")
    csv_path = out_dir / "metrics_report.csv"
    with csv_path.open("w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k}={v}\n")
        writer = csv.writer(fh)
        writer.writerow(("case_id",) + _FIELDS)
        for r in reports:
            writer.writerow([r.case_id] + [_encode(getattr(r, k)) for k in _FIELDS])
        writer.writerow(["mean"] + [mean[k] for k in _FIELDS])
    return json_path, csv_path
