"""BRATS evaluation: region masks, overlap scores and 95% Hausdorff distance."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DimsMismatchError
from .volume import BinaryMask, LabelVolume

REGIONS = ("ET", "WT", "TC")
REGION_LABELS = {"ET": (4,), "WT": (1, 2, 4), "TC": (1, 4)}
CSV_COLUMNS = ("case_id", "region", "dice", "sensitivity", "specificity", "hd95_mm")


def _pair(a, b, check_spacing: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    if a.dims != b.dims:
        raise DimsMismatchError(f"mask dims differ: {a.dims} vs {b.dims}")
    if check_spacing and tuple(a.spacing) != tuple(b.spacing):
        raise DimsMismatchError(f"mask spacing differs: {a.spacing} vs {b.spacing}")
    return np.asarray(a.data, dtype=bool), np.asarray(b.data, dtype=bool)


def region_masks(seg: LabelVolume) -> Tuple[BinaryMask, BinaryMask, BinaryMask]:
    """(ET, WT, TC) masks under the BRATS 2017 label convention."""
    return tuple(BinaryMask(np.isin(seg.data, REGION_LABELS[r]), seg.spacing) for r in REGIONS)


def dice(a: BinaryMask, b: BinaryMask) -> float:
    x, y = _pair(a, b)
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(x & y)) / total


def sensitivity(pred: BinaryMask, truth: BinaryMask) -> float:
    p, t = _pair(pred, truth)
    denom = int(t.sum())
    return 1.0 if denom == 0 else int(np.count_nonzero(p & t)) / denom


def specificity(pred: BinaryMask, truth: BinaryMask) -> float:
    p, t = _pair(pred, truth)
    denom = int((~t).sum())
    return 1.0 if denom == 0 else int(np.count_nonzero(~p & ~t)) / denom


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels touching background (6-neighbourhood) or the volume border."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1),
                                      border_value=0)
    return mask & ~interior


def volume_diagonal_mm(dims, spacing) -> float:
    return float(math.sqrt(sum((n * s) ** 2 for n, s in zip(dims, spacing))))


def nearest_rank_95(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size
    rank = (95 * n + 99) // 100  # ceil(0.95 n) in exact integer arithmetic, 1-based
    return float(v[max(rank, 1) - 1])


def _directed(src: np.ndarray, dst: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    tree = cKDTree(dst * spacing)
    _, idx = tree.query(src * spacing, k=1)
    d = (src - dst[idx]) * spacing
    return np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2)


def hausdorff95(a: BinaryMask, b: BinaryMask) -> float:
    """95th percentile of the pooled symmetric boundary distances, in mm.

    Both empty gives 0.0; exactly one empty gives the volume diagonal.
    """
    x, y = _pair(a, b, check_spacing=True)
    ex, ey = not x.any(), not y.any()
    if ex and ey:
        return 0.0
    if ex or ey:
        return volume_diagonal_mm(a.dims, a.spacing)
    sx = np.argwhere(surface_voxels(x)).astype(np.float64)
    sy = np.argwhere(surface_voxels(y)).astype(np.float64)
    sp = np.asarray(a.spacing, dtype=np.float64)
    pooled = np.concatenate([_directed(sx, sy, sp), _directed(sy, sx, sp)])
    return nearest_rank_95(pooled)


@dataclass(frozen=True)
class RegionMetrics:
    dice: float
    sensitivity: float
    specificity: float
    hd95: float


@dataclass(frozen=True)
class RegionReport:
    case_id: str
    regions: Dict[str, RegionMetrics]

    def rows(self) -> List[dict]:
        return [
            {"case_id": self.case_id, "region": r, "dice": m.dice, "sensitivity": m.sensitivity,
             "specificity": m.specificity, "hd95_mm": m.hd95}
            for r, m in ((r, self.regions[r]) for r in REGIONS)
        ]


def evaluate_case(pred: LabelVolume, truth: LabelVolume, case_id: str = "case") -> RegionReport:
    if pred.dims != truth.dims or tuple(pred.spacing) != tuple(truth.spacing):
        raise DimsMismatchError(
            f"prediction grid {pred.dims}/{pred.spacing} != truth grid {truth.dims}/{truth.spacing}"
        )
    out = {}
    for name, p, t in zip(REGIONS, region_masks(pred), region_masks(truth)):
        out[name] = RegionMetrics(dice(p, t), sensitivity(p, t), specificity(p, t), hausdorff95(p, t))
    return RegionReport(case_id, out)


def summary_rows(reports: Sequence[RegionReport]) -> List[dict]:
    """Per-region MEAN and STD (population) rows, laid out like the case rows."""
    rows = []
    for stat in ("MEAN", "STD"):
        for r in REGIONS:
            row = {"case_id": stat, "region": r}
            for key in ("dice", "sensitivity", "specificity", "hd95"):
                vals = np.array([getattr(rep.regions[r], key) for rep in reports], dtype=np.float64)
                row["hd95_mm" if key == "hd95" else key] = float(vals.mean() if stat == "MEAN" else vals.std())
            rows.append(row)
    return rows


def write_report_csv(reports: Iterable[RegionReport], path) -> None:
    from .io import atomic_writer

    reports = list(reports)
    with atomic_writer(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        if reports:
            for row in summary_rows(reports):
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
