"""ROI construction and the 55-column per-voxel feature matrix."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, DimsMismatchError
from .morphology import dilate3d
from .texton import N_TEXTONS, TextonMap, texton_histogram_volume
from .volume import TUMOR_LABELS, BinaryMask, CaseBundle, ScoreMapSet, argmax_labels

SCORE_COLUMNS = ("score_0", "score_1", "score_2", "score_4")
INTENSITY_COLUMNS = ("intensity_m0", "intensity_m1", "intensity_m2")
TEXTON_COLUMNS = tuple(f"texton_m{m}_bin{b}" for m in range(3) for b in range(N_TEXTONS))
FEATURE_LAYOUT = SCORE_COLUMNS + INTENSITY_COLUMNS + TEXTON_COLUMNS
N_FEATURES = len(FEATURE_LAYOUT)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Rows are ROI voxels in (z, y, x) order; ``coords`` holds their (x, y, z)."""

    values: np.ndarray
    coords: np.ndarray
    labels: Optional[np.ndarray] = None
    layout: Tuple[str, ...] = FEATURE_LAYOUT

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.layout):
            raise DataError(f"feature matrix must have {len(self.layout)} columns, got shape {self.values.shape}")
        if self.coords.shape != (self.values.shape[0], 3):
            raise DataError("coords must align with rows")
        if self.labels is not None and self.labels.shape != (self.values.shape[0],):
            raise DataError("labels must align with rows")

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    def take(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows)
        return FeatureMatrix(self.values[rows], self.coords[rows],
                             None if self.labels is None else self.labels[rows], self.layout)


def build_roi(scores: ScoreMapSet, margin: int = 10) -> BinaryMask:
    """Coarse tumor voxels (argmax label 1, 2 or 4) dilated by ``margin`` voxels."""
    coarse = argmax_labels(scores)
    tumor = BinaryMask(np.isin(coarse.data, TUMOR_LABELS), scores.spacing)
    return dilate3d(tumor, margin)


def roi_coords(roi: BinaryMask) -> np.ndarray:
    """(x, y, z) of every ROI voxel, ordered lexicographically by (z, y, x)."""
    zyx = np.argwhere(np.asarray(roi.data).T)
    return zyx[:, ::-1].astype(np.int64)


def assemble_features(bundle: CaseBundle, texton_maps: Sequence[TextonMap], roi: BinaryMask,
                      window: int = 5) -> FeatureMatrix:
    if texton_maps is None or len(texton_maps) != 3 or any(t is None for t in texton_maps):
        raise DataError("exactly 3 texton maps are required")
    for t in list(texton_maps) + [roi]:
        if t.dims != bundle.dims:
            raise DimsMismatchError(f"input dims {t.dims} != case dims {bundle.dims}")

    coords = roi_coords(roi)
    x, y, z = coords.T
    values = np.empty((coords.shape[0], N_FEATURES), dtype=np.float64)
    for i, ch in enumerate(bundle.scores.channels):
        values[:, i] = ch.data[x, y, z]
    for i, mod in enumerate(bundle.modalities):
        values[:, 4 + i] = mod.data[x, y, z]
    if coords.shape[0]:
        for m, tmap in enumerate(texton_maps):
            hist = texton_histogram_volume(tmap, window, N_TEXTONS)
            start = 7 + m * N_TEXTONS
            values[:, start:start + N_TEXTONS] = hist[x, y, z]

    labels = None
    if bundle.ground_truth is not None:
        labels = bundle.ground_truth.data[x, y, z].astype(np.uint8)
    return FeatureMatrix(values, coords, labels)


def concat_features(mats: Sequence[FeatureMatrix]) -> FeatureMatrix:
    mats = list(mats)
    if not mats:
        return FeatureMatrix(np.empty((0, N_FEATURES)), np.empty((0, 3), dtype=np.int64))
    labels = None
    if all(m.labels is not None for m in mats):
        labels = np.concatenate([m.labels for m in mats])
    return FeatureMatrix(np.concatenate([m.values for m in mats]), np.concatenate([m.coords for m in mats]), labels)


def cap_per_class(fm: FeatureMatrix, cap: int, seed: int = 0) -> FeatureMatrix:
    """Keep at most ``cap`` random rows of every class, preserving row order."""
    if fm.labels is None:
        raise DataError("class capping needs labels")
    rng = np.random.default_rng(seed)
    keep = []
    for lab in np.unique(fm.labels):
        rows = np.flatnonzero(fm.labels == lab)
        if rows.size > cap:
            rows = np.sort(rng.choice(rows, size=cap, replace=False))
        keep.append(rows)
    rows = np.sort(np.concatenate(keep)) if keep else np.empty(0, dtype=np.int64)
    return fm.take(rows)


def write_features_csv(fm: FeatureMatrix, path) -> None:
    """Debug export: z, y, x, [label], then the 55 feature columns."""
    from .io import atomic_writer

    with atomic_writer(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["z", "y", "x"] + (["label"] if fm.labels is not None else []) + list(fm.layout)
        w.writerow(head)
        for i in range(fm.n_rows):
            x, y, z = (int(v) for v in fm.coords[i])
            row = [z, y, x] + ([int(fm.labels[i])] if fm.labels is not None else [])
            w.writerow(row + [repr(float(v)) for v in fm.values[i]])
