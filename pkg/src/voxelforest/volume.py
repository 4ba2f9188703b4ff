"""Dense volume types.

Arrays are indexed ``[x, y, z]`` with shape ``(nx, ny, nz)``.  Flattening in
Fortran order gives the x-fastest layout used on disk, and walking voxels in
that order visits them in (z, y, x) lexicographic order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DimsMismatchError, LabelError, VoxelIndexError

BRATS_LABELS = (0, 1, 2, 4)
TUMOR_LABELS = (1, 2, 4)

Dims = Tuple[int, int, int]
Spacing = Tuple[float, float, float]


def _check_geometry(shape, spacing) -> Spacing:
    if len(shape) != 3 or any(int(n) <= 0 for n in shape):
        raise DimsMismatchError(f"volume must be 3D with positive dims, got shape {tuple(shape)}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three finite positive numbers, got {spacing}")
    return spacing


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


class _Grid:
    data: np.ndarray
    spacing: Spacing

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def same_grid(self, other) -> bool:
        return self.dims == other.dims and tuple(self.spacing) == tuple(other.spacing)


@dataclass(frozen=True, eq=False)
class Volume3D(_Grid):
    """Scalar field on a voxel grid (one modality, score channel or response)."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        sp = _check_geometry(data.shape, self.spacing)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", sp)


@dataclass(frozen=True, eq=False)
class LabelVolume(_Grid):
    """Segmentation over the BRATS label set {0, 1, 2, 4}."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        sp = _check_geometry(raw.shape, self.spacing)
        bad = ~np.isin(raw, BRATS_LABELS)
        if bad.any():
            found = sorted(set(np.unique(raw[bad]).tolist()))
            raise LabelError(f"labels must be in {BRATS_LABELS}, found {found}")
        object.__setattr__(self, "data", _frozen(raw.astype(np.uint8)))
        object.__setattr__(self, "spacing", sp)


@dataclass(frozen=True, eq=False)
class BinaryMask(_Grid):
    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=bool)
        sp = _check_geometry(data.shape, self.spacing)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", sp)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True, eq=False)
class ScoreMapSet:
    """Four per-class score channels in label order (0, 1, 2, 4)."""

    channels: Tuple[Volume3D, Volume3D, Volume3D, Volume3D]

    def __post_init__(self):
        channels = tuple(self.channels)
        if len(channels) != 4:
            raise DimsMismatchError(f"score map set needs exactly 4 channels, got {len(channels)}")
        first = channels[0]
        for i, ch in enumerate(channels[1:], start=1):
            if not first.same_grid(ch):
                raise DimsMismatchError(
                    f"score channel {i} grid {ch.dims}/{ch.spacing} differs from channel 0 "
                    f"{first.dims}/{first.spacing}"
                )
        object.__setattr__(self, "channels", channels)

    @property
    def dims(self) -> Dims:
        return self.channels[0].dims

    @property
    def spacing(self) -> Spacing:
        return self.channels[0].spacing

    def stack(self) -> np.ndarray:
        """Scores as a ``(nx, ny, nz, 4)`` array."""
        return np.stack([c.data for c in self.channels], axis=-1)


@dataclass(frozen=True, eq=False)
class CaseBundle:
    modalities: Tuple[Volume3D, Volume3D, Volume3D]
    scores: ScoreMapSet
    ground_truth: Optional[LabelVolume] = None
    case_id: str = "case"
    modality_names: Tuple[str, ...] = field(default=("flair", "t1c", "t2"))

    def __post_init__(self):
        mods = tuple(self.modalities)
        if len(mods) != 3:
            raise DimsMismatchError(f"a case needs exactly 3 modalities, got {len(mods)}")
        ref = mods[0]
        members = list(mods[1:]) + [self.scores.channels[0]]
        if self.ground_truth is not None:
            members.append(self.ground_truth)
        for m in members:
            if not ref.same_grid(m):
                raise DimsMismatchError(
                    f"case {self.case_id!r}: grid {m.dims}/{m.spacing} differs from {ref.dims}/{ref.spacing}"
                )
        object.__setattr__(self, "modalities", mods)

    @property
    def dims(self) -> Dims:
        return self.modalities[0].dims

    @property
    def spacing(self) -> Spacing:
        return self.modalities[0].spacing


def _check_center(dims: Sequence[int], center: Sequence[int]) -> Tuple[int, int, int]:
    c = tuple(int(v) for v in center)
    if len(c) != 3 or any(v < 0 or v >= n for v, n in zip(c, dims)):
        raise VoxelIndexError(f"center {tuple(center)} outside dims {tuple(dims)}")
    return c


def window_values(vol, center, half: int) -> np.ndarray:
    """Values of the axial square window around ``center``.

    The window spans ``(2*half+1)**2`` voxels of the slice ``z = center[2]``,
    listed row-major (y outer, x inner).  Positions outside the volume are
    clamped to the nearest edge voxel.
    """
    if half < 0:
        raise ValueError("half must be non-negative")
    data = vol.data
    x, y, z = _check_center(data.shape, center)
    offs = np.arange(-half, half + 1)
    xs = np.clip(x + offs, 0, data.shape[0] - 1)
    ys = np.clip(y + offs, 0, data.shape[1] - 1)
    return data[xs[None, :], ys[:, None], z].ravel()


def argmax_labels(scores: ScoreMapSet) -> LabelVolume:
    """Per-voxel BRATS label of the highest score; ties go to the lower channel."""
    idx = np.argmax(scores.stack(), axis=-1)
    lut = np.asarray(BRATS_LABELS, dtype=np.uint8)
    return LabelVolume(lut[idx], scores.spacing)


def label_to_index(labels: np.ndarray) -> np.ndarray:
    """Map BRATS labels {0,1,2,4} to class indices {0,1,2,3}."""
    labels = np.asarray(labels)
    lut = np.full(256, -1, dtype=np.int64)
    lut[list(BRATS_LABELS)] = np.arange(4)
    out = lut[labels.astype(np.int64) & 0xFF]
    if np.any(out < 0) or np.any((labels < 0) | (labels > 255)):
        raise LabelError(f"labels must be in {BRATS_LABELS}")
    return out
