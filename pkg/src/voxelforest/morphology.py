"""3D binary dilation, connected components and the small-component filter."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import TUMOR_LABELS, BinaryMask, LabelVolume


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    """Component ids per voxel (0 = background, 1..C) and ``sizes[i]`` = size of id ``i + 1``."""

    labels: np.ndarray
    sizes: np.ndarray

    @property
    def count(self) -> int:
        return int(self.sizes.size)


def dilate3d(mask: BinaryMask, radius: int) -> BinaryMask:
    """Chebyshev-ball dilation.

    A voxel is set when some foreground voxel lies within ``radius`` along
    every axis, which equals ``radius`` rounds of 26-connected dilation.  The
    cube is separable, so it runs as three 1D running-max passes.
    """
    radius = int(radius)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    out = np.array(mask.data, dtype=bool)
    if radius == 0 or not out.any():
        return BinaryMask(out, mask.spacing)
    size = 2 * radius + 1
    work = out.astype(np.uint8)
    for axis in range(3):
        work = ndimage.maximum_filter1d(work, size, axis=axis, mode="constant", cval=0)
    return BinaryMask(work > 0, mask.spacing)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: BinaryMask, connectivity: int = 26) -> ComponentLabeling:
    """Label connected foreground regions.

    Ids follow first encounter in (z, y, x) scan order.
    """
    struct = _structure(connectivity)
    # Transposed view is C-ordered as (z, y, x), so raster order equals the required scan order.
    raw, n = ndimage.label(np.asarray(mask.data).T, structure=struct)
    raw = raw.T
    if n == 0:
        return ComponentLabeling(np.zeros(mask.dims, dtype=np.int32), np.zeros(0, dtype=np.int64))
    # Renumber by first appearance to pin down the id order explicitly.
    flat = raw.ravel(order="F")
    fg = flat[flat > 0]
    _, first = np.unique(fg, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    labels = remap[raw]
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:].astype(np.int64)
    return ComponentLabeling(labels, sizes)


def filter_components(seg: LabelVolume, min_fraction: float = 0.10) -> LabelVolume:
    """Erase tumor components smaller than ``min_fraction`` of the largest one.

    Components are taken over the binarized tumor mask (labels 1, 2, 4) with
    26-connectivity; surviving voxels keep their class.
    """
    if not 0.0 <= min_fraction <= 1.0:
        raise ValueError("min_fraction must lie in [0, 1]")
    tumor = np.isin(seg.data, TUMOR_LABELS)
    cc = connected_components(BinaryMask(tumor, seg.spacing), 26)
    if cc.count <= 1:
        return seg
    keep = np.concatenate([[False], cc.sizes >= min_fraction * cc.sizes.max()])
    out = np.where(keep[cc.labels], seg.data, 0).astype(np.uint8)
    return LabelVolume(out, seg.spacing)
