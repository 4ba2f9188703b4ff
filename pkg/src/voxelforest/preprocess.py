"""Intensity normalization: masked z-scoring and CDF histogram matching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimsMismatchError
from .volume import BinaryMask, Volume3D


@dataclass(frozen=True, eq=False)
class ReferenceHistogram:
    """Reference intensity distribution: ``bins + 1`` edges and the cumulative mass per bin."""

    bin_edges: np.ndarray
    cdf: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        cdf = np.asarray(self.cdf, dtype=np.float64)
        if edges.ndim != 1 or cdf.ndim != 1 or edges.size != cdf.size + 1 or cdf.size < 1:
            raise ValueError("reference histogram needs len(bin_edges) == len(cdf) + 1")
        if not np.all(np.isfinite(edges)) or np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be finite and strictly increasing")
        if np.any(cdf < 0) or np.any(np.diff(cdf) < 0) or abs(cdf[-1] - 1.0) > 1e-12:
            raise ValueError("cdf must be non-decreasing in [0, 1] and end at 1")
        edges.setflags(write=False)
        cdf.setflags(write=False)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "cdf", cdf)

    @property
    def bins(self) -> int:
        return int(self.cdf.size)

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    def to_dict(self) -> dict:
        return {"bin_edges": self.bin_edges.tolist(), "cdf": self.cdf.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceHistogram":
        return cls(np.asarray(d["bin_edges"], dtype=np.float64), np.asarray(d["cdf"], dtype=np.float64))


def _masked(vol: Volume3D, mask: BinaryMask) -> np.ndarray:
    if vol.dims != mask.dims:
        raise DimsMismatchError(f"mask dims {mask.dims} != volume dims {vol.dims}")
    vals = vol.data[mask.data]
    if vals.size == 0:
        raise DegenerateInputError("mask is empty")
    return vals


def brain_mask(vol: Volume3D) -> BinaryMask:
    """Foreground of a skull-stripped scan: voxels strictly above zero."""
    return BinaryMask(vol.data > 0, vol.spacing)


def zscore_normalize(vol: Volume3D, mask: BinaryMask) -> Volume3D:
    """Subtract the masked mean and divide by the masked population std.

    The same affine map is applied to every voxel, inside the mask or not.
    """
    vals = _masked(vol, mask)
    mean = vals.mean()
    std = np.sqrt(np.mean((vals - mean) ** 2))
    if not std > 0:
        raise DegenerateInputError("masked intensities have zero standard deviation")
    return Volume3D((vol.data - mean) / std, vol.spacing)


def _histogram_cdf(vals: np.ndarray, bins: int):
    if bins < 1:
        raise ValueError("bins must be >= 1")
    lo, hi = float(vals.min()), float(vals.max())
    if not hi > lo:
        raise DegenerateInputError(f"masked intensity range is degenerate (min == max == {lo})")
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(vals, bins=edges)
    cdf = np.cumsum(counts, dtype=np.float64) / vals.size
    cdf[-1] = 1.0
    return edges, cdf


def build_reference_histogram(vol: Volume3D, mask: BinaryMask, bins: int = 256) -> ReferenceHistogram:
    edges, cdf = _histogram_cdf(_masked(vol, mask), bins)
    return ReferenceHistogram(edges, cdf)


def _inverse_cdf(u: np.ndarray, edges: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    # Generalized inverse: first edge where the cdf reaches u, linear inside the bin.
    cdf_ext = np.concatenate([[0.0], cdf])
    j = np.searchsorted(cdf_ext, u, side="left")
    j = np.clip(j, 1, cdf_ext.size - 1)
    lo_c, hi_c = cdf_ext[j - 1], cdf_ext[j]
    frac = np.where(hi_c > lo_c, (u - lo_c) / np.where(hi_c > lo_c, hi_c - lo_c, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    out = edges[j - 1] + frac * (edges[j] - edges[j - 1])
    return np.where(u <= 0.0, edges[0], out)


def histogram_match(src: Volume3D, ref_hist: ReferenceHistogram, mask: BinaryMask, bins: int = 256) -> Volume3D:
    """Map masked intensities through the source CDF and the inverse reference CDF.

    Both CDFs are piecewise linear over their bin edges, so the mapping is
    monotone non-decreasing.  Voxels outside ``mask`` are returned unchanged.
    """
    vals = _masked(src, mask)
    edges, cdf = _histogram_cdf(vals, bins)
    u = np.interp(vals, edges, np.concatenate([[0.0], cdf]))
    out = np.array(src.data, copy=True)
    out[mask.data] = _inverse_cdf(u, ref_hist.bin_edges, ref_hist.cdf)
    return Volume3D(out, src.spacing)
