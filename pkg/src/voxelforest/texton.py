"""Gabor filter bank, k-means texton codebooks, texton maps and window histograms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, DimsMismatchError
from .volume import Spacing, Volume3D, _check_center, _check_geometry, _Grid, window_values

THETAS = (0.0, 30.0, 45.0, 60.0, 90.0, 120.0)
SIGMAS = (0.3, 0.6, 0.9, 1.2, 1.5)
LAMBDAS = (0.8, 1.0, 1.2, 1.5)
N_TEXTONS = 16


def kernel_radius(sigma: float) -> int:
    return max(1, int(math.ceil(3.0 * sigma)))


def gabor_kernel(theta: float, sigma: float, lam: float) -> np.ndarray:
    """Real, even, zero-mean Gabor kernel with unit aspect ratio.

    ``theta`` is in degrees; ``sigma`` (Gaussian envelope) and ``lam``
    (carrier wavelength) are in voxels.  The returned array is indexed
    ``[x, y]`` with the kernel centre at ``[r, r]``.
    """
    if not sigma > 0 or not lam > 0:
        raise ValueError(f"sigma and lambda must be positive, got sigma={sigma}, lambda={lam}")
    r = kernel_radius(sigma)
    offs = np.arange(-r, r + 1, dtype=np.float64)
    x, y = np.meshgrid(offs, offs, indexing="ij")
    t = math.radians(theta)
    xr = x * math.cos(t) + y * math.sin(t)
    yr = -x * math.sin(t) + y * math.cos(t)
    g = np.exp(-(xr ** 2 + yr ** 2) / (2.0 * sigma ** 2)) * np.cos(2.0 * math.pi * xr / lam)
    return g - g.mean()


@dataclass(frozen=True)
class GaborBank:
    kernels: Tuple[np.ndarray, ...]
    tags: Tuple[Tuple[float, float, float], ...]

    def __len__(self):
        return len(self.kernels)


def build_bank(thetas=THETAS, sigmas=SIGMAS, lambdas=LAMBDAS) -> GaborBank:
    """All (theta, sigma, lambda) combinations, theta-major then sigma then lambda."""
    tags = tuple((float(t), float(s), float(l)) for t in thetas for s in sigmas for l in lambdas)
    kernels = tuple(gabor_kernel(*tag) for tag in tags)
    return GaborBank(kernels, tags)


@dataclass(frozen=True, eq=False)
class ResponseVolume:
    """Filter responses, shape ``(nx, ny, nz, n_filters)``."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape[:3])

    @property
    def width(self) -> int:
        return int(self.data.shape[3])


def filter_volume(vol: Volume3D, bank: GaborBank) -> ResponseVolume:
    """Convolve every axial slice with every kernel, clamping at the slice edges."""
    src = vol.data
    out = np.empty(src.shape + (len(bank),), dtype=np.float64)
    for i, k in enumerate(bank.kernels):
        # A (k, k, 1) kernel keeps the convolution inside each z slice.
        ndimage.convolve(src, k[:, :, None], output=out[..., i], mode="nearest")
    return ResponseVolume(out, vol.spacing)


@dataclass(frozen=True, eq=False)
class TextonCodebook:
    centroids: np.ndarray
    modality_index: int = 0
    seed: Optional[int] = None
    sse_history: List[float] = field(default_factory=list)
    n_iter: int = 0

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("centroids must be a non-empty 2D matrix")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids must be finite")
        if np.unique(c, axis=0).shape[0] != c.shape[0]:
            raise ValueError("codebook contains identical centroids")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def width(self) -> int:
        return int(self.centroids.shape[1])

    def to_dict(self) -> dict:
        return {"modality_index": self.modality_index, "seed": self.seed, "centroids": self.centroids.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TextonCodebook":
        return cls(np.asarray(d["centroids"], dtype=np.float64), int(d["modality_index"]), d.get("seed"))


def _sq_distances(X: np.ndarray, C: np.ndarray, xx: Optional[np.ndarray] = None) -> np.ndarray:
    if xx is None:
        xx = np.einsum("ij,ij->i", X, X)
    d = xx[:, None] - 2.0 * (X @ C.T) + np.einsum("ij,ij->i", C, C)[None, :]
    return np.maximum(d, 0.0)


def _assign(X: np.ndarray, C: np.ndarray, xx: Optional[np.ndarray] = None, chunk: int = 65536) -> np.ndarray:
    if xx is None:
        xx = np.einsum("ij,ij->i", X, X)
    labels = np.empty(X.shape[0], dtype=np.int64)
    for s in range(0, X.shape[0], chunk):
        labels[s:s + chunk] = np.argmin(_sq_distances(X[s:s + chunk], C, xx[s:s + chunk]), axis=1)
    return labels


def _cluster_means(X: np.ndarray, labels: np.ndarray, k: int):
    # Sum members in a fixed (stable-sorted) order so results never depend on chunking.
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=k)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sums = np.zeros((k, X.shape[1]))
    nonempty = counts > 0
    sums[nonempty] = np.add.reduceat(X[order], starts[nonempty], axis=0)
    means = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return means, counts


def _point_sse(X: np.ndarray, C: np.ndarray, labels: np.ndarray) -> np.ndarray:
    diff = X - C[labels]
    return np.einsum("ij,ij->i", diff, diff)


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        if not total > 0:
            raise DegenerateInputError(f"fewer than k={k} distinct samples")
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        centers[j] = X[idx]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(1))
    return centers


def kmeans_fit(samples, k: int = N_TEXTONS, seed: int = 0, max_iters: int = 100, tol: float = 1e-6,
               modality_index: int = 0) -> TextonCodebook:
    """Lloyd's algorithm with k-means++ seeding.

    Stops once no centroid moves by ``tol`` or more (L2), or after
    ``max_iters`` updates.  A cluster that loses all its members is moved to
    the sample currently farthest from its own centroid.  The SSE of every
    assignment step is kept in ``sse_history``.
    """
    X = np.ascontiguousarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("samples must be a 2D matrix")
    if X.shape[0] < k:
        raise DegenerateInputError(f"need at least k={k} samples, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("samples contain non-finite values")

    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, k, rng)
    xx = np.einsum("ij,ij->i", X, X)
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        labels = _assign(X, C, xx)
        dist = _point_sse(X, C, labels)
        history.append(float(dist.sum()))

        new_c, counts = _cluster_means(X, labels, k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            farthest = np.argsort(-dist, kind="stable")[: empty.size]
            new_c[empty] = X[farthest]
        shift = float(np.sqrt(((new_c - C) ** 2).sum(1)).max())
        C = new_c
        if shift < tol:
            break
    labels = _assign(X, C, xx)
    history.append(float(_point_sse(X, C, labels).sum()))
    return TextonCodebook(C, modality_index, seed, history, n_iter)


@dataclass(frozen=True, eq=False)
class TextonMap(_Grid):
    """Per-voxel texton ids."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        sp = _check_geometry(data.shape, self.spacing)
        if data.size and (data.min() < 0 or data.max() > 255):
            raise ValueError("texton ids must fit in 0..255")
        data = data.astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", sp)


def texton_map(responses: ResponseVolume, codebook: TextonCodebook) -> TextonMap:
    """Nearest-centroid id per voxel (lowest id on ties)."""
    if responses.width != codebook.width:
        raise DimsMismatchError(f"response width {responses.width} != codebook width {codebook.width}")
    flat = responses.data.reshape(-1, responses.width)
    ids = _assign(flat, codebook.centroids).reshape(responses.dims)
    return TextonMap(ids, responses.spacing)


def volume_texton_map(vol: Volume3D, bank: GaborBank, codebook: TextonCodebook, slab: int = 8) -> TextonMap:
    """Filter and assign a few slices at a time to bound memory.

    Identical to ``texton_map(filter_volume(vol, bank), codebook)`` because
    filtering never crosses slices.
    """
    nz = vol.dims[2]
    ids = np.empty(vol.dims, dtype=np.uint8)
    for z0 in range(0, nz, slab):
        sub = Volume3D(vol.data[:, :, z0:z0 + slab], vol.spacing)
        ids[:, :, z0:z0 + slab] = texton_map(filter_volume(sub, bank), codebook).data
    return TextonMap(ids, vol.spacing)


def texton_histogram(tmap: TextonMap, center, window: int = 5, n_bins: int = N_TEXTONS) -> np.ndarray:
    """Counts of each texton id in the clamped axial ``window x window`` neighbourhood."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    _check_center(tmap.dims, center)
    vals = window_values(tmap, center, window // 2)
    return np.bincount(vals.astype(np.int64), minlength=n_bins)[:n_bins]


def texton_histogram_volume(tmap: TextonMap, window: int = 5, n_bins: int = N_TEXTONS) -> np.ndarray:
    """Histograms for every voxel at once, shape ``(nx, ny, nz, n_bins)``."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    box = np.ones((window, window, 1), dtype=np.int32)
    out = np.empty(tmap.dims + (n_bins,), dtype=np.int32)
    for b in range(n_bins):
        ind = (tmap.data == b).astype(np.int32)
        ndimage.convolve(ind, box, output=out[..., b], mode="nearest")
    return out
