"""Synthetic multi-modal tumor cases with known ground truth.

A phantom is an ellipsoidal "brain" on a zero background containing an
ellipsoidal tumor with three nested shells: necrotic core (label 1),
enhancing rim (label 4) and surrounding edema (label 2).  Each modality gets
region-specific mean intensities plus seeded high-frequency texture; the
four score maps imitate a network output whose dominant channel is correct
with probability ``p_correct``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .volume import CaseBundle, LabelVolume, ScoreMapSet, Volume3D, label_to_index

MODALITY_ROLES = ("flair", "t1c", "t2")

# Mean intensity per label (0 = healthy brain) for each modality.
REGION_MEANS = {
    "flair": {0: 100.0, 1: 140.0, 2: 185.0, 4: 160.0},
    "t1c": {0: 100.0, 1: 55.0, 2: 90.0, 4: 210.0},
    "t2": {0: 100.0, 1: 195.0, 2: 170.0, 4: 135.0},
}
# Texture stripe period (voxels) per label; differing periods give the Gabor bank something to see.
REGION_PERIOD = {0: 6.0, 1: 2.5, 2: 4.0, 4: 3.0}


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (64, 64, 48)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    tumor_center: Tuple[float, float, float] = (36.0, 30.0, 24.0)
    tumor_radii: Tuple[float, float, float] = (13.0, 11.0, 9.0)
    rim_fraction: float = 0.65      # enhancing rim outer radius, relative to the edema radius
    core_fraction: float = 0.40     # necrotic core outer radius
    jitter: float = 2.0             # seeded shift of the tumor centre, voxels
    texture_amplitude: float = 8.0
    noise_sigma: float = 12.0
    p_correct: float = 0.9
    score_noise: float = 0.3

    def validate(self) -> "PhantomSpec":
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise ValueError("phantom dims must be three integers >= 8")
        if not 0.5 < self.p_correct <= 1.0:
            raise ValueError("p_correct must lie in (0.5, 1]")
        if self.score_noise < 0:
            raise ValueError("score_noise must be >= 0")
        if not 0 < self.core_fraction < self.rim_fraction < 1:
            raise ValueError("need 0 < core_fraction < rim_fraction < 1")
        for c, r, n in zip(self.tumor_center, self.tumor_radii, self.dims):
            if r <= 0 or c - r - self.jitter < 1 or c + r + self.jitter > n - 2:
                raise ValueError("tumor ellipsoid (with jitter) must lie inside the volume")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("dims", "spacing", "tumor_center", "tumor_radii"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _ellipsoid_radius(shape, center, radii) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    return np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii)))


def make_phantom(spec: PhantomSpec) -> CaseBundle:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(d) for d in spec.dims)

    brain_center = tuple((n - 1) / 2.0 for n in shape)
    brain_radii = tuple(0.46 * n for n in shape)
    brain = _ellipsoid_radius(shape, brain_center, brain_radii) <= 1.0

    center = tuple(c + rng.uniform(-spec.jitter, spec.jitter) for c in spec.tumor_center)
    r = _ellipsoid_radius(shape, center, spec.tumor_radii)
    truth = np.zeros(shape, dtype=np.uint8)
    truth[r <= 1.0] = 2
    truth[r <= spec.rim_fraction] = 4
    truth[r <= spec.core_fraction] = 1
    truth[~brain] = 0

    x, y, z = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    modalities = []
    for role in MODALITY_ROLES:
        vol = np.zeros(shape)
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        along = x * np.cos(angle) + y * np.sin(angle)
        for lab, mean in REGION_MEANS[role].items():
            sel = brain & (truth == lab)
            stripes = np.sin(2 * np.pi * along[sel] / REGION_PERIOD[lab] + phase)
            vol[sel] = mean + spec.texture_amplitude * stripes
        vol[brain] += rng.normal(0.0, spec.noise_sigma, size=int(brain.sum()))
        vol[brain] = np.maximum(vol[brain], 1.0)
        modalities.append(Volume3D(vol.astype(np.float32).astype(np.float64), spec.spacing))

    true_idx = label_to_index(truth)
    wrong = rng.random(shape) >= spec.p_correct
    shift = rng.integers(1, 4, size=shape)
    dominant = np.where(wrong, (true_idx + shift) % 4, true_idx)
    scores = np.eye(4)[dominant] + rng.normal(0.0, spec.score_noise, size=shape + (4,))
    if spec.score_noise == 0:
        scores = np.eye(4)[dominant]
    channels = tuple(Volume3D(scores[..., i].astype(np.float32).astype(np.float64), spec.spacing)
                     for i in range(4))
    return CaseBundle(tuple(modalities), ScoreMapSet(channels), LabelVolume(truth, spec.spacing),
                      f"phantom_{spec.seed}", MODALITY_ROLES)


def write_phantom(spec: PhantomSpec, out_dir) -> Path:
    """Write a phantom case and its manifest; returns the manifest path."""
    from .io import CaseManifest, write_manifest, write_volume

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    case = make_phantom(spec)
    mods = []
    for role, vol in zip(MODALITY_ROLES, case.modalities):
        write_volume(vol, out_dir / f"{role}.svf")
        mods.append((role, f"{role}.svf"))
    score_files = []
    for lab, ch in zip((0, 1, 2, 4), case.scores.channels):
        write_volume(ch, out_dir / f"score_{lab}.svf")
        score_files.append(f"score_{lab}.svf")
    write_volume(case.ground_truth, out_dir / "seg.svf")
    manifest = CaseManifest(case.case_id, mods, score_files, "seg.svf")
    path = out_dir / "manifest.json"
    write_manifest(manifest, path)
    return path
