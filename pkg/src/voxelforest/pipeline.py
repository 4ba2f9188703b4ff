"""Stage functions shared by the CLI and the end-to-end tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import PipelineConfig
from .errors import DataError, FeatureLayoutError
from .features import FEATURE_LAYOUT, FeatureMatrix, assemble_features, build_roi, cap_per_class, concat_features
from .forest import ForestModel, predict, segmentation_from_predictions, train_forest
from .io import ModelBundle
from .morphology import filter_components
from .preprocess import (
    ReferenceHistogram,
    brain_mask,
    build_reference_histogram,
    histogram_match,
    zscore_normalize,
)
from .texton import GaborBank, TextonCodebook, TextonMap, build_bank, filter_volume, kmeans_fit, volume_texton_map
from .volume import BinaryMask, CaseBundle, LabelVolume

log = logging.getLogger(__name__)


def reference_histograms(case: CaseBundle, bins: int = 256) -> List[ReferenceHistogram]:
    """One histogram per modality of the z-scored reference case."""
    out = []
    for vol in case.modalities:
        mask = brain_mask(vol)
        out.append(build_reference_histogram(zscore_normalize(vol, mask), mask, bins))
    return out


def preprocess_case(case: CaseBundle, ref_hists: Sequence[ReferenceHistogram],
                    bins: int = 256) -> Tuple[CaseBundle, List[BinaryMask]]:
    """Z-score then histogram-match every modality; returns the new case and the brain masks."""
    if len(ref_hists) != len(case.modalities):
        raise DataError(f"need {len(case.modalities)} reference histograms, got {len(ref_hists)}")
    mods, masks = [], []
    for vol, ref in zip(case.modalities, ref_hists):
        mask = brain_mask(vol)
        z = zscore_normalize(vol, mask)
        mods.append(histogram_match(z, ref, mask, bins))
        masks.append(mask)
    out = CaseBundle(tuple(mods), case.scores, case.ground_truth, case.case_id, case.modality_names)
    return out, masks


def fit_codebooks(cases: Sequence[Tuple[CaseBundle, List[BinaryMask]]], cfg: PipelineConfig,
                  bank: Optional[GaborBank] = None) -> List[TextonCodebook]:
    """Learn one codebook per modality from brain-mask Gabor responses of the (preprocessed) cases."""
    bank = bank or build_bank()
    books = []
    for m in range(3):
        pooled = []
        for case, masks in cases:
            resp = filter_volume(case.modalities[m], bank)
            pooled.append(resp.data[masks[m].data])
        samples = np.concatenate(pooled)
        if samples.shape[0] > cfg.texton_samples:
            rng = np.random.default_rng([cfg.seed, m])
            rows = np.sort(rng.choice(samples.shape[0], size=cfg.texton_samples, replace=False))
            samples = samples[rows]
        log.info("fitting codebook for modality %d on %d samples", m, samples.shape[0])
        books.append(kmeans_fit(samples, cfg.k, seed=cfg.seed + m, max_iters=cfg.kmeans_max_iters,
                                tol=cfg.kmeans_tol, modality_index=m))
    return books


def texton_maps(case: CaseBundle, codebooks: Sequence[TextonCodebook],
                bank: Optional[GaborBank] = None) -> List[TextonMap]:
    bank = bank or build_bank()
    if len(codebooks) != 3:
        raise DataError(f"need 3 codebooks, got {len(codebooks)}")
    return [volume_texton_map(vol, bank, cb) for vol, cb in zip(case.modalities, codebooks)]


def case_features(case: CaseBundle, codebooks: Sequence[TextonCodebook], cfg: PipelineConfig,
                  bank: Optional[GaborBank] = None) -> Tuple[FeatureMatrix, BinaryMask]:
    """ROI and feature matrix of an already preprocessed case."""
    roi = build_roi(case.scores, cfg.margin)
    maps = texton_maps(case, codebooks, bank)
    return assemble_features(case, maps, roi, cfg.window), roi


def train_model(cases: Sequence[CaseBundle], codebooks: Sequence[TextonCodebook], cfg: PipelineConfig,
                bank: Optional[GaborBank] = None) -> ForestModel:
    """Train the forest on ROI voxels of preprocessed, labelled cases."""
    mats = []
    for case in cases:
        if case.ground_truth is None:
            raise DataError(f"training case {case.case_id!r} has no ground truth")
        fm, roi = case_features(case, codebooks, cfg, bank)
        log.info("case %s: %d ROI voxels", case.case_id, fm.n_rows)
        mats.append(fm)
    fm = concat_features(mats)
    if fm.n_rows == 0:
        raise DataError("no ROI voxels in any training case")
    fm = cap_per_class(fm, cfg.class_cap, cfg.seed)
    log.info("training %d trees on %d rows", cfg.n_trees, fm.n_rows)
    return train_forest(fm, params=cfg.forest_params(), layout=FEATURE_LAYOUT, n_jobs=cfg.n_jobs)


@dataclass
class Prediction:
    segmentation: LabelVolume
    roi_size: int
    raw: LabelVolume


def predict_case(case: CaseBundle, model: ModelBundle, cfg: PipelineConfig,
                 bank: Optional[GaborBank] = None) -> Prediction:
    """Full inference on a raw case; ground truth, if attached, is ignored."""
    if tuple(model.feature_layout) != FEATURE_LAYOUT:
        raise FeatureLayoutError("model feature layout does not match this build's 55-column layout")
    case = CaseBundle(case.modalities, case.scores, None, case.case_id, case.modality_names)
    roi = build_roi(case.scores, cfg.margin)
    if roi.count == 0:
        log.warning("case %s: empty ROI, writing an all-background segmentation", case.case_id)
        empty = LabelVolume(np.zeros(case.dims, dtype=np.uint8), case.spacing)
        return Prediction(empty, 0, empty)
    pre, _ = preprocess_case(case, model.reference_histograms, cfg.bins)
    maps = texton_maps(pre, model.codebooks, bank)
    fm = assemble_features(pre, maps, roi, cfg.window)
    labels, _ = predict(model.forest, fm)
    raw = segmentation_from_predictions(fm.coords, labels, case.dims, case.spacing)
    seg = filter_components(raw, cfg.min_fraction)
    return Prediction(seg, fm.n_rows, raw)
