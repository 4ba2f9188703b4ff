import csv

import numpy as np
import pytest

from voxelforest.errors import DataError, DimsMismatchError
from voxelforest.features import (
    FEATURE_LAYOUT,
    N_FEATURES,
    FeatureMatrix,
    assemble_features,
    build_roi,
    cap_per_class,
    concat_features,
    roi_coords,
    write_features_csv,
)
from voxelforest.texton import TextonMap, texton_histogram
from voxelforest.volume import BinaryMask, CaseBundle, LabelVolume, ScoreMapSet, Volume3D

DIMS = (9, 8, 6)


def _scores_from_labels(lab, rng=None):
    idx = {0: 0, 1: 1, 2: 2, 4: 3}
    onehot = np.zeros(lab.shape + (4,))
    for k, i in idx.items():
        onehot[..., i] = lab == k
    if rng is not None:
        onehot = onehot + rng.uniform(0, 0.2, onehot.shape)
    return ScoreMapSet(tuple(Volume3D(onehot[..., i]) for i in range(4)))


def _case(rng, with_truth=True):
    truth = np.zeros(DIMS, np.uint8)
    truth[3:6, 2:5, 2:4] = 2
    truth[4, 3, 2] = 4
    mods = tuple(Volume3D(rng.normal(size=DIMS)) for _ in range(3))
    return CaseBundle(mods, _scores_from_labels(truth, rng), LabelVolume(truth) if with_truth else None)


def _maps(rng):
    return [TextonMap(rng.integers(0, 16, DIMS)) for _ in range(3)]


def test_layout_is_55_named_columns():
    assert N_FEATURES == 55 and len(set(FEATURE_LAYOUT)) == 55
    assert FEATURE_LAYOUT[:7] == ("score_0", "score_1", "score_2", "score_4",
                                  "intensity_m0", "intensity_m1", "intensity_m2")
    assert FEATURE_LAYOUT[7] == "texton_m0_bin0" and FEATURE_LAYOUT[-1] == "texton_m2_bin15"


# --- ROI -------------------------------------------------------------------------

def test_roi_single_voxel_margin_1():
    lab = np.zeros((7, 7, 7), np.uint8)
    lab[3, 3, 3] = 1
    roi = build_roi(_scores_from_labels(lab), 1)
    assert roi.count == 27 and roi.data[2:5, 2:5, 2:5].all()


def test_roi_empty_without_tumor_argmax():
    assert build_roi(_scores_from_labels(np.zeros((5, 5, 5), np.uint8)), 10).count == 0


def test_roi_margin_zero_is_raw_tumor_mask(rng):
    lab = rng.choice(np.array([0, 1, 2, 4], np.uint8), size=(6, 6, 6), p=[0.7, 0.1, 0.1, 0.1])
    np.testing.assert_array_equal(build_roi(_scores_from_labels(lab, rng), 0).data, lab > 0)


def test_roi_monotone_in_margin(rng):
    lab = np.zeros((15, 15, 15), np.uint8)
    lab[rng.integers(0, 15, 4), rng.integers(0, 15, 4), rng.integers(0, 15, 4)] = 2
    scores = _scores_from_labels(lab)
    prev = build_roi(scores, 0).data
    for m in range(1, 6):
        cur = build_roi(scores, m).data
        assert not np.any(prev & ~cur)
        prev = cur


def test_roi_coords_are_zyx_sorted(rng):
    roi = BinaryMask(rng.random(DIMS) < 0.3)
    c = roi_coords(roi)
    keys = [(z, y, x) for x, y, z in c.tolist()]
    assert keys == sorted(keys) and len(set(keys)) == roi.count


# --- assembly --------------------------------------------------------------------

def test_empty_roi_gives_0_by_55(rng):
    fm = assemble_features(_case(rng), _maps(rng), BinaryMask(np.zeros(DIMS, bool)))
    assert fm.values.shape == (0, 55) and fm.coords.shape == (0, 3)


def test_single_voxel_row_projects_inputs(rng):
    case, maps = _case(rng), _maps(rng)
    roi = np.zeros(DIMS, bool)
    roi[4, 3, 2] = True
    fm = assemble_features(case, maps, BinaryMask(roi))
    assert fm.n_rows == 1
    row = fm.values[0]
    assert row[:4].tolist() == [ch.data[4, 3, 2] for ch in case.scores.channels]
    assert row[4:7].tolist() == [m.data[4, 3, 2] for m in case.modalities]
    assert fm.labels.tolist() == [4]


def test_assembled_rows_match_per_voxel_oracle(rng):
    case, maps = _case(rng), _maps(rng)
    roi = build_roi(case.scores, 2)
    fm = assemble_features(case, maps, roi)
    assert fm.n_rows == roi.count
    for r, (x, y, z) in enumerate(fm.coords.tolist()):
        for m in range(3):
            block = fm.values[r, 7 + 16 * m: 23 + 16 * m]
            np.testing.assert_array_equal(block, texton_histogram(maps[m], (x, y, z)))
            assert block.sum() == 25
        assert fm.labels[r] == case.ground_truth.data[x, y, z]


def test_no_labels_without_ground_truth(rng):
    fm = assemble_features(_case(rng, with_truth=False), _maps(rng), BinaryMask(np.ones(DIMS, bool)))
    assert fm.labels is None and fm.n_rows == int(np.prod(DIMS))


def test_assembly_errors(rng):
    case = _case(rng)
    roi = BinaryMask(np.ones(DIMS, bool))
    with pytest.raises(DataError):
        assemble_features(case, _maps(rng)[:2], roi)
    with pytest.raises(DimsMismatchError):
        assemble_features(case, _maps(rng)[:2] + [TextonMap(np.zeros((2, 2, 2)))], roi)
    with pytest.raises(DimsMismatchError):
        assemble_features(case, _maps(rng), BinaryMask(np.ones((2, 2, 2), bool)))


def test_feature_matrix_validates_shape():
    with pytest.raises(DataError):
        FeatureMatrix(np.zeros((2, 54)), np.zeros((2, 3), int))


# --- training helpers ----------------------------------------------------------

def _fm(labels):
    n = len(labels)
    return FeatureMatrix(np.arange(n * 55, dtype=float).reshape(n, 55), np.zeros((n, 3), int),
                         np.asarray(labels, np.uint8))


def test_cap_per_class_limits_and_keeps_order():
    labels = [0] * 50 + [2] * 5 + [4] * 30
    out = cap_per_class(_fm(labels), 10, seed=1)
    counts = dict(zip(*np.unique(out.labels, return_counts=True)))
    assert counts == {0: 10, 2: 5, 4: 10}
    first = out.values[:, 0]
    assert np.all(np.diff(first) > 0)
    again = cap_per_class(_fm(labels), 10, seed=1)
    np.testing.assert_array_equal(again.values, out.values)


def test_concat_features():
    a, b = _fm([0, 1]), _fm([4])
    c = concat_features([a, b])
    assert c.n_rows == 3 and c.labels.tolist() == [0, 1, 4]
    assert concat_features([]).values.shape == (0, 55)


def test_csv_export(tmp_path, rng):
    case, maps = _case(rng), _maps(rng)
    fm = assemble_features(case, maps, build_roi(case.scores, 0))
    path = tmp_path / "f.csv"
    write_features_csv(fm, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["z", "y", "x", "label"] + list(FEATURE_LAYOUT)
    assert len(rows) == fm.n_rows + 1
    x, y, z = fm.coords[0]
    assert rows[1][:4] == [str(z), str(y), str(x), str(fm.labels[0])]
    assert [float(v) for v in rows[1][4:]] == fm.values[0].tolist()
