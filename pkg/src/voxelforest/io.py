"""On-disk formats: SVF1 volumes, case manifests, codebook and model files.

SVF1 layout (little-endian)::

    b"SVF1" | uint32 header_len | header_len bytes of UTF-8 JSON | payload

The JSON header holds ``dims``, ``spacing``, ``dtype`` ("f32" or "u8") and
``order`` ("x-fastest").  The payload is the raw voxel array, x varying
fastest.
"""
from __future__ import annotations

import contextlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BadMagicError,
    DimsMismatchError,
    FeatureLayoutError,
    HeaderError,
    ManifestError,
    ModelFormatError,
    ModelVersionError,
    NonFiniteValueError,
    TreeStructureError,
    TruncatedPayloadError,
    UnknownDtypeError,
)
from .features import FEATURE_LAYOUT, N_FEATURES
from .forest import DecisionTree, ForestModel, ForestParams, validate_tree
from .preprocess import ReferenceHistogram
from .texton import TextonCodebook
from .volume import BinaryMask, CaseBundle, LabelVolume, ScoreMapSet, Volume3D

MAGIC = b"SVF1"
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
MODEL_FORMAT_VERSION = "1"
CODEBOOK_FORMAT_VERSION = "1"
DEFAULT_ROLES = ("flair", "t1c", "t2")


@contextlib.contextmanager
def atomic_writer(path, mode="wb", **kwargs):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- volumes

def encode_volume(vol) -> bytes:
    if isinstance(vol, LabelVolume):
        dtype, payload = "u8", np.asarray(vol.data, dtype=np.uint8)
    elif isinstance(vol, BinaryMask):
        dtype, payload = "u8", np.asarray(vol.data, dtype=np.uint8)
    else:
        dtype = "f32"
        payload = np.asarray(vol.data, dtype=np.float64).astype("<f4")
        if not np.all(np.isfinite(payload)):
            raise NonFiniteValueError("volume values overflow float32", field="payload")
    header = {
        "dims": [int(n) for n in vol.dims],
        "spacing": [float(s) for s in vol.spacing],
        "dtype": dtype,
        "order": "x-fastest",
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload.tobytes(order="F")


def write_volume(vol, path) -> None:
    """Write a Volume3D (as f32) or a LabelVolume/BinaryMask (as u8)."""
    data = encode_volume(vol)
    with atomic_writer(path, "wb") as fh:
        fh.write(data)


def decode_volume(raw: bytes, path=None):
    if len(raw) < 8:
        raise TruncatedPayloadError("file shorter than the fixed SVF1 prefix", field="header_len", path=path)
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", field="magic", path=path)
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise TruncatedPayloadError("file shorter than its declared header", field="header_len", path=path)
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}", field="header", path=path) from exc
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object", field="header", path=path)

    dtype_name = header.get("dtype")
    if dtype_name not in DTYPES:
        raise UnknownDtypeError(f"unknown dtype {dtype_name!r}", field="dtype", path=path)
    if header.get("order") != "x-fastest":
        raise HeaderError(f"unsupported order {header.get('order')!r}", field="order", path=path)
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise HeaderError(f"dims must be three positive integers, got {dims!r}", field="dims", path=path)
    spacing = header.get("spacing")
    if not (isinstance(spacing, list) and len(spacing) == 3
            and all(isinstance(s, (int, float)) and np.isfinite(s) and s > 0 for s in spacing)):
        raise HeaderError(f"spacing must be three finite positive numbers, got {spacing!r}",
                          field="spacing", path=path)

    dt = DTYPES[dtype_name]
    n = dims[0] * dims[1] * dims[2]
    payload = raw[8 + hlen:]
    if len(payload) != n * dt.itemsize:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, expected {n * dt.itemsize} for dims {dims}",
            field="payload", path=path,
        )
    arr = np.frombuffer(payload, dtype=dt).reshape(dims, order="F")
    if dtype_name == "f32":
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError("payload contains NaN or Inf", field="payload", path=path)
        return Volume3D(arr.astype(np.float64), tuple(spacing))
    try:
        return LabelVolume(arr, tuple(spacing))
    except ValueError as exc:
        raise HeaderError(str(exc), field="payload", path=path) from exc


def read_volume(path):
    """Read an SVF1 file: f32 payloads give a Volume3D, u8 payloads a LabelVolume."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return decode_volume(raw, path=str(path))


# -------------------------------------------------------------- manifests

@dataclass
class CaseManifest:
    case_id: str
    modalities: List[Tuple[str, str]]   # (role, path)
    score_maps: List[str]
    ground_truth: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "modalities": [{"role": r, "path": p} for r, p in self.modalities],
            "score_maps": list(self.score_maps),
            "ground_truth": self.ground_truth,
        }


def write_manifest(manifest: CaseManifest, path) -> None:
    with atomic_writer(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")


def parse_manifest(path) -> CaseManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"manifest {path} must be a JSON object")
    mods = doc.get("modalities")
    if not isinstance(mods, list) or len(mods) != 3:
        raise ManifestError(f"manifest {path}: expected exactly 3 modalities, got "
                            f"{len(mods) if isinstance(mods, list) else mods!r}")
    pairs = []
    for i, m in enumerate(mods):
        if isinstance(m, dict) and isinstance(m.get("path"), str):
            pairs.append((str(m.get("role", DEFAULT_ROLES[i])), m["path"]))
        elif isinstance(m, str):
            pairs.append((DEFAULT_ROLES[i], m))
        else:
            raise ManifestError(f"manifest {path}: modality entry {i} must name a path")
    scores = doc.get("score_maps")
    if not isinstance(scores, list) or len(scores) != 4 or not all(isinstance(s, str) for s in scores):
        raise ManifestError(f"manifest {path}: expected exactly 4 score map paths in label order 0,1,2,4, got "
                            f"{len(scores) if isinstance(scores, list) else scores!r}")
    gt = doc.get("ground_truth")
    if gt is not None and not isinstance(gt, str):
        raise ManifestError(f"manifest {path}: ground_truth must be a path or null")
    return CaseManifest(str(doc.get("case_id", path.stem)), pairs, scores, gt)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _load_member(path: Path, kind: str):
    if not path.exists():
        raise ManifestError(f"missing {kind} file: {path}")
    return read_volume(path)


def read_manifest(path, load_ground_truth: bool = True) -> CaseBundle:
    """Load every volume a manifest references into a :class:`CaseBundle`.

    All volumes must share dims and spacing; a mismatch raises
    :class:`DimsMismatchError` naming both files.
    """
    path = Path(path)
    man = parse_manifest(path)
    base = path.parent
    loaded = []
    for role, p in man.modalities:
        f = _resolve(base, p)
        loaded.append((f, _load_member(f, f"modality {role!r}")))
    for i, p in enumerate(man.score_maps):
        f = _resolve(base, p)
        loaded.append((f, _load_member(f, f"score map {i}")))
    gt = None
    if load_ground_truth and man.ground_truth:
        f = _resolve(base, man.ground_truth)
        gt = _load_member(f, "ground truth")
        loaded.append((f, gt))

    ref_path, ref = loaded[0]
    for f, vol in loaded[1:]:
        if vol.dims != ref.dims or tuple(vol.spacing) != tuple(ref.spacing):
            raise DimsMismatchError(
                f"{f} has grid {vol.dims}/{vol.spacing} but {ref_path} has {ref.dims}/{ref.spacing}"
            )
    for f, vol in loaded[:7]:
        if not isinstance(vol, Volume3D):
            raise ManifestError(f"{f} must be an f32 volume")
    if gt is not None and not isinstance(gt, LabelVolume):
        raise ManifestError(f"ground truth {man.ground_truth} must be a u8 label volume")

    mods = tuple(v for _, v in loaded[:3])
    scores = ScoreMapSet(tuple(v for _, v in loaded[3:7]))
    return CaseBundle(mods, scores, gt, man.case_id, tuple(r for r, _ in man.modalities))


# ------------------------------------------------------- codebooks/models

def _dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_codebooks(codebooks: Sequence[TextonCodebook], reference_histograms: Sequence[ReferenceHistogram],
                   path, extra: Optional[dict] = None) -> None:
    doc = {
        "format_version": CODEBOOK_FORMAT_VERSION,
        "codebooks": [c.to_dict() for c in codebooks],
        "reference_histograms": [h.to_dict() for h in reference_histograms],
    }
    if extra:
        doc.update(extra)
    with atomic_writer(path, "w") as fh:
        fh.write(_dumps(doc))


def load_codebooks(path) -> Tuple[List[TextonCodebook], List[ReferenceHistogram], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ModelFormatError(f"codebook file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"codebook file {path} is not valid JSON: {exc}") from exc
    if doc.get("format_version") != CODEBOOK_FORMAT_VERSION:
        raise ModelVersionError(f"unsupported codebook format_version {doc.get('format_version')!r}")
    try:
        cbs = [TextonCodebook.from_dict(d) for d in doc["codebooks"]]
        hists = [ReferenceHistogram.from_dict(d) for d in doc["reference_histograms"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed codebook file {path}: {exc}") from exc
    return cbs, hists, doc


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """Everything needed for inference, as stored in a model file."""

    forest: ForestModel
    codebooks: Tuple[TextonCodebook, ...]
    reference_histograms: Tuple[ReferenceHistogram, ...]
    feature_layout: Tuple[str, ...]
    extra: dict


def model_to_dict(model: ForestModel, codebooks: Sequence[TextonCodebook],
                  reference_histograms: Sequence[ReferenceHistogram], extra: Optional[dict] = None) -> dict:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "feature_layout": list(model.layout),
        "forest": model.to_dict(),
        "codebooks": [c.to_dict() for c in codebooks],
        "reference_histograms": [h.to_dict() for h in reference_histograms],
        "preprocessing": {"zscore_std": "population", "mask": "voxels > 0",
                          "order": "zscore then histogram_match"},
    }
    if extra:
        doc["extra"] = extra
    return doc


def save_model(model: ForestModel, codebooks: Sequence[TextonCodebook],
               reference_histograms: Sequence[ReferenceHistogram], path, extra: Optional[dict] = None) -> None:
    if len(model.layout) != N_FEATURES:
        raise FeatureLayoutError(f"feature layout must have {N_FEATURES} names, got {len(model.layout)}")
    with atomic_writer(path, "w") as fh:
        fh.write(_dumps(model_to_dict(model, codebooks, reference_histograms, extra)))


def model_from_dict(doc: dict) -> ModelBundle:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelVersionError(f"unsupported model format_version {doc.get('format_version')!r}")
    layout = doc.get("feature_layout")
    if not isinstance(layout, list) or len(layout) != N_FEATURES:
        raise FeatureLayoutError(
            f"feature layout must have {N_FEATURES} names, got {len(layout) if isinstance(layout, list) else layout!r}"
        )
    try:
        fdoc = doc["forest"]
        params = ForestParams(**fdoc["params"])
        trees = tuple(DecisionTree.from_dict(t) for t in fdoc["trees"])
        class_order = tuple(int(c) for c in fdoc.get("class_order", (0, 1, 2, 4)))
    except TreeStructureError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed forest section: {exc}") from exc
    if class_order != (0, 1, 2, 4):
        raise ModelFormatError(f"unsupported class order {class_order}")
    if len(trees) != params.n_trees:
        raise TreeStructureError(f"model declares {params.n_trees} trees but stores {len(trees)}")
    for t in trees:
        validate_tree(t, N_FEATURES, params.max_depth, params.min_samples_leaf)
    try:
        cbs = tuple(TextonCodebook.from_dict(d) for d in doc.get("codebooks", []))
        hists = tuple(ReferenceHistogram.from_dict(d) for d in doc.get("reference_histograms", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed codebooks or histograms: {exc}") from exc
    for cb in cbs:
        if cb.width != 120:
            raise ModelFormatError(f"codebook width {cb.width} does not match the 120-filter bank")
    forest = ForestModel(params, trees, tuple(layout), class_order)
    return ModelBundle(forest, cbs, hists, tuple(layout), doc.get("extra", {}))


def load_model(path) -> ModelBundle:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ModelFormatError(f"model file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file {path} is not valid JSON: {exc}") from exc
    return model_from_dict(doc)


def layout_matches(layout: Sequence[str]) -> bool:
    return tuple(layout) == FEATURE_LAYOUT
