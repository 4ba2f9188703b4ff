"""``voxelforest`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data/contract error, 3 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import PipelineConfig
from .errors import DataError, InvariantError, VoxelForestError

log = logging.getLogger("voxelforest")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(VoxelForestError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _str2bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


# Flags mirroring PipelineConfig fields; value None means "keep the config value".
_CONFIG_FLAGS = {
    "k": int, "window": int, "texton_samples": int, "kmeans_max_iters": int, "kmeans_tol": float,
    "margin": int, "n_trees": int, "max_depth": int, "min_samples_leaf": int, "features_per_split": int,
    "bootstrap": _str2bool, "extra_trees": _str2bool, "class_cap": int, "min_fraction": float,
    "bins": int, "n_jobs": int,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with PipelineConfig fields")
    p.add_argument("--seed", type=int, help="master random seed")
    p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    g = p.add_argument_group("pipeline overrides")
    for name, typ in _CONFIG_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxelforest", description="Texton + score-map random forest brain tumor segmentation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic case")
    _add_common(p)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--spec", type=Path, help="JSON PhantomSpec")
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--p-correct", type=float)
    p.add_argument("--score-noise", type=float)

    p = sub.add_parser("preprocess", help="z-score and histogram-match one case")
    _add_common(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--reference", type=Path, help="manifest of the reference case")
    p.add_argument("--out", type=Path, help="output directory")

    p = sub.add_parser("fit-textons", help="learn per-modality texton codebooks")
    _add_common(p)
    p.add_argument("--manifests", type=Path, nargs="+")
    p.add_argument("--reference", type=Path, help="reference case manifest (default: first manifest)")
    p.add_argument("--out", type=Path, help="codebook JSON file")

    p = sub.add_parser("train", help="train the forest and write a model file")
    _add_common(p)
    p.add_argument("--manifests", type=Path, nargs="+")
    p.add_argument("--codebooks", type=Path)
    p.add_argument("--model-out", type=Path)

    p = sub.add_parser("predict", help="segment one case")
    _add_common(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--model", type=Path)
    p.add_argument("--out", type=Path, help="output SVF1 label volume")

    p = sub.add_parser("evaluate", help="score segmentations against ground truth")
    _add_common(p)
    p.add_argument("--pred", type=Path, nargs="+")
    p.add_argument("--truth", type=Path, nargs="+")
    p.add_argument("--case-id", nargs="+")
    p.add_argument("--report", type=Path, help="CSV report path")
    return parser


_REQUIRED = {
    "phantom": ("out",),
    "preprocess": ("manifest", "reference", "out"),
    "fit-textons": ("manifests", "out"),
    "train": ("manifests", "codebooks", "model_out"),
    "predict": ("manifest", "model", "out"),
    "evaluate": ("pred", "truth", "report"),
}


def _check_required(args) -> None:
    # Checked here rather than by argparse so --print-config works on its own.
    missing = ["--" + n.replace("_", "-") for n in _REQUIRED[args.command] if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required arguments: {', '.join(missing)}")


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {name: getattr(args, name, None) for name in _CONFIG_FLAGS}
    overrides["seed"] = args.seed
    try:
        return cfg.updated(**overrides).validate()
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_phantom(args, cfg: PipelineConfig) -> int:
    from .phantom import PhantomSpec, write_phantom

    spec = PhantomSpec()
    if args.spec:
        try:
            spec = PhantomSpec.from_dict(json.loads(args.spec.read_text()))
        except FileNotFoundError as exc:
            raise DataError(f"phantom spec not found: {args.spec}") from exc
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"bad phantom spec {args.spec}: {exc}") from exc
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.dims:
        changes["dims"] = tuple(args.dims)
    if args.p_correct is not None:
        changes["p_correct"] = args.p_correct
    if args.score_noise is not None:
        changes["score_noise"] = args.score_noise
    spec = PhantomSpec.from_dict({**spec.to_dict(), **changes})
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        path = write_phantom(spec, args.out)
    except OSError as exc:
        raise DataError(f"cannot write phantom to {args.out}: {exc}") from exc
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_preprocess(args, cfg: PipelineConfig) -> int:
    from .io import CaseManifest, read_manifest, write_manifest, write_volume
    from .pipeline import preprocess_case, reference_histograms

    case = read_manifest(args.manifest)
    ref = read_manifest(args.reference, load_ground_truth=False)
    pre, _ = preprocess_case(case, reference_histograms(ref, cfg.bins), cfg.bins)
    out = args.out
    mods = []
    for role, vol in zip(pre.modality_names, pre.modalities):
        write_volume(vol, out / f"{role}.svf")
        mods.append((role, f"{role}.svf"))
    scores = []
    for lab, ch in zip((0, 1, 2, 4), pre.scores.channels):
        write_volume(ch, out / f"score_{lab}.svf")
        scores.append(f"score_{lab}.svf")
    gt = None
    if pre.ground_truth is not None:
        write_volume(pre.ground_truth, out / "seg.svf")
        gt = "seg.svf"
    write_manifest(CaseManifest(pre.case_id, mods, scores, gt), out / "manifest.json")
    log.info("wrote %s", out / "manifest.json")
    return EXIT_OK


def cmd_fit_textons(args, cfg: PipelineConfig) -> int:
    from .io import read_manifest, save_codebooks
    from .pipeline import fit_codebooks, preprocess_case, reference_histograms

    ref_path = args.reference or args.manifests[0]
    refs = reference_histograms(read_manifest(ref_path, load_ground_truth=False), cfg.bins)
    cases = [preprocess_case(read_manifest(m, load_ground_truth=False), refs, cfg.bins) for m in args.manifests]
    books = fit_codebooks(cases, cfg)
    save_codebooks(books, refs, args.out, extra={"reference_case": str(ref_path), "config": cfg.to_dict()})
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    from .io import load_codebooks, read_manifest, save_model
    from .pipeline import preprocess_case, train_model

    books, refs, _ = load_codebooks(args.codebooks)
    cases = [preprocess_case(read_manifest(m), refs, cfg.bins)[0] for m in args.manifests]
    model = train_model(cases, books, cfg)
    save_model(model, books, refs, args.model_out, extra={"config": cfg.to_dict()})
    log.info("wrote %s", args.model_out)
    return EXIT_OK


def cmd_predict(args, cfg: PipelineConfig) -> int:
    from .io import load_model, read_manifest, write_volume
    from .pipeline import predict_case

    model = load_model(args.model)
    case = read_manifest(args.manifest, load_ground_truth=False)
    result = predict_case(case, model, cfg)
    write_volume(result.segmentation, args.out)
    log.info("wrote %s (%d ROI voxels)", args.out, result.roi_size)
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    from .io import read_volume
    from .metrics import evaluate_case, write_report_csv
    from .volume import LabelVolume

    if len(args.pred) != len(args.truth):
        raise UsageError("--pred and --truth need the same number of files")
    ids = args.case_id or [p.stem for p in args.pred]
    if len(ids) != len(args.pred):
        raise UsageError("--case-id count must match --pred")
    reports = []
    for cid, p, t in zip(ids, args.pred, args.truth):
        vols = []
        for f, what in ((p, "prediction"), (t, "ground truth")):
            if not f.exists():
                raise DataError(f"missing {what} file: {f}")
            v = read_volume(f)
            if not isinstance(v, LabelVolume):
                raise DataError(f"{what} {f} is not a u8 label volume")
            vols.append(v)
        reports.append(evaluate_case(vols[0], vols[1], cid))
    write_report_csv(reports, args.report)
    log.info("wrote %s", args.report)
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "fit-textons": cmd_fit_textons,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def _setup_logging(verbose: bool) -> None:
    # Own handler on the package logger; the root logger is left to the host application.
    if not any(getattr(h, "_voxelforest", False) for h in log.handlers):
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        h._voxelforest = True
        log.addHandler(h)
    for h in log.handlers:
        if getattr(h, "_voxelforest", False):
            h.stream = sys.stderr
    log.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    _setup_logging(args.verbose)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(cfg.dumps())
            return EXIT_OK
        _check_required(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except DataError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_DATA
    except InvariantError as exc:
        log.error("internal invariant violated: %s", exc)
        return EXIT_INTERNAL
    except (OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
