"""Pipeline configuration with the published defaults."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import DataError
from .forest import ForestParams


@dataclass(frozen=True)
class PipelineConfig:
    # texton stage
    k: int = 16
    window: int = 5
    texton_samples: int = 200_000
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-6
    # ROI / forest
    margin: int = 10
    n_trees: int = 50
    max_depth: int = 15
    min_samples_leaf: int = 1
    features_per_split: int = 7
    bootstrap: bool = True
    extra_trees: bool = False
    class_cap: int = 100_000
    # post-processing / preprocessing
    min_fraction: float = 0.10
    bins: int = 256
    seed: int = 0
    n_jobs: int = 1

    def validate(self) -> "PipelineConfig":
        problems = []
        if not 1 <= self.k <= 255:
            problems.append("k must lie in [1, 255]")
        if self.window < 1 or self.window % 2 == 0:
            problems.append("window must be a positive odd integer")
        if self.texton_samples < self.k:
            problems.append("texton_samples must be >= k")
        if self.kmeans_max_iters < 1 or not self.kmeans_tol >= 0:
            problems.append("kmeans_max_iters >= 1 and kmeans_tol >= 0 required")
        if self.margin < 0:
            problems.append("margin must be >= 0")
        if self.class_cap < 1:
            problems.append("class_cap must be >= 1")
        if not 0.0 <= self.min_fraction <= 1.0:
            problems.append("min_fraction must lie in [0, 1]")
        if self.bins < 1:
            problems.append("bins must be >= 1")
        if self.seed < 0:
            problems.append("seed must be non-negative")
        if self.n_jobs == 0:
            problems.append("n_jobs must be nonzero")
        try:
            self.forest_params().validate(55)
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ValueError("invalid configuration: " + "; ".join(problems))
        return self

    def forest_params(self) -> ForestParams:
        return ForestParams(
            n_trees=self.n_trees, max_depth=self.max_depth, min_samples_leaf=self.min_samples_leaf,
            features_per_split=self.features_per_split, bootstrap=self.bootstrap,
            extra_trees=self.extra_trees, seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def updated(self, **overrides) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise DataError("config must be a JSON object")
        return cls.from_dict(doc)
