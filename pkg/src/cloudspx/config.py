"""Pipeline-wide configuration.

One flat dataclass covers every stage so a single JSON file can reproduce a
run. Merge precedence is command-line flags over config file over built-in
defaults. A copy of the effective config is written next to every artifact
the CLI produces.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from . import gcforest, hfcnn


@dataclass
class PipelineConfig:
    # tiling and bands
    tile_size: int = 500
    nir_max: int = 1023
    # segmentation
    n_superpixels: int = 600
    compactness: float = 10.0
    iterations: int = 10
    edge_weight: float = 10.0
    edge_detector: str = "gradient_multiscale"
    min_area: int = 10
    patch_size: int = 32
    # CNN training
    lr: float = 0.001
    momentum: float = 0.9
    max_iterations: int = 10000
    batch_size: int = 64
    # forest
    scan_window_sizes: tuple = (8, 16)
    scan_stride: int = 4
    scan_trees: int = 30
    scan_max_per_class: int = 20000
    cascade_trees: int = 500
    cascade_folds: int = 3
    cascade_max_levels: int = 8
    cascade_patience: int = 2
    # refinement and scoring
    nir_threshold: float = 1000.0
    relabel_hops: int = 2
    relabel_aggregate: str = "min"
    cirrus_is_cloud: bool = True
    seed: int = 0

    def __post_init__(self):
        self.scan_window_sizes = tuple(self.scan_window_sizes)

    def merged(self, overrides: dict) -> "PipelineConfig":
        """New config with non-None overrides applied; unknown keys raise."""
        known = {f.name for f in dataclasses.fields(self)}
        clean = {}
        for key, value in overrides.items():
            if key not in known:
                raise KeyError(f"unknown config field {key!r}")
            if value is not None:
                clean[key] = value
        return dataclasses.replace(self, **clean)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scan_window_sizes"] = list(self.scan_window_sizes)
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path: str | Path) -> "PipelineConfig":
        return PipelineConfig(**json.loads(Path(path).read_text()))

    @staticmethod
    def resolve(file: str | Path | None = None,
                overrides: dict | None = None) -> "PipelineConfig":
        cfg = PipelineConfig.load(file) if file else PipelineConfig()
        return cfg.merged(overrides or {})

    # per-stage views

    def train_config(self) -> hfcnn.TrainConfig:
        return hfcnn.TrainConfig(
            lr=self.lr,
            momentum=self.momentum,
            max_iterations=self.max_iterations,
            batch_size=self.batch_size,
            seed=self.seed,
        )

    def gc_config(self) -> gcforest.GcConfig:
        return gcforest.GcConfig(
            scan=gcforest.ScanConfig(
                window_sizes=self.scan_window_sizes,
                stride=self.scan_stride,
                n_trees=self.scan_trees,
                max_per_class=self.scan_max_per_class,
            ),
            cascade=gcforest.CascadeConfig(
                n_trees=self.cascade_trees,
                n_folds=self.cascade_folds,
                max_levels=self.cascade_max_levels,
                patience=self.cascade_patience,
            ),
            seed=self.seed,
        )


def write_sidecar(cfg: PipelineConfig, artifact: str | Path) -> None:
    """Record the effective config next to an artifact for reproducibility."""
    cfg.save(Path(str(artifact) + ".config.json"))
