"""Orchestration: configuration, data, checkpoints, training, inference."""

from .checkpoint import (Checkpoint, OptimSnapshot, assign_params,
                         load_checkpoint, save_checkpoint, snapshot_params)
from .config import (RunConfig, apply_overrides, load_config, parse_config,
                     serialize_config)
from .data import (Corpus, ManifestRow, build_context_corpus, build_manifest,
                   build_shapes_corpus, from_uint8, list_images, load_image,
                   read_manifest, save_image, to_uint8)
from .restore import load_bundle, restore, restore_from_checkpoint, worker_count
from .train import (ModelBundle, TrainResult, build_bundle,
                    build_training_context, holdout_l1, train_ae, train_dpir)

__all__ = [
    "Checkpoint", "OptimSnapshot", "assign_params", "load_checkpoint",
    "save_checkpoint", "snapshot_params",
    "RunConfig", "apply_overrides", "load_config", "parse_config",
    "serialize_config",
    "Corpus", "ManifestRow", "build_context_corpus", "build_manifest",
    "build_shapes_corpus", "from_uint8", "list_images", "load_image",
    "read_manifest", "save_image", "to_uint8",
    "load_bundle", "restore", "restore_from_checkpoint", "worker_count",
    "ModelBundle", "TrainResult", "build_bundle", "build_training_context",
    "holdout_l1", "train_ae", "train_dpir",
]
