"""Unsupervised dynamic-scene segmentation and dense reconstruction.

Calibrated multi-view frames plus sparse 3D feature matches go in; per-view
dense depth maps, foreground masks, fused point clouds and segmentation
metrics come out.  The refinement stage minimizes a three-term MRF energy
(photo-consistency, contrast, smoothness) with expansion moves solved by
graph cuts.
"""

from dynrecon.geometry import CameraView, project, backproject, sample_ray
from dynrecon.graphcut import FlowNetwork, MrfProblem, Labeling, max_flow, expansion_move, minimize
from dynrecon.energy import EnergyParams, UNKNOWN_DEPTH, is_unknown
from dynrecon.scene_io import DatasetManifest, PipelineConfig, load_dataset, load_config
from dynrecon.pipeline import reconstruct_frame, run_sequence, fuse, seg_metrics

__version__ = "0.1.0"

__all__ = [
    "CameraView",
    "DatasetManifest",
    "EnergyParams",
    "FlowNetwork",
    "Labeling",
    "MrfProblem",
    "PipelineConfig",
    "UNKNOWN_DEPTH",
    "backproject",
    "expansion_move",
    "fuse",
    "is_unknown",
    "load_config",
    "load_dataset",
    "max_flow",
    "minimize",
    "project",
    "reconstruct_frame",
    "run_sequence",
    "sample_ray",
    "seg_metrics",
]
