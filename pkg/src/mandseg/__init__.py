"""Batch mandible segmentation for head CT volumes.

The package is organised by pipeline stage: grid and volume_io hold the
voxel primitives and file formats, recognition locates the mandible with
per-axis forests, fc delineates it by fuzzy connectedness, refine cleans the
result slice by slice, metrics scores masks against ground truth, phantom
generates synthetic test volumes, and pipeline/cli wire it all together.
"""

from .fc import AffinityParams, ConnectivityMap, DelineationError
from .grid import BoundingBox, LabelMap, Mask, Volume
from .metrics import CaseMetrics
from .pipeline import PipelineConfig, SegmentationResult, run_segmentation, train_axis_forests
from .recognition import Forest, ForestHyperparams, RecognitionConfig, RecognitionError
from .refine import RefineConfig, StateTrace
from .volume_io import LoadError, load_mask, load_volume, save_mask, save_volume

__version__ = "0.1.0"

__all__ = [
    "AffinityParams",
    "BoundingBox",
    "CaseMetrics",
    "ConnectivityMap",
    "DelineationError",
    "Forest",
    "ForestHyperparams",
    "LabelMap",
    "LoadError",
    "Mask",
    "PipelineConfig",
    "RecognitionConfig",
    "RecognitionError",
    "RefineConfig",
    "SegmentationResult",
    "StateTrace",
    "Volume",
    "load_mask",
    "load_volume",
    "refine",
    "run_segmentation",
    "save_mask",
    "save_volume",
    "train_axis_forests",
    "__version__",
]
