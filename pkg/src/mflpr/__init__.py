"""Matched-filter LiDAR place recognition and 3-DoF relocalization on BEV occupancy descriptors."""

from .config import Config
from .correlation import FFTCorrelator, correlate_direct, correlate_fft, rotation_sweep
from .descriptor import BevDescriptor, DescriptorParams, make_query_descriptors, make_reference_descriptors
from .errors import ConfigError, DataError, MalformedFileError, MflprError, ParameterError
from .geometry import CropWindow, PointCloud, Pose2D, load_pointcloud
from .metrics import EvalRecord, PoseEstimate, aggregate, recall_at_1, rre, rte, success_rate
from .search import ReferenceIndex, build_reference_index, load_index, localize, save_index

__version__ = "0.1.0"

__all__ = [
    "BevDescriptor", "Config", "ConfigError", "CropWindow", "DataError", "DescriptorParams", "EvalRecord",
    "FFTCorrelator", "MalformedFileError", "MflprError", "ParameterError", "PointCloud", "Pose2D",
    "PoseEstimate", "ReferenceIndex", "aggregate", "build_reference_index", "correlate_direct",
    "correlate_fft", "load_index", "load_pointcloud", "localize", "make_query_descriptors",
    "make_reference_descriptors", "recall_at_1", "rotation_sweep", "rre", "rte", "save_index",
    "success_rate",
]
