"""Normal Distribution Descriptor (NDD) for LiDAR loop-closure detection."""

from .descriptor import (
    Descriptor,
    DescriptorConfig,
    Encoding,
    align_key,
    build_descriptor,
    search_key,
)
from .evaluation import GroundTruthConfig, f1_ep, label_ground_truth, pr_curve, run_sequence
from .pointcloud import PointCloud, Pose, load_kitti_bin, load_poses
from .retrieval import DescriptorDatabase, MatchResult, RetrievalConfig, correlation, detect_loop

__version__ = "0.1.0"

__all__ = [
    "Descriptor",
    "DescriptorConfig",
    "DescriptorDatabase",
    "Encoding",
    "GroundTruthConfig",
    "MatchResult",
    "PointCloud",
    "Pose",
    "RetrievalConfig",
    "align_key",
    "build_descriptor",
    "correlation",
    "detect_loop",
    "f1_ep",
    "label_ground_truth",
    "load_kitti_bin",
    "load_poses",
    "pr_curve",
    "run_sequence",
    "search_key",
]
