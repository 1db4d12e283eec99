"""Density-robust LiDAR 3D detection at desk scale.

Beam-aware downsampling, confidence-based density selection, teacher/student
feature alignment, a toy BEV detector, a ray-cast LiDAR simulator and
KITTI-style evaluation, all in numpy.
"""

from .beams import BeamVariantSpec, PointCloud, label_beams, make_beam_variants
from .geometry import Box3D, Detection, bev_iou, iou_3d
from .metrics import average_precision_r40, closed_gap

__all__ = [
    "BeamVariantSpec",
    "Box3D",
    "Detection",
    "PointCloud",
    "average_precision_r40",
    "bev_iou",
    "closed_gap",
    "iou_3d",
    "label_beams",
    "make_beam_variants",
]

__version__ = "0.1.0"
