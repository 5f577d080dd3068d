"""Oriented object detection with rotation-aware feature selection and dynamic refinement heads."""
from .geometry import Detection, Septet, angle_soft_nms, corners_from_septet, rotated_iou, septet_from_corners

__version__ = "0.1.0"

__all__ = ["Detection", "Septet", "angle_soft_nms", "corners_from_septet", "rotated_iou", "septet_from_corners"]
