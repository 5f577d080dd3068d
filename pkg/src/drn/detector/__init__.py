from .config import ABLATIONS, ModelConfig
from .decode import decode
from .losses import focal_loss, loss_angle, loss_total, masked_l1
from .model import OrientedCenterNet, count_parameters, parameter_report
from .targets import TargetMaps, build_targets, collate_targets, targets_as_prediction

__all__ = [
    "ABLATIONS", "ModelConfig", "OrientedCenterNet", "TargetMaps", "build_targets", "collate_targets",
    "count_parameters", "decode", "focal_loss", "loss_angle", "loss_total", "masked_l1", "parameter_report",
    "targets_as_prediction",
]
