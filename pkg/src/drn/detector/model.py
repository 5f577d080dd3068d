import torch.nn as nn

from ..fsm import FeatureSelectionModule, FsmConfig
from ..heads import DRHC, DRHR, HeadConfig, PlainHead
from .backbone import HourglassBackbone
from .config import ModelConfig

HEAD_ARITY = {"size": 2, "offset": 2, "angle": 1}
HEATMAP_PRIOR = -2.19  # sigmoid(-2.19) ~ 0.1


class OrientedCenterNet(nn.Module):
    """CenterNet with an angle head, optionally extended with FSM and dynamic refinement heads.

    The angle head reads the backbone features directly; its output (or the
    target angle field while training) steers the rotation convolutions in
    the FSM, whose output feeds the heatmap, size and offset heads.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.width
        self.backbone = HourglassBackbone(config.width, config.levels, config.stride)
        head_cfg = HeadConfig(mid_channels=config.mid_channels, groups=config.dynamic_groups,
                              eps_cls=config.eps_cls, eps_reg=config.eps_reg)
        self.fsm = None
        if config.use_fsm:
            self.fsm = FeatureSelectionModule(
                FsmConfig(c, config.fsm_ratio, list(config.fsm_branches)),
                angle_source="target" if config.angle_source == "target" else "predicted")
        if config.use_drhc:
            self.heatmap = DRHC(c, config.num_classes, head_cfg, bias_init=HEATMAP_PRIOR)
        else:
            self.heatmap = PlainHead(c, config.num_classes, head_cfg, bias_init=HEATMAP_PRIOR)
        self.regression = nn.ModuleDict()
        for name, arity in HEAD_ARITY.items():
            cls = DRHR if name in config.drhr_heads else PlainHead
            self.regression[name] = cls(c, arity, head_cfg)

    def rcl_angles(self, predicted, targets):
        src = self.config.angle_source
        use_target = src == "target" or (src == "auto" and self.training)
        if use_target and targets is not None and "angle_field" in targets:
            return targets["angle_field"].to(predicted.dtype)
        return predicted

    def forward(self, image, targets=None):
        feat = self.backbone(image)
        angle = self.regression["angle"](feat)
        if self.fsm is not None:
            feat = self.fsm(feat, self.rcl_angles(angle, targets))
        return {
            "heatmap": self.heatmap(feat),
            "size": self.regression["size"](feat),
            "offset": self.regression["offset"](feat),
            "angle": angle,
        }


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def parameter_report(config: ModelConfig):
    """Parameter counts per component for a config (built on the fly)."""
    model = OrientedCenterNet(config)
    report = {"total": count_parameters(model), "backbone": count_parameters(model.backbone),
              "fsm": count_parameters(model.fsm) if model.fsm is not None else 0,
              "heatmap": count_parameters(model.heatmap)}
    for name, head in model.regression.items():
        report[name] = count_parameters(head)
    return report
