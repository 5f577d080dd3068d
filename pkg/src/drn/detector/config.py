from dataclasses import asdict, dataclass, fields
from typing import Optional, Tuple

ABLATIONS = {
    "baseline": dict(use_fsm=False, use_drhc=False, drhr_heads=()),
    "fsm": dict(use_fsm=True, use_drhc=False, drhr_heads=()),
    "fsm+drhc": dict(use_fsm=True, use_drhc=True, drhr_heads=()),
    "full": dict(use_fsm=True, use_drhc=True, drhr_heads=("size",)),
}

REGRESSION_HEADS = ("size", "offset", "angle")


@dataclass
class ModelConfig:
    input_size: int = 256
    stride: int = 4
    width: int = 64
    levels: int = 3
    num_classes: int = 1
    head_channels: Optional[int] = None  # defaults to width
    use_fsm: bool = True
    use_drhc: bool = True
    drhr_heads: Tuple[str, ...] = ("size",)
    fsm_ratio: int = 4
    fsm_branches: Tuple[Tuple[int, int], ...] = ((3, 3), (1, 3), (3, 1))
    dynamic_groups: int = 16
    eps_cls: float = 0.1
    eps_reg: float = 0.1
    # where the rotation conv reads its angles: "auto" uses target angles while
    # training and predicted ones otherwise
    angle_source: str = "auto"
    lambda_size: float = 0.1
    lambda_off: float = 0.1
    lambda_ang: float = 0.1
    top_k: int = 300
    score_floor: Optional[float] = None

    def __post_init__(self):
        self.drhr_heads = tuple(self.drhr_heads)
        self.fsm_branches = tuple(tuple(b) for b in self.fsm_branches)
        if self.stride < 2 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two >= 2, got {self.stride}")
        if self.input_size % (self.stride * 2 ** self.levels):
            raise ValueError(
                f"input size {self.input_size} must be divisible by stride * 2**levels = {self.stride * 2 ** self.levels}")
        for name in ("lambda_size", "lambda_off", "lambda_ang"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        unknown = set(self.drhr_heads) - set(REGRESSION_HEADS)
        if unknown:
            raise ValueError(f"unknown regression heads for DRH-R: {sorted(unknown)}")
        if self.angle_source not in ("auto", "target", "predicted"):
            raise ValueError(f"angle_source must be auto/target/predicted, got {self.angle_source!r}")
        if self.num_classes < 1 or self.top_k < 1:
            raise ValueError("num_classes and top_k must be positive")

    @property
    def output_size(self):
        return self.input_size // self.stride

    @property
    def mid_channels(self):
        return self.head_channels or self.width

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["drhr_heads"] = list(self.drhr_heads)
        d["fsm_branches"] = [list(b) for b in self.fsm_branches]
        return d

    def with_ablation(self, name):
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        d = self.to_dict()
        d.update(ABLATIONS[name])
        return ModelConfig.from_dict(d)
