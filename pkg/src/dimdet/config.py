"""Training configuration with YAML load/save."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

__all__ = ["TrainConfig", "load_config", "save_config"]


@dataclass
class TrainConfig:
    """Reference training configuration for the detector.

    Clip length is ``num_frames = 2R + 1`` with the detected frame in the
    middle.  The ablation switches cut the pipeline down to its controls:
    ``use_tda`` toggles temporal alignment, ``use_mc_loss`` the alignment
    supervision, ``use_fr`` the whole refinement stage (falling back to one
    3x3 fusion convolution over the concatenated frames), and ``use_afs`` /
    ``use_agdf`` the two halves of the refinement stage individually.
    """

    num_frames: int = 5
    input_size: int = 544
    batch_size: int = 4
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    lambda_reg: float = 5.0
    eta_mc: float = 1.0
    align_deform_groups: int = 8
    refine_deform_groups: int = 32
    dcaf_blocks: int = 4
    agdf_blocks: int = 4
    feature_channels: int = 64
    backbone_channels: int = 48
    use_tda: bool = True
    use_mc_loss: bool = True
    use_fr: bool = True
    use_afs: bool = True
    use_agdf: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_frames < 3 or self.num_frames % 2 == 0:
            raise ValueError(f"num_frames must be odd and >= 3, got {self.num_frames}")
        if self.input_size <= 0 or self.input_size % 8 != 0:
            raise ValueError(
                f"input_size must be a positive multiple of 8, got {self.input_size}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lambda_reg < 0 or self.eta_mc < 0:
            raise ValueError("loss weights must be non-negative")
        if self.use_mc_loss and not self.use_tda:
            raise ValueError(
                "the motion-compensation loss supervises the alignment stage; "
                "disabling alignment (use_tda=False) requires use_mc_loss=False"
            )

    @property
    def radius(self) -> int:
        return self.num_frames // 2


def save_config(config: TrainConfig, path: Path) -> None:
    """Write the config as a YAML mapping."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(asdict(config), fh, sort_keys=False)


def load_config(path: Path) -> TrainConfig:
    """Read a YAML mapping into a :class:`TrainConfig`.

    Unknown keys are an error; missing keys keep their defaults.
    """
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping of config fields")
    valid = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - valid)
    if unknown:
        raise ValueError(f"{path}: unknown config fields {unknown}")
    return TrainConfig(**raw)
