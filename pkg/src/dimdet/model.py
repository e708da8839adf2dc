"""Full detector: backbone, temporal alignment, refinement, detection head."""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import Tensor, nn

from .align import TemporalAlignment
from .backbone import Backbone
from .config import TrainConfig
from .head import DetectionHead, HeadOutput
from .ops import init_conv_layers
from .refine import FeatureRefinement

__all__ = ["ModelOutputs", "VideoDetector"]


class ModelOutputs(NamedTuple):
    """Everything downstream consumers need from one forward pass."""

    head: HeadOutput
    aligned: list[Tensor]
    reference: Tensor
    features: Tensor


class VideoDetector(nn.Module):
    """Clip-in, detections-out network for dim moving targets.

    Every frame runs through a shared backbone; the adjacent frames are
    warped onto the centre frame by the alignment stage; the clip is fused
    and refined into a single feature map; and an anchor-free head predicts
    one box per stride-8 cell.  The config's ablation switches replace the
    alignment stage with identity and the refinement stage with a single
    fusion convolution.
    """

    def __init__(self, config: TrainConfig | None = None):
        super().__init__()
        self.config = config = config or TrainConfig()
        c = config.feature_channels
        self.backbone = Backbone(
            in_channels=1, hidden_channels=config.backbone_channels, out_channels=c
        )
        self.align = (
            TemporalAlignment(
                channels=c,
                num_blocks=config.dcaf_blocks,
                deform_groups=config.align_deform_groups,
            )
            if config.use_tda
            else None
        )
        if config.use_fr:
            self.refine = FeatureRefinement(
                channels=c,
                num_frames=config.num_frames,
                num_blocks=config.agdf_blocks,
                deform_groups=config.refine_deform_groups,
                use_adaptive_fusion=config.use_afs,
                use_agdf=config.use_agdf,
            )
            self.fuse = None
            head_in = c
        else:
            self.refine = None
            stack = config.num_frames * c
            self.fuse = nn.Sequential(
                nn.Conv2d(stack, stack, 3, padding=1),
                nn.LeakyReLU(0.1, inplace=True),
            )
            init_conv_layers(self.fuse)
            head_in = stack
        self.head = DetectionHead(in_channels=head_in, width=c)

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def forward(self, clips: Tensor) -> ModelOutputs:
        """Run a batch of clips shaped ``(n, T, 1, H, W)``."""
        if clips.dim() == 4:
            clips = clips.unsqueeze(0)
        if clips.dim() != 5:
            raise ValueError(f"clips must have rank 4 or 5, got rank {clips.dim()}")
        t = clips.shape[1]
        if t != self.config.num_frames:
            raise ValueError(
                f"clip length {t} does not match configured num_frames "
                f"{self.config.num_frames}"
            )
        feats = self.backbone.extract_features(clips)
        centre = t // 2
        reference = feats[:, centre]
        adjacent = [feats[:, i] for i in range(t) if i != centre]
        if self.align is not None:
            aligned = [self.align(f, reference) for f in adjacent]
        else:
            aligned = adjacent
        if self.refine is not None:
            fused = self.refine(aligned, reference)
        else:
            r = centre
            frames = aligned[:r] + [reference] + aligned[r:]
            fused = self.fuse(torch.cat(frames, dim=1))
        return ModelOutputs(
            head=self.head(fused),
            aligned=aligned,
            reference=reference,
            features=feats,
        )
