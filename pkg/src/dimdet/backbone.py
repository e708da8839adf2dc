"""Shared per-frame feature extractor.

Every frame of a clip passes through the same stack of plain convolutions,
organised as three stages that each halve the spatial resolution, so a
``HxW`` frame comes out as a feature map of size ``H/8 x W/8``.
"""

from __future__ import annotations

from torch import Tensor, nn

from .ops import init_conv_layers

__all__ = ["Backbone"]


class Backbone(nn.Module):
    """Three-stage strided convolutional encoder applied frame by frame."""

    #: total spatial downsampling factor
    stride = 8

    def __init__(
        self,
        in_channels: int = 1,
        hidden_channels: int = 48,
        out_channels: int = 64,
        negative_slope: float = 0.1,
    ):
        super().__init__()
        act = lambda: nn.LeakyReLU(negative_slope, inplace=True)
        c = hidden_channels
        self.stages = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, stride=1, padding=1), act(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), act(),
            nn.Conv2d(c, c, 3, stride=1, padding=1), act(),
            nn.Conv2d(c, c, 3, stride=2, padding=1), act(),
            nn.Conv2d(c, c, 3, stride=1, padding=1), act(),
            nn.Conv2d(c, out_channels, 3, stride=2, padding=1), act(),
        )
        init_conv_layers(self, negative_slope)
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        """Encode a batch of frames ``(n, c, H, W)`` to ``(n, c', H/8, W/8)``."""
        h, w = x.shape[-2], x.shape[-1]
        if h % self.stride or w % self.stride:
            raise ValueError(
                f"frame size {h}x{w} is not divisible by {self.stride}; resize required"
            )
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        out = self.stages(x)
        return out.squeeze(0) if squeeze else out

    def extract_features(self, clip: Tensor) -> Tensor:
        """Encode every frame of a clip with shared weights.

        Accepts ``(n, T, c, H, W)`` or ``(T, c, H, W)`` and returns a tensor
        of matching rank with per-frame feature maps.
        """
        squeeze = clip.dim() == 4
        if squeeze:
            clip = clip.unsqueeze(0)
        if clip.dim() != 5:
            raise ValueError(f"clip must have rank 4 or 5, got rank {clip.dim()}")
        n, t = clip.shape[0], clip.shape[1]
        flat = clip.reshape(n * t, *clip.shape[2:])
        feats = self.forward(flat)
        feats = feats.reshape(n, t, *feats.shape[1:])
        return feats.squeeze(0) if squeeze else feats
