"""Channel and spatial attention gates used throughout the network."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .ops import _as_batched

__all__ = ["ChannelAttention", "SpatialAttention", "global_avg_pool"]


def global_avg_pool(x: Tensor) -> Tensor:
    """Average a feature map over its spatial dimensions, keeping channels."""
    if x.dim() < 3:
        raise ValueError(f"expected at least rank 3, got rank {x.dim()}")
    return x.mean(dim=(-2, -1))


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation style channel gate.

    Globally pools the input, pushes the channel descriptor through a
    bottleneck MLP and rescales each channel by a sigmoid gate in (0, 1).
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels % reduction != 0:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.fc1 = nn.Conv2d(channels, hidden, kernel_size=1)
        self.fc2 = nn.Conv2d(hidden, channels, kernel_size=1)

    def gate(self, x: Tensor) -> Tensor:
        """Per-channel gate values, shaped like ``x`` with 1x1 spatial size."""
        xb, squeeze = _as_batched(x, "input")
        s = global_avg_pool(xb)[:, :, None, None]
        g = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return g.squeeze(0) if squeeze else g

    def forward(self, x: Tensor) -> Tensor:
        xb, squeeze = _as_batched(x, "input")
        out = xb * self.gate(xb)
        return out.squeeze(0) if squeeze else out


class SpatialAttention(nn.Module):
    """Spatial gate driven by channel-wise average and max maps."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        self.conv = nn.Conv2d(2, 1, kernel_size=kernel_size, padding=kernel_size // 2)

    def gate(self, x: Tensor) -> Tensor:
        """Per-pixel gate values in (0, 1), single channel."""
        xb, squeeze = _as_batched(x, "input")
        avg = xb.mean(dim=1, keepdim=True)
        mx = xb.max(dim=1, keepdim=True).values
        g = torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))
        return g.squeeze(0) if squeeze else g

    def forward(self, x: Tensor) -> Tensor:
        xb, squeeze = _as_batched(x, "input")
        out = xb * self.gate(xb)
        return out.squeeze(0) if squeeze else out
