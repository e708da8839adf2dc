"""Deformable temporal alignment of adjacent-frame features.

Adjacent frames drift relative to the reference (centre) frame of a clip.
This stage predicts per-pixel sampling offsets and modulation masks from the
pair of feature maps and warps the adjacent frame's features onto the
reference frame with a modulated deformable convolution.  One module instance
is shared across all adjacent frames of a clip.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .attention import ChannelAttention
from .ops import DeformConv2d, OffsetField, init_conv_layers

__all__ = ["DcafBlock", "TemporalAlignment"]


class DcafBlock(nn.Module):
    """Dilated-convolution block with channel attention and a scaled residual.

    A halving 3x3 convolution feeds four parallel 3x3 branches of increasing
    dilation.  Each branch's output is accumulated onto the next (so later
    branches see the earlier context), the branch outputs are concatenated
    together with the block input, gated by channel attention, fused back to
    the input width by a 1x1 convolution and added as a scaled residual.
    """

    def __init__(
        self,
        channels: int = 64,
        dilations: tuple[int, ...] = (1, 2, 3, 4),
        reduction: int = 4,
        residual_scale: float = 0.2,
        negative_slope: float = 0.1,
    ):
        super().__init__()
        if channels % 2 != 0:
            raise ValueError(f"channels must be even, got {channels}")
        half = channels // 2
        self.reduce = nn.Conv2d(channels, half, 3, padding=1)
        self.branches = nn.ModuleList(
            nn.Conv2d(half, half, 3, padding=d, dilation=d) for d in dilations
        )
        cat_channels = half * len(dilations) + channels
        self.attention = ChannelAttention(cat_channels, reduction)
        self.fuse = nn.Conv2d(cat_channels, channels, 1)
        self.act = nn.LeakyReLU(negative_slope, inplace=True)
        self.residual_scale = residual_scale
        init_conv_layers(self, negative_slope)

    def forward(self, x: Tensor) -> Tensor:
        y = self.act(self.reduce(x))
        outs = []
        acc = None
        for conv in self.branches:
            b = self.act(conv(y))
            acc = b if acc is None else b + acc
            outs.append(acc)
        z = torch.cat(outs + [x], dim=-3)
        z = self.attention(z)
        z = self.fuse(z)
        return x + self.residual_scale * z


class TemporalAlignment(nn.Module):
    """Warp an adjacent frame's features onto the reference frame.

    The reference and adjacent feature maps are concatenated, merged by a 3x3
    convolution and refined by a stack of :class:`DcafBlock`.  A final 3x3
    head predicts the deformable sampling offsets and sigmoid masks, which
    drive a grouped deformable convolution over the adjacent features.  The
    offset head is zero-initialised, so training starts from plain (masked)
    convolution behaviour instead of wild sampling.
    """

    def __init__(
        self,
        channels: int = 64,
        num_blocks: int = 4,
        deform_groups: int = 8,
        kernel_size: int = 3,
        residual_scale: float = 0.2,
        negative_slope: float = 0.1,
    ):
        super().__init__()
        self.channels = channels
        self.deform_groups = deform_groups
        self.kernel_size = kernel_size
        self.merge = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.blocks = nn.Sequential(
            *[DcafBlock(channels, residual_scale=residual_scale) for _ in range(num_blocks)]
        )
        k2 = kernel_size ** 2
        self.offset_channels = deform_groups * 2 * k2
        self.mask_channels = deform_groups * k2
        self.param_head = nn.Conv2d(
            channels, self.offset_channels + self.mask_channels, 3, padding=1
        )
        self.deform = DeformConv2d(
            channels,
            channels,
            kernel_size,
            padding=kernel_size // 2,
            deform_groups=deform_groups,
        )
        self.act = nn.LeakyReLU(negative_slope, inplace=True)
        init_conv_layers(self.merge, negative_slope)
        nn.init.zeros_(self.param_head.weight)
        nn.init.zeros_(self.param_head.bias)
        # The zero-initialised head leaves the sigmoid masks at 1/2, which
        # halves every deformable tap on the first forward passes; fold the
        # inverse into the warp weights so feature scale survives this stage.
        with torch.no_grad():
            self.deform.weight.mul_(2.0)

    def predict_params(self, adjacent: Tensor, reference: Tensor) -> OffsetField:
        """Predict sampling offsets and masks for warping ``adjacent``."""
        if adjacent.shape != reference.shape:
            raise ValueError(
                f"adjacent shape {tuple(adjacent.shape)} and reference shape "
                f"{tuple(reference.shape)} disagree"
            )
        z = self.act(self.merge(torch.cat([reference, adjacent], dim=-3)))
        z = self.blocks(z)
        raw = self.param_head(z)
        offsets = raw[..., : self.offset_channels, :, :]
        masks = torch.sigmoid(raw[..., self.offset_channels :, :, :])
        return OffsetField(offsets=offsets, masks=masks)

    def align_frame(self, adjacent: Tensor, reference: Tensor) -> Tensor:
        """Warp one adjacent feature map onto the reference frame."""
        field = self.predict_params(adjacent, reference)
        return self.deform(adjacent, field)

    def align_clip(self, features: list[Tensor], target_index: int) -> list[Tensor]:
        """Align every non-reference feature map in temporal order."""
        if not 0 <= target_index < len(features):
            raise ValueError(
                f"target_index {target_index} out of range for {len(features)} frames"
            )
        reference = features[target_index]
        return [
            self.align_frame(f, reference)
            for i, f in enumerate(features)
            if i != target_index
        ]

    def init_identity_(self):
        """Configure the warp to pass features through unchanged.

        Zeroes the offset head (already zero at construction) and loads an
        identity kernel into the deformable convolution.  With sigmoid masks
        at 0.5 the output is then exactly half the input, which preserves
        spatial structure for debugging and visual checks.
        """
        nn.init.zeros_(self.param_head.weight)
        nn.init.zeros_(self.param_head.bias)
        self.deform.init_identity_()
        return self

    def forward(self, adjacent: Tensor, reference: Tensor) -> Tensor:
        return self.align_frame(adjacent, reference)
