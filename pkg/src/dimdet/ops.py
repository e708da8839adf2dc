"""Modulated deformable convolution and bilinear sampling primitives.

These are the low-level building blocks every alignment and refinement stage
sits on.  Two implementations of the deformable convolution are provided:

- :func:`deform_conv2d` is the fast path used by the network.  It is written
  entirely in terms of differentiable torch operations (gather + einsum), so
  autograd supplies exact gradients for the input, weights, offsets and masks.
- :func:`deform_conv2d_reference` is a deliberately naive re-statement of the
  same definition with explicit per-output-pixel, per-tap scalar loops over
  :func:`bilinear_sample`.  It exists purely as an oracle for tests and only
  makes sense for small shapes.

Offset / mask channel layout (also the on-disk convention for checkpoints):
for deform group ``g`` and kernel tap ``k`` (row-major over the kernel
window), offset channel ``2 * (g * K * K + k)`` holds the vertical shift and
channel ``2 * (g * K * K + k) + 1`` the horizontal shift; mask channel
``g * K * K + k`` holds the tap's modulation scalar.  Deform group ``g``
covers input channels ``[g * C / d, (g + 1) * C / d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn


__all__ = [
    "ConvSpec",
    "OffsetField",
    "DeformConv2d",
    "bilinear_sample",
    "deform_conv2d",
    "deform_conv2d_reference",
    "init_conv_layers",
]


def init_conv_layers(module: nn.Module, negative_slope: float = 0.1) -> None:
    """He-initialise every convolution under ``module``.

    The network has no normalisation layers, so activation scale is set
    entirely by the weight initialisation; the default torch gain assumes a
    much steeper slope than LeakyReLU(0.1) and attenuates the signal a little
    at every layer, which adds up badly over a deep stack.  Drawing each
    kernel from the fan-in normal distribution matched to the actual slope
    keeps feature magnitudes steady through depth.  Biases start at zero.
    Callers with special layers (zero offset heads, prior-biased predictors)
    re-apply those after this runs.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(
                m.weight, a=negative_slope, nonlinearity="leaky_relu"
            )
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def bilinear_sample(field, y: float, x: float) -> float:
    """Bilinearly interpolate a 2-D ``field`` at continuous ``(y, x)``.

    Samples outside the field contribute zero (zero padding), so the result
    fades smoothly to 0 as the point leaves the support.  Accepts a torch
    tensor or numpy array of rank 2 and returns a python float.
    """
    if field.ndim != 2:
        raise ValueError(f"bilinear_sample expects a rank-2 field, got rank {field.ndim}")
    h, w = field.shape
    y0 = math.floor(y)
    x0 = math.floor(x)
    fy = y - y0
    fx = x - x0
    total = 0.0
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        yy = y0 + dy
        if wy == 0.0 or yy < 0 or yy > h - 1:
            continue
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xx = x0 + dx
            if wx == 0.0 or xx < 0 or xx > w - 1:
                continue
            total += wy * wx * float(field[yy, xx])
    return total


@dataclass(frozen=True)
class ConvSpec:
    """Weights plus geometry of a modulated deformable 2-D convolution."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    deform_groups: int = 1

    def __post_init__(self):
        if self.weight.dim() != 4:
            raise ValueError(f"weight must have rank 4, got rank {self.weight.dim()}")
        kh, kw = self.weight.shape[2], self.weight.shape[3]
        if kh != kw:
            raise ValueError(f"kernel must be square, got {kh}x{kw}")
        for name in ("stride", "padding", "dilation", "groups", "deform_groups"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < (0 if name == "padding" else 1):
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.out_channels % self.groups != 0:
            raise ValueError(
                f"out_channels {self.out_channels} not divisible by groups {self.groups}"
            )
        if self.in_channels % self.deform_groups != 0:
            raise ValueError(
                f"in_channels {self.in_channels} not divisible by "
                f"deform_groups {self.deform_groups}"
            )
        if self.bias is not None and tuple(self.bias.shape) != (self.out_channels,):
            raise ValueError(
                f"bias shape {tuple(self.bias.shape)} does not match "
                f"out_channels {self.out_channels}"
            )

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def offset_channels(self) -> int:
        return self.deform_groups * 2 * self.kernel_size ** 2

    @property
    def mask_channels(self) -> int:
        return self.deform_groups * self.kernel_size ** 2

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        span = self.dilation * (self.kernel_size - 1) + 1
        oh = (h + 2 * self.padding - span) // self.stride + 1
        ow = (w + 2 * self.padding - span) // self.stride + 1
        if oh <= 0 or ow <= 0:
            raise ValueError(f"input {h}x{w} too small for kernel span {span}")
        return oh, ow


@dataclass(frozen=True)
class OffsetField:
    """Sampling offsets and modulation masks for one deformable convolution.

    ``offsets`` has ``d * 2 * K * K`` channels (vertical/horizontal shift in
    pixels, interleaved per tap) and ``masks`` has ``d * K * K`` channels of
    already-activated modulation scalars; both share the convolution's output
    spatial size.  Either both carry a batch dimension or neither does.
    """

    offsets: Tensor
    masks: Tensor

    def __post_init__(self):
        if self.offsets.dim() not in (3, 4):
            raise ValueError(f"offsets must have rank 3 or 4, got rank {self.offsets.dim()}")
        if self.masks.dim() != self.offsets.dim():
            raise ValueError(
                f"offsets rank {self.offsets.dim()} and masks rank "
                f"{self.masks.dim()} disagree"
            )
        if self.offsets.shape[-2:] != self.masks.shape[-2:]:
            raise ValueError(
                f"offsets spatial size {tuple(self.offsets.shape[-2:])} and "
                f"masks spatial size {tuple(self.masks.shape[-2:])} disagree"
            )
        if self.offsets.shape[-3] != 2 * self.masks.shape[-3]:
            raise ValueError(
                f"offset channels {self.offsets.shape[-3]} must be twice the "
                f"mask channels {self.masks.shape[-3]}"
            )

    def validate_for(self, spec: ConvSpec, oh: int, ow: int) -> None:
        if self.offsets.shape[-3] != spec.offset_channels:
            raise ValueError(
                f"offset channels: expected {spec.offset_channels} "
                f"(= {spec.deform_groups} deform groups * 2 * "
                f"{spec.kernel_size}^2 taps), got {self.offsets.shape[-3]}"
            )
        if self.masks.shape[-3] != spec.mask_channels:
            raise ValueError(
                f"mask channels: expected {spec.mask_channels}, got {self.masks.shape[-3]}"
            )
        if tuple(self.offsets.shape[-2:]) != (oh, ow):
            raise ValueError(
                f"offset field spatial size: expected {oh}x{ow}, "
                f"got {self.offsets.shape[-2]}x{self.offsets.shape[-1]}"
            )


def _as_batched(x: Tensor, name: str) -> tuple[Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"{name} must have rank 3 or 4, got rank {x.dim()}")


def deform_conv2d(input: Tensor, spec: ConvSpec, field: OffsetField) -> Tensor:
    """Modulated deformable convolution, differentiable in all arguments.

    Every kernel tap samples the input bilinearly at its regular grid
    position displaced by the tap's predicted offset, scales the sample by
    the tap's mask, and the taps are then contracted against the weights like
    an ordinary convolution.  Out-of-bounds samples read as zero.
    """
    x, squeeze = _as_batched(input, "input")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input channels: expected {spec.in_channels}, got {c}")
    oh, ow = spec.output_size(h, w)
    field.validate_for(spec, oh, ow)

    offsets, o_unbatched = _as_batched(field.offsets, "offsets")
    masks, m_unbatched = _as_batched(field.masks, "masks")
    if o_unbatched != m_unbatched:
        raise ValueError("offsets and masks must agree on having a batch dimension")
    if o_unbatched and n > 1:
        offsets = offsets.expand(n, -1, -1, -1)
        masks = masks.expand(n, -1, -1, -1)
    if offsets.shape[0] != n:
        raise ValueError(f"offset batch size: expected {n}, got {offsets.shape[0]}")

    k = spec.kernel_size
    k2 = k * k
    d = spec.deform_groups
    dev, dt = x.device, x.dtype

    base_y = (torch.arange(oh, device=dev, dtype=dt) * spec.stride - spec.padding).view(1, 1, 1, oh, 1)
    base_x = (torch.arange(ow, device=dev, dtype=dt) * spec.stride - spec.padding).view(1, 1, 1, 1, ow)
    taps = torch.arange(k, device=dev, dtype=dt) * spec.dilation
    tap_y = taps.repeat_interleave(k).view(1, 1, k2, 1, 1)
    tap_x = taps.repeat(k).view(1, 1, k2, 1, 1)

    off = offsets.view(n, d, k2, 2, oh, ow)
    pos_y = base_y + tap_y + off[:, :, :, 0]
    pos_x = base_x + tap_x + off[:, :, :, 1]

    y0 = pos_y.floor()
    x0 = pos_x.floor()
    fy = pos_y - y0
    fx = pos_x - x0

    cpg = c // d
    x_flat = x.view(n, d, cpg, h * w)
    sampled = None
    for dy, wy in ((0, 1 - fy), (1, fy)):
        yy = y0 + dy
        valid_y = (yy >= 0) & (yy <= h - 1)
        yc = yy.clamp(0, h - 1)
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xx = x0 + dx
            valid = (valid_y & (xx >= 0) & (xx <= w - 1)).to(dt)
            xc = xx.clamp(0, w - 1)
            idx = (yc * w + xc).long().view(n, d, 1, -1).expand(n, d, cpg, k2 * oh * ow)
            corner = x_flat.gather(3, idx).view(n, d, cpg, k2, oh, ow)
            term = corner * (wy * wx * valid).unsqueeze(2)
            sampled = term if sampled is None else sampled + term

    sampled = sampled * masks.view(n, d, 1, k2, oh, ow)
    g = spec.groups
    sampled = sampled.reshape(n, g, c // g, k2, oh, ow)
    weight = spec.weight.view(g, spec.out_channels // g, c // g, k2)
    out = torch.einsum("ngckhw,gock->ngohw", sampled, weight)
    out = out.reshape(n, spec.out_channels, oh, ow)
    if spec.bias is not None:
        out = out + spec.bias.view(1, -1, 1, 1)
    return out.squeeze(0) if squeeze else out


def deform_conv2d_reference(input: Tensor, spec: ConvSpec, field: OffsetField) -> Tensor:
    """Scalar-loop restatement of :func:`deform_conv2d` for verification.

    Walks every output pixel and kernel tap explicitly, sampling through
    :func:`bilinear_sample`.  Runs in float64 regardless of the input dtype
    and is intended only for small shapes in tests.
    """
    x, squeeze = _as_batched(input, "input")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input channels: expected {spec.in_channels}, got {c}")
    oh, ow = spec.output_size(h, w)
    field.validate_for(spec, oh, ow)

    offsets, _ = _as_batched(field.offsets, "offsets")
    masks, _ = _as_batched(field.masks, "masks")
    if offsets.shape[0] == 1 and n > 1:
        offsets = offsets.expand(n, -1, -1, -1)
        masks = masks.expand(n, -1, -1, -1)

    k = spec.kernel_size
    k2 = k * k
    d = spec.deform_groups
    cpg = c // d
    g = spec.groups
    ocg = spec.out_channels // g
    icg = c // g

    x_np = x.detach().cpu().double().numpy()
    off_np = offsets.detach().cpu().double().numpy()
    m_np = masks.detach().cpu().double().numpy()
    w_np = spec.weight.detach().cpu().double().numpy()
    b_np = None if spec.bias is None else spec.bias.detach().cpu().double().numpy()

    out = np.zeros((n, spec.out_channels, oh, ow), dtype=np.float64)
    for b in range(n):
        for gi in range(g):
            for oc_local in range(ocg):
                oc = gi * ocg + oc_local
                for oy in range(oh):
                    for ox in range(ow):
                        acc = 0.0 if b_np is None else float(b_np[oc])
                        for ic_local in range(icg):
                            ic = gi * icg + ic_local
                            dg = ic // cpg
                            plane = x_np[b, ic]
                            for tap in range(k2):
                                ky, kx = divmod(tap, k)
                                py = (
                                    oy * spec.stride - spec.padding + ky * spec.dilation
                                    + off_np[b, 2 * (dg * k2 + tap), oy, ox]
                                )
                                px = (
                                    ox * spec.stride - spec.padding + kx * spec.dilation
                                    + off_np[b, 2 * (dg * k2 + tap) + 1, oy, ox]
                                )
                                acc += (
                                    w_np[oc, ic_local, ky, kx]
                                    * m_np[b, dg * k2 + tap, oy, ox]
                                    * bilinear_sample(plane, py, px)
                                )
                        out[b, oc, oy, ox] = acc
    result = torch.from_numpy(out)
    return result.squeeze(0) if squeeze else result


class DeformConv2d(nn.Module):
    """Modulated deformable convolution layer with learned weights.

    The offsets and masks are supplied per call (predicted by a separate
    head), so the layer itself only owns the convolution weights.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        groups: int = 1,
        deform_groups: int = 1,
        bias: bool = True,
    ):
        super().__init__()
        if in_channels % groups != 0:
            raise ValueError(f"in_channels {in_channels} not divisible by groups {groups}")
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups
        self.deform_groups = deform_groups
        self.weight = nn.Parameter(
            torch.empty(out_channels, in_channels // groups, kernel_size, kernel_size)
        )
        self.bias = nn.Parameter(torch.empty(out_channels)) if bias else None
        self.reset_parameters()

    def reset_parameters(self):
        # Same slope-matched scheme as init_conv_layers: without normalisation
        # layers the weight scale alone decides whether activations survive
        # the depth of the network.
        nn.init.kaiming_normal_(self.weight, a=0.1, nonlinearity="leaky_relu")
        if self.bias is not None:
            nn.init.zeros_(self.bias)

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec(
            weight=self.weight,
            bias=self.bias,
            stride=self.stride,
            padding=self.padding,
            dilation=self.dilation,
            groups=self.groups,
            deform_groups=self.deform_groups,
        )

    def init_identity_(self):
        """Make the layer pass its input through unchanged at zero offsets.

        Requires matching channel counts.  Each output channel gets a single
        unit weight on its own input channel at the kernel centre; useful for
        debugging alignment stages.
        """
        out_c, in_c_per_group, k, _ = self.weight.shape
        if out_c != in_c_per_group * self.groups:
            raise ValueError("identity init needs in_channels == out_channels")
        with torch.no_grad():
            self.weight.zero_()
            centre = k // 2
            per_group = out_c // self.groups
            for oc in range(out_c):
                self.weight[oc, oc % per_group, centre, centre] = 1.0
            if self.bias is not None:
                self.bias.zero_()
        return self

    def forward(self, x: Tensor, field: OffsetField) -> Tensor:
        return deform_conv2d(x, self.spec, field)

    def extra_repr(self) -> str:
        w = self.weight.shape
        return (
            f"{w[1] * self.groups}, {w[0]}, kernel_size={w[2]}, stride={self.stride}, "
            f"padding={self.padding}, dilation={self.dilation}, groups={self.groups}, "
            f"deform_groups={self.deform_groups}"
        )
