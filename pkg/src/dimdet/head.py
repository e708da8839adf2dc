"""Anchor-free single-class detection head and its geometry helpers.

Each cell of the stride-8 feature grid predicts an objectness logit, a class
logit and four log-scale distances from the cell centre to the box sides.
Decoding, IoU, greedy NMS, training-target assignment and the per-image
detection losses all live here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .ops import init_conv_layers

__all__ = [
    "Assignment",
    "Detection",
    "DetectionHead",
    "HeadOutput",
    "assign_targets",
    "decode",
    "decode_boxes",
    "detection_loss",
    "iou",
    "nms",
]

#: objectness bias prior; sigmoid of this is roughly 0.01, so an untrained
#: head predicts almost everything as background
PRIOR_LOGIT = -4.59


@dataclass(frozen=True)
class Detection:
    """One decoded box in pixel coordinates with a confidence score."""

    box: tuple[float, float, float, float]
    score: float
    class_id: int = 0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}: x1 < x2 and y1 < y2 required")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


class HeadOutput(NamedTuple):
    """Raw head logits: class, objectness and box-regression maps."""

    cls_map: Tensor
    obj_map: Tensor
    reg_map: Tensor

    def split(self) -> list["HeadOutput"]:
        """Split a batched output into per-image outputs."""
        if self.cls_map.dim() != 4:
            raise ValueError("split expects batched maps of rank 4")
        return [
            HeadOutput(self.cls_map[i], self.obj_map[i], self.reg_map[i])
            for i in range(self.cls_map.shape[0])
        ]


class DetectionHead(nn.Module):
    """Decoupled classification / regression head over a single feature level."""

    def __init__(self, in_channels: int = 64, width: int = 64, negative_slope: float = 0.1):
        super().__init__()
        act = lambda: nn.LeakyReLU(negative_slope, inplace=True)
        self.stem = nn.Sequential(nn.Conv2d(in_channels, width, 1), act())
        self.cls_branch = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1), act(),
            nn.Conv2d(width, width, 3, padding=1), act(),
        )
        self.reg_branch = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1), act(),
            nn.Conv2d(width, width, 3, padding=1), act(),
        )
        self.cls_pred = nn.Conv2d(width, 1, 1)
        self.obj_pred = nn.Conv2d(width, 1, 1)
        self.reg_pred = nn.Conv2d(width, 4, 1)
        init_conv_layers(self, negative_slope)
        for pred in (self.cls_pred, self.obj_pred, self.reg_pred):
            nn.init.zeros_(pred.weight)
            nn.init.zeros_(pred.bias)
        nn.init.constant_(self.obj_pred.bias, PRIOR_LOGIT)

    def forward(self, x: Tensor) -> HeadOutput:
        y = self.stem(x)
        c = self.cls_branch(y)
        r = self.reg_branch(y)
        return HeadOutput(
            cls_map=self.cls_pred(c),
            obj_map=self.obj_pred(r),
            reg_map=self.reg_pred(r),
        )


def grid_centers(grid_hw: tuple[int, int], stride: int = 8, **tensor_kwargs) -> tuple[Tensor, Tensor]:
    """Pixel coordinates of every cell centre, as ``(cy, cx)`` maps."""
    h, w = grid_hw
    cy = (torch.arange(h, **tensor_kwargs) + 0.5) * stride
    cx = (torch.arange(w, **tensor_kwargs) + 0.5) * stride
    return cy.view(h, 1).expand(h, w), cx.view(1, w).expand(h, w)


def decode_boxes(ltrb: Tensor, stride: int = 8) -> Tensor:
    """Convert per-cell ltrb side distances (in stride units) to pixel boxes.

    ``ltrb`` is ``(4, h, w)``; the result is ``(4, h, w)`` holding
    ``(x1, y1, x2, y2)`` per cell.
    """
    if ltrb.dim() != 3 or ltrb.shape[0] != 4:
        raise ValueError(f"ltrb must be (4, h, w), got {tuple(ltrb.shape)}")
    cy, cx = grid_centers(ltrb.shape[-2:], stride, device=ltrb.device, dtype=ltrb.dtype)
    l, t, r, b = ltrb[0], ltrb[1], ltrb[2], ltrb[3]
    return torch.stack(
        [cx - l * stride, cy - t * stride, cx + r * stride, cy + b * stride]
    )


def decode(out: HeadOutput, stride: int = 8, conf_thresh: float = 0.25) -> list[Detection]:
    """Decode one image's head output into scored detections.

    The confidence is the product of the objectness and class sigmoids; cells
    below ``conf_thresh`` are dropped.  Detections are emitted in row-major
    grid order.
    """
    if out.cls_map.dim() != 3:
        raise ValueError("decode expects a single image's maps of rank 3")
    score = (torch.sigmoid(out.obj_map[0]) * torch.sigmoid(out.cls_map[0])).detach()
    boxes = decode_boxes(torch.exp(out.reg_map.detach()), stride)
    h, w = score.shape
    keep = score >= conf_thresh
    dets = []
    for i, j in zip(*torch.nonzero(keep, as_tuple=True)):
        x1, y1, x2, y2 = (float(boxes[c, i, j]) for c in range(4))
        dets.append(Detection(box=(x1, y1, x2, y2), score=float(score[i, j])))
    return dets


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    if area_a <= 0.0 or area_b <= 0.0:
        warnings.warn("IoU of a degenerate (zero-area) box is defined as 0", stacklevel=2)
        return 0.0
    ix = min(ax2, bx2) - max(ax1, bx1)
    iy = min(ay2, by2) - max(ay1, by1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (area_a + area_b - inter)


def nms(detections: Sequence[Detection], iou_thresh: float = 0.65) -> list[Detection]:
    """Greedy non-maximum suppression, highest score first.

    Ties on score keep the original relative order, so the result is
    deterministic for deterministic input order.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept: list[Detection] = []
    for idx in order:
        cand = detections[idx]
        if all(iou(cand.box, k.box) <= iou_thresh for k in kept):
            kept.append(cand)
    return kept


class Assignment(NamedTuple):
    """Training targets for one image on one feature grid.

    ``pos_mask`` flags cells responsible for a target; ``ltrb`` holds the
    regression targets in stride units (only meaningful at positives) and
    ``gt_index`` the index of the assigned box per positive cell.
    """

    pos_mask: Tensor
    ltrb: Tensor
    gt_index: Tensor
    boxes: Tensor


def assign_targets(
    gt_boxes: Sequence[Sequence[float]],
    grid_hw: tuple[int, int],
    stride: int = 8,
    center_radius: float = 1.5,
) -> Assignment:
    """Mark the grid cells responsible for each ground-truth box.

    A cell is positive for a box if its centre falls inside the box
    (half-open on the far edges) or within ``center_radius`` cells of the box
    centre in both axes.  Cells claimed by several boxes go to the smallest
    box; equal areas resolve to the lowest box index.
    """
    h, w = grid_hw
    boxes = torch.as_tensor(
        [list(map(float, b)) for b in gt_boxes], dtype=torch.float64
    ).reshape(-1, 4)
    img_w, img_h = w * stride, h * stride
    clipped = boxes.clone()
    if boxes.numel():
        clipped[:, 0::2] = boxes[:, 0::2].clamp(0.0, float(img_w))
        clipped[:, 1::2] = boxes[:, 1::2].clamp(0.0, float(img_h))
        if not torch.equal(clipped, boxes):
            warnings.warn(
                f"ground-truth box outside the {img_w}x{img_h} image was clipped",
                stacklevel=2,
            )
    pos = torch.zeros(h, w, dtype=torch.bool)
    gt_index = torch.full((h, w), -1, dtype=torch.long)
    ltrb = torch.zeros(4, h, w, dtype=torch.float64)
    cy, cx = grid_centers(grid_hw, stride, dtype=torch.float64)

    areas = [
        (float((b[2] - b[0]).clamp(min=0) * (b[3] - b[1]).clamp(min=0)), i)
        for i, b in enumerate(clipped)
    ]
    # write larger boxes first so the smallest box wins contested cells;
    # reversed (area, index) order makes the lowest index win exact ties
    for _, gi in sorted(areas, key=lambda t: (t[0], t[1]), reverse=True):
        x1, y1, x2, y2 = (float(v) for v in clipped[gi])
        if x2 <= x1 or y2 <= y1:
            continue
        gcx, gcy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        inside = (cx >= x1) & (cx < x2) & (cy >= y1) & (cy < y2)
        near = (
            ((cx - gcx).abs() <= center_radius * stride)
            & ((cy - gcy).abs() <= center_radius * stride)
        )
        cells = inside | near
        pos |= cells
        gt_index[cells] = gi
        ltrb[0][cells] = (cx[cells] - x1) / stride
        ltrb[1][cells] = (cy[cells] - y1) / stride
        ltrb[2][cells] = (x2 - cx[cells]) / stride
        ltrb[3][cells] = (y2 - cy[cells]) / stride
    return Assignment(pos_mask=pos, ltrb=ltrb, gt_index=gt_index, boxes=clipped)


def _pairwise_iou(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable IoU of aligned box tensors shaped ``(n, 4)``."""
    ix = torch.minimum(a[:, 2], b[:, 2]) - torch.maximum(a[:, 0], b[:, 0])
    iy = torch.minimum(a[:, 3], b[:, 3]) - torch.maximum(a[:, 1], b[:, 1])
    inter = ix.clamp(min=0) * iy.clamp(min=0)
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    union = area_a + area_b - inter
    return inter / union.clamp(min=1e-12)


def detection_loss(
    out: HeadOutput, assignment: Assignment, stride: int = 8
) -> tuple[Tensor, Tensor, Tensor]:
    """Per-image regression, classification and objectness losses.

    Regression is mean ``1 - IoU`` between decoded and target boxes over
    positive cells and classification is mean binary cross entropy against 1
    at positive cells; both are zero when the image has no positives.
    Objectness is binary cross entropy against the positive mask summed over
    every cell and normalised by the positive count (at least 1), so the
    training signal at the handful of target cells is not diluted by the
    sea of background cells.
    """
    if out.cls_map.dim() != 3:
        raise ValueError("detection_loss expects a single image's maps of rank 3")
    pos = assignment.pos_mask
    if pos.shape != out.obj_map.shape[-2:]:
        raise ValueError(
            f"assignment grid {tuple(pos.shape)} does not match "
            f"head grid {tuple(out.obj_map.shape[-2:])}"
        )
    dtype = out.obj_map.dtype
    obj_target = pos.to(dtype)
    num_pos = max(int(pos.sum()), 1)
    l_obj = (
        F.binary_cross_entropy_with_logits(out.obj_map[0], obj_target, reduction="sum")
        / num_pos
    )
    if pos.any():
        pred_boxes = decode_boxes(torch.exp(out.reg_map), stride)
        tgt_boxes = decode_boxes(assignment.ltrb.to(dtype), stride)
        pb = pred_boxes.permute(1, 2, 0)[pos]
        tb = tgt_boxes.permute(1, 2, 0)[pos]
        l_reg = (1.0 - _pairwise_iou(pb, tb)).mean()
        l_cls = F.binary_cross_entropy_with_logits(
            out.cls_map[0][pos], torch.ones_like(out.cls_map[0][pos])
        )
    else:
        l_reg = out.reg_map.sum() * 0.0
        l_cls = out.cls_map.sum() * 0.0
    return l_reg, l_cls, l_obj
