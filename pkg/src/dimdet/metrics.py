"""Detection metrics: matching, precision/recall/F1, average precision.

Matching is greedy per frame in descending score order at a fixed IoU
threshold.  Precision/recall/F1 are reported at a confidence operating point
(0.5 by default), while average precision integrates the monotone precision
envelope over recall across every score cut (all-point interpolation).  With
a single class, mean average precision equals the average precision.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence as Seq

from .head import Detection, iou

__all__ = [
    "FrameMatch",
    "compute_map50",
    "compute_pr_f1",
    "export_pr_curve",
    "match_detections",
    "pr_curve_points",
]


@dataclass(frozen=True)
class FrameMatch:
    """Matching outcome for one frame: per-detection flags plus gt count.

    ``scores`` are descending; ``flags[i]`` says whether detection ``i``
    matched a ground-truth box.  The false-negative count at full recall is
    ``num_gt - sum(flags)``.
    """

    scores: tuple[float, ...]
    flags: tuple[bool, ...]
    num_gt: int

    def __post_init__(self):
        if len(self.scores) != len(self.flags):
            raise ValueError(
                f"{len(self.scores)} scores but {len(self.flags)} flags"
            )
        if sum(self.flags) > min(len(self.flags), self.num_gt):
            raise ValueError("more matches than detections or ground truth")


# a full evaluation is simply the per-frame matches pooled together
MatchResult = Seq[FrameMatch]


def match_detections(
    detections: Seq[Detection],
    gt_boxes: Seq[Seq[float]],
    iou_thresh: float = 0.5,
) -> FrameMatch:
    """Greedily match one frame's detections against its ground truth.

    Detections are visited in descending score order; each one claims the
    highest-IoU still-unmatched box if that IoU reaches ``iou_thresh``,
    otherwise it counts as a false positive.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    taken = [False] * len(gt_boxes)
    scores = []
    flags = []
    for idx in order:
        det = detections[idx]
        best_iou, best_gt = 0.0, -1
        for gi, gt in enumerate(gt_boxes):
            if taken[gi]:
                continue
            v = iou(det.box, gt)
            if v > best_iou:
                best_iou, best_gt = v, gi
        matched = best_iou >= iou_thresh and best_gt >= 0
        if matched:
            taken[best_gt] = True
        scores.append(det.score)
        flags.append(matched)
    return FrameMatch(scores=tuple(scores), flags=tuple(flags), num_gt=len(gt_boxes))


def compute_pr_f1(
    matches: Iterable[FrameMatch], conf_thresh: float = 0.5
) -> tuple[float, float, float]:
    """Precision, recall and F1 counting detections with score >= threshold.

    Conventions for empty denominators: precision is 1 with no detections,
    recall is 1 with no ground truth, and F1 is 0 when both are 0.
    """
    if not 0.0 <= conf_thresh <= 1.0:
        raise ValueError(f"conf_thresh must be in [0, 1], got {conf_thresh}")
    tp = fp = num_gt = 0
    for m in matches:
        num_gt += m.num_gt
        for score, flag in zip(m.scores, m.flags):
            if score >= conf_thresh:
                tp += int(flag)
                fp += int(not flag)
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0
    recall = tp / num_gt if num_gt > 0 else 1.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def _pooled(matches: Iterable[FrameMatch]) -> tuple[list[tuple[float, bool]], int]:
    pairs: list[tuple[float, bool]] = []
    num_gt = 0
    for m in matches:
        num_gt += m.num_gt
        pairs.extend(zip(m.scores, m.flags))
    pairs.sort(key=lambda p: -p[0])
    return pairs, num_gt


def pr_curve_points(matches: Iterable[FrameMatch]) -> list[tuple[float, float, float]]:
    """(recall, precision, envelope precision) at every unique score cut.

    Starts with the (0, 1) anchor.  The envelope column is the running
    maximum of precision from high recall back to low recall, which is what
    average precision integrates.
    """
    pairs, num_gt = _pooled(matches)
    raw: list[tuple[float, float]] = []
    tp = fp = 0
    for i, (score, flag) in enumerate(pairs):
        tp += int(flag)
        fp += int(not flag)
        last_of_cut = i + 1 == len(pairs) or pairs[i + 1][0] != score
        if last_of_cut:
            recall = tp / num_gt if num_gt > 0 else 0.0
            raw.append((recall, tp / (tp + fp)))
    points = [(0.0, 1.0)] + raw
    envelope = [0.0] * len(points)
    best = 0.0
    for i in range(len(points) - 1, -1, -1):
        best = max(best, points[i][1])
        envelope[i] = best
    return [(r, p, e) for (r, p), e in zip(points, envelope)]


def _ap_from_points(points: Seq[tuple[float, float, float]]) -> float:
    ap = 0.0
    for i in range(1, len(points)):
        ap += (points[i][0] - points[i - 1][0]) * points[i][2]
    return ap


def compute_map50(
    detections_per_frame: Seq[Seq[Detection]],
    gts_per_frame: Seq[Seq[Seq[float]]],
    iou_thresh: float = 0.5,
) -> float:
    """Average precision at the given IoU threshold over all frames.

    Frames are matched independently, the scored flags are pooled, and the
    monotone precision envelope is integrated over recall.  Returns 0 when
    there are no detections or no ground truth.
    """
    if len(detections_per_frame) != len(gts_per_frame):
        raise ValueError(
            f"{len(detections_per_frame)} detection frames but "
            f"{len(gts_per_frame)} ground-truth frames"
        )
    matches = [
        match_detections(d, g, iou_thresh)
        for d, g in zip(detections_per_frame, gts_per_frame)
    ]
    return _ap_from_points(pr_curve_points(matches))


def export_pr_curve(
    detections_per_frame: Seq[Seq[Detection]],
    gts_per_frame: Seq[Seq[Seq[float]]],
    path: Path,
    iou_thresh: float = 0.5,
) -> list[tuple[float, float, float]]:
    """Write the PR curve as CSV and return its points.

    Columns: recall, precision, precision_envelope; one row per score cut
    plus the (0, 1) anchor.
    """
    if len(detections_per_frame) != len(gts_per_frame):
        raise ValueError(
            f"{len(detections_per_frame)} detection frames but "
            f"{len(gts_per_frame)} ground-truth frames"
        )
    matches = [
        match_detections(d, g, iou_thresh)
        for d, g in zip(detections_per_frame, gts_per_frame)
    ]
    points = pr_curve_points(matches)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["recall", "precision", "precision_envelope"])
        for r, p, e in points:
            writer.writerow([repr(r), repr(p), repr(e)])
    return points
