"""Whole-sequence inference and the plain-text detections format.

Each line of a detections file is

    <sequence_id> <frame_index> <x1> <y1> <x2> <y2> <score>

with box coordinates in the sequence's original resolution.  Lines appear in
sequence order, then frame order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence as Seq

import torch

from .data import Box, Sequence, clip_to_tensor, resize_clip, sample_clip
from .head import Detection, decode, nms
from .model import VideoDetector

__all__ = [
    "DetectionRecord",
    "load_detections",
    "records_to_detections",
    "run_inference",
    "save_detections",
]

CONF_THRESH = 0.25
NMS_IOU = 0.65


@dataclass(frozen=True)
class DetectionRecord:
    """One detection tied to its sequence and frame."""

    sequence_id: str
    frame_index: int
    box: Box
    score: float


def run_inference(
    model: VideoDetector,
    sequences: Seq[Sequence],
    conf_thresh: float = CONF_THRESH,
    nms_iou: float = NMS_IOU,
    device: str = "cpu",
    batch_size: int = 8,
    clip_log: list | None = None,
) -> list[DetectionRecord]:
    """Detect on every frame of every sequence.

    Clips are built with target-frame padding at the sequence boundaries,
    resized to the model's input size, decoded at ``conf_thresh`` and pruned
    by NMS; the surviving boxes are mapped back to original coordinates.
    Pass ``clip_log`` to record ``(sequence_id, frame, source_indices)`` for
    every clip, which makes the boundary padding observable.
    """
    cfg = model.config
    dev = torch.device(device)
    model = model.to(dev)
    model.eval()
    records: list[DetectionRecord] = []
    with torch.no_grad():
        for seq in sequences:
            sx = seq.width / cfg.input_size
            sy = seq.height / cfg.input_size
            pending: list[tuple[int, torch.Tensor]] = []

            def flush():
                if not pending:
                    return
                clips = torch.stack([c for _, c in pending]).to(dev)
                outputs = model(clips)
                for (t, _), out in zip(pending, outputs.head.split()):
                    dets = nms(decode(out, model.stride, conf_thresh), nms_iou)
                    for d in dets:
                        x1, y1, x2, y2 = d.box
                        records.append(
                            DetectionRecord(
                                sequence_id=seq.id,
                                frame_index=t,
                                box=(x1 * sx, y1 * sy, x2 * sx, y2 * sy),
                                score=d.score,
                            )
                        )
                pending.clear()

            for t in range(len(seq)):
                clip = sample_clip(seq, t, cfg.radius)
                if clip_log is not None:
                    clip_log.append((seq.id, t, list(clip.source_indices)))
                clip = resize_clip(clip, cfg.input_size)
                pending.append((t, clip_to_tensor(clip)))
                if len(pending) >= batch_size:
                    flush()
            flush()
    return records


def save_detections(records: Seq[DetectionRecord], path: Path) -> Path:
    """Write records in the one-line-per-detection text format."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            if any(ch.isspace() for ch in r.sequence_id):
                raise ValueError(
                    f"sequence id {r.sequence_id!r} contains whitespace; "
                    "the detections format is space-separated"
                )
            x1, y1, x2, y2 = r.box
            fh.write(
                f"{r.sequence_id} {r.frame_index} "
                f"{x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f} {r.score:.6f}\n"
            )
    return path


def load_detections(path: Path) -> list[DetectionRecord]:
    """Parse a detections file, validating every line."""
    records: list[DetectionRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(
                    f"{path}:{line_no}: expected 7 fields, got {len(parts)}"
                )
            try:
                frame = int(parts[1])
                x1, y1, x2, y2, score = (float(v) for v in parts[2:7])
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: malformed numbers") from exc
            if not (x1 < x2 and y1 < y2):
                raise ValueError(f"{path}:{line_no}: degenerate box")
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"{path}:{line_no}: score {score} outside [0, 1]")
            records.append(
                DetectionRecord(
                    sequence_id=parts[0],
                    frame_index=frame,
                    box=(x1, y1, x2, y2),
                    score=score,
                )
            )
    return records


def records_to_detections(records: Seq[DetectionRecord]) -> list[Detection]:
    """Convert file records to scored boxes (drops the frame identity)."""
    return [Detection(box=r.box, score=r.score) for r in records]
