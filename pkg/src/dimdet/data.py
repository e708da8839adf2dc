"""Dataset layout, clip sampling and resizing.

On disk a dataset root contains one directory per sequence::

    root/
      <sequence_id>/
        frames/000000.png ...   8-bit grayscale, zero-padded frame index
        annotations.csv         header: frame_index,x1,y1,x2,y2

Coordinates are pixels with ``x2``/``y2`` exclusive, one row per box, UTF-8
with LF newlines.  Frames without targets simply have no rows.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

__all__ = [
    "Box",
    "Sequence",
    "VideoClip",
    "clip_to_tensor",
    "load_dataset",
    "load_sequence",
    "resize_clip",
    "sample_clip",
    "save_sequence",
]

Box = tuple[float, float, float, float]

FRAME_DIR = "frames"
FRAME_PATTERN = "{:06d}.png"
ANNOTATION_FILE = "annotations.csv"
ANNOTATION_HEADER = ["frame_index", "x1", "y1", "x2", "y2"]


@dataclass
class Sequence:
    """One video sequence: frames in memory plus per-frame box lists."""

    id: str
    frames: list[np.ndarray]
    annotations: list[list[Box]] = field(default_factory=list)

    def __post_init__(self):
        if not self.annotations:
            self.annotations = [[] for _ in self.frames]
        if len(self.annotations) != len(self.frames):
            raise ValueError(
                f"sequence {self.id}: {len(self.frames)} frames but "
                f"{len(self.annotations)} annotation lists"
            )

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]


@dataclass
class VideoClip:
    """A temporal window of ``2R + 1`` frames centred on the target frame."""

    frames: list[np.ndarray]
    target_index: int
    boxes: list[Box]
    sequence_id: str = ""
    frame_index: int = 0
    source_indices: list[int] = field(default_factory=list)

    @property
    def radius(self) -> int:
        return len(self.frames) // 2


def sample_clip(sequence: Sequence, t: int, radius: int) -> VideoClip:
    """Cut the ``[t - R, t + R]`` window around frame ``t``.

    Window positions that fall outside the sequence are padded with the
    target frame itself, so the clip always has ``2R + 1`` frames and the
    target sits exactly in the middle.
    """
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    n = len(sequence)
    if not 0 <= t < n:
        raise ValueError(f"target frame {t} out of range for sequence of length {n}")
    indices = [i if 0 <= i < n else t for i in range(t - radius, t + radius + 1)]
    return VideoClip(
        frames=[sequence.frames[i] for i in indices],
        target_index=radius,
        boxes=list(sequence.annotations[t]),
        sequence_id=sequence.id,
        frame_index=t,
        source_indices=indices,
    )


def _read_annotations(path: Path, num_frames: int, width: int, height: int) -> list[list[Box]]:
    boxes: list[list[Box]] = [[] for _ in range(num_frames)]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ANNOTATION_HEADER:
            raise ValueError(
                f"{path}: bad header {header!r}, expected {ANNOTATION_HEADER!r}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                fi = int(row[0])
                x1, y1, x2, y2 = (float(v) for v in row[1:5])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed row {row!r}") from exc
            if not 0 <= fi < num_frames:
                raise ValueError(
                    f"{path}:{line_no}: frame_index {fi} out of range "
                    f"(sequence has {num_frames} frames)"
                )
            if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
                raise ValueError(
                    f"{path}:{line_no}: box ({x1}, {y1}, {x2}, {y2}) outside "
                    f"the {width}x{height} frame or degenerate"
                )
            boxes[fi].append((x1, y1, x2, y2))
    return boxes


def load_sequence(seq_dir: Path) -> Sequence:
    """Load one sequence directory (frames plus annotations)."""
    seq_dir = Path(seq_dir)
    frame_dir = seq_dir / FRAME_DIR
    if not frame_dir.is_dir():
        raise FileNotFoundError(f"{seq_dir}: missing '{FRAME_DIR}' directory")
    frame_paths = sorted(frame_dir.glob("*.png"))
    if not frame_paths:
        raise FileNotFoundError(f"{frame_dir}: no PNG frames found")
    frames = []
    for i, p in enumerate(frame_paths):
        expected = FRAME_PATTERN.format(i)
        if p.name != expected:
            raise ValueError(f"{p}: expected frame file name {expected!r} at position {i}")
        with Image.open(p) as img:
            frames.append(np.asarray(img.convert("L")))
    ann_path = seq_dir / ANNOTATION_FILE
    if not ann_path.is_file():
        raise FileNotFoundError(f"{seq_dir}: missing {ANNOTATION_FILE}")
    h, w = frames[0].shape
    annotations = _read_annotations(ann_path, len(frames), w, h)
    return Sequence(id=seq_dir.name, frames=frames, annotations=annotations)


def load_dataset(root: Path) -> list[Sequence]:
    """Load every sequence under ``root``, sorted by sequence id."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    seq_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not seq_dirs:
        raise FileNotFoundError(f"dataset root {root} contains no sequence directories")
    return [load_sequence(d) for d in seq_dirs]


def save_sequence(root: Path, sequence: Sequence) -> Path:
    """Write a sequence to ``root/<id>/`` in the standard layout."""
    seq_dir = Path(root) / sequence.id
    frame_dir = seq_dir / FRAME_DIR
    frame_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(sequence.frames):
        Image.fromarray(frame, mode="L").save(frame_dir / FRAME_PATTERN.format(i))
    with open(seq_dir / ANNOTATION_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ANNOTATION_HEADER)
        for fi, boxes in enumerate(sequence.annotations):
            for x1, y1, x2, y2 in boxes:
                writer.writerow([fi, repr(float(x1)), repr(float(y1)),
                                 repr(float(x2)), repr(float(y2))])
    return seq_dir


def resize_clip(clip: VideoClip, size: int) -> VideoClip:
    """Bilinearly resize all frames to ``size x size`` and rescale the boxes.

    Boxes that collapse below one pixel after scaling are dropped with a
    warning.  Returns the clip unchanged when it already has the right size.
    """
    if size <= 0 or size % 8 != 0:
        raise ValueError(f"size must be a positive multiple of 8, got {size}")
    h, w = clip.frames[0].shape
    if (h, w) == (size, size):
        return clip
    frames = [
        np.asarray(Image.fromarray(f, mode="L").resize((size, size), Image.BILINEAR))
        for f in clip.frames
    ]
    sx, sy = size / w, size / h
    boxes: list[Box] = []
    for x1, y1, x2, y2 in clip.boxes:
        nb = (x1 * sx, y1 * sy, x2 * sx, y2 * sy)
        if nb[2] - nb[0] < 1.0 or nb[3] - nb[1] < 1.0:
            warnings.warn(
                f"box {(x1, y1, x2, y2)} collapsed below one pixel after resizing "
                f"{w}x{h} -> {size}x{size}; dropped",
                stacklevel=2,
            )
            continue
        boxes.append(nb)
    return replace(clip, frames=frames, boxes=boxes)


def clip_to_tensor(clip: VideoClip, dtype=torch.float32) -> Tensor:
    """Stack a clip as a ``(T, 1, H, W)`` tensor scaled to [0, 1]."""
    arr = np.stack(clip.frames).astype(np.float32) / 255.0
    return torch.from_numpy(arr).unsqueeze(1).to(dtype)
