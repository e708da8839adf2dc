"""Deterministic synthetic generator for dim moving-target sequences.

Each sequence is a cluttered grayscale background (low-frequency noise, a
slowly drifting intensity gradient and a handful of blurred blobs) with one
small Gaussian target moving on a constant-velocity trajectory plus jitter,
bouncing off the frame margins.  Ground truth is the target centre plus or
minus three sigma, clamped to the image.  Everything is driven by a seeded
generator, so identical specs produce byte-identical datasets.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .data import Box, Sequence, save_sequence

__all__ = [
    "SyntheticSpec",
    "generate_sequence",
    "generate_synthetic_dataset",
    "load_synthetic_spec",
    "simulate_trajectory",
]


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic dataset generator."""

    num_sequences: int = 8
    frames_per_sequence: int = 32
    image_size: int = 128
    amplitude_range: tuple[float, float] = (0.35, 0.8)
    sigma_range: tuple[float, float] = (1.3, 2.2)
    velocity_range: tuple[float, float] = (1.0, 6.0)
    clutter_scale: float = 1.0
    noise_std: float = 0.015
    jitter_std: float = 0.3
    sequence_prefix: str = "seq"
    seed: int = 0

    def __post_init__(self):
        if self.num_sequences < 1:
            raise ValueError(f"num_sequences must be >= 1, got {self.num_sequences}")
        if self.frames_per_sequence < 1:
            raise ValueError(
                f"frames_per_sequence must be >= 1, got {self.frames_per_sequence}"
            )
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ValueError(f"sigma_range must satisfy 0 < lo <= hi, got {self.sigma_range}")
        lo, hi = self.amplitude_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(
                f"amplitude_range must satisfy 0 <= lo <= hi <= 1, got {self.amplitude_range}"
            )
        lo, hi = self.velocity_range
        # targets bounce off the margins, so speed only needs to stay small
        # against the frame itself rather than the whole sequence length
        if not 0 <= lo <= hi <= self.image_size / 4:
            raise ValueError(
                f"velocity_range must satisfy 0 <= lo <= hi <= image_size/4, "
                f"got {self.velocity_range}"
            )
        for name in ("clutter_scale", "noise_std", "jitter_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")


def simulate_trajectory(
    start: tuple[float, float],
    velocity: tuple[float, float],
    num_frames: int,
    image_size: int,
    jitter_std: float,
    margin: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Constant-velocity path with Gaussian jitter, reflecting at the margins.

    ``start`` and ``velocity`` are ``(y, x)``; the result is ``(T, 2)``
    centre positions.  The velocity component flips sign whenever the path
    reflects, which keeps the target inside ``[margin, size - 1 - margin]``.
    """
    lo, hi = margin, image_size - 1 - margin
    if lo >= hi:
        raise ValueError(f"margin {margin} leaves no room in a {image_size}px frame")
    pos = np.asarray(start, dtype=np.float64)
    vel = np.asarray(velocity, dtype=np.float64)
    path = [pos.copy()]
    for _ in range(num_frames - 1):
        pos = pos + vel + rng.normal(0.0, jitter_std, size=2)
        for axis in range(2):
            while pos[axis] < lo or pos[axis] > hi:
                if pos[axis] < lo:
                    pos[axis] = 2 * lo - pos[axis]
                else:
                    pos[axis] = 2 * hi - pos[axis]
                vel[axis] = -vel[axis]
        path.append(pos.copy())
    return np.stack(path)


def _low_frequency_noise(rng: np.random.Generator, size: int, cells: int = 9) -> np.ndarray:
    grid = rng.normal(0.0, 1.0, size=(cells, cells)).astype(np.float32)
    img = Image.fromarray(grid, mode="F").resize((size, size), Image.BICUBIC)
    return np.asarray(img, dtype=np.float64)


def _gaussian(size: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    y = np.arange(size, dtype=np.float64)[:, None]
    x = np.arange(size, dtype=np.float64)[None, :]
    return np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * sigma ** 2))


def generate_sequence(spec: SyntheticSpec, index: int) -> Sequence:
    """Render one fully synthetic sequence with annotations."""
    key = [spec.seed, zlib.crc32(spec.sequence_prefix.encode("utf-8")), index]
    rng = np.random.default_rng(key)
    size = spec.image_size

    sigma = rng.uniform(*spec.sigma_range)
    amplitude = rng.uniform(*spec.amplitude_range)
    speed = rng.uniform(*spec.velocity_range)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    velocity = (speed * np.sin(angle), speed * np.cos(angle))
    margin = 3.0 * sigma + 2.0
    start = tuple(rng.uniform(margin, size - 1 - margin, size=2))
    path = simulate_trajectory(
        start, velocity, spec.frames_per_sequence, size, spec.jitter_std, margin, rng
    )

    base = 0.25 + 0.06 * _low_frequency_noise(rng, size)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    drift = rng.uniform(-0.5, 0.5, size=2)
    yy = np.arange(size, dtype=np.float64)[:, None]
    xx = np.arange(size, dtype=np.float64)[None, :]
    clutter = np.zeros((size, size), dtype=np.float64)
    for _ in range(6):
        bcy, bcx = rng.uniform(0, size - 1, size=2)
        bsig = rng.uniform(2.0, 6.0)
        bamp = rng.uniform(0.06, 0.18) * spec.clutter_scale
        clutter += bamp * _gaussian(size, bcy, bcx, bsig)

    frames: list[np.ndarray] = []
    annotations: list[list[Box]] = []
    for t in range(spec.frames_per_sequence):
        ramp = 0.12 * (
            ((xx - drift[1] * t) * np.cos(theta) + (yy - drift[0] * t) * np.sin(theta))
            / size
        )
        cy, cx = path[t]
        img = base + ramp + clutter + amplitude * _gaussian(size, cy, cx, sigma)
        img = img + rng.normal(0.0, spec.noise_std, size=(size, size))
        frames.append(np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8))
        box = (
            max(0.0, cx - 3.0 * sigma),
            max(0.0, cy - 3.0 * sigma),
            min(float(size), cx + 3.0 * sigma),
            min(float(size), cy + 3.0 * sigma),
        )
        annotations.append([box])
    seq_id = f"{spec.sequence_prefix}_{index:03d}"
    return Sequence(id=seq_id, frames=frames, annotations=annotations)


def generate_synthetic_dataset(spec: SyntheticSpec, root: Path) -> list[Sequence]:
    """Generate and write ``spec.num_sequences`` sequences under ``root``."""
    root = Path(root)
    sequences = []
    for i in range(spec.num_sequences):
        seq = generate_sequence(spec, i)
        save_sequence(root, seq)
        sequences.append(seq)
    return sequences


def load_synthetic_spec(path: Path) -> SyntheticSpec:
    """Read a :class:`SyntheticSpec` from a YAML mapping."""
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping of spec fields")
    valid = {f.name for f in SyntheticSpec.__dataclass_fields__.values()}
    unknown = sorted(set(raw) - valid)
    if unknown:
        raise ValueError(f"{path}: unknown spec fields {unknown}")
    for key in ("amplitude_range", "sigma_range", "velocity_range"):
        if key in raw and isinstance(raw[key], list):
            raw[key] = tuple(raw[key])
    return SyntheticSpec(**raw)
