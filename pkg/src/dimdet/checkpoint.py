"""Checkpoint save/load with a documented parameter path scheme.

Parameters are stored under slash-separated paths
(``module/submodule/layer/weight``) together with a format version, the full
config snapshot, the iteration counter and the torch RNG state.  The offset
channel layout convention is recorded in the header so the weights remain
portable across reimplementations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import Tensor

from .config import TrainConfig
from .model import VideoDetector

__all__ = ["Checkpoint", "FORMAT_VERSION", "load_checkpoint", "restore_model", "save_checkpoint"]

FORMAT_VERSION = 1

OFFSET_LAYOUT = (
    "per deform group: kernel taps row-major; offset channels interleave "
    "(vertical, horizontal) per tap; mask channels are tap-major"
)


@dataclass
class Checkpoint:
    """In-memory view of a saved training state."""

    config: TrainConfig
    params: dict[str, Tensor]
    iteration: int
    torch_rng_state: Tensor | None = None


def save_checkpoint(
    path: Path, model: VideoDetector, iteration: int = 0, include_rng: bool = True
) -> Path:
    """Serialise the model parameters plus training metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = {k.replace(".", "/"): v.detach().cpu() for k, v in model.state_dict().items()}
    payload = {
        "format_version": FORMAT_VERSION,
        "offset_layout": OFFSET_LAYOUT,
        "config": asdict(model.config),
        "iteration": int(iteration),
        "params": params,
    }
    if include_rng:
        payload["torch_rng_state"] = torch.get_rng_state()
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint, validating the format version."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(
            f"{path}: checkpoint format version {version} does not match "
            f"supported version {FORMAT_VERSION}"
        )
    return Checkpoint(
        config=TrainConfig(**payload["config"]),
        params=payload["params"],
        iteration=payload["iteration"],
        torch_rng_state=payload.get("torch_rng_state"),
    )


def restore_model(checkpoint: Checkpoint) -> VideoDetector:
    """Build a model from a checkpoint's config and load its parameters."""
    model = VideoDetector(checkpoint.config)
    state = {k.replace("/", "."): v for k, v in checkpoint.params.items()}
    model.load_state_dict(state)
    model.eval()
    return model
