"""Seeded training loop with per-iteration loss records and checkpoints."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence as Seq

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import Sequence, clip_to_tensor, resize_clip, sample_clip
from .head import assign_targets, detection_loss
from .losses import LossWeights, NonFiniteLossError, motion_compensation_loss, total_loss
from .model import ModelOutputs, VideoDetector

__all__ = ["Trainer", "TrainingDiverged", "compute_losses"]


class TrainingDiverged(RuntimeError):
    """Raised when a loss term goes non-finite; points at the last checkpoint."""

    def __init__(self, term: str, iteration: int, last_checkpoint: Path | None):
        where = last_checkpoint if last_checkpoint else "none saved yet"
        super().__init__(
            f"training diverged at iteration {iteration}: loss term '{term}' "
            f"is non-finite; last good checkpoint: {where}"
        )
        self.term = term
        self.iteration = iteration
        self.last_checkpoint = last_checkpoint


def compute_losses(
    outputs: ModelOutputs,
    boxes_per_image: Seq[Seq[Seq[float]]],
    config: TrainConfig,
) -> dict[str, torch.Tensor]:
    """Assemble the per-batch loss terms and the weighted total."""
    per_image = outputs.head.split()
    if len(per_image) != len(boxes_per_image):
        raise ValueError(
            f"{len(per_image)} head outputs but {len(boxes_per_image)} box lists"
        )
    grid = outputs.head.obj_map.shape[-2:]
    regs, clss, objs = [], [], []
    for out, boxes in zip(per_image, boxes_per_image):
        assignment = assign_targets(boxes, (grid[0], grid[1]))
        l_reg, l_cls, l_obj = detection_loss(out, assignment)
        regs.append(l_reg)
        clss.append(l_cls)
        objs.append(l_obj)
    l_reg = torch.stack(regs).mean()
    l_cls = torch.stack(clss).mean()
    l_obj = torch.stack(objs).mean()
    if config.use_tda and config.use_mc_loss:
        l_mc = motion_compensation_loss(outputs.aligned, outputs.reference)
    else:
        l_mc = torch.zeros((), dtype=l_reg.dtype, device=l_reg.device)
    weights = LossWeights(lambda_reg=config.lambda_reg, eta_mc=config.eta_mc)
    total = total_loss(l_reg, l_cls, l_obj, l_mc, weights)
    return {"total": total, "reg": l_reg, "cls": l_cls, "obj": l_obj, "mc": l_mc}


class Trainer:
    """Adam training over one-clip-per-target-frame epochs.

    Every (sequence, frame) pair is visited once per epoch in a seeded
    shuffled order.  Loss records go to ``<out_dir>/loss_log.jsonl`` and a
    checkpoint is written after every epoch plus at the end of ``run``.
    """

    def __init__(
        self,
        config: TrainConfig,
        sequences: Seq[Sequence],
        out_dir: Path | None = None,
        device: str = "cpu",
    ):
        if not sequences:
            raise ValueError("no training sequences supplied")
        self.config = config
        self.sequences = list(sequences)
        self.device = torch.device(device)
        torch.manual_seed(config.seed)
        self.model = VideoDetector(config).to(self.device)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
            eps=config.adam_eps,
        )
        self.pairs = [
            (si, t) for si, seq in enumerate(self.sequences) for t in range(len(seq))
        ]
        self.iteration = 0
        self.epoch = 0
        self._pending: list[int] = []
        self.records: list[dict] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.last_checkpoint: Path | None = None
        self._log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.out_dir / "loss_log.jsonl", "w", encoding="utf-8")

    def _epoch_order(self, epoch: int) -> list[int]:
        rng = np.random.default_rng([self.config.seed, 7919, epoch])
        return list(rng.permutation(len(self.pairs)))

    def _build_batch(self, pair_indices: Seq[int]):
        clips, boxes = [], []
        for pi in pair_indices:
            si, t = self.pairs[pi]
            clip = sample_clip(self.sequences[si], t, self.config.radius)
            clip = resize_clip(clip, self.config.input_size)
            clips.append(clip_to_tensor(clip))
            boxes.append(clip.boxes)
        return torch.stack(clips).to(self.device), boxes

    def step(self, clips: torch.Tensor, boxes) -> dict:
        """One optimizer update; returns the loss record."""
        self.model.train()
        outputs = self.model(clips)
        try:
            losses = compute_losses(outputs, boxes, self.config)
        except NonFiniteLossError as exc:
            raise TrainingDiverged(exc.term, self.iteration, self.last_checkpoint) from exc
        self.optimizer.zero_grad()
        losses["total"].backward()
        self.optimizer.step()
        self.iteration += 1
        record = {
            "iter": self.iteration,
            "total": float(losses["total"].detach()),
            "reg": float(losses["reg"].detach()),
            "cls": float(losses["cls"].detach()),
            "obj": float(losses["obj"].detach()),
            "mc": float(losses["mc"].detach()),
        }
        self.records.append(record)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(record) + "\n")
            self._log_fh.flush()
        return record

    def _save(self, name: str) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.out_dir / "checkpoints" / name
        save_checkpoint(path, self.model, iteration=self.iteration)
        self.last_checkpoint = path
        return path

    def run(self, max_iters: int | None = None) -> list[dict]:
        """Train until the epoch budget or ``max_iters`` total iterations.

        Calling ``run`` again resumes where the previous call stopped, which
        lets callers interleave evaluation with training.
        """
        while True:
            if max_iters is not None and self.iteration >= max_iters:
                break
            if not self._pending:
                if self.epoch >= self.config.epochs:
                    break
                self._pending = self._epoch_order(self.epoch)
                self.epoch += 1
            take = self._pending[: self.config.batch_size]
            self._pending = self._pending[len(take):]
            clips, boxes = self._build_batch(take)
            self.step(clips, boxes)
            if not self._pending:
                self._save(f"epoch_{self.epoch:03d}.pt")
        self._save("latest.pt")
        return self.records

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None
