"""Shared train/eval harness for the end-to-end test scenarios.

These helpers run real training loops on in-memory synthetic splits and
score the resulting detector frame by frame, so the slower integration
tests (overfit runs, component ablations) share one code path.
"""

from __future__ import annotations

import time
from typing import Callable, Sequence as Seq

from dimdet.config import TrainConfig
from dimdet.data import Sequence
from dimdet.metrics import compute_map50, compute_pr_f1, match_detections
from dimdet.predict import records_to_detections, run_inference
from dimdet.synth import SyntheticSpec, generate_sequence
from dimdet.train import Trainer

# Score floor used when collecting detections for scoring.  Everything at or
# above this survives to the matcher, so the PR curve and F1 threshold see
# the full ranking rather than a pre-truncated one.
SCORE_FLOOR = 0.001


def build_split(spec: SyntheticSpec) -> list[Sequence]:
    """Generate the in-memory training split for a synthetic spec."""
    return [generate_sequence(spec, i) for i in range(spec.num_sequences)]


def score_detector(
    model,
    sequences: Seq[Sequence],
    conf_thresh: float = 0.5,
    iou_thresh: float = 0.5,
    nms_iou: float = 0.65,
) -> dict[str, float]:
    """Precision/recall/F1 at ``conf_thresh`` plus mAP50 over all frames."""
    records = run_inference(
        model, sequences, conf_thresh=SCORE_FLOOR, nms_iou=nms_iou
    )
    per_frame: dict[tuple[str, int], list] = {}
    for rec in records:
        per_frame.setdefault((rec.sequence_id, rec.frame_index), []).append(rec)
    matches, dets_all, gts_all = [], [], []
    for seq in sequences:
        for t in range(len(seq)):
            dets = records_to_detections(per_frame.get((seq.id, t), []))
            gts = [list(box) for box in seq.annotations[t]]
            matches.append(match_detections(dets, gts, iou_thresh=iou_thresh))
            dets_all.append(dets)
            gts_all.append(gts)
    precision, recall, f1 = compute_pr_f1(matches, conf_thresh=conf_thresh)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "map50": compute_map50(dets_all, gts_all, iou_thresh=iou_thresh),
    }


def train_and_track(
    config: TrainConfig,
    sequences: Seq[Sequence],
    max_iters: int,
    eval_every: int,
    nms_iou: float = 0.65,
    stop: Callable[[dict[str, float]], bool] | None = None,
) -> tuple[Trainer, list[dict[str, float]]]:
    """Train in chunks, scoring the model on ``sequences`` after each chunk.

    ``stop`` is an optional predicate over the latest score dict; returning
    True ends training early.  Each history entry carries the iteration
    count and the elapsed wall-clock seconds alongside the scores.
    """
    trainer = Trainer(config, sequences)
    start = time.monotonic()
    history: list[dict[str, float]] = []
    while trainer.iteration < max_iters:
        target = min(trainer.iteration + eval_every, max_iters)
        trainer.run(max_iters=target)
        made_progress = trainer.iteration >= target
        trainer.model.eval()
        scores = score_detector(trainer.model, sequences, nms_iou=nms_iou)
        scores["iteration"] = trainer.iteration
        scores["elapsed"] = time.monotonic() - start
        history.append(scores)
        if not made_progress:
            break
        if stop is not None and stop(scores):
            break
    return trainer, history
