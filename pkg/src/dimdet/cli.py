"""``dimdet`` command line: train, infer, eval, synth, visualize."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, restore_model
from .config import TrainConfig, load_config
from .data import load_dataset, resize_clip, sample_clip, clip_to_tensor
from .figures import save_detection_overlay, save_heatmap, save_pr_curve
from .head import decode, nms
from .losses import NonFiniteLossError
from .metrics import compute_pr_f1, match_detections, pr_curve_points, _ap_from_points
from .predict import (
    CONF_THRESH,
    NMS_IOU,
    load_detections,
    records_to_detections,
    run_inference,
    save_detections,
)
from .synth import SyntheticSpec, generate_synthetic_dataset, load_synthetic_spec
from .train import Trainer, TrainingDiverged

__all__ = ["build_parser", "main"]

EVAL_CONF_THRESH = 0.5
EVAL_IOU_THRESH = 0.5


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="YAML config file overriding the built-in defaults")
    common.add_argument("--seed", type=int, default=None,
                        help="override the random seed")
    common.add_argument("--device", default="cpu",
                        help="torch device to run on (default: cpu)")

    parser = argparse.ArgumentParser(
        prog="dimdet",
        description="moving dim-small target detection in grayscale video",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--data", type=Path, required=True, help="dataset root directory")
    p.add_argument("--out", type=Path, required=True,
                   help="output directory for checkpoints and the loss log")
    p.add_argument("--epochs", type=int, default=None, help="epoch budget (default 20)")
    p.add_argument("--max-iters", type=int, default=None,
                   help="hard cap on total optimizer steps")
    p.add_argument("--batch-size", type=int, default=None, help="clips per step (default 4)")
    p.add_argument("--input-size", type=int, default=None,
                   help="square network input resolution (default 544)")
    p.add_argument("--frames", type=int, default=None,
                   help="clip length, odd (default 5)")
    p.add_argument("--lr", type=float, default=None,
                   help="Adam learning rate, constant (default 1e-4)")
    p.add_argument("--lambda-reg", type=float, default=None,
                   help="box regression loss weight (default 5)")
    p.add_argument("--eta-mc", type=float, default=None,
                   help="motion-compensation loss weight (default 1)")
    p.add_argument("--no-tda", action="store_true",
                   help="disable temporal deformable alignment")
    p.add_argument("--no-mc", action="store_true",
                   help="disable the motion-compensation loss")
    p.add_argument("--no-fr", action="store_true",
                   help="replace the refinement stage with one 3x3 fusion convolution")
    p.add_argument("--no-afs", action="store_true",
                   help="replace adaptive fusion with plain concatenation")
    p.add_argument("--no-agdf", action="store_true",
                   help="replace deformable refinement blocks with plain convolutions")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="run inference on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="detections output file")
    p.add_argument("--conf", type=float, default=CONF_THRESH,
                   help=f"confidence threshold (default {CONF_THRESH})")
    p.add_argument("--nms-iou", type=float, default=NMS_IOU,
                   help=f"NMS IoU threshold (default {NMS_IOU})")
    p.add_argument("--log-clips", type=Path, default=None,
                   help="also write the frame indices used for every clip")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score a detections file")
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True,
                   help="directory for metrics.json, pr_curve.csv and pr_curve.png")
    p.add_argument("--conf", type=float, default=EVAL_CONF_THRESH,
                   help=f"operating point for precision/recall/F1 (default {EVAL_CONF_THRESH})")
    p.add_argument("--iou", type=float, default=EVAL_IOU_THRESH,
                   help=f"IoU threshold for matching (default {EVAL_IOU_THRESH})")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True, help="dataset root to create")
    p.add_argument("--spec", type=Path, default=None,
                   help="YAML file of generator parameters (defaults used otherwise)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("visualize", parents=[common],
                       help="export feature heatmaps and a detection overlay")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--sequence", required=True, help="sequence id")
    p.add_argument("--frame", type=int, required=True, help="target frame index")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--conf", type=float, default=CONF_THRESH)
    p.set_defaults(func=cmd_visualize)
    return parser


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.input_size is not None:
        overrides["input_size"] = args.input_size
    if args.frames is not None:
        overrides["num_frames"] = args.frames
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.lambda_reg is not None:
        overrides["lambda_reg"] = args.lambda_reg
    if args.eta_mc is not None:
        overrides["eta_mc"] = args.eta_mc
    if args.no_tda:
        overrides["use_tda"] = False
    if args.no_mc:
        overrides["use_mc_loss"] = False
    if args.no_fr:
        overrides["use_fr"] = False
    if args.no_afs:
        overrides["use_afs"] = False
    if args.no_agdf:
        overrides["use_agdf"] = False
    return dataclasses.replace(cfg, **overrides)


def cmd_train(args) -> int:
    config = _train_config(args)
    sequences = load_dataset(args.data)
    trainer = Trainer(config, sequences, out_dir=args.out, device=args.device)
    try:
        records = trainer.run(max_iters=args.max_iters)
    finally:
        trainer.close()
    last = records[-1] if records else None
    print(f"trained {trainer.iteration} iterations over {trainer.epoch} epochs")
    if last is not None:
        print(f"final loss: total={last['total']:.6f} reg={last['reg']:.6f} "
              f"cls={last['cls']:.6f} obj={last['obj']:.6f} mc={last['mc']:.6f}")
    print(f"checkpoint: {trainer.last_checkpoint}")
    return 0


def cmd_infer(args) -> int:
    if args.seed is not None:
        torch.manual_seed(args.seed)
    model = restore_model(load_checkpoint(args.checkpoint))
    sequences = load_dataset(args.data)
    clip_log: list | None = [] if args.log_clips else None
    records = run_inference(
        model, sequences, conf_thresh=args.conf, nms_iou=args.nms_iou,
        device=args.device, clip_log=clip_log,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_detections(records, args.out)
    if args.log_clips:
        with open(args.log_clips, "w", encoding="utf-8") as fh:
            for sid, t, indices in clip_log:
                fh.write(f"{sid} {t} {' '.join(str(i) for i in indices)}\n")
    print(f"wrote {len(records)} detections to {args.out}")
    return 0


def _evaluation_frames(records, sequences):
    seq_map = {s.id: s for s in sequences}
    per_frame: dict[tuple[str, int], list] = {}
    for r in records:
        if r.sequence_id not in seq_map:
            raise ValueError(f"unknown sequence id {r.sequence_id!r} in detections")
        if not 0 <= r.frame_index < len(seq_map[r.sequence_id]):
            raise ValueError(
                f"frame {r.frame_index} out of range for sequence {r.sequence_id!r}"
            )
        per_frame.setdefault((r.sequence_id, r.frame_index), []).append(r)
    keys, dets, gts = [], [], []
    for seq in sequences:
        for t in range(len(seq)):
            keys.append((seq.id, t))
            dets.append(records_to_detections(per_frame.get((seq.id, t), [])))
            gts.append(seq.annotations[t])
    return keys, dets, gts


def cmd_eval(args) -> int:
    records = load_detections(args.detections)
    sequences = load_dataset(args.data)
    keys, dets, gts = _evaluation_frames(records, sequences)
    matches = [match_detections(d, g, args.iou) for d, g in zip(dets, gts)]
    points = pr_curve_points(matches)
    map50 = _ap_from_points(points)
    precision, recall, f1 = compute_pr_f1(matches, args.conf)

    per_sequence = {}
    for seq in sequences:
        idx = [i for i, (sid, _) in enumerate(keys) if sid == seq.id]
        seq_matches = [matches[i] for i in idx]
        p, r, f = compute_pr_f1(seq_matches, args.conf)
        per_sequence[seq.id] = {
            "map50": _ap_from_points(pr_curve_points(seq_matches)),
            "precision": p,
            "recall": r,
            "f1": f,
        }

    report = {
        "map50": map50,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "conf_thresh": args.conf,
        "iou_thresh": args.iou,
        "num_detections": len(records),
        "num_ground_truth": sum(len(g) for g in gts),
        "per_sequence": per_sequence,
    }
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    with open(out_dir / "pr_curve.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("recall,precision,precision_envelope\n")
        for r, p, e in points:
            fh.write(f"{r!r},{p!r},{e!r}\n")
    save_pr_curve(points, out_dir / "pr_curve.png", map50=map50)
    for key in ("map50", "precision", "recall", "f1"):
        print(f"{key} {report[key]:.6f}")
    return 0


def cmd_synth(args) -> int:
    spec = load_synthetic_spec(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    train_spec = dataclasses.replace(spec, sequence_prefix="train")
    test_spec = dataclasses.replace(
        spec,
        sequence_prefix="test",
        num_sequences=max(1, round(spec.num_sequences / 4)),
    )
    train_seqs = generate_synthetic_dataset(train_spec, Path(args.out) / "train")
    test_seqs = generate_synthetic_dataset(test_spec, Path(args.out) / "test")
    print(f"wrote {len(train_seqs)} train and {len(test_seqs)} test sequences "
          f"of {spec.frames_per_sequence} frames at "
          f"{spec.image_size}x{spec.image_size} to {args.out}")
    return 0


def cmd_visualize(args) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    cfg = model.config
    sequences = load_dataset(args.data)
    seq = next((s for s in sequences if s.id == args.sequence), None)
    if seq is None:
        raise ValueError(f"unknown sequence id {args.sequence!r}")
    if not 0 <= args.frame < len(seq):
        raise ValueError(
            f"frame {args.frame} out of range for sequence {seq.id!r} "
            f"of length {len(seq)}"
        )
    clip = resize_clip(sample_clip(seq, args.frame, cfg.radius), cfg.input_size)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        outputs = model(clip_to_tensor(clip).unsqueeze(0))
    offsets = [o for o in range(-cfg.radius, cfg.radius + 1) if o != 0]
    tags = [f"m{-o}" if o < 0 else f"p{o}" for o in offsets]
    adjacent = [outputs.features[0, i] for i in range(cfg.num_frames) if i != cfg.radius]
    written = []
    for tag, feat in zip(tags, adjacent):
        written.append(save_heatmap(feat, out_dir / f"extracted_{tag}.png"))
    for tag, feat in zip(tags, outputs.aligned):
        written.append(save_heatmap(feat[0], out_dir / f"aligned_{tag}.png"))
    written.append(save_heatmap(outputs.reference[0], out_dir / "target.png"))
    dets = nms(decode(outputs.head.split()[0], model.stride, args.conf), NMS_IOU)
    sx = seq.width / cfg.input_size
    sy = seq.height / cfg.input_size
    scaled = [
        dataclasses.replace(
            d, box=(d.box[0] * sx, d.box[1] * sy, d.box[2] * sx, d.box[3] * sy)
        )
        for d in dets
    ]
    written.append(
        save_detection_overlay(
            seq.frames[args.frame], scaled, out_dir / "overlay.png",
            gt_boxes=seq.annotations[args.frame],
        )
    )
    print(f"wrote {len(written)} images to {out_dir}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, NonFiniteLossError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
