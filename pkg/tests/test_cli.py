"""End-to-end command line tests: synth -> train -> infer -> eval -> visualize."""

import json

import pytest

from dimdet.cli import main
from dimdet.data import load_dataset
from dimdet.predict import load_detections

CONFIG_YAML = """\
num_frames: 3
input_size: 48
batch_size: 2
epochs: 1
feature_channels: 8
backbone_channels: 8
dcaf_blocks: 1
agdf_blocks: 1
align_deform_groups: 2
refine_deform_groups: 2
"""

SPEC_YAML = """\
num_sequences: 2
frames_per_sequence: 6
image_size: 48
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One synth + short train shared by the CLI tests below."""
    root = tmp_path_factory.mktemp("cli")
    (root / "config.yaml").write_text(CONFIG_YAML, encoding="utf-8")
    (root / "spec.yaml").write_text(SPEC_YAML, encoding="utf-8")
    rc = main([
        "synth", "--out", str(root / "data"), "--spec", str(root / "spec.yaml"),
    ])
    assert rc == 0
    rc = main([
        "train",
        "--data", str(root / "data" / "train"),
        "--out", str(root / "run"),
        "--config", str(root / "config.yaml"),
        "--max-iters", "4",
    ])
    assert rc == 0
    return root


class TestSynth:
    def test_creates_train_and_test_splits(self, workspace):
        train = load_dataset(workspace / "data" / "train")
        test = load_dataset(workspace / "data" / "test")
        assert [s.id for s in train] == ["train_000", "train_001"]
        assert [s.id for s in test] == ["test_000"]
        assert all(len(s) == 6 for s in train + test)


class TestTrain:
    def test_writes_loss_log_and_checkpoint(self, workspace):
        log = (workspace / "run" / "loss_log.jsonl").read_text().splitlines()
        assert len(log) == 4
        for line in log:
            rec = json.loads(line)
            assert set(rec) == {"iter", "total", "reg", "cls", "obj", "mc"}
        assert (workspace / "run" / "checkpoints" / "latest.pt").exists()

    def test_missing_data_dir_exits_2(self, workspace, capsys):
        rc = main([
            "train",
            "--data", str(workspace / "nowhere"),
            "--out", str(workspace / "run2"),
        ])
        assert rc == 2
        assert "error:" in capsys.readouterr().err


class TestInfer:
    def infer(self, workspace, out_name, extra=()):
        return main([
            "infer",
            "--checkpoint", str(workspace / "run" / "checkpoints" / "latest.pt"),
            "--data", str(workspace / "data" / "train"),
            "--out", str(workspace / out_name),
            "--conf", "0.001",
            *extra,
        ])

    def test_detections_file_parses(self, workspace):
        rc = self.infer(workspace, "dets.txt")
        assert rc == 0
        records = load_detections(workspace / "dets.txt")
        assert records
        assert {r.sequence_id for r in records} == {"train_000", "train_001"}

    def test_clip_log_covers_every_frame_with_padding(self, workspace):
        rc = self.infer(
            workspace, "dets2.txt", extra=("--log-clips", str(workspace / "clips.txt"))
        )
        assert rc == 0
        lines = (workspace / "clips.txt").read_text().splitlines()
        assert len(lines) == 12  # 2 sequences x 6 frames
        assert lines[0] == "train_000 0 0 0 1"  # left boundary pads
        assert lines[5] == "train_000 5 4 5 5"  # right boundary pads
        assert lines[2] == "train_000 2 1 2 3"  # interior is a plain window

    def test_rerun_is_byte_identical(self, workspace):
        self.infer(workspace, "dets_a.txt")
        self.infer(workspace, "dets_b.txt")
        assert (workspace / "dets_a.txt").read_bytes() == (
            workspace / "dets_b.txt"
        ).read_bytes()

    def test_missing_checkpoint_exits_2(self, workspace, capsys):
        rc = main([
            "infer",
            "--checkpoint", str(workspace / "missing.pt"),
            "--data", str(workspace / "data" / "train"),
            "--out", str(workspace / "x.txt"),
        ])
        assert rc == 2
        assert "error:" in capsys.readouterr().err


class TestEval:
    def write_gt_replay(self, workspace):
        path = workspace / "perfect.txt"
        lines = []
        for seq in load_dataset(workspace / "data" / "train"):
            for t in range(len(seq)):
                for (x1, y1, x2, y2) in seq.annotations[t]:
                    lines.append(f"{seq.id} {t} {x1} {y1} {x2} {y2} 0.9\n")
        path.write_text("".join(lines), encoding="utf-8")
        return path

    def test_ground_truth_replay_scores_perfectly(self, workspace, capsys):
        dets = self.write_gt_replay(workspace)
        out_dir = workspace / "eval_perfect"
        rc = main([
            "eval",
            "--detections", str(dets),
            "--data", str(workspace / "data" / "train"),
            "--out-dir", str(out_dir),
        ])
        assert rc == 0
        report = json.loads((out_dir / "metrics.json").read_text())
        assert report["map50"] == 1.0
        assert report["f1"] == 1.0
        assert report["precision"] == 1.0 and report["recall"] == 1.0
        for seq_stats in report["per_sequence"].values():
            assert seq_stats["f1"] == 1.0
        out = capsys.readouterr().out
        assert "map50 1.000000" in out

    def test_writes_curve_files(self, workspace):
        out_dir = workspace / "eval_perfect"
        csv_lines = (out_dir / "pr_curve.csv").read_text().splitlines()
        assert csv_lines[0] == "recall,precision,precision_envelope"
        assert len(csv_lines) >= 2
        assert (out_dir / "pr_curve.png").stat().st_size > 0

    def test_malformed_detections_exit_2(self, workspace, capsys):
        bad = workspace / "bad.txt"
        bad.write_text("train_000 0 1 2 3\n", encoding="utf-8")
        rc = main([
            "eval",
            "--detections", str(bad),
            "--data", str(workspace / "data" / "train"),
            "--out-dir", str(workspace / "eval_bad"),
        ])
        assert rc == 2
        assert "expected 7 fields" in capsys.readouterr().err

    def test_unknown_sequence_id_exit_2(self, workspace, capsys):
        bad = workspace / "ghost.txt"
        bad.write_text("ghost_999 0 1.0 2.0 3.0 4.0 0.5\n", encoding="utf-8")
        rc = main([
            "eval",
            "--detections", str(bad),
            "--data", str(workspace / "data" / "train"),
            "--out-dir", str(workspace / "eval_ghost"),
        ])
        assert rc == 2
        assert "unknown sequence" in capsys.readouterr().err


class TestVisualize:
    def test_writes_expected_image_set(self, workspace, capsys):
        out_dir = workspace / "viz"
        rc = main([
            "visualize",
            "--checkpoint", str(workspace / "run" / "checkpoints" / "latest.pt"),
            "--data", str(workspace / "data" / "train"),
            "--sequence", "train_000",
            "--frame", "2",
            "--out-dir", str(out_dir),
        ])
        assert rc == 0
        names = sorted(p.name for p in out_dir.glob("*.png"))
        assert names == [
            "aligned_m1.png",
            "aligned_p1.png",
            "extracted_m1.png",
            "extracted_p1.png",
            "overlay.png",
            "target.png",
        ]
        assert "wrote 6 images" in capsys.readouterr().out

    def test_unknown_sequence_exits_2(self, workspace, capsys):
        rc = main([
            "visualize",
            "--checkpoint", str(workspace / "run" / "checkpoints" / "latest.pt"),
            "--data", str(workspace / "data" / "train"),
            "--sequence", "nope",
            "--frame", "0",
            "--out-dir", str(workspace / "viz2"),
        ])
        assert rc == 2
        assert "unknown sequence" in capsys.readouterr().err

    def test_frame_out_of_range_exits_2(self, workspace, capsys):
        rc = main([
            "visualize",
            "--checkpoint", str(workspace / "run" / "checkpoints" / "latest.pt"),
            "--data", str(workspace / "data" / "train"),
            "--sequence", "train_000",
            "--frame", "99",
            "--out-dir", str(workspace / "viz3"),
        ])
        assert rc == 2
        assert "out of range" in capsys.readouterr().err
