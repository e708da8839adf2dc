"""Tests for whole-sequence inference and the detections file format."""

import torch

import pytest

from dimdet.config import TrainConfig
from dimdet.model import VideoDetector
from dimdet.predict import (
    DetectionRecord,
    load_detections,
    records_to_detections,
    run_inference,
    save_detections,
)
from dimdet.synth import SyntheticSpec, generate_sequence

SPEC = SyntheticSpec(num_sequences=2, frames_per_sequence=6, image_size=48)

CONFIG = TrainConfig(
    num_frames=3,
    input_size=48,
    feature_channels=8,
    backbone_channels=8,
    dcaf_blocks=1,
    agdf_blocks=1,
    align_deform_groups=2,
    refine_deform_groups=2,
    batch_size=1,
)


@pytest.fixture(scope="module")
def sequences():
    return [generate_sequence(SPEC, i) for i in range(2)]


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = VideoDetector(CONFIG)
    m.eval()
    return m


def some_records():
    return [
        DetectionRecord("seq_000", 0, (1.0, 2.0, 3.5, 4.25), 0.75),
        DetectionRecord("seq_000", 1, (0.0, 0.0, 48.0, 48.0), 1.0),
        DetectionRecord("seq_001", 5, (10.125, 11.5, 20.0, 21.0), 0.001),
    ]


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "dets.txt"
        save_detections(some_records(), path)
        loaded = load_detections(path)
        assert len(loaded) == 3
        for a, b in zip(some_records(), loaded):
            assert a.sequence_id == b.sequence_id
            assert a.frame_index == b.frame_index
            assert a.box == pytest.approx(b.box, abs=1e-6)
            assert a.score == pytest.approx(b.score, abs=1e-6)

    def test_plain_text_layout(self, tmp_path):
        path = tmp_path / "dets.txt"
        save_detections(some_records()[:1], path)
        line = path.read_text(encoding="utf-8").splitlines()[0]
        assert line.split() == [
            "seq_000", "0", "1.000000", "2.000000", "3.500000", "4.250000", "0.750000",
        ]

    def test_whitespace_sequence_id_rejected(self, tmp_path):
        bad = [DetectionRecord("seq 0", 0, (0.0, 0.0, 1.0, 1.0), 0.5)]
        with pytest.raises(ValueError, match="whitespace"):
            save_detections(bad, tmp_path / "dets.txt")

    def test_wrong_field_count_rejected(self, tmp_path):
        path = tmp_path / "dets.txt"
        path.write_text("seq_000 0 1.0 2.0 3.0 4.0\n", encoding="utf-8")
        with pytest.raises(ValueError, match="expected 7 fields"):
            load_detections(path)

    def test_malformed_number_rejected(self, tmp_path):
        path = tmp_path / "dets.txt"
        path.write_text("seq_000 0 1.0 2.0 three 4.0 0.5\n", encoding="utf-8")
        with pytest.raises(ValueError, match=":1: malformed"):
            load_detections(path)

    def test_degenerate_box_rejected(self, tmp_path):
        path = tmp_path / "dets.txt"
        path.write_text("seq_000 0 5.0 2.0 5.0 4.0 0.5\n", encoding="utf-8")
        with pytest.raises(ValueError, match="degenerate"):
            load_detections(path)

    def test_score_out_of_range_rejected(self, tmp_path):
        path = tmp_path / "dets.txt"
        path.write_text("seq_000 0 1.0 2.0 3.0 4.0 1.5\n", encoding="utf-8")
        with pytest.raises(ValueError, match="outside"):
            load_detections(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "dets.txt"
        path.write_text("\nseq_000 0 1.0 2.0 3.0 4.0 0.5\n\n", encoding="utf-8")
        assert len(load_detections(path)) == 1

    def test_records_to_detections(self):
        dets = records_to_detections(some_records())
        assert [d.score for d in dets] == [0.75, 1.0, 0.001]
        assert dets[0].box == (1.0, 2.0, 3.5, 4.25)


class TestRunInference:
    def test_every_frame_clipped_exactly_once(self, model, sequences):
        clip_log = []
        run_inference(model, sequences, conf_thresh=0.9, clip_log=clip_log)
        seen = [(sid, t) for sid, t, _ in clip_log]
        expected = [(s.id, t) for s in sequences for t in range(len(s))]
        assert seen == expected

    def test_boundary_clips_are_padded(self, model, sequences):
        clip_log = []
        run_inference(model, sequences[:1], conf_thresh=0.9, clip_log=clip_log)
        by_frame = {t: idx for _, t, idx in clip_log}
        assert by_frame[0] == [0, 0, 1]
        assert by_frame[2] == [1, 2, 3]
        assert by_frame[5] == [4, 5, 5]

    def test_untrained_prior_suppresses_everything(self, model, sequences):
        # objectness starts at the 0.01 prior, so a normal threshold keeps nothing
        records = run_inference(model, sequences, conf_thresh=0.25)
        assert records == []

    def test_low_threshold_fires_everywhere(self, model, sequences):
        # at a floor below the prior every cell reports, which pins the
        # record count to cells x frames (boxes at adjacent cells are 8 px
        # apart with IoU 1/3, under the 0.65 NMS threshold)
        records = run_inference(model, sequences[:1], conf_thresh=0.001)
        cells = (48 // 8) ** 2
        assert len(records) == cells * len(sequences[0])

    def test_detections_scale_back_to_native_resolution(self, model):
        # an untrained head puts one unit-distance box at every cell centre of
        # the 48-px network grid; on a 96-px sequence those must come back
        # doubled: 32-px boxes centred on the 16-px grid at offset 8
        spec96 = SyntheticSpec(num_sequences=1, frames_per_sequence=3, image_size=96)
        seq96 = generate_sequence(spec96, 0)
        records = run_inference(model, [seq96], conf_thresh=0.001)
        assert records
        for r in records:
            x1, y1, x2, y2 = r.box
            assert x2 - x1 == pytest.approx(32.0, abs=1e-3)
            assert y2 - y1 == pytest.approx(32.0, abs=1e-3)
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            assert (cx - 8.0) % 16.0 == pytest.approx(0.0, abs=1e-3)
            assert (cy - 8.0) % 16.0 == pytest.approx(0.0, abs=1e-3)

    def test_deterministic_across_calls(self, model, sequences):
        a = run_inference(model, sequences, conf_thresh=0.001)
        b = run_inference(model, sequences, conf_thresh=0.001)
        assert a == b

    def test_batch_size_does_not_change_results(self, model, sequences):
        a = run_inference(model, sequences, conf_thresh=0.001, batch_size=1)
        b = run_inference(model, sequences, conf_thresh=0.001, batch_size=7)
        assert len(a) == len(b)
        for ra, rb in zip(a, b):
            assert ra.sequence_id == rb.sequence_id
            assert ra.frame_index == rb.frame_index
            assert ra.box == pytest.approx(rb.box, rel=1e-3, abs=1e-3)
            assert ra.score == pytest.approx(rb.score, rel=1e-3, abs=1e-4)
