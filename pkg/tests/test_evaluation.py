import json
import math
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from cldtrack.errors import DegenerateInputError, SequenceFormatError
from cldtrack.evaluation import (METRIC_KEYS, SequenceDataset, aggregate, ao_sr, compute_metrics, evaluate_many,
                                 evaluate_predictions, load_sequence, normalized_precision, precision_at,
                                 read_boxes, run_ope, success_curve, write_report_csv, write_report_json,
                                 write_sequence)
from cldtrack.geometry import BBox, iou


def test_iou_examples():
    assert iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)) == 1.0
    assert iou(BBox(0, 0, 2, 2), BBox(5, 5, 2, 2)) == 0.0
    assert abs(iou(BBox(0, 0, 2, 2), BBox(1, 1, 2, 2)) - 1 / 7) < 1e-15


def test_success_curve_edges(rng):
    pts, s = success_curve(np.ones(10))
    assert pts[-1] == 0 and np.all(pts[:-1] == 1) and s == 20 / 21
    assert success_curve(np.zeros(7))[1] == 0.0
    v = rng.random(50)
    pts, s = success_curve(v)
    for k in range(21):
        assert pts[k] == sum(1 for x in v if x > k / 20) / 50
    assert s == math.fsum(pts) / 21
    with pytest.raises(DegenerateInputError):
        success_curve([])


def test_precision_and_ao():
    assert precision_at([0, 0, 0]) == 1.0 and precision_at([21, 21]) == 0.0
    assert precision_at([5, 20, 20.5, 40]) == 0.5
    assert ao_sr([0.6] * 4) == (0.6, 1.0, 0.0)
    assert ao_sr([1.0] * 3) == (1.0, 1.0, 1.0)


def test_normalized_precision_edges():
    gts = [BBox(10, 10, 20, 30), BBox(0, 0, 5, 5)]
    assert normalized_precision(gts, gts) == 20 / 21
    far = [BBox(100, 100, 20, 30), BBox(50, 50, 5, 5)]
    assert normalized_precision(far, gts) == 0.0


def test_metrics_match_brute_force(rng):
    for _ in range(25):
        preds, gts = oracles.random_sequence(rng, int(rng.integers(1, 60)))
        rep = compute_metrics(preds, gts)
        assert rep.metrics() == oracles.metrics(preds, gts)


@given(st.integers(0, 10_000))
def test_metrics_are_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    preds, gts = oracles.random_sequence(rng, 20)
    perm = rng.permutation(20)
    a = compute_metrics(preds, gts).metrics()
    b = compute_metrics([preds[i] for i in perm], [gts[i] for i in perm]).metrics()
    for k in METRIC_KEYS:
        assert abs(a[k] - b[k]) < 1e-15


@given(st.integers(0, 10_000), st.integers(0, 19))
def test_fixing_a_frame_never_hurts(seed, i):
    rng = np.random.default_rng(seed)
    preds, gts = oracles.random_sequence(rng, 20)
    before = compute_metrics(preds, gts).metrics()
    preds[i] = gts[i]
    after = compute_metrics(preds, gts).metrics()
    assert all(after[k] >= before[k] - 1e-15 for k in METRIC_KEYS)


def test_absent_frames_and_attributes():
    gts = [BBox(0, 0, 10, 10), None, BBox(5, 5, 10, 10)]
    preds = [BBox(0, 0, 10, 10), BBox(90, 90, 1, 1), BBox(5, 5, 10, 10)]
    rep = compute_metrics(preds, gts, attributes={"fast": [False, True, True]})
    assert rep.n_frames == 2 and rep.AO == 1.0
    assert rep.per_attribute["fast"]["AO"] == 1.0
    with pytest.raises(DegenerateInputError):
        compute_metrics(preds[:2], gts)


def test_box_file_parsing(tmp_path):
    p = tmp_path / "gt.txt"
    p.write_text("10,20,30,40\n11,21,30,40\n12,22,30,40\n\n")
    assert read_boxes(p) == [BBox(10, 20, 30, 40), BBox(11, 21, 30, 40), BBox(12, 22, 30, 40)]
    p.write_text("10,20,30\n")
    with pytest.raises(SequenceFormatError) as info:
        read_boxes(p)
    assert info.value.line == 1 and "line 1" in str(info.value)
    p.write_text("1,2,3,4\n1,2,x,4\n")
    with pytest.raises(SequenceFormatError) as info:
        read_boxes(p)
    assert info.value.line == 2
    p.write_text("1,2,3,4\n0,0,0,0\n")
    assert read_boxes(p, absent=[False, True]) == [BBox(1, 2, 3, 4), None]
    with pytest.raises(SequenceFormatError):
        read_boxes(p)


def _synthetic(rng, n=6):
    frames = [rng.random((24, 24, 3)) for _ in range(n)]
    boxes = [BBox(float(2 + i), 3.0 + 0.5 * i, 8.25, 7.0) for i in range(n)]
    return frames, boxes


@pytest.mark.parametrize("fmt", ["png", "npy"])
def test_sequence_round_trip(tmp_path, rng, fmt):
    frames, boxes = _synthetic(rng)
    ds = write_sequence(tmp_path / "seq", frames, boxes, language="a red square", fmt=fmt)
    back = load_sequence(tmp_path / "seq")
    assert back.gt_boxes == boxes == ds.gt_boxes and back.language == "a red square" and len(back) == 6
    if fmt == "npy":
        assert np.array_equal(back.frame(2), frames[2])
    else:
        assert np.max(np.abs(back.frame(2) - frames[2])) <= 0.5 / 255 + 1e-12


def test_sequence_flags_and_errors(tmp_path, rng):
    frames, boxes = _synthetic(rng, 4)
    d = tmp_path / "seq"
    write_sequence(d, frames, boxes, fmt="npy")
    (d / "out_of_view.txt").write_text("0,0,1,0")
    (d / "attr_blur.txt").write_text("1\n0\n1\n1\n")
    ds = load_sequence(d)
    assert ds.gt_boxes[2] is None and ds.absent == [False, False, True, False]
    assert ds.attributes == {"blur": [True, False, True, True]}
    (d / "attr_bad.txt").write_text("1,0")
    with pytest.raises(SequenceFormatError):
        load_sequence(d)
    (d / "attr_bad.txt").unlink()
    (d / "groundtruth.txt").write_text("1,1,5,5\n" * 3)
    with pytest.raises(SequenceFormatError):
        load_sequence(d)
    with pytest.raises(SequenceFormatError):
        load_sequence(tmp_path / "missing")
    with pytest.raises(SequenceFormatError):
        SequenceDataset("x", [0, 1], [None, BBox(1, 1, 1, 1)])


class EchoTracker:
    def __init__(self, gts):
        self.gts, self.t = gts, 0

    def initialize(self, frame, box):
        self.t = 0

    def track(self, frame):
        self.t += 1
        return self.gts[self.t]


class ConstantTracker:
    def initialize(self, frame, box):
        self.box = box

    def track(self, frame):
        return self.box


class BrokenTracker(ConstantTracker):
    def track(self, frame):
        raise RuntimeError("lost")


def _moving(n=12):
    return SequenceDataset("mv", [np.zeros((4, 4, 3))] * n, [BBox(10.0 + 3 * t, 20.0, 15.0, 15.0) for t in range(n)])


def test_echo_tracker_is_perfect():
    ds = _moving()
    rep, preds = run_ope(lambda: EchoTracker(ds.gt_boxes), ds)
    assert preds == ds.gt_boxes
    assert (rep.S, rep.P, rep.AO, rep.NP) == (20 / 21, 1.0, 1.0, 20 / 21)


def test_constant_tracker_replay(tmp_path):
    ds = _moving()
    rep, preds = run_ope(ConstantTracker, ds, tmp_path / "pred.txt")
    first = ds.gt_boxes[0]
    ious = []
    for t in range(len(ds)):
        g = ds.gt_boxes[t]
        overlap = max(0.0, first.x + 15 - g.x) * 15
        ious.append(overlap / (2 * 225 - overlap))
    assert np.allclose(ious, [iou(first, g) for g in ds.gt_boxes], atol=1e-15)
    assert abs(rep.AO - np.mean(ious)) < 1e-15
    assert rep.metrics() == oracles.metrics(preds, ds.gt_boxes)
    assert read_boxes(tmp_path / "pred.txt") == preds
    assert evaluate_predictions(preds, ds).metrics() == rep.metrics()


def test_tracker_failure_gives_partial_invalid_report():
    rep, preds = run_ope(BrokenTracker, _moving())
    assert not rep.valid and "frame 2" in rep.error and len(preds) == 1 and rep.n_frames == 1


def test_parallel_evaluation_keeps_order():
    barrier = threading.Barrier(3)

    def job(i):
        def run():
            barrier.wait(timeout=5)
            return compute_metrics([BBox(0, 0, 1 + i, 1)], [BBox(0, 0, 1 + i, 1)], name=f"s{i}")
        return run

    reports = evaluate_many([job(i) for i in range(3)], workers=3)
    assert [r.name for r in reports] == ["s0", "s1", "s2"]


def test_report_files(tmp_path, rng):
    reps = [compute_metrics(*oracles.random_sequence(rng, 10), name=f"s{i}") for i in range(3)]
    write_report_csv(tmp_path / "r.csv", reps)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "sequence,S,NP,P,AO,SR_050,SR_075,n_frames,valid"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["s0", "s1", "s2", "ALL"]
    all_row = aggregate(reps)
    assert abs(all_row.S - np.mean([r.S for r in reps])) < 1e-15 and all_row.n_frames == 30
    write_report_json(tmp_path / "r.json", reps)
    doc = json.loads((tmp_path / "r.json").read_text())
    assert len(doc["success_thresholds"]) == 21
