""" """

# Standard library modules.
import json

# Third party modules.
import numpy as np

import pytest

# Local modules.
from rosar.detector import Detection, iou
from rosar.sonar import Annotation
from rosar.bound_search import RobustnessRecord, HIGH_EPS_UNSAFE
from rosar.metrics import (
    match_detections,
    average_precision,
    evaluate_detections,
    evaluate,
    robustness_stats,
    report,
    read_robustness_csv,
)

# Globals and constants variables.


def _detection(bbox, objectness=0.9, class_id=0):
    scores = (1.0, 0.0) if class_id == 0 else (0.0, 1.0)
    return Detection(tuple(bbox), objectness, scores, (0, 0))


def _record(model_id, kind, threshold, image_id="img"):
    return RobustnessRecord(
        image_id=image_id,
        cell=(1, 2),
        target_class=0,
        kind=kind,
        threshold=threshold,
        lower=0.0,
        upper=0.08,
        direction=HIGH_EPS_UNSAFE,
        model_id=model_id,
    )


def _ap_oracle(scores, hits, gt_count):
    order = sorted(range(len(scores)), key=lambda k: -scores[k])
    precisions = []
    recalls = []
    tp = 0
    for rank, k in enumerate(order, start=1):
        tp += hits[k]
        precisions.append(tp / rank)
        recalls.append(tp / gt_count)
    total = 0.0
    previous = 0.0
    for k, recall in enumerate(recalls):
        total += (recall - previous) * max(precisions[k:])
        previous = recall
    return total


@pytest.fixture
def annotations():
    return [
        Annotation(0, 0.3, 0.3, 0.2, 0.2),
        Annotation(1, 0.7, 0.6, 0.2, 0.3),
    ]


def test_perfect_detector(annotations):
    predictions = [[_detection(a.bbox, 0.9, a.class_id) for a in annotations]]
    result = evaluate_detections(predictions, [annotations], iou_threshold=0.5)

    assert result.tp_percent == pytest.approx(100.0)
    assert result.fp_count == 0
    assert result.ap == pytest.approx(1.0)
    assert result.gt_count == 2


def test_no_detection(annotations):
    result = evaluate_detections([[]], [annotations], iou_threshold=0.5)
    assert result.tp_percent == 0.0
    assert result.fp_count == 0
    assert result.ap == 0.0


def test_wrong_class_is_false_positive(annotations):
    predictions = [[_detection(annotations[0].bbox, 0.9, class_id=1)]]
    result = evaluate_detections(predictions, [annotations], iou_threshold=0.5)
    assert result.tp_percent == 0.0
    assert result.fp_count == 1


def test_duplicate_detection(annotations):
    box = annotations[0].bbox
    detections = [_detection(box, 0.6), _detection(box, 0.8)]

    ordered, matches = match_detections(detections, annotations, 0.5)

    assert [d.objectness for d in ordered] == [0.8, 0.6]
    assert matches == [0, None]


def test_match_below_iou_threshold(annotations):
    shifted = (0.4, 0.3, 0.2, 0.2)
    _, matches = match_detections([_detection(shifted)], annotations, 0.5)
    assert matches == [None]
    _, matches = match_detections([_detection(shifted)], annotations, 0.3)
    assert matches == [0]


def test_average_precision_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 15))
        scores = [float(s) for s in rng.uniform(size=n)]
        hits = [bool(h) for h in rng.integers(0, 2, size=n)]
        gt_count = sum(hits) + int(rng.integers(0, 4))
        if gt_count == 0:
            gt_count = 1
        assert average_precision(scores, hits, gt_count) == pytest.approx(
            _ap_oracle(scores, hits, gt_count), abs=1e-12
        )


def test_average_precision_no_ground_truth():
    with pytest.raises(ValueError, match="ground truth"):
        average_precision([0.5], [False], 0)


def test_evaluate_no_ground_truth():
    with pytest.raises(ValueError, match="no ground truth"):
        evaluate_detections([[]], [[]])


def test_evaluate_length_mismatch(annotations):
    with pytest.raises(ValueError, match="prediction lists"):
        evaluate_detections([[], []], [annotations])


def _scene(rng):
    """
    Two or three images with up to three boxes each and at most five
    detections per image. Detections are jittered copies of boxes, some with
    the wrong class, plus stray boxes.
    """
    predictions = []
    ground_truth = []
    for _ in range(int(rng.integers(2, 4))):
        boxes = [
            Annotation(
                int(rng.integers(0, 2)),
                float(rng.uniform(0.2, 0.8)),
                float(rng.uniform(0.2, 0.8)),
                float(rng.uniform(0.1, 0.3)),
                float(rng.uniform(0.1, 0.3)),
            )
            for _ in range(int(rng.integers(0, 4)))
        ]
        detections = []
        for _ in range(int(rng.integers(0, 6))):
            if boxes and rng.uniform() < 0.7:
                box = boxes[int(rng.integers(0, len(boxes)))]
                bbox = (
                    box.cx + float(rng.normal(0.0, 0.03)),
                    box.cy + float(rng.normal(0.0, 0.03)),
                    box.w * float(rng.uniform(0.7, 1.3)),
                    box.h * float(rng.uniform(0.7, 1.3)),
                )
                class_id = box.class_id if rng.uniform() < 0.8 else 1 - box.class_id
            else:
                bbox = tuple(float(v) for v in rng.uniform(0.1, 0.9, size=2)) + (0.2, 0.2)
                class_id = int(rng.integers(0, 2))
            detections.append(_detection(bbox, float(rng.uniform(0.3, 1.0)), class_id))
        predictions.append(detections)
        ground_truth.append(boxes)
    if not any(ground_truth):
        ground_truth[0].append(Annotation(0, 0.5, 0.5, 0.2, 0.2))
    return predictions, ground_truth


def _brute_force_scores(predictions, ground_truth, iou_threshold):
    tp_count = 0
    fp_count = 0
    scored = []
    for detections, boxes in zip(predictions, ground_truth):
        used = set()
        for detection in sorted(detections, key=lambda d: -d.objectness):
            candidates = [
                k
                for k, box in enumerate(boxes)
                if k not in used
                and box.class_id == detection.class_argmax
                and iou(detection.bbox, box.bbox) >= iou_threshold
            ]
            if candidates:
                best = max(candidates, key=lambda k: (iou(detection.bbox, boxes[k].bbox), -k))
                used.add(best)
                tp_count += 1
                scored.append((detection.objectness, True))
            else:
                fp_count += 1
                scored.append((detection.objectness, False))

    gt_count = sum(len(boxes) for boxes in ground_truth)

    # precision and recall at every objectness threshold
    curve = []
    for threshold, _ in scored:
        kept = [hit for score, hit in scored if score >= threshold]
        curve.append((sum(kept) / gt_count, sum(kept) / len(kept)))

    ap = 0.0
    previous = 0.0
    for recall in sorted({r for r, _ in curve}):
        if recall == 0.0:
            continue
        ap += (recall - previous) * max(p for r, p in curve if r >= recall)
        previous = recall

    return 100.0 * tp_count / gt_count, fp_count, ap


@pytest.mark.parametrize("seed", range(20))
def test_evaluate_detections_oracle(seed):
    rng = np.random.default_rng(seed)
    predictions, ground_truth = _scene(rng)

    result = evaluate_detections(predictions, ground_truth, iou_threshold=0.5)
    tp_percent, fp_count, ap = _brute_force_scores(predictions, ground_truth, 0.5)

    assert result.tp_percent == pytest.approx(tp_percent)
    assert result.fp_count == fp_count
    assert result.ap == pytest.approx(ap, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_evaluate_detections_order_invariant(seed):
    rng = np.random.default_rng(seed)
    predictions, ground_truth = _scene(rng)
    shuffled = [[ds[k] for k in rng.permutation(len(ds))] for ds in predictions]

    expected = evaluate_detections(predictions, ground_truth, iou_threshold=0.5)
    result = evaluate_detections(shuffled, ground_truth, iou_threshold=0.5)

    assert result.tp_percent == expected.tp_percent
    assert result.fp_count == expected.fp_count
    assert result.ap == expected.ap


@pytest.mark.parametrize("workers", [1, 2])
def test_evaluate_constant_model(constant_model, gray_dataset, workers):
    # every cell fires with a box one cell wide, too small to match the target
    result = evaluate(constant_model, gray_dataset, workers=workers)

    assert result.tp_percent == 0.0
    assert result.fp_count == 2 * 64
    assert result.ap == 0.0
    assert [r.image_id for r in result.images] == ["gray-0", "gray-1"]


def test_robustness_stats_single():
    stats = robustness_stats([0.05])
    assert stats.mean == stats.median == stats.q1 == stats.q3 == pytest.approx(0.05)
    assert stats.count == 1


def test_robustness_stats_quartiles():
    stats = robustness_stats([1.0, 2.0, 3.0, 4.0])
    assert stats.mean == pytest.approx(2.5)
    assert stats.median == pytest.approx(2.5)
    assert stats.q1 == pytest.approx(1.75)
    assert stats.q3 == pytest.approx(3.25)


def test_robustness_stats_oracle():
    values = np.random.default_rng(3).uniform(size=1000)
    ordered = np.sort(values)

    def quantile(q):
        position = q * (len(ordered) - 1)
        below = int(np.floor(position))
        above = min(below + 1, len(ordered) - 1)
        return ordered[below] + (position - below) * (ordered[above] - ordered[below])

    stats = robustness_stats(list(values))
    assert stats.mean == pytest.approx(values.mean())
    assert stats.median == pytest.approx(quantile(0.5))
    assert stats.q1 == pytest.approx(quantile(0.25))
    assert stats.q3 == pytest.approx(quantile(0.75))


def test_robustness_stats_records():
    stats = robustness_stats([_record("m", "p1", 0.02), _record("m", "p1", 0.04)])
    assert stats.mean == pytest.approx(0.03)


def test_robustness_stats_empty():
    with pytest.raises(ValueError, match="at least one"):
        robustness_stats([])


def test_report(tmp_path, annotations):
    records = [
        _record("original", "p1", 0.02, "a"),
        _record("original", "p1", 0.04, "b"),
        _record("retrained", "p1", 0.05, "a"),
        _record("retrained", "p1", 0.07, "b"),
    ]
    evaluation = evaluate_detections([[]], [annotations])

    summary = report(
        records,
        str(tmp_path),
        evaluations={"original": {"clean": evaluation}},
        baseline_model="original",
        extra={"seed": 7},
    )

    rows = read_robustness_csv(str(tmp_path / "robustness.csv"))
    assert len(rows) == 4
    assert list(rows[0]) == [
        "model_id",
        "property",
        "image_id",
        "cell_i",
        "cell_j",
        "threshold",
        "iterations",
        "any_deadline_fired",
        "schema_version",
    ]
    assert rows[0]["model_id"] == "original"
    assert rows[0]["cell_j"] == "2"
    assert float(rows[2]["threshold"]) == 0.05
    assert rows[0]["schema_version"] == "1"

    with open(tmp_path / "summary.json", "r", encoding="utf-8") as fp:
        on_disk = json.load(fp)
    assert on_disk == summary
    assert summary["seed"] == 7
    assert summary["robustness"]["original"]["p1"]["mean"] == pytest.approx(0.03)
    assert summary["deltas"]["retrained"]["p1"]["mean"] == pytest.approx(0.03)
    assert summary["deltas"]["retrained"]["p1"]["median"] == pytest.approx(0.03)
    assert summary["detection"]["original"]["clean"]["ap"] == 0.0
    assert summary["ap_interpolation"] == "all-point"


def test_report_without_baseline(tmp_path):
    summary = report([_record("m", "p2", 0.8)], str(tmp_path))
    assert summary["deltas"] == {}
    assert summary["detection"] == {}
