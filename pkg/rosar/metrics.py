"""
Detection metrics, robustness statistics and result files.
"""

__all__ = [
    "EvalReport",
    "ImageResult",
    "RobustnessStats",
    "match_detections",
    "average_precision",
    "evaluate_detections",
    "evaluate",
    "robustness_stats",
    "report",
    "read_robustness_csv",
]

# Standard library modules.
import csv
import concurrent.futures
import dataclasses
import io
import logging
import os

# Third party modules.
import numpy as np

# Local modules.
from rosar.rcsetup import rcParams
from rosar.detector import forward, decode, iou
from rosar.fileio import atomic_write_text, write_json

# Globals and constants variables.
logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
AP_INTERPOLATION = "all-point"

CSV_COLUMNS = [
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


@dataclasses.dataclass
class ImageResult:
    image_id: str
    gt_count: int
    matches: list
    scores: list
    true_positives: list

    @property
    def tp_count(self):
        return len(self.matches)

    @property
    def fp_count(self):
        return len(self.scores) - sum(self.true_positives)


@dataclasses.dataclass
class EvalReport:
    tp_percent: float
    fp_count: int
    ap: float
    iou_threshold: float
    conf_threshold: float
    gt_count: int
    images: list = dataclasses.field(default_factory=list)

    def to_dict(self):
        return {
            "tp_percent": self.tp_percent,
            "fp": self.fp_count,
            "ap": self.ap,
            "iou_threshold": self.iou_threshold,
            "conf_threshold": self.conf_threshold,
            "gt_count": self.gt_count,
        }


@dataclasses.dataclass
class RobustnessStats:
    mean: float
    median: float
    q1: float
    q3: float
    count: int
    values: list

    def to_dict(self):
        return {
            "mean": self.mean,
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "count": self.count,
        }


def _detection_key(detection):
    return (-detection.objectness, tuple(detection.bbox), tuple(detection.class_scores))


def match_detections(detections, annotations, iou_threshold):
    """
    Greedily matches detections to ground truth boxes. Detections are visited
    by decreasing objectness; each one takes the unmatched box of the same
    class with the highest IoU, provided the IoU reaches *iou_threshold*.

    :return: sorted detections, and for each of them the index of the matched
        annotation or ``None``
    """
    detections = sorted(detections, key=_detection_key)
    used = set()
    matches = []
    for detection in detections:
        overlaps = [iou(detection.bbox, a.bbox) for a in annotations]
        match = None
        for index in sorted(range(len(annotations)), key=lambda k: (-overlaps[k], k)):
            if index in used:
                continue
            if overlaps[index] < iou_threshold:
                break
            if annotations[index].class_id == detection.class_argmax:
                match = index
                used.add(index)
                break
        matches.append(match)
    return detections, matches


def average_precision(scores, true_positives, gt_count):
    """
    Area under the all-point interpolated precision-recall curve.
    """
    if gt_count <= 0:
        raise ValueError(f"Average precision needs ground truth boxes, got {gt_count}")
    if not scores:
        return 0.0

    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(true_positives, dtype=np.float64)[order]
    cumulative = np.cumsum(hits)
    precisions = cumulative / (np.arange(len(hits)) + 1)
    recalls = cumulative / gt_count

    precisions = np.concatenate([[0.0], precisions, [0.0]])
    recalls = np.concatenate([[0.0], recalls, [1.0]])
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])

    indices = np.where(recalls[:-1] != recalls[1:])[0] + 1
    return float(np.sum((recalls[indices] - recalls[indices - 1]) * precisions[indices]))


def _image_result(image_id, detections, annotations, iou_threshold):
    detections, matches = match_detections(detections, annotations, iou_threshold)
    return ImageResult(
        image_id=image_id,
        gt_count=len(annotations),
        matches=[(k, m) for k, m in enumerate(matches) if m is not None],
        scores=[d.objectness for d in detections],
        true_positives=[m is not None for m in matches],
    )


def _reduce(results, iou_threshold, conf_threshold):
    gt_count = sum(r.gt_count for r in results)
    if gt_count == 0:
        raise ValueError("Dataset has no ground truth box, metrics are undefined")
    tp_count = sum(r.tp_count for r in results)
    scores = [s for r in results for s in r.scores]
    hits = [t for r in results for t in r.true_positives]
    return EvalReport(
        tp_percent=100.0 * tp_count / gt_count,
        fp_count=sum(r.fp_count for r in results),
        ap=average_precision(scores, hits, gt_count),
        iou_threshold=iou_threshold,
        conf_threshold=conf_threshold,
        gt_count=gt_count,
        images=results,
    )


def evaluate_detections(predictions, ground_truth, iou_threshold=None, conf_threshold=0.0):
    """
    Computes %TP, FP and AP from already decoded detections.

    :arg predictions: list of detection lists, one per image
    :arg ground_truth: list of annotation lists, one per image
    """
    if iou_threshold is None:
        iou_threshold = rcParams["eval.iou_threshold"]
    if len(predictions) != len(ground_truth):
        raise ValueError(
            f"{len(predictions)} prediction lists for {len(ground_truth)} images"
        )
    results = [
        _image_result(str(k), detections, annotations, iou_threshold)
        for k, (detections, annotations) in enumerate(zip(predictions, ground_truth))
    ]
    return _reduce(results, iou_threshold, conf_threshold)


def evaluate(model, dataset, iou_threshold=None, conf_threshold=None, workers=1):
    """
    Runs the detector on every image of *dataset* and scores the detections.

    :arg iou_threshold: minimum IoU of a match
        (default: rcParams['eval.iou_threshold'] or ``0.5``)
    :arg conf_threshold: objectness threshold of the decoder
        (default: rcParams['detector.conf_threshold'] or ``0.25``)
    :arg workers: number of threads
    :rtype: :class:`EvalReport`
    """
    if iou_threshold is None:
        iou_threshold = rcParams["eval.iou_threshold"]
    if conf_threshold is None:
        conf_threshold = rcParams["detector.conf_threshold"]
    if len(dataset) == 0:
        raise ValueError("Cannot evaluate on an empty dataset")

    def score(entry):
        detections = decode(forward(model, entry.image), conf_threshold=conf_threshold)
        return _image_result(entry.image_id, detections, entry.annotations, iou_threshold)

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(score, dataset))
    else:
        results = [score(entry) for entry in dataset]
    return _reduce(results, iou_threshold, conf_threshold)


def robustness_stats(records):
    """
    Mean, median and quartiles of the thresholds of *records*. Quartiles use
    linear interpolation between order statistics.

    :arg records: :class:`rosar.bound_search.RobustnessRecord` or plain
        numbers
    """
    values = [getattr(r, "threshold", r) for r in records]
    if not values:
        raise ValueError("Robustness statistics need at least one record")
    array = np.asarray(values, dtype=np.float64)
    q1, median, q3 = np.percentile(array, [25.0, 50.0, 75.0])
    return RobustnessStats(
        mean=float(array.mean()),
        median=float(median),
        q1=float(q1),
        q3=float(q3),
        count=len(values),
        values=[float(v) for v in values],
    )


def _csv_rows(records):
    for record in records:
        yield {
            "model_id": record.model_id,
            "property": record.kind,
            "image_id": record.image_id,
            "cell_i": record.cell[0],
            "cell_j": record.cell[1],
            "threshold": repr(float(record.threshold)),
            "iterations": len(record.iterations),
            "any_deadline_fired": int(record.any_deadline_fired),
            "schema_version": SCHEMA_VERSION,
        }


def report(records, out_dir, evaluations=None, baseline_model=None, extra=None):
    """
    Writes ``robustness.csv`` and ``summary.json`` to *out_dir*.

    :arg records: :class:`rosar.bound_search.RobustnessRecord` of all models
        and properties
    :arg evaluations: ``{model_id: {dataset: EvalReport}}``
    :arg baseline_model: model the deltas are computed against
    :arg extra: additional entries of the summary
    :return: the summary
    """
    os.makedirs(out_dir, exist_ok=True)

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(_csv_rows(records))
    atomic_write_text(os.path.join(out_dir, "robustness.csv"), buf.getvalue())

    robustness = {}
    for model_id in sorted({r.model_id for r in records}):
        robustness[model_id] = {}
        for kind in sorted({r.kind for r in records if r.model_id == model_id}):
            selected = [r for r in records if r.model_id == model_id and r.kind == kind]
            robustness[model_id][kind] = robustness_stats(selected).to_dict()

    deltas = {}
    if baseline_model is not None and baseline_model in robustness:
        before = robustness[baseline_model]
        for model_id, by_kind in robustness.items():
            if model_id == baseline_model:
                continue
            deltas[model_id] = {
                kind: {
                    "mean": stats["mean"] - before[kind]["mean"],
                    "median": stats["median"] - before[kind]["median"],
                }
                for kind, stats in by_kind.items()
                if kind in before
            }

    detection = {
        model_id: {
            name: rep.to_dict() if hasattr(rep, "to_dict") else dict(rep)
            for name, rep in by_dataset.items()
        }
        for model_id, by_dataset in (evaluations or {}).items()
    }

    summary = {
        "schema_version": SCHEMA_VERSION,
        "ap_interpolation": AP_INTERPOLATION,
        "iou_threshold": rcParams["eval.iou_threshold"],
        "xi_obj": rcParams["property.xi_obj"],
        "baseline_model": baseline_model,
        "detection": detection,
        "robustness": robustness,
        "deltas": deltas,
    }
    if extra:
        summary.update(extra)
    write_json(os.path.join(out_dir, "summary.json"), summary)
    logger.info("Wrote report for %d record(s) to %s", len(records), out_dir)
    return summary


def read_robustness_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fp:
        return list(csv.DictReader(fp))
