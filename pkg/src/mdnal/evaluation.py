"""VOC-style mean average precision with all-point interpolation."""
from __future__ import annotations

import csv

import numpy as np

from .detector import detect, iou_matrix


def average_precision(detections, ground_truth, class_id: int, iou_threshold: float) -> float | None:
    """AP of one class, or None when the class has no GT.

    ``detections[i]`` / ``ground_truth[i]`` are per-image lists of
    ``(class_id, box_xywh, confidence)`` and ``(class_id, box_xywh)``.
    A detection is a true positive when its best-overlapping GT of the class
    has IoU strictly above the threshold and was not already claimed by a
    higher-scoring detection.
    """
    gts = {}
    n_gt = 0
    for i, objs in enumerate(ground_truth):
        boxes = [np.asarray(b, dtype=np.float64) for c, b in objs if c == class_id]
        gts[i] = (np.array(boxes).reshape(-1, 4), np.zeros(len(boxes), bool))
        n_gt += len(boxes)
    if n_gt == 0:
        return None
    dets = [(conf, i, j, np.asarray(box, dtype=np.float64))
            for i, ds in enumerate(detections)
            for j, (c, box, conf) in enumerate(ds) if c == class_id]
    dets.sort(key=lambda t: (-t[0], t[1], t[2]))
    tp = np.zeros(len(dets))
    for r, (_, i, _, box) in enumerate(dets):
        boxes, claimed = gts.get(i, (np.zeros((0, 4)), np.zeros(0, bool)))
        if not len(boxes):
            continue
        ov = iou_matrix(box[None], boxes)[0]
        best = int(ov.argmax())
        if ov[best] > iou_threshold and not claimed[best]:
            claimed[best] = True
            tp[r] = 1.0
    if not len(dets):
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(dets) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def mean_average_precision(detections, ground_truth, n_classes: int, iou_threshold: float) -> float:
    if not len(ground_truth):
        raise ValueError("mAP needs at least one test image")
    aps = [average_precision(detections, ground_truth, c, iou_threshold) for c in range(1, n_classes + 1)]
    aps = [a for a in aps if a is not None]
    if not aps:
        raise ValueError("no ground-truth objects in the test set")
    return float(np.mean(aps))


def scene_ground_truth(scenes, clean: bool = False) -> list:
    """Per-scene (class, box) lists; ``clean`` uses the rendered extent instead of the (possibly jittered) label."""
    if clean:
        return [[(c, m.true_box.as_array()) for (c, _), m in zip(s.objects, s.meta)] for s in scenes]
    return [[(c, b.as_array()) for c, b in s.objects] for s in scenes]


def detections_as_tuples(dets) -> list:
    return [(d.class_id, d.box.as_array(), d.confidence) for d in dets]


def evaluate_map(params: dict, config, scenes, thresholds=(0.5, 0.75), clean: bool = False) -> dict:
    """Run the detector over ``scenes`` and report mAP per IoU threshold."""
    if not len(scenes):
        raise ValueError("empty test set")
    dets = [detections_as_tuples(d) for d, _, _ in detect(params, config, scenes)]
    gt = scene_ground_truth(scenes, clean)
    return {t: mean_average_precision(dets, gt, config.n_classes, t) for t in thresholds}


PRED_HEADER = ("image_id", "class", "x", "y", "w", "h", "confidence")
GT_HEADER = ("image_id", "class", "x", "y", "w", "h")


def read_box_csv(path, with_confidence: bool):
    """Per-image lists keyed by image id from a predictions or ground-truth CSV."""
    header = PRED_HEADER if with_confidence else GT_HEADER
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(header) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            box = np.array([float(row[k]) for k in ("x", "y", "w", "h")])
            item = (int(row["class"]), box, float(row["confidence"])) if with_confidence else (int(row["class"]), box)
            out.setdefault(int(row["image_id"]), []).append(item)
    return out


def write_box_csv(path, per_image: dict, with_confidence: bool) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER if with_confidence else GT_HEADER)
        for image_id in sorted(per_image):
            for item in per_image[image_id]:
                w.writerow([image_id, item[0]] + [repr(float(v)) for v in item[1]]
                           + ([repr(float(item[2]))] if with_confidence else []))


def map_from_files(pred_path, gt_path, n_classes: int | None = None, thresholds=(0.5, 0.75)) -> dict:
    """mAP of a predictions CSV against a ground-truth CSV over the union of their image ids."""
    gt = read_box_csv(gt_path, False)
    preds = read_box_csv(pred_path, True)
    ids = sorted(set(gt) | set(preds))
    if n_classes is None:
        n_classes = max(c for objs in gt.values() for c, _ in objs)
    dets = [preds.get(i, []) for i in ids]
    gts = [gt.get(i, []) for i in ids]
    return {t: mean_average_precision(dets, gts, n_classes, t) for t in thresholds}
