"""VOC-style average precision over oriented boxes.

Matching is greedy per (image, category): detections in score order each
claim the highest-IoU not-yet-claimed ground-truth box at or above the
matching threshold. A detection whose only qualifying matches are marked
difficult is ignored entirely; difficult objects never count toward the
recall denominator and are never consumed.

AP comes in the two PASCAL flavors: the 11-point interpolation (voc07) and
the exact area under the precision envelope (voc12).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

from .geometry import iou
from .ingest import Detection, DetectionRun, GroundTruth, GroundTruthObject

DEFAULT_MATCH_IOU = 0.5

# Detection outcomes from matching.
TP = "tp"
FP = "fp"
IGNORED = "ignored"


@dataclass
class EvalResult:
    per_category_ap: dict[str, float]
    mean_ap: float
    pr_curves: dict[str, list[tuple[float, float]]]
    matching_iou: float
    ap_mode: str
    n_positive: dict[str, int] = field(default_factory=dict)


def match_detections(
    dets: list[Detection],
    gts: list[GroundTruthObject],
    iou_match_thresh: float = DEFAULT_MATCH_IOU,
) -> list[str]:
    """Flag each detection TP / FP / IGNORED against one image's objects.

    ``dets`` must already be sorted by descending score; flags are returned
    in the same order.
    """
    claimed = [False] * len(gts)
    flags = []
    for det in dets:
        best_easy = -1
        best_easy_iou = 0.0
        saw_difficult = False
        for j, obj in enumerate(gts):
            overlap = iou(det.obb, obj.obb)
            if overlap < iou_match_thresh:
                continue
            if obj.difficult:
                saw_difficult = True
            elif not claimed[j] and overlap > best_easy_iou:
                best_easy = j
                best_easy_iou = overlap
        if best_easy >= 0:
            claimed[best_easy] = True
            flags.append(TP)
        elif saw_difficult:
            flags.append(IGNORED)
        else:
            flags.append(FP)
    return flags


def _precision_recall(flags: list[str], n_positive: int) -> list[tuple[float, float]]:
    points = []
    tp = fp = 0
    for flag in flags:
        if flag == TP:
            tp += 1
        elif flag == FP:
            fp += 1
        else:
            continue
        recall = tp / n_positive if n_positive > 0 else 0.0
        precision = tp / (tp + fp)
        points.append((recall, precision))
    return points


def average_precision(scored_flags, n_positive: int, mode: str = "voc12") -> float:
    """AP from (score, flag) pairs; flags from match_detections.

    voc07: mean of the max precision at the 11 recalls {0, 0.1, ..., 1}.
    voc12: exact area under the monotone precision envelope.
    """
    if mode not in ("voc07", "voc12"):
        raise ValueError(f"unknown AP mode {mode!r}")
    if n_positive == 0:
        warnings.warn("no positive ground-truth objects; AP defined as 0", stacklevel=2)
        return 0.0
    ordered = sorted(range(len(scored_flags)), key=lambda i: -scored_flags[i][0])
    flags = [scored_flags[i][1] for i in ordered]
    points = _precision_recall(flags, n_positive)
    if not points:
        return 0.0
    if mode == "voc07":
        total = 0.0
        for k in range(11):
            t = k / 10.0
            best = 0.0
            for recall, precision in points:
                if recall >= t and precision > best:
                    best = precision
            total += best
        return total / 11.0
    # voc12: envelope precision, summed over recall increments.
    envelope = []
    best = 0.0
    for recall, precision in reversed(points):
        if precision > best:
            best = precision
        envelope.append((recall, best))
    envelope.reverse()
    ap = 0.0
    prev_recall = 0.0
    for recall, precision in envelope:
        if recall > prev_recall:
            ap += (recall - prev_recall) * precision
            prev_recall = recall
    return ap


def evaluate(
    run: DetectionRun,
    ground_truth: GroundTruth,
    iou_match_thresh: float = DEFAULT_MATCH_IOU,
    ap_mode: str = "voc12",
    threads: int = 1,
) -> EvalResult:
    """Per-category AP and their mean for one detection run."""
    det_groups = run.grouped()
    gt_groups = ground_truth.grouped()
    categories = sorted(
        {cat for _, cat in det_groups} | {cat for _, cat in gt_groups}
    )

    def eval_category(category):
        n_positive = sum(
            1
            for (_, cat), objs in gt_groups.items()
            if cat == category
            for obj in objs
            if not obj.difficult
        )
        scored_flags = []
        images = sorted(
            {img for img, cat in det_groups if cat == category}
            | {img for img, cat in gt_groups if cat == category}
        )
        for image_id in images:
            dets = sorted(
                det_groups.get((image_id, category), []), key=lambda d: -d.score
            )
            gts = gt_groups.get((image_id, category), [])
            flags = match_detections(dets, gts, iou_match_thresh)
            scored_flags.extend((det.score, flag) for det, flag in zip(dets, flags))
        ap = average_precision(scored_flags, n_positive, ap_mode)
        ordered = sorted(scored_flags, key=lambda sf: -sf[0])
        curve = _precision_recall([f for _, f in ordered], n_positive)
        return ap, curve, n_positive

    if threads > 1 and len(categories) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(eval_category, categories))
    else:
        results = [eval_category(cat) for cat in categories]

    per_category_ap = {cat: res[0] for cat, res in zip(categories, results)}
    pr_curves = {cat: res[1] for cat, res in zip(categories, results)}
    n_positive_by_cat = {cat: res[2] for cat, res in zip(categories, results)}
    mean_ap = sum(per_category_ap.values()) / len(per_category_ap) if per_category_ap else 0.0
    return EvalResult(
        per_category_ap=per_category_ap,
        mean_ap=mean_ap,
        pr_curves=pr_curves,
        matching_iou=iou_match_thresh,
        ap_mode=ap_mode,
        n_positive=n_positive_by_cat,
    )
