"""Cluster fusion: stacked, NMS, and WBF ensembles.

Stacking fuses each cluster into one box. Center, width, and height are
means weighted by each member's calibrated score s* = sigma(z * w_l + b).
Orientation is cyclic: relative angles to the highest-s* member's
orientation are averaged with the same weights, then folded back into
[0, pi). The fused confidence is the meta-learner probability of the
cluster's logit vector.

The baselines reuse the same clustering. NMS keeps each cluster center
unchanged; WBF weights geometry by raw scores and reports the mean raw
score scaled by (#contributing models / M).

Every ensemble returns a fresh single-model run (model_index 1), so
feeding an output back in treats all boxes as same-model and leaves them
untouched; NMS in particular is idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass

from .clustering import Cluster, build_feature_vector, cluster_detections, DEFAULT_IOU_THRESH
from .errors import ContractError
from .geometry import OBB, canonicalize, reduce_mod_pi, relative_angle
from .ingest import Detection, DetectionRun, clamp_score, group_all, score_to_logit, sigmoid
from .metalearner import MetaLearner, sigma_wa


@dataclass
class FusedDetection:
    obb: OBB
    score: float
    category: str
    image_id: str
    provenance: list[tuple[int, float]]


def calibrated_score(det: Detection, learner: MetaLearner) -> float:
    """Per-detection calibrated score s* = sigma(z * w_l + b)."""
    if not 1 <= det.model_index <= learner.n_models:
        raise ContractError(
            f"model index {det.model_index} not in learner of size {learner.n_models}"
        )
    w_l = learner.weights[det.model_index - 1]
    return sigmoid(det.logit * w_l + learner.intercept)


def _weighted_geometry(dets: list[Detection], weights: list[float]) -> tuple[float, float, float, float]:
    total = sum(weights)
    x = sum(d.obb.x * s for d, s in zip(dets, weights)) / total
    y = sum(d.obb.y * s for d, s in zip(dets, weights)) / total
    w = sum(d.obb.w * s for d, s in zip(dets, weights)) / total
    h = sum(d.obb.h * s for d, s in zip(dets, weights)) / total
    return x, y, w, h


def _weighted_orientation(dets: list[Detection], weights: list[float]) -> float:
    best = max(range(len(dets)), key=lambda i: (weights[i], -dets[i].model_index))
    theta_mj = dets[best].obb.theta
    total = sum(weights)
    rel = sum(relative_angle(d.obb.theta, theta_mj) * s for d, s in zip(dets, weights)) / total
    return theta_mj + rel


def fuse_geometry(cluster: Cluster, learner: MetaLearner) -> tuple[float, float, float, float]:
    """Calibrated-score-weighted mean of center and extents."""
    dets = cluster.all_detections()
    weights = [calibrated_score(d, learner) for d in dets]
    return _weighted_geometry(dets, weights)


def fuse_orientation(cluster: Cluster, learner: MetaLearner) -> float:
    """Cyclic weighted mean orientation, anchored at the top-s* member."""
    dets = cluster.all_detections()
    weights = [calibrated_score(d, learner) for d in dets]
    return reduce_mod_pi(_weighted_orientation(dets, weights))


def fuse_cluster(cluster: Cluster, learner: MetaLearner) -> FusedDetection:
    """Fuse one cluster into a single detection with a stacked confidence."""
    dets = cluster.all_detections()
    weights = [calibrated_score(d, learner) for d in dets]
    x, y, w, h = _weighted_geometry(dets, weights)
    theta = _weighted_orientation(dets, weights)
    features = build_feature_vector(cluster, learner.n_models, learner.z_miss)
    return FusedDetection(
        obb=canonicalize(x, y, w, h, theta),
        score=sigma_wa(features, learner),
        category=cluster.category,
        image_id=cluster.image_id,
        provenance=[(d.model_index, d.score) for d in dets],
    )


def _check_registry(runs: list[DetectionRun], learner: MetaLearner) -> None:
    names = [run.model_name for run in sorted(runs, key=lambda r: r.model_index)]
    indices = sorted(run.model_index for run in runs)
    if names != list(learner.models) or indices != list(range(1, learner.n_models + 1)):
        raise ContractError(
            f"run registry {names} (indices {indices}) does not match learner models {learner.models}"
        )


def _as_run(detections: list[Detection], model_name: str) -> DetectionRun:
    ordered = sorted(
        detections,
        key=lambda d: (-d.score, d.image_id, d.category, d.obb.x, d.obb.y, d.obb.w, d.obb.h, d.obb.theta),
    )
    return DetectionRun(model_name=model_name, model_index=1, detections=ordered)


def _map_groups(groups, fn, threads: int = 1):
    if threads <= 1:
        return [fn(dets) for dets in groups.values()]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, groups.values()))


def ensemble_stacking(
    runs: list[DetectionRun],
    learner: MetaLearner,
    iou_thresh: float = DEFAULT_IOU_THRESH,
    threads: int = 1,
) -> DetectionRun:
    """Cluster all runs per (image, category) and fuse every cluster."""
    _check_registry(runs, learner)
    groups = group_all(runs)

    def fuse_group(dets):
        fused = []
        for cluster in cluster_detections(dets, iou_thresh):
            fd = fuse_cluster(cluster, learner)
            fused.append(
                Detection(
                    obb=fd.obb,
                    score=fd.score,
                    logit=score_to_logit(fd.score),
                    model_index=1,
                    category=fd.category,
                    image_id=fd.image_id,
                )
            )
        return fused

    detections = [det for batch in _map_groups(groups, fuse_group, threads) for det in batch]
    return _as_run(detections, "stacking")


def ensemble_nms(
    runs: list[DetectionRun],
    iou_thresh: float = DEFAULT_IOU_THRESH,
    threads: int = 1,
) -> DetectionRun:
    """Keep only each cluster's center, box and score unchanged."""
    groups = group_all(runs)

    def suppress_group(dets):
        kept = []
        for cluster in cluster_detections(dets, iou_thresh):
            c = cluster.center
            kept.append(
                Detection(
                    obb=c.obb,
                    score=c.score,
                    logit=c.logit,
                    model_index=1,
                    category=c.category,
                    image_id=c.image_id,
                )
            )
        return kept

    detections = [det for batch in _map_groups(groups, suppress_group, threads) for det in batch]
    return _as_run(detections, "nms")


def ensemble_wbf(
    runs: list[DetectionRun],
    iou_thresh: float = DEFAULT_IOU_THRESH,
    threads: int = 1,
) -> DetectionRun:
    """Raw-score-weighted box fusion with a mean confidence.

    The fused score is the cluster's mean raw score scaled by
    min(1, K/M), penalizing clusters that miss models.
    """
    n_models = max(run.model_index for run in runs)
    groups = group_all(runs)

    def fuse_group(dets):
        fused = []
        for cluster in cluster_detections(dets, iou_thresh):
            members = cluster.all_detections()
            raw = [d.score for d in members]
            x, y, w, h = _weighted_geometry(members, raw)
            theta = _weighted_orientation(members, raw)
            score = (sum(raw) / len(raw)) * min(1.0, len(raw) / n_models)
            score = clamp_score(score)
            fused.append(
                Detection(
                    obb=canonicalize(x, y, w, h, theta),
                    score=score,
                    logit=score_to_logit(score),
                    model_index=1,
                    category=cluster.category,
                    image_id=cluster.image_id,
                )
            )
        return fused

    detections = [det for batch in _map_groups(groups, fuse_group, threads) for det in batch]
    return _as_run(detections, "wbf")


def apply_score_floor(run: DetectionRun, min_score: float) -> DetectionRun:
    """Drop fused detections below the output floor before writing."""
    kept = [det for det in run.detections if det.score >= min_score]
    return DetectionRun(model_name=run.model_name, model_index=run.model_index, detections=kept)
