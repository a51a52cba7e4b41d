"""Greedy score-sorted clustering of multi-model detections.

All detections for one (image, category) are pooled and sorted by score
descending. The top box seeds a cluster; every remaining box from a model
not yet present in the cluster that overlaps the *seed* by more than
iou_thresh joins it. Repeats until the pool is empty, so the clusters
partition the input. Boxes from an already-represented model never join,
which keeps one logit slot per model for the meta-learner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ContractError
from .geometry import iou
from .ingest import Detection

DEFAULT_IOU_THRESH = 0.5


@dataclass
class Cluster:
    center: Detection
    members: list[Detection] = field(default_factory=list)

    @property
    def category(self) -> str:
        return self.center.category

    @property
    def image_id(self) -> str:
        return self.center.image_id

    def all_detections(self) -> list[Detection]:
        return [self.center, *self.members]

    def model_indices(self) -> set[int]:
        return {det.model_index for det in self.all_detections()}


def _sort_key(det: Detection):
    # Total order over distinct detections, so clustering is insensitive to
    # input permutation: score desc, then model, then geometry.
    return (-det.score, det.model_index, det.obb.x, det.obb.y, det.obb.w, det.obb.h, det.obb.theta)


def cluster_detections(detections: list[Detection], iou_thresh: float = DEFAULT_IOU_THRESH) -> list[Cluster]:
    """Partition one (image, category) pool of detections into clusters.

    Raises:
        ContractError: mixed images/categories in the pool, or a threshold
            outside (0, 1).
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ContractError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    if not detections:
        return []
    image_id = detections[0].image_id
    category = detections[0].category
    for det in detections:
        if det.image_id != image_id or det.category != category:
            raise ContractError(
                f"pool mixes ({image_id}, {category}) with ({det.image_id}, {det.category})"
            )

    pool = sorted(detections, key=_sort_key)
    clusters: list[Cluster] = []
    while pool:
        center = pool.pop(0)
        cluster = Cluster(center=center)
        taken = {center.model_index}
        rest: list[Detection] = []
        for det in pool:
            if det.model_index not in taken and iou(det.obb, center.obb) > iou_thresh:
                cluster.members.append(det)
                taken.add(det.model_index)
            else:
                rest.append(det)
        pool = rest
        clusters.append(cluster)
    return clusters


def build_feature_vector(cluster: Cluster, n_models: int, z_miss: float) -> list[float]:
    """Per-model logit vector for a cluster; absent models get z_miss."""
    features = [z_miss] * n_models
    for det in cluster.all_detections():
        if not 1 <= det.model_index <= n_models:
            raise ContractError(
                f"model index {det.model_index} outside ensemble of size {n_models}"
            )
        features[det.model_index - 1] = det.logit
    return features
