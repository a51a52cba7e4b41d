"""Logistic-regression meta-learner over per-model detection logits.

A cluster of detections is summarized as a logit vector z in R^M (missing
models filled with z_miss) and scored sigma(z.w + b). Parameters are fit by
minimizing the (optionally L2-regularized) negative log likelihood of
cluster labels with a damped Newton method; the objective is convex, so the
optimum is unique for lambda > 0.

With a single member model the learner reduces to temperature scaling:
sigma(z w + b) = sigma(z / T + t) under T = 1/w, t = b.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import jsonio
from .clustering import Cluster, build_feature_vector
from .errors import (
    CalibrationError,
    ContractError,
    ConvergenceWarning,
    DegenerateDataError,
    SchemaError,
)
from .geometry import iou
from .ingest import DetectionRun, GroundTruth

META_SCHEMA = "obbstack-meta/1"

DEFAULT_Z_MISS = -8.0
DEFAULT_LAMBDA = 1e-6
DEFAULT_IOU_LABEL_THRESH = 0.5
GRAD_TOL = 1e-8
MAX_ITER = 500


@dataclass
class MetaLearner:
    models: list[str]
    weights: list[float]
    intercept: float
    z_miss: float = DEFAULT_Z_MISS
    lam: float = DEFAULT_LAMBDA
    training_meta: dict = field(default_factory=dict)

    @property
    def n_models(self) -> int:
        return len(self.models)

    def __post_init__(self):
        if len(self.weights) != len(self.models):
            raise ContractError(
                f"{len(self.weights)} weights for {len(self.models)} models"
            )


@dataclass
class LabeledCluster:
    features: list[float]
    label: int
    weight: float = 1.0


@dataclass
class CalibrationParams:
    temperature: float
    shift: float


def sigma_wa(z, learner: MetaLearner) -> float:
    """Fused probability sigma(z.w + b), overflow-safe."""
    if len(z) != learner.n_models:
        raise ContractError(f"feature vector has {len(z)} entries, expected {learner.n_models}")
    u = learner.intercept
    for zk, wk in zip(z, learner.weights):
        u += zk * wk
    if u >= 0.0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


def label_clusters(
    clusters: list[Cluster],
    ground_truth: GroundTruth,
    iou_label_thresh: float = DEFAULT_IOU_LABEL_THRESH,
    n_models: int | None = None,
    z_miss: float = DEFAULT_Z_MISS,
) -> list[LabeledCluster]:
    """Label each cluster positive iff its center overlaps a same-category
    ground-truth box in the same image with IoU >= iou_label_thresh.

    Several clusters may match the same ground-truth object; exclusivity is
    an evaluation-time concern, not a labeling one.
    """
    if n_models is None:
        n_models = max((d.model_index for c in clusters for d in c.all_detections()), default=1)
    gt_groups = ground_truth.grouped()
    labeled = []
    for cluster in clusters:
        candidates = gt_groups.get((cluster.image_id, cluster.category), [])
        positive = any(
            iou(cluster.center.obb, obj.obb) >= iou_label_thresh for obj in candidates
        )
        labeled.append(
            LabeledCluster(
                features=build_feature_vector(cluster, n_models, z_miss),
                label=1 if positive else 0,
            )
        )
    return labeled


def _design_matrix(labeled: list[LabeledCluster]):
    Z = np.asarray([lc.features for lc in labeled], dtype=np.float64)
    y = np.asarray([lc.label for lc in labeled], dtype=np.float64)
    return Z, y


def _nll_value(Z, y, w, b, lam):
    u = Z @ w + b
    # -log sigma(u) = softplus(-u); -log(1 - sigma(u)) = softplus(u)
    signed = np.where(y > 0.5, -u, u)
    loss = np.sum(np.logaddexp(0.0, signed))
    return float(loss + 0.5 * lam * float(w @ w))


def _nll_grad(Z, y, w, b, lam):
    u = Z @ w + b
    p = 1.0 / (1.0 + np.exp(-np.clip(u, -500.0, 500.0)))
    resid = p - y
    gw = Z.T @ resid + lam * w
    gb = float(np.sum(resid))
    return gw, gb, p


def nll(learner: MetaLearner, labeled: list[LabeledCluster]) -> float:
    """Regularized negative log likelihood of the labels under the learner."""
    if not labeled:
        raise ContractError("nll requires at least one labeled cluster")
    Z, y = _design_matrix(labeled)
    if Z.shape[1] != learner.n_models:
        raise ContractError(f"features have {Z.shape[1]} columns, expected {learner.n_models}")
    return _nll_value(Z, y, np.asarray(learner.weights, dtype=np.float64), learner.intercept, learner.lam)


def fit(
    labeled: list[LabeledCluster],
    models: list[str],
    z_miss: float = DEFAULT_Z_MISS,
    lam: float = DEFAULT_LAMBDA,
    tol: float = GRAD_TOL,
    max_iter: int = MAX_ITER,
) -> MetaLearner:
    """Fit weights and intercept by damped Newton descent on the NLL.

    Deterministic: starts from zero, full Newton steps with backtracking,
    gradient-descent fallback when the Hessian is near-singular. Warns and
    returns the last iterate if the gradient norm is still above ``tol``
    after ``max_iter`` iterations.

    Raises:
        DegenerateDataError: all labels identical.
    """
    if not labeled:
        raise ContractError("fit requires labeled clusters")
    Z, y = _design_matrix(labeled)
    if Z.shape[1] != len(models):
        raise ContractError(f"features have {Z.shape[1]} columns for {len(models)} models")
    n_pos = int(np.sum(y > 0.5))
    if n_pos == 0 or n_pos == len(y):
        raise DegenerateDataError(
            f"need both classes to fit, got {n_pos} positives out of {len(y)}"
        )

    m = Z.shape[1]
    w = np.zeros(m)
    b = 0.0
    value = _nll_value(Z, y, w, b, lam)
    grad_norm = math.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        gw, gb, p = _nll_grad(Z, y, w, b, lam)
        grad = np.concatenate([gw, [gb]])
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm <= tol:
            iterations -= 1
            break

        s = p * (1.0 - p)
        H = np.empty((m + 1, m + 1))
        H[:m, :m] = Z.T @ (Z * s[:, None]) + lam * np.eye(m)
        H[:m, m] = H[m, :m] = Z.T @ s
        H[m, m] = float(np.sum(s))
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = grad
        if not np.all(np.isfinite(step)) or float(step @ grad) <= 0.0:
            step = grad  # fall back to plain gradient descent

        # Backtracking line search (Armijo).
        slope = float(step @ grad)
        t = 1.0
        while t > 1e-14:
            w_new = w - t * step[:m]
            b_new = b - t * step[m]
            v_new = _nll_value(Z, y, w_new, b_new, lam)
            if v_new <= value - 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break  # no descent possible at float resolution
        stalled = value - v_new <= 1e-13 * max(1.0, abs(value))
        w, b, value = w_new, b_new, v_new
        if stalled:
            break  # progress below float resolution; gradient check decides

    gw, gb, _ = _nll_grad(Z, y, w, b, lam)
    grad_norm = float(np.max(np.abs(np.concatenate([gw, [gb]]))))
    converged = grad_norm <= tol
    if not converged:
        warnings.warn(
            f"fit stopped after {iterations} iterations with gradient norm {grad_norm:.3e}",
            ConvergenceWarning,
            stacklevel=2,
        )
    return MetaLearner(
        models=list(models),
        weights=[float(v) for v in w],
        intercept=float(b),
        z_miss=z_miss,
        lam=lam,
        training_meta={
            "n_clusters": len(labeled),
            "final_nll": _nll_value(Z, y, w, b, lam),
            "iterations": iterations,
            "lambda": lam,
            "grad_norm": grad_norm,
            "converged": converged,
        },
    )


def fit_temperature(samples, lam: float = DEFAULT_LAMBDA, tol: float = GRAD_TOL) -> CalibrationParams:
    """Fit temperature scaling sigma(z/T + t) on (logit, label) samples.

    This is the single-model special case of ``fit``: T = 1/w, t = b.

    Raises:
        CalibrationError: fitted slope w <= 0 (scores anti-correlated with
            correctness, no valid temperature exists).
    """
    labeled = [LabeledCluster(features=[float(z)], label=int(y)) for z, y in samples]
    learner = fit(labeled, models=["model"], lam=lam, tol=tol)
    w = learner.weights[0]
    if w <= 0.0:
        raise CalibrationError(f"fitted slope {w:.4g} is not positive")
    return CalibrationParams(temperature=1.0 / w, shift=learner.intercept)


def decompose_weights(w, p, r):
    """Factor fitted weights into performance terms: g = w / (p * r).

    p holds per-model inverse temperatures (calibration), r the redundancy
    factors; what remains measures the per-model performance gap.
    """
    if not (len(w) == len(p) == len(r)):
        raise ContractError("w, p, r must have equal length")
    g = []
    for wk, pk, rk in zip(w, p, r):
        if pk == 0.0 or rk == 0.0:
            raise ContractError("p and r entries must be nonzero")
        g.append(wk / (pk * rk))
    return g


def score_correlation(runs: list[DetectionRun], clusters: list[Cluster]) -> np.ndarray:
    """Pairwise-complete Pearson correlation of model scores across clusters.

    Entry (k, l) correlates the scores of models k+1 and l+1 over the
    clusters where both appear; fewer than 3 common clusters or a constant
    score column leaves the entry undefined (NaN). Diagonal is 1.
    """
    n_models = max(run.model_index for run in runs)
    table = np.full((len(clusters), n_models), np.nan)
    for i, cluster in enumerate(clusters):
        for det in cluster.all_detections():
            table[i, det.model_index - 1] = det.score
    corr = np.full((n_models, n_models), np.nan)
    np.fill_diagonal(corr, 1.0)
    for k in range(n_models):
        for l in range(k + 1, n_models):
            mask = ~np.isnan(table[:, k]) & ~np.isnan(table[:, l])
            if int(np.sum(mask)) < 3:
                continue
            a = table[mask, k]
            c = table[mask, l]
            sa = float(np.std(a))
            sc = float(np.std(c))
            if sa == 0.0 or sc == 0.0:
                continue
            value = float(np.mean((a - np.mean(a)) * (c - np.mean(c))) / (sa * sc))
            corr[k, l] = corr[l, k] = value
    return corr


def learner_to_dict(learner: MetaLearner) -> dict:
    return {
        "schema": META_SCHEMA,
        "models": list(learner.models),
        "weights": [float(v) for v in learner.weights],
        "intercept": float(learner.intercept),
        "z_miss": float(learner.z_miss),
        "lambda": float(learner.lam),
        "training_meta": dict(learner.training_meta),
    }


def learner_from_dict(data: dict) -> MetaLearner:
    if not isinstance(data, dict) or data.get("schema") != META_SCHEMA:
        raise SchemaError(f"expected schema {META_SCHEMA!r}, got {data.get('schema')!r}")
    try:
        return MetaLearner(
            models=list(data["models"]),
            weights=[float(v) for v in data["weights"]],
            intercept=float(data["intercept"]),
            z_miss=float(data["z_miss"]),
            lam=float(data["lambda"]),
            training_meta=dict(data.get("training_meta", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed meta-learner file: {exc!r}") from exc


def write_meta_json(learner: MetaLearner, path) -> None:
    jsonio.dump(learner_to_dict(learner), path)


def read_meta_json(path) -> MetaLearner:
    return learner_from_dict(jsonio.load(path))
