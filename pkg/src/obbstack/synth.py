"""Seeded synthetic scenes and imperfect detectors.

Every randomized quantity comes from a stream derived from
(seed, stream tag, image key), so image-level generation can run in any
order or in parallel without changing a single byte of output.

Score model. A detection's true logit is drawn from one of two components
shifted by a closed-form constant: true positives get a*q + eps (q uniform
in (0, 1] is a latent quality that also scales localization noise, eps is
standard normal), false positives get the exponential tilt of the same
density (tilted q, eps shifted to mean -1). The tilt makes the posterior
probability of being a true positive exactly sigma(z), i.e. true logits
are perfectly calibrated by construction. Miscalibration is multiplicative:
a detector with temperature T reports T * z, so temperature scaling with
the same T restores calibration exactly, and a meta-learner fit on the
reported logits should recover weights close to 1/T.

Clones model same-family detectors: a clone re-uses its base profile's
latent draws (hits, qualities, geometry noise, false positives) and only
adds independent Gaussian jitter of size clone_noise to the logits, so
clone_noise = 0 reproduces the base run bit for bit.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .clustering import cluster_detections
from .errors import ConfigError
from .evaluation import evaluate
from .fusion import ensemble_nms, ensemble_stacking, ensemble_wbf
from .geometry import canonicalize, reduce_mod_pi
from .ingest import (
    LOGIT_CLAMP,
    Detection,
    DetectionRun,
    GroundTruth,
    GroundTruthObject,
    group_all,
    sigmoid,
)
from .metalearner import MetaLearner, fit, label_clusters

# Stream tags for derived RNGs.
_GT_STREAM = 0
_DETECT_STREAM = 1
_JITTER_STREAM = 2
_CLUTTER_STREAM = 3

# Expected clutter spots per image; all detectors see the same spots and
# fire on each independently, so their false positives overlap the way
# same-benchmark detectors' do.
DEFAULT_CLUTTER_RATE = 4.0

DEFAULT_FIELD_SIZE = (1024.0, 1024.0)
_MIN_BOX = 8.0
_MAX_BOX = 120.0
_MAX_ASPECT = 6.0


@dataclass
class DetectorProfile:
    """Knobs of one simulated detector.

    skill is the logit separation between true and false positives;
    temperature > 1 makes the reported scores overconfident. For clones
    (clone_of set) the generative fields are taken from the base profile
    and only temperature and clone_noise act.
    """

    name: str
    recall: float = 0.9
    fp_rate: float = 2.0
    loc_sigma: float = 0.05
    angle_sigma: float = 0.05
    skill: float = 2.0
    temperature: float = 1.0
    export_threshold: float = 0.05
    clone_of: str | None = None
    clone_noise: float = 0.0

    def validate(self) -> None:
        if not 0.0 < self.recall <= 1.0:
            raise ConfigError(f"{self.name}: recall must lie in (0, 1], got {self.recall}")
        if self.fp_rate < 0.0:
            raise ConfigError(f"{self.name}: fp_rate must be >= 0")
        if self.loc_sigma < 0.0 or self.angle_sigma < 0.0:
            raise ConfigError(f"{self.name}: noise sigmas must be >= 0")
        if self.skill <= 0.0:
            raise ConfigError(f"{self.name}: skill must be > 0")
        if self.temperature <= 0.0:
            raise ConfigError(f"{self.name}: temperature must be > 0")
        if not 0.0 <= self.export_threshold < 0.5:
            raise ConfigError(f"{self.name}: export_threshold must lie in [0, 0.5)")
        if self.clone_noise < 0.0:
            raise ConfigError(f"{self.name}: clone_noise must be >= 0")


@dataclass
class SyntheticScene:
    ground_truth: GroundTruth
    runs: list[DetectionRun]
    seed: int


def _key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _stream(seed: int, *spawn) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(spawn)))


def _draw_count(rng: np.random.Generator, spec) -> int:
    kind = spec.get("kind", "fixed")
    if kind == "fixed":
        return int(spec["value"])
    if kind == "poisson":
        return int(rng.poisson(float(spec["mean"])))
    if kind == "uniform":
        return int(rng.integers(int(spec["low"]), int(spec["high"]) + 1))
    raise ConfigError(f"unknown objects_per_image kind {kind!r}")


def _mean_count(spec) -> float:
    kind = spec.get("kind", "fixed")
    if kind == "fixed":
        return float(spec["value"])
    if kind == "poisson":
        return float(spec["mean"])
    if kind == "uniform":
        return (float(spec["low"]) + float(spec["high"])) / 2.0
    raise ConfigError(f"unknown objects_per_image kind {kind!r}")


def _random_box(rng: np.random.Generator, width: float, height: float):
    aspect = rng.uniform(1.0, _MAX_ASPECT)
    h = rng.uniform(_MIN_BOX, _MAX_BOX / aspect)
    w = aspect * h
    theta = rng.uniform(0.0, math.pi)
    x = rng.uniform(0.0, width)
    y = rng.uniform(0.0, height)
    return canonicalize(x, y, w, h, theta)


def generate_scenes(
    n_images: int,
    objects_per_image,
    field_size=DEFAULT_FIELD_SIZE,
    categories=("vehicle", "vessel", "aircraft"),
    seed: int = 0,
) -> GroundTruth:
    """Random ground-truth objects over n_images blank fields.

    ``objects_per_image`` is an int (fixed count) or a dict like
    {"kind": "poisson", "mean": 6}.
    """
    if isinstance(objects_per_image, int):
        objects_per_image = {"kind": "fixed", "value": objects_per_image}
    categories = list(categories)
    width, height = float(field_size[0]), float(field_size[1])
    gt = GroundTruth()
    for k in range(n_images):
        image_id = f"IMG{k:05d}"
        gt.images.append(image_id)
        rng = _stream(seed, _GT_STREAM, k)
        count = _draw_count(rng, objects_per_image)
        for _ in range(count):
            cat = categories[int(rng.integers(len(categories)))]
            gt.objects.append(
                GroundTruthObject(
                    obb=_random_box(rng, width, height),
                    category=cat,
                    difficult=False,
                    image_id=image_id,
                )
            )
    return gt


def _calibration_shift(skill: float, tp_fraction: float) -> float:
    """Constant added to both logit components so that P(TP | z) = sigma(z)."""
    pi_hat = min(max(tp_fraction, 1e-6), 1.0 - 1e-6)
    log_tilt_mass = math.log((1.0 - math.exp(-skill)) / skill) + 0.5
    return math.log(pi_hat / (1.0 - pi_hat)) + log_tilt_mass


def _tilted_quality(rng: np.random.Generator, skill: float) -> float:
    # Inverse CDF of the density proportional to exp(-skill * q) on (0, 1].
    u = rng.random()
    return -math.log1p(-u * (1.0 - math.exp(-skill))) / skill


def _perturbed_box(rng, obb, loc_sigma, angle_sigma, wobble):
    dx, dy, dlw, dlh, dth = rng.standard_normal(5)
    return canonicalize(
        obb.x + dx * loc_sigma * wobble * obb.w,
        obb.y + dy * loc_sigma * wobble * obb.h,
        obb.w * math.exp(dlw * loc_sigma * wobble),
        obb.h * math.exp(dlh * loc_sigma * wobble),
        reduce_mod_pi(obb.theta + dth * angle_sigma * wobble),
    )


def simulate_detector(
    gt: GroundTruth,
    profile: DetectorProfile,
    seed: int,
    model_index: int = 1,
    base: DetectorProfile | None = None,
    field_size=None,
    clutter_rate: float = DEFAULT_CLUTTER_RATE,
) -> DetectionRun:
    """Produce one detector's imperfect detections for a ground-truth set.

    False positives mostly come from per-image clutter spots shared by all
    detectors on the same seed (each detector fires on a spot independently,
    with its own box noise and logit), topped up with detector-private spots
    when fp_rate exceeds clutter_rate. Per-model FP counts stay Poisson at
    fp_rate either way.

    Like a real detector the profile only exports detections whose reported
    score clears export_threshold, so a missing model usually means it
    scored the object too low, which is exactly what the meta-learner's
    z_miss fill value stands in for.

    For clone profiles pass the resolved base profile; its parameters drive
    all latent draws so sibling clones see identical hits, geometry, and
    false positives.
    """
    profile.validate()
    gen = base if base is not None else profile
    if base is not None:
        gen.validate()
    if field_size is None:
        if gt.objects:
            width = max(o.obb.x + o.obb.w for o in gt.objects)
            height = max(o.obb.y + o.obb.w for o in gt.objects)
        else:
            width, height = DEFAULT_FIELD_SIZE
    else:
        width, height = float(field_size[0]), float(field_size[1])
    categories = gt.categories or ["object"]
    n_images = max(len(gt.image_ids), 1)
    tp_expected = gen.recall * len(gt.objects)
    fp_expected = gen.fp_rate * n_images
    denom = tp_expected + fp_expected
    shift = _calibration_shift(gen.skill, tp_expected / denom if denom > 0 else 0.5)
    base_key = _key(gen.name)
    fire_prob = min(1.0, gen.fp_rate / clutter_rate) if clutter_rate > 0 else 0.0
    own_fp_rate = gen.fp_rate - fire_prob * clutter_rate

    run = DetectionRun(model_name=profile.name, model_index=model_index)
    by_image: dict[str, list[GroundTruthObject]] = {}
    for obj in gt.objects:
        by_image.setdefault(obj.image_id, []).append(obj)

    for image_id in gt.image_ids:
        img_key = _key(image_id)
        clutter_rng = _stream(seed, _CLUTTER_STREAM, img_key)
        spots = []
        if clutter_rate > 0:
            for _ in range(int(clutter_rng.poisson(clutter_rate))):
                cat = categories[int(clutter_rng.integers(len(categories)))]
                spots.append((_random_box(clutter_rng, width, height), cat))

        rng = _stream(seed, _DETECT_STREAM, base_key, img_key)
        raw = []  # (true logit, box, category)
        for obj in by_image.get(image_id, []):
            if rng.random() >= gen.recall:
                continue
            q = 1.0 - rng.random()  # (0, 1]
            eps = rng.standard_normal()
            box = _perturbed_box(rng, obj.obb, gen.loc_sigma, gen.angle_sigma, 1.5 - q)
            raw.append((gen.skill * q + eps + shift, box, obj.category))
        for spot_box, spot_cat in spots:
            if rng.random() >= fire_prob:
                continue
            q0 = _tilted_quality(rng, gen.skill)
            eps0 = rng.standard_normal() - 1.0
            box = _perturbed_box(rng, spot_box, gen.loc_sigma, gen.angle_sigma, 1.5 - q0)
            raw.append((gen.skill * q0 + eps0 + shift, box, spot_cat))
        if own_fp_rate > 0:
            for _ in range(int(rng.poisson(own_fp_rate))):
                cat = categories[int(rng.integers(len(categories)))]
                box = _random_box(rng, width, height)
                q0 = _tilted_quality(rng, gen.skill)
                eps0 = rng.standard_normal() - 1.0
                raw.append((gen.skill * q0 + eps0 + shift, box, cat))

        if profile.clone_of is not None:
            jitter_rng = _stream(seed, _JITTER_STREAM, _key(profile.name), img_key)
            jitter = jitter_rng.standard_normal(len(raw)) * profile.clone_noise
        else:
            jitter = np.zeros(len(raw))
        for (z_true, box, cat), jit in zip(raw, jitter):
            z_rep = profile.temperature * z_true + float(jit)
            z_rep = min(max(z_rep, -LOGIT_CLAMP), LOGIT_CLAMP)
            score = sigmoid(z_rep)
            if score < profile.export_threshold:
                continue
            run.detections.append(
                Detection(
                    obb=box,
                    score=score,
                    logit=z_rep,
                    model_index=model_index,
                    category=cat,
                    image_id=image_id,
                )
            )
    return run


@dataclass
class ScenarioConfig:
    profiles: list[DetectorProfile]
    base_profiles: list[DetectorProfile] = field(default_factory=list)
    n_images: int = 200
    objects_per_image: dict = field(default_factory=lambda: {"kind": "poisson", "mean": 6})
    field_size: tuple[float, float] = DEFAULT_FIELD_SIZE
    categories: tuple[str, ...] = ("vehicle", "vessel", "aircraft")
    val_fraction: float = 0.5
    seeds: list[int] = field(default_factory=lambda: [0])
    clutter_rate: float = DEFAULT_CLUTTER_RATE
    iou_thresh: float = 0.5
    iou_label_thresh: float = 0.5
    z_miss: float = -8.0
    lam: float = 1e-6
    min_score: float = 0.001
    ap_mode: str = "voc12"
    match_iou: float = 0.5

    def resolve_base(self, profile: DetectorProfile) -> DetectorProfile | None:
        if profile.clone_of is None:
            return None
        registry = {p.name: p for p in [*self.base_profiles, *self.profiles]}
        try:
            base = registry[profile.clone_of]
        except KeyError:
            raise ConfigError(f"{profile.name}: unknown clone_of {profile.clone_of!r}") from None
        if base.clone_of is not None:
            raise ConfigError(f"{profile.name}: clone_of target {base.name!r} is itself a clone")
        return base

    def validate(self) -> None:
        if not self.profiles:
            raise ConfigError("scenario needs at least one detector profile")
        names = [p.name for p in [*self.base_profiles, *self.profiles]]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate profile names in {names}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.n_images < 2:
            raise ConfigError("need at least 2 images to split into val/test")
        if not self.seeds:
            raise ConfigError("scenario needs at least one seed")
        if any(int(s) < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        for p in [*self.base_profiles, *self.profiles]:
            p.validate()
            self.resolve_base(p)


def simulate_scene(config: ScenarioConfig, seed: int) -> SyntheticScene:
    """Ground truth plus one run per profile, fully determined by the seed."""
    gt = generate_scenes(
        config.n_images, config.objects_per_image, config.field_size, config.categories, seed
    )
    runs = [
        simulate_detector(
            gt, prof, seed, model_index=i + 1, base=config.resolve_base(prof),
            field_size=config.field_size, clutter_rate=config.clutter_rate,
        )
        for i, prof in enumerate(config.profiles)
    ]
    return SyntheticScene(ground_truth=gt, runs=runs, seed=seed)


def _subset_gt(gt: GroundTruth, image_ids: set[str]) -> GroundTruth:
    return GroundTruth(
        objects=[o for o in gt.objects if o.image_id in image_ids],
        images=[i for i in gt.images if i in image_ids],
    )


def _subset_run(run: DetectionRun, image_ids: set[str]) -> DetectionRun:
    return DetectionRun(
        model_name=run.model_name,
        model_index=run.model_index,
        detections=[d for d in run.detections if d.image_id in image_ids],
    )


@dataclass
class SeedArtifacts:
    scene: SyntheticScene
    gt_val: GroundTruth
    gt_test: GroundTruth
    runs_val: list[DetectionRun]
    runs_test: list[DetectionRun]
    learner: MetaLearner
    fused: dict[str, DetectionRun]


def run_benchmark(config: ScenarioConfig, keep_artifacts: bool = False, threads: int = 1):
    """Fit on the validation half, fuse and score the test half, per seed.

    Returns (report, artifacts): the report holds per-seed and mean mAPs of
    every member and of the nms / wbf / stacking ensembles plus the fitted
    weights; artifacts (one entry per seed) carry the underlying objects
    when requested, else the list is empty.
    """
    config.validate()
    per_seed = []
    artifacts: list[SeedArtifacts] = []
    names = [p.name for p in config.profiles]
    for seed in config.seeds:
        scene = simulate_scene(config, seed)
        image_ids = [f"IMG{k:05d}" for k in range(config.n_images)]
        n_val = int(round(config.val_fraction * config.n_images))
        n_val = min(max(n_val, 1), config.n_images - 1)
        val_ids = set(image_ids[:n_val])
        test_ids = set(image_ids[n_val:])
        gt_val = _subset_gt(scene.ground_truth, val_ids)
        gt_test = _subset_gt(scene.ground_truth, test_ids)
        runs_val = [_subset_run(r, val_ids) for r in scene.runs]
        runs_test = [_subset_run(r, test_ids) for r in scene.runs]

        clusters = []
        for dets in group_all(runs_val).values():
            clusters.extend(cluster_detections(dets, config.iou_thresh))
        labeled = label_clusters(
            clusters, gt_val, config.iou_label_thresh, len(names), config.z_miss
        )
        learner = fit(labeled, models=names, z_miss=config.z_miss, lam=config.lam)

        fused = {
            "stacking": ensemble_stacking(runs_test, learner, config.iou_thresh, threads=threads),
            "wbf": ensemble_wbf(runs_test, config.iou_thresh, threads=threads),
            "nms": ensemble_nms(runs_test, config.iou_thresh, threads=threads),
        }
        member_eval = {
            run.model_name: evaluate(run, gt_test, config.match_iou, config.ap_mode, threads)
            for run in runs_test
        }
        ensemble_eval = {
            method: evaluate(run, gt_test, config.match_iou, config.ap_mode, threads)
            for method, run in fused.items()
        }
        member_map = {name: res.mean_ap for name, res in member_eval.items()}
        per_seed.append(
            {
                "seed": seed,
                "member_map": member_map,
                "member_ap": {n: res.per_category_ap for n, res in member_eval.items()},
                "best_member_map": max(member_map.values()),
                "ensemble_map": {m: res.mean_ap for m, res in ensemble_eval.items()},
                "ensemble_ap": {m: res.per_category_ap for m, res in ensemble_eval.items()},
                "weights": dict(zip(names, learner.weights)),
                "intercept": learner.intercept,
            }
        )
        if keep_artifacts:
            artifacts.append(
                SeedArtifacts(scene, gt_val, gt_test, runs_val, runs_test, learner, fused)
            )

    def _mean(values):
        return sum(values) / len(values)

    mean = {
        "member_map": {n: _mean([s["member_map"][n] for s in per_seed]) for n in names},
        "best_member_map": _mean([s["best_member_map"] for s in per_seed]),
        "ensemble_map": {
            m: _mean([s["ensemble_map"][m] for s in per_seed]) for m in ("stacking", "wbf", "nms")
        },
        "weights": {n: _mean([s["weights"][n] for s in per_seed]) for n in names},
    }
    report = {"models": names, "seeds": per_seed, "mean": mean}
    return report, artifacts
