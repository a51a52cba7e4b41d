"""Detection and ground-truth I/O.

Two interchange formats:
  * DOTA text convention: per-category detection files ``Task1_<cat>.txt``
    with lines ``image_id score x1 y1 x2 y2 x3 y3 x4 y4``, and per-image
    label files with lines ``x1 y1 x2 y2 x3 y3 x4 y4 category difficult``
    (two optional ``imagesource``/``gsd`` header lines).
  * Internal run JSON (schema ``obbstack-run/1``), which is lossless: it
    stores the canonical box parameters plus both score and logit.

Detectors usually export only a probability-like score; the logit is then
derived as ln(s / (1 - s)) after clamping s into [1e-6, 1 - 1e-6].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from . import jsonio
from .errors import ParseError, SchemaError
from .geometry import OBB, canonicalize, corners_to_obb, obb_to_corners

RUN_SCHEMA = "obbstack-run/1"

SCORE_CLAMP = 1e-6
DEFAULT_MIN_SCORE = 0.001

# |logit| ceiling implied by the score clamp.
LOGIT_CLAMP = math.log((1.0 - SCORE_CLAMP) / SCORE_CLAMP)


def clamp_score(score: float) -> float:
    return min(max(score, SCORE_CLAMP), 1.0 - SCORE_CLAMP)


def score_to_logit(score: float) -> float:
    s = clamp_score(score)
    return math.log(s / (1.0 - s))


def sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass(frozen=True)
class Detection:
    """One detected oriented box with its confidence and provenance."""

    obb: OBB
    score: float
    logit: float
    model_index: int
    category: str
    image_id: str


@dataclass
class GroundTruthObject:
    obb: OBB
    category: str
    difficult: bool
    image_id: str


@dataclass
class DetectionRun:
    """All detections of one model, grouped on demand."""

    model_name: str
    model_index: int
    detections: list[Detection] = field(default_factory=list)

    def grouped(self) -> dict[tuple[str, str], list[Detection]]:
        """Detections keyed by (image_id, category), keys sorted."""
        groups: dict[tuple[str, str], list[Detection]] = {}
        for det in self.detections:
            groups.setdefault((det.image_id, det.category), []).append(det)
        return {key: groups[key] for key in sorted(groups)}


@dataclass
class GroundTruth:
    objects: list[GroundTruthObject] = field(default_factory=list)
    # Images known to exist even when empty (false positives land there too).
    images: list[str] = field(default_factory=list)

    @property
    def categories(self) -> list[str]:
        return sorted({obj.category for obj in self.objects})

    @property
    def image_ids(self) -> list[str]:
        return sorted({obj.image_id for obj in self.objects} | set(self.images))

    def grouped(self) -> dict[tuple[str, str], list[GroundTruthObject]]:
        groups: dict[tuple[str, str], list[GroundTruthObject]] = {}
        for obj in self.objects:
            groups.setdefault((obj.image_id, obj.category), []).append(obj)
        return {key: groups[key] for key in sorted(groups)}


def group_all(runs: list[DetectionRun]) -> dict[tuple[str, str], list[Detection]]:
    """Pool several runs' detections by (image_id, category).

    Runs are visited in model_index order so the pooled lists are
    deterministic for any input ordering.
    """
    groups: dict[tuple[str, str], list[Detection]] = {}
    for run in sorted(runs, key=lambda r: r.model_index):
        for det in run.detections:
            groups.setdefault((det.image_id, det.category), []).append(det)
    return {key: groups[key] for key in sorted(groups)}


def _detection_from_line(tokens, category, model_index, line_no, path) -> Detection:
    if len(tokens) != 10:
        raise ParseError(f"expected 10 tokens, got {len(tokens)}", path, line_no)
    try:
        values = [float(tok) for tok in tokens[1:]]
    except ValueError as exc:
        raise ParseError(f"bad number: {exc}", path, line_no) from None
    score = values[0]
    corners = tuple((values[1 + 2 * i], values[2 + 2 * i]) for i in range(4))
    obb = corners_to_obb(corners)
    score = clamp_score(score)
    return Detection(
        obb=obb,
        score=score,
        logit=score_to_logit(score),
        model_index=model_index,
        category=category,
        image_id=tokens[0],
    )


def parse_dota_detections(
    directory,
    model_name: str,
    model_index: int,
    min_score: float = DEFAULT_MIN_SCORE,
) -> DetectionRun:
    """Read a DOTA-style detection directory (one Task1_<cat>.txt per category).

    Detections below ``min_score`` are dropped. Raises ParseError with file
    and line number on malformed lines; OSError propagates for unreadable
    files.
    """
    directory = Path(directory)
    run = DetectionRun(model_name=model_name, model_index=model_index)
    files = sorted(directory.glob("Task1_*.txt"))
    if not files:
        warnings.warn(f"no Task1_*.txt detection files under {directory}", stacklevel=2)
        return run
    for path in files:
        category = path.stem[len("Task1_"):]
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                tokens = line.split()
                if not tokens:
                    continue
                det = _detection_from_line(tokens, category, model_index, line_no, path)
                if det.score >= min_score:
                    run.detections.append(det)
    return run


def parse_ground_truth(directory) -> GroundTruth:
    """Read a DOTA-style label directory (one <image_id>.txt per image)."""
    directory = Path(directory)
    gt = GroundTruth()
    files = sorted(directory.glob("*.txt"))
    if not files:
        warnings.warn(f"no label files under {directory}", stacklevel=2)
        return gt
    for path in files:
        image_id = path.stem
        gt.images.append(image_id)
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped:
                    continue
                if stripped.startswith("imagesource") or stripped.startswith("gsd"):
                    continue
                tokens = stripped.split()
                if len(tokens) != 10:
                    raise ParseError(f"expected 10 tokens, got {len(tokens)}", path, line_no)
                try:
                    coords = [float(tok) for tok in tokens[:8]]
                    difficult = int(tokens[9])
                except ValueError as exc:
                    raise ParseError(f"bad number: {exc}", path, line_no) from None
                corners = tuple((coords[2 * i], coords[2 * i + 1]) for i in range(4))
                gt.objects.append(
                    GroundTruthObject(
                        obb=corners_to_obb(corners),
                        category=tokens[8],
                        difficult=bool(difficult),
                        image_id=image_id,
                    )
                )
    return gt


def write_dota_detections(run: DetectionRun, directory) -> None:
    """Write a run in the DOTA submission convention, one file per category."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    by_category: dict[str, list[Detection]] = {}
    for det in run.detections:
        by_category.setdefault(det.category, []).append(det)
    for category in sorted(by_category):
        with open(directory / f"Task1_{category}.txt", "w", encoding="utf-8") as fh:
            for det in by_category[category]:
                corners = obb_to_corners(det.obb)
                coords = " ".join(f"{v!r}" for xy in corners for v in xy)
                fh.write(f"{det.image_id} {det.score!r} {coords}\n")


def write_dota_ground_truth(gt: GroundTruth, directory) -> None:
    """Write labels in the DOTA convention, one file per image.

    Known-but-empty images get a header-only file so they survive a
    round-trip.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    by_image: dict[str, list[GroundTruthObject]] = {img: [] for img in gt.image_ids}
    for obj in gt.objects:
        by_image.setdefault(obj.image_id, []).append(obj)
    for image_id in sorted(by_image):
        with open(directory / f"{image_id}.txt", "w", encoding="utf-8") as fh:
            fh.write("imagesource:synthetic\ngsd:1.0\n")
            for obj in by_image[image_id]:
                corners = obb_to_corners(obj.obb)
                coords = " ".join(f"{v!r}" for xy in corners for v in xy)
                fh.write(f"{coords} {obj.category} {int(obj.difficult)}\n")


def run_to_dict(run: DetectionRun) -> dict:
    return {
        "schema": RUN_SCHEMA,
        "model_name": run.model_name,
        "model_index": run.model_index,
        "detections": [
            {
                "image": det.image_id,
                "category": det.category,
                "score": det.score,
                "logit": det.logit,
                "x": det.obb.x,
                "y": det.obb.y,
                "w": det.obb.w,
                "h": det.obb.h,
                "theta": det.obb.theta,
            }
            for det in run.detections
        ],
    }


def run_from_dict(data: dict) -> DetectionRun:
    if not isinstance(data, dict) or data.get("schema") != RUN_SCHEMA:
        raise SchemaError(f"expected schema {RUN_SCHEMA!r}, got {data.get('schema')!r}")
    try:
        run = DetectionRun(model_name=data["model_name"], model_index=int(data["model_index"]))
        for entry in data["detections"]:
            score = float(entry["score"])
            logit = float(entry["logit"]) if "logit" in entry else score_to_logit(score)
            run.detections.append(
                Detection(
                    obb=canonicalize(
                        float(entry["x"]),
                        float(entry["y"]),
                        float(entry["w"]),
                        float(entry["h"]),
                        float(entry["theta"]),
                    ),
                    score=score,
                    logit=logit,
                    model_index=run.model_index,
                    category=entry["category"],
                    image_id=entry["image"],
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed run file: {exc!r}") from exc
    return run


def write_run_json(run: DetectionRun, path) -> None:
    jsonio.dump(run_to_dict(run), path)


def read_run_json(path) -> DetectionRun:
    return run_from_dict(jsonio.load(path))
