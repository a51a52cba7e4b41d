"""Shared generators for randomized tests. Everything is seeded."""

from __future__ import annotations

import math

import numpy as np
import pytest

from obbstack.geometry import OBB, canonicalize
from obbstack.ingest import Detection, score_to_logit


def random_obb(rng, field: float = 100.0, min_size: float = 2.0, max_size: float = 30.0) -> OBB:
    w = rng.uniform(min_size, max_size)
    h = rng.uniform(min_size, max_size)
    return canonicalize(
        rng.uniform(0.0, field),
        rng.uniform(0.0, field),
        w,
        h,
        rng.uniform(0.0, math.pi),
    )


def random_detection(rng, model_index: int, field: float = 100.0,
                     category: str = "obj", image_id: str = "I0") -> Detection:
    score = float(rng.uniform(0.01, 0.999))
    return Detection(
        obb=random_obb(rng, field),
        score=score,
        logit=score_to_logit(score),
        model_index=model_index,
        category=category,
        image_id=image_id,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
