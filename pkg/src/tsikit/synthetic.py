"""Deterministic synthetic corpus: images, annotations, and a model panel
derived entirely from (seed, image_id), so any pipeline stage can regenerate
pixels without image files.

Recipe, pinned for golden-file stability: per image, one RNG seeded with
sha256("<seed>:<image_id>") draws, in order, the object box (at least 4 px per
side), the dim background (uniform [0, 0.5)), and the bright object fill
(uniform [0.5, 1)).
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from .dataset import Corpus, ImageRecord, ModelPrediction
from .grid import OVERLAP_ANY, BoundingBox, TokenGrid, bbox_to_partition
from .model import (
    MiniViT,
    MiniVitConfig,
    PlantedPredictor,
    Predictor,
    TokenizedImage,
    mini_vit_new,
    planted_predictor,
    predict,
    tokenize,
)

MODEL_SEED_OFFSETS = (101, 202, 303)
MIN_BOX_SIDE = 4

PREDICTOR_MINI_VIT = "mini-vit"
PREDICTOR_PLANTED = "planted"
PREDICTOR_OFFLINE = "offline"


def stable_seed(*parts) -> int:
    """Cross-run stable integer seed (process hash randomization is useless here)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest, "big")


def synth_image_ids(count: int) -> list[str]:
    return [f"synth-{i:04d}" for i in range(count)]


def synth_image(seed: int, image_id: str, grid: TokenGrid) -> tuple[np.ndarray, BoundingBox]:
    rng = np.random.default_rng(stable_seed(seed, image_id))
    w, h = grid.image_width, grid.image_height
    x0 = int(rng.integers(0, w - MIN_BOX_SIDE + 1))
    y0 = int(rng.integers(0, h - MIN_BOX_SIDE + 1))
    x1 = int(rng.integers(x0 + MIN_BOX_SIDE, w + 1))
    y1 = int(rng.integers(y0 + MIN_BOX_SIDE, h + 1))
    box = BoundingBox(x0, y0, x1, y1)
    pixels = rng.uniform(0.0, 0.5, size=(h, w))
    pixels[y0:y1, x0:x1] = rng.uniform(0.5, 1.0, size=(y1 - y0, x1 - x0))
    return pixels, box


def mini_vit_panel(seed: int, grid: TokenGrid, n_classes: int = 2) -> list[MiniViT]:
    config = MiniVitConfig(grid=grid, n_classes=n_classes)
    return [mini_vit_new(seed + off, config) for off in MODEL_SEED_OFFSETS]


def planted_for(
    grid: TokenGrid,
    boxes: Sequence[BoundingBox],
    overlap_rule: str = OVERLAP_ANY,
    weight: float = 4.0,
) -> PlantedPredictor:
    """Planted predictor whose signal tokens are the annotated region."""
    part = bbox_to_partition(grid, boxes, overlap_rule)
    return planted_predictor(part.b_in, weight=weight)


def _predictions(
    predictors: Sequence[Predictor], img: TokenizedImage, true_class: str
) -> tuple[ModelPrediction, ...]:
    preds = []
    for p in predictors:
        probs = predict(p, img, tuple(range(img.grid.n_tokens)))
        cls = int(np.argmax(probs))
        preds.append(
            ModelPrediction(
                model_id=p.model_id,
                predicted_class=str(cls),
                confidence=float(probs[cls]),
                correct=str(cls) == true_class,
            )
        )
    return tuple(preds)


def build_synthetic_corpus(
    seed: int,
    count: int,
    grid: TokenGrid,
    predictor_kind: str = PREDICTOR_MINI_VIT,
    overlap_rule: str = OVERLAP_ANY,
) -> Corpus:
    """Manifest-level corpus; pixels are regenerated on demand via synth_image.

    mini-vit: a three-model panel; the first model's argmax is the ground truth,
    so its record is always correct and the others split the corpus.
    planted: a single planted predictor per image, signal = annotation.
    """
    records = []
    panel = None
    if predictor_kind == PREDICTOR_MINI_VIT:
        panel = mini_vit_panel(seed, grid)
        model_ids = tuple(p.model_id for p in panel)
    elif predictor_kind == PREDICTOR_PLANTED:
        model_ids = ("planted",)
    else:
        raise ValueError(f"cannot synthesize predictions for {predictor_kind!r}")
    for image_id in synth_image_ids(count):
        pixels, box = synth_image(seed, image_id, grid)
        img = tokenize(pixels, grid, image_id=image_id)
        if predictor_kind == PREDICTOR_MINI_VIT:
            probs0 = predict(panel[0], img, tuple(range(grid.n_tokens)))
            true_class = str(int(np.argmax(probs0)))
            preds = _predictions(panel, img, true_class)
        else:
            true_class = "1"
            planted = planted_for(grid, [box], overlap_rule)
            preds = _predictions([planted], img, true_class)
        records.append(
            ImageRecord(
                image_id=image_id,
                true_class=true_class,
                boxes=(box,),
                predictions=preds,
                grid=grid,
            )
        )
    return Corpus(records=tuple(records), model_ids=model_ids)
