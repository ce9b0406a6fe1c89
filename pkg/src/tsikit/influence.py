"""Token-discarding engine: influence maps, top-n selection, mask-and-measure,
and offline ingestion of precomputed score records.

The engine parallelizes across tokens with each task writing into a
preallocated slot, so score sequences are bitwise-identical for any worker
count.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import IO, Iterable, Iterator

from .errors import (
    BadCountError,
    EmptyRemainderError,
    IndexOutOfRangeError,
    LengthMismatchError,
    NegativeScoreError,
    SchemaViolationError,
)
from .grid import TokenGrid, build_grid
from .model import Predictor, TokenizedImage, predict

KIND_INFLUENCE = "influence"
KIND_ATTENTION = "attention"
KIND_SALIENCY = "saliency"
VALID_KINDS = (KIND_INFLUENCE, KIND_ATTENTION, KIND_SALIENCY)


@dataclass(frozen=True)
class InfluenceMap:
    """Per-token nonnegative scores for one (image, model, target class)."""

    image_id: str
    model_id: str
    kind: str
    target_class: int
    base_confidence: float
    scores: tuple[float, ...]
    grid: TokenGrid

    def __post_init__(self) -> None:
        if self.kind not in VALID_KINDS:
            raise SchemaViolationError(f"unknown kind {self.kind!r}")
        if len(self.scores) != self.grid.n_tokens:
            raise LengthMismatchError(
                f"{len(self.scores)} scores on a {self.grid.n_tokens}-token grid"
            )
        if not 0.0 <= self.base_confidence <= 1.0:
            raise SchemaViolationError(f"base_confidence {self.base_confidence} outside [0, 1]")
        for k, z in enumerate(self.scores):
            if z < 0.0:
                raise NegativeScoreError(f"score {z} at token {k}")
            if self.kind == KIND_INFLUENCE and z > 1.0:
                raise SchemaViolationError(f"influence score {z} at token {k} exceeds 1")


def compute_influence_map(
    p: Predictor,
    img: TokenizedImage,
    target_class: int,
    workers: int = 1,
) -> InfluenceMap:
    """One-token-out influence scores: z_k = |base - confidence without k|.

    Performs exactly n_tokens + 1 predictor evaluations.
    """
    n = img.grid.n_tokens
    if not 0 <= target_class < p.n_classes:
        raise ValueError(f"target_class {target_class} invalid for {p.n_classes}-class predictor")
    full = tuple(range(n))
    base = float(predict(p, img, full)[target_class])
    scores: list[float] = [0.0] * n

    def one_out(k: int) -> None:
        present = full[:k] + full[k + 1 :]
        scores[k] = abs(base - float(predict(p, img, present)[target_class]))

    if workers <= 1 or n <= 1:
        for k in range(n):
            one_out(k)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one_out, range(n)))
    return InfluenceMap(
        image_id=img.image_id,
        model_id=p.model_id,
        kind=KIND_INFLUENCE,
        target_class=target_class,
        base_confidence=base,
        scores=tuple(scores),
        grid=img.grid,
    )


def top_n_tokens(m: InfluenceMap, n: int) -> list[int]:
    """Indices of the n largest scores, descending; ties go to the lower index."""
    total = m.grid.n_tokens
    if not 1 <= n <= total:
        raise BadCountError(f"n={n} outside [1, {total}]")
    order = sorted(range(total), key=lambda k: (-m.scores[k], k))
    return order[:n]


def mask_and_measure(
    p: Predictor,
    img: TokenizedImage,
    discard: Iterable[int],
    target_class: int,
) -> float:
    """Signed confidence delta after discarding a token set (positive = drop)."""
    n = img.grid.n_tokens
    drop = frozenset(int(k) for k in discard)
    for k in drop:
        if not 0 <= k < n:
            raise IndexOutOfRangeError(f"token {k} outside [0, {n})")
    if len(drop) == n:
        raise EmptyRemainderError("discard set equals the full token set")
    full = tuple(range(n))
    base = float(predict(p, img, full)[target_class])
    present = tuple(k for k in full if k not in drop)
    after = float(predict(p, img, present)[target_class])
    return base - after


# --- JSONL score records ------------------------------------------------------
#
# One object per line, UTF-8, newline-terminated:
#   {"image_id": str, "model_id": str, "kind": "influence"|"attention"|"saliency",
#    "target_class": int, "base_confidence": float,
#    "grid": {"w": int, "h": int, "patch": int}, "scores": [float x n_tokens]}
# A leading {"_meta": {...}} provenance line is permitted and skipped on read.


def score_record_to_dict(m: InfluenceMap) -> dict:
    return {
        "image_id": m.image_id,
        "model_id": m.model_id,
        "kind": m.kind,
        "target_class": m.target_class,
        "base_confidence": m.base_confidence,
        "grid": {"w": m.grid.image_width, "h": m.grid.image_height, "patch": m.grid.patch_size},
        "scores": list(m.scores),
    }


def dump_score_records(maps: Iterable[InfluenceMap], fp: IO[str], meta: dict | None = None) -> None:
    if meta is not None:
        fp.write(json.dumps({"_meta": meta}) + "\n")
    for m in maps:
        fp.write(json.dumps(score_record_to_dict(m)) + "\n")


def _require(obj: dict, key: str, types, line: int):
    if key not in obj:
        raise SchemaViolationError(f"missing key {key!r}", line=line)
    val = obj[key]
    if not isinstance(val, types) or isinstance(val, bool):
        raise SchemaViolationError(f"key {key!r} has wrong type {type(val).__name__}", line=line)
    return val


def parse_score_record(obj: dict, line: int = 0) -> InfluenceMap:
    image_id = _require(obj, "image_id", str, line)
    model_id = _require(obj, "model_id", str, line)
    kind = _require(obj, "kind", str, line)
    if kind not in VALID_KINDS:
        raise SchemaViolationError(f"unknown kind {kind!r}", line=line)
    target = _require(obj, "target_class", int, line)
    base = _require(obj, "base_confidence", (int, float), line)
    grid_obj = _require(obj, "grid", dict, line)
    w = _require(grid_obj, "w", int, line)
    h = _require(grid_obj, "h", int, line)
    patch = _require(grid_obj, "patch", int, line)
    scores = _require(obj, "scores", list, line)
    try:
        grid = build_grid(w, h, patch)
    except Exception as exc:
        raise SchemaViolationError(f"bad grid: {exc}", line=line) from exc
    if len(scores) != grid.n_tokens:
        raise LengthMismatchError(
            f"{len(scores)} scores on a {grid.n_tokens}-token grid", line=line
        )
    clean: list[float] = []
    for k, z in enumerate(scores):
        if isinstance(z, bool) or not isinstance(z, (int, float)):
            raise SchemaViolationError(f"score at token {k} is not a number", line=line)
        if z < 0:
            raise NegativeScoreError(f"score {z} at token {k}", line=line)
        clean.append(float(z))
    if not 0.0 <= float(base) <= 1.0:
        raise SchemaViolationError(f"base_confidence {base} outside [0, 1]", line=line)
    try:
        return InfluenceMap(
            image_id=image_id,
            model_id=model_id,
            kind=kind,
            target_class=target,
            base_confidence=float(base),
            scores=tuple(clean),
            grid=grid,
        )
    except SchemaViolationError as exc:
        raise SchemaViolationError(str(exc), line=line) from exc


def iter_score_records(stream: Iterable[str]) -> Iterator[InfluenceMap]:
    """Parse a JSONL stream, skipping provenance lines; errors carry line numbers."""
    for lineno, raw in enumerate(stream, start=1):
        text = raw.strip()
        if not text:
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaViolationError(f"invalid JSON: {exc}", line=lineno) from exc
        if not isinstance(obj, dict):
            raise SchemaViolationError("record is not an object", line=lineno)
        if "_meta" in obj:
            continue
        yield parse_score_record(obj, line=lineno)


def load_score_records(stream: Iterable[str]) -> list[InfluenceMap]:
    return list(iter_score_records(stream))
