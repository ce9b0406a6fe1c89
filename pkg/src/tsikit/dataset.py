"""Corpus ingestion: VOC-style annotation parsing, the JSONL manifest format,
the large/correct/incorrect subset partition, and binning predicates.

Manifest lines are JSON objects {image_id, true_class, width, height,
predictions: [{model_id, predicted_class, confidence}], boxes | annotation_path}.
An optional leading {"model_ids": [...]} header pins the model set; without it
the first record's prediction order is authoritative.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import IO, Callable, Iterable
from xml.etree import ElementTree

from .errors import (
    DanglingAnnotationError,
    InvertedBoxError,
    MalformedXmlError,
    MissingFieldError,
    OutOfRangeError,
    SchemaViolationError,
    UnknownModelIdError,
)
from .grid import OVERLAP_ANY, BoundingBox, TokenGrid, bbox_to_partition, build_grid, coverage

LARGE_OBJECT_THRESHOLD = Fraction(160, 196)

COVERAGE_BINS = ("1-40", "41-80", "81-120", "121-160")
CONFIDENCE_BINS = ("0-25%", "25-50%", "50-75%", "75-100%")


class SubsetLabel(str, Enum):
    """Disjoint corpus partition: oversized annotation, all models correct, rest."""

    LARGE_OBJECT = "D_L"
    ALL_CORRECT = "D_C"
    SOME_INCORRECT = "D_I"


@dataclass(frozen=True)
class ModelPrediction:
    model_id: str
    predicted_class: str
    confidence: float
    correct: bool

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise SchemaViolationError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    true_class: str
    boxes: tuple[BoundingBox, ...]
    predictions: tuple[ModelPrediction, ...]
    grid: TokenGrid

    def __post_init__(self) -> None:
        if not self.predictions:
            raise SchemaViolationError(f"record {self.image_id!r} has no predictions")
        seen = set()
        for p in self.predictions:
            if p.model_id in seen:
                raise SchemaViolationError(
                    f"record {self.image_id!r} has duplicate prediction for {p.model_id!r}"
                )
            seen.add(p.model_id)
            if p.correct != (p.predicted_class == self.true_class):
                raise SchemaViolationError(
                    f"record {self.image_id!r}: correct flag inconsistent for {p.model_id!r}"
                )

    def prediction_for(self, model_id: str) -> ModelPrediction:
        for p in self.predictions:
            if p.model_id == model_id:
                return p
        raise UnknownModelIdError(f"record {self.image_id!r} has no prediction for {model_id!r}")

    @property
    def all_correct(self) -> bool:
        return all(p.correct for p in self.predictions)


@dataclass(frozen=True)
class Corpus:
    records: tuple[ImageRecord, ...]
    model_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        expected = set(self.model_ids)
        if len(expected) != len(self.model_ids):
            raise SchemaViolationError("duplicate model_ids in corpus")
        for rec in self.records:
            got = {p.model_id for p in rec.predictions}
            if got != expected:
                raise SchemaViolationError(
                    f"record {rec.image_id!r} predictions {sorted(got)} != corpus models"
                )

    def __len__(self) -> int:
        return len(self.records)


def assign_subset(
    rec: ImageRecord,
    threshold: Fraction = LARGE_OBJECT_THRESHOLD,
    overlap_rule: str = OVERLAP_ANY,
) -> SubsetLabel:
    """Coverage strictly above the threshold fraction wins; then model agreement."""
    part = bbox_to_partition(rec.grid, rec.boxes, overlap_rule)
    if Fraction(coverage(part), rec.grid.n_tokens) > threshold:
        return SubsetLabel.LARGE_OBJECT
    if rec.all_correct:
        return SubsetLabel.ALL_CORRECT
    return SubsetLabel.SOME_INCORRECT


def coverage_bin(n_in: int) -> str:
    if not 1 <= n_in <= 160:
        raise OutOfRangeError(f"coverage {n_in} outside [1, 160]")
    return COVERAGE_BINS[(n_in - 1) // 40]


def confidence_bin(confidence: float) -> str:
    """Quartile label; boundaries go upward, 1.0 stays in the top bin."""
    if not 0.0 <= confidence <= 1.0:
        raise OutOfRangeError(f"confidence {confidence} outside [0, 1]")
    if confidence < 0.25:
        return CONFIDENCE_BINS[0]
    if confidence < 0.5:
        return CONFIDENCE_BINS[1]
    if confidence < 0.75:
        return CONFIDENCE_BINS[2]
    return CONFIDENCE_BINS[3]


# --- VOC-style annotation XML ---------------------------------------------
# 1-based inclusive pixel coordinates; converted to half-open 0-based boxes.


def parse_voc_xml(document: bytes) -> tuple[str, tuple[BoundingBox, ...]]:
    try:
        root = ElementTree.fromstring(document)
    except ElementTree.ParseError as exc:
        raise MalformedXmlError(str(exc)) from exc
    objects = root.findall(".//object")
    if not objects:
        raise MissingFieldError("no object nodes")
    class_name = ""
    boxes: list[BoundingBox] = []
    for obj in objects:
        name_node = obj.find("name")
        if name_node is None or not (name_node.text or "").strip():
            raise MissingFieldError("object without a name")
        if not class_name:
            class_name = name_node.text.strip()
        bnd = obj.find("bndbox")
        if bnd is None:
            raise MissingFieldError("object without a bndbox")
        vals: dict[str, int] = {}
        for field in ("xmin", "ymin", "xmax", "ymax"):
            node = bnd.find(field)
            if node is None or node.text is None or not node.text.strip():
                raise MissingFieldError(f"bndbox missing {field}")
            try:
                vals[field] = int(node.text.strip())
            except ValueError as exc:
                raise MissingFieldError(f"bndbox {field} is not an integer") from exc
        if vals["xmax"] < vals["xmin"] or vals["ymax"] < vals["ymin"]:
            raise InvertedBoxError(
                f"bndbox ({vals['xmin']},{vals['ymin']},{vals['xmax']},{vals['ymax']}) inverted"
            )
        boxes.append(
            BoundingBox(vals["xmin"] - 1, vals["ymin"] - 1, vals["xmax"], vals["ymax"])
        )
    return class_name, tuple(boxes)


def voc_xml_bytes(class_name: str, boxes: Iterable[BoundingBox], width: int, height: int) -> bytes:
    root = ElementTree.Element("annotation")
    size = ElementTree.SubElement(root, "size")
    ElementTree.SubElement(size, "width").text = str(width)
    ElementTree.SubElement(size, "height").text = str(height)
    for box in boxes:
        obj = ElementTree.SubElement(root, "object")
        ElementTree.SubElement(obj, "name").text = class_name
        bnd = ElementTree.SubElement(obj, "bndbox")
        ElementTree.SubElement(bnd, "xmin").text = str(box.x_min + 1)
        ElementTree.SubElement(bnd, "ymin").text = str(box.y_min + 1)
        ElementTree.SubElement(bnd, "xmax").text = str(box.x_max)
        ElementTree.SubElement(bnd, "ymax").text = str(box.y_max)
    return ElementTree.tostring(root, encoding="utf-8", xml_declaration=True)


# --- Manifest I/O -----------------------------------------------------------


def filesystem_annotations(base_dir: str) -> Callable[[str], bytes]:
    def read(path: str) -> bytes:
        full = os.path.join(base_dir, path)
        try:
            with open(full, "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise DanglingAnnotationError(f"cannot read annotation {path!r}: {exc}") from exc

    return read


def _as_label(value, key: str, line: int) -> str:
    if isinstance(value, bool) or not isinstance(value, (str, int)):
        raise SchemaViolationError(f"key {key!r} is not a class label", line=line)
    return str(value)


def _record_from_obj(
    obj: dict,
    model_ids: tuple[str, ...],
    patch_size: int,
    annotation_source: Callable[[str], bytes] | None,
    line: int,
) -> ImageRecord:
    for key in ("image_id", "true_class", "width", "height", "predictions"):
        if key not in obj:
            raise SchemaViolationError(f"missing key {key!r}", line=line)
    image_id = obj["image_id"]
    if not isinstance(image_id, str):
        raise SchemaViolationError("image_id is not a string", line=line)
    true_class = _as_label(obj["true_class"], "true_class", line)
    try:
        grid = build_grid(int(obj["width"]), int(obj["height"]), patch_size)
    except Exception as exc:
        raise SchemaViolationError(f"bad image dimensions: {exc}", line=line) from exc

    if "boxes" in obj:
        raw = obj["boxes"]
        if not isinstance(raw, list):
            raise SchemaViolationError("boxes is not a list", line=line)
        try:
            boxes = tuple(BoundingBox(*(int(v) for v in quad)) for quad in raw)
        except Exception as exc:
            raise SchemaViolationError(f"bad box: {exc}", line=line) from exc
    elif "annotation_path" in obj:
        if annotation_source is None:
            raise DanglingAnnotationError(
                f"line {line}: annotation_path given but no annotation source configured"
            )
        document = annotation_source(obj["annotation_path"])
        _, boxes = parse_voc_xml(document)
    else:
        boxes = ()

    preds_raw = obj["predictions"]
    if not isinstance(preds_raw, list) or not preds_raw:
        raise SchemaViolationError("predictions must be a non-empty list", line=line)
    known = set(model_ids)
    preds: list[ModelPrediction] = []
    for entry in preds_raw:
        if not isinstance(entry, dict):
            raise SchemaViolationError("prediction entry is not an object", line=line)
        for key in ("model_id", "predicted_class", "confidence"):
            if key not in entry:
                raise SchemaViolationError(f"prediction missing {key!r}", line=line)
        model_id = entry["model_id"]
        if model_id not in known:
            raise UnknownModelIdError(f"line {line}: unknown model {model_id!r}")
        predicted = _as_label(entry["predicted_class"], "predicted_class", line)
        confidence = entry["confidence"]
        if isinstance(confidence, bool) or not isinstance(confidence, (int, float)):
            raise SchemaViolationError("confidence is not a number", line=line)
        try:
            preds.append(
                ModelPrediction(
                    model_id=model_id,
                    predicted_class=predicted,
                    confidence=float(confidence),
                    correct=predicted == true_class,
                )
            )
        except SchemaViolationError as exc:
            raise SchemaViolationError(str(exc), line=line) from exc
    by_id = {p.model_id: p for p in preds}
    if len(by_id) != len(preds):
        raise SchemaViolationError("duplicate prediction model_id", line=line)
    if set(by_id) != known:
        missing = sorted(known - set(by_id))
        raise SchemaViolationError(f"missing predictions for {missing}", line=line)
    ordered = tuple(by_id[m] for m in model_ids)
    return ImageRecord(
        image_id=image_id,
        true_class=true_class,
        boxes=boxes,
        predictions=ordered,
        grid=grid,
    )


def load_corpus(
    stream: Iterable[str],
    patch_size: int,
    annotation_source: Callable[[str], bytes] | None = None,
) -> Corpus:
    model_ids: tuple[str, ...] | None = None
    records: list[ImageRecord] = []
    for lineno, raw in enumerate(stream, start=1):
        text = raw.strip()
        if not text:
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaViolationError(f"invalid JSON: {exc}", line=lineno) from exc
        if not isinstance(obj, dict):
            raise SchemaViolationError("manifest line is not an object", line=lineno)
        if "_meta" in obj:
            continue
        if "model_ids" in obj and "image_id" not in obj:
            header = obj["model_ids"]
            if (
                model_ids is not None
                or not isinstance(header, list)
                or not header
                or not all(isinstance(m, str) for m in header)
            ):
                raise SchemaViolationError("bad model_ids header", line=lineno)
            model_ids = tuple(header)
            continue
        if model_ids is None:
            preds = obj.get("predictions")
            if not isinstance(preds, list) or not preds:
                raise SchemaViolationError(
                    "first record must carry predictions to fix the model set", line=lineno
                )
            inferred = []
            for entry in preds:
                if not isinstance(entry, dict) or not isinstance(entry.get("model_id"), str):
                    raise SchemaViolationError("prediction missing model_id", line=lineno)
                inferred.append(entry["model_id"])
            model_ids = tuple(inferred)
        records.append(_record_from_obj(obj, model_ids, patch_size, annotation_source, lineno))
    return Corpus(records=tuple(records), model_ids=model_ids or ())


def dump_corpus(corpus: Corpus, fp: IO[str]) -> None:
    fp.write(json.dumps({"model_ids": list(corpus.model_ids)}) + "\n")
    for rec in corpus.records:
        obj = {
            "image_id": rec.image_id,
            "true_class": rec.true_class,
            "width": rec.grid.image_width,
            "height": rec.grid.image_height,
            "boxes": [list(box.astuple()) for box in rec.boxes],
            "predictions": [
                {
                    "model_id": p.model_id,
                    "predicted_class": p.predicted_class,
                    "confidence": p.confidence,
                }
                for p in rec.predictions
            ],
        }
        fp.write(json.dumps(obj) + "\n")
