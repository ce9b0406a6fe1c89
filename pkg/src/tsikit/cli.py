"""Batch pipeline commands with bit-stable outputs.

Every artifact embeds the semantic config hash: JSONL files open with a
{"_meta": ...} line, CSV files with a "# config_hash=..." comment, and pixmaps
carry the hash as a format comment. Reruns with equal inputs and hashes are
byte-identical regardless of worker count.

Exit codes: 0 success, 2 input error, 3 schema error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import IO, Iterable, Sequence

import numpy as np

from . import __version__
from .analysis import (
    METRIC_A,
    METRIC_M,
    TsiPair,
    TsiSample,
    class_ranking,
    clamped_histogram,
    confidence_bin_table,
    grouped_tsi_table,
    masking_comparison,
    proxy_correlation_study,
)
from .config import PipelineConfig, load_config
from .dataset import (
    Corpus,
    ImageRecord,
    SubsetLabel,
    assign_subset,
    filesystem_annotations,
    load_corpus,
    voc_xml_bytes,
)
from .errors import SchemaViolationError, TsikitError
from .grid import bbox_to_partition, coverage, token_rect
from .influence import (
    KIND_ATTENTION,
    KIND_INFLUENCE,
    VALID_KINDS,
    InfluenceMap,
    compute_influence_map,
    dump_score_records,
    load_score_records,
)
from .metrics import (
    FLAG_FINITE,
    TsiValue,
    attention_topk_partition,
    tsi_scores,
)
from .model import MiniViT, Predictor, attention_map, predict, tokenize
from .synthetic import (
    PREDICTOR_MINI_VIT,
    PREDICTOR_OFFLINE,
    PREDICTOR_PLANTED,
    build_synthetic_corpus,
    mini_vit_panel,
    planted_for,
    synth_image,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SCHEMA = 3

METRIC_LABELS = ((METRIC_M, "M-TSI"), (METRIC_A, "A-TSI"))
TSI_SUBSETS = (SubsetLabel.ALL_CORRECT, SubsetLabel.SOME_INCORRECT)


# --- provenance and formatting ------------------------------------------------


def _meta(config: PipelineConfig, command: str) -> dict:
    return {
        "tool": "tsikit",
        "version": __version__,
        "command": command,
        "config_hash": config.config_hash(),
        "config": config.semantic_dict(),
    }


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _write_csv(path: str, config: PipelineConfig, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={config.config_hash()}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _open_out(path: str) -> IO[str]:
    return open(path, "w", encoding="utf-8", newline="")


# --- pixmap rendering -----------------------------------------------------------


def render_gray_levels(m: InfluenceMap) -> list[int]:
    """Per-token gray level round(255 * z / max); an all-zero map is all black."""
    peak = max(m.scores)
    if peak == 0.0:
        return [0] * len(m.scores)
    return [round(255 * (z / peak)) for z in m.scores]


def _gray_pixels(m: InfluenceMap) -> bytearray:
    grid = m.grid
    levels = render_gray_levels(m)
    buf = bytearray(grid.image_width * grid.image_height)
    for k, level in enumerate(levels):
        x0, y0, x1, y1 = token_rect(grid, k).astuple()
        for y in range(y0, y1):
            row = y * grid.image_width
            for x in range(x0, x1):
                buf[row + x] = level
    return buf


def write_pgm(path: str, m: InfluenceMap, config: PipelineConfig) -> None:
    grid = m.grid
    header = (
        f"P5\n# config_hash={config.config_hash()}\n"
        f"{grid.image_width} {grid.image_height}\n255\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(bytes(_gray_pixels(m)))


def write_ppm(path: str, m: InfluenceMap, rec: ImageRecord, config: PipelineConfig) -> None:
    grid = m.grid
    gray = _gray_pixels(m)
    rgb = bytearray(len(gray) * 3)
    rgb[0::3] = gray
    rgb[1::3] = gray
    rgb[2::3] = gray

    def paint(x: int, y: int) -> None:
        i = (y * grid.image_width + x) * 3
        rgb[i : i + 3] = b"\x00\xff\x00"

    for box in rec.boxes:
        clipped = box.clip(grid)
        if clipped is None:
            continue
        x0, y0, x1, y1 = clipped.astuple()
        for x in range(x0, x1):
            paint(x, y0)
            paint(x, y1 - 1)
        for y in range(y0, y1):
            paint(x0, y)
            paint(x1 - 1, y)
    header = (
        f"P6\n# config_hash={config.config_hash()}\n"
        f"{grid.image_width} {grid.image_height}\n255\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(bytes(rgb))


# --- shared loading helpers ---------------------------------------------------


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    overrides = {}
    for key in ("workers", "seed", "bin_width", "clamp", "top_k", "ns", "count"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    return load_config(getattr(args, "config", None), **overrides)


def _load_manifest(path: str, config: PipelineConfig) -> Corpus:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        return load_corpus(fh, config.patch_size, annotation_source=filesystem_annotations(base))


def _load_records(path: str) -> list[InfluenceMap]:
    with open(path, "r", encoding="utf-8") as fh:
        return load_score_records(fh)


def _records_by_image(records: Iterable[InfluenceMap]) -> dict[str, list[InfluenceMap]]:
    grouped: dict[str, list[InfluenceMap]] = {}
    for rec in records:
        grouped.setdefault(rec.image_id, []).append(rec)
    return grouped


class _PerImagePlanted:
    """Planted predictor panel: signal tokens come from each image's annotation."""

    model_id = "planted"
    n_classes = 2

    def __init__(self, corpus: Corpus, config: PipelineConfig):
        self._by_id = {rec.image_id: rec for rec in corpus.records}
        self._rule = config.overlap_rule
        self._cache: dict[str, Predictor] = {}

    def _inner(self, image_id: str) -> Predictor:
        if image_id not in self._cache:
            rec = self._by_id[image_id]
            self._cache[image_id] = planted_for(rec.grid, rec.boxes, self._rule)
        return self._cache[image_id]

    def evaluate(self, img, present):
        return self._inner(img.image_id).evaluate(img, present)


def _predictor_panel(kind: str, corpus: Corpus, config: PipelineConfig) -> list[Predictor]:
    if kind == PREDICTOR_MINI_VIT:
        grid = config.grid()
        for rec in corpus.records:
            if rec.grid != grid:
                raise TsikitError(
                    f"record {rec.image_id!r} grid {rec.grid.image_width}x"
                    f"{rec.grid.image_height}/{rec.grid.patch_size} does not match the config grid"
                )
        return list(mini_vit_panel(config.seed, grid))
    if kind == PREDICTOR_PLANTED:
        return [_PerImagePlanted(corpus, config)]
    raise TsikitError(f"predictor {kind!r} cannot run online")


# --- commands -------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    corpus = build_synthetic_corpus(
        config.seed,
        config.count,
        config.grid(),
        predictor_kind=args.predictor,
        overlap_rule=config.overlap_rule,
    )
    os.makedirs(args.out, exist_ok=True)
    ann_dir = os.path.join(args.out, "annotations")
    os.makedirs(ann_dir, exist_ok=True)
    with _open_out(os.path.join(args.out, "manifest.jsonl")) as fh:
        fh.write(json.dumps({"_meta": _meta(config, "synth")}) + "\n")
        fh.write(json.dumps({"model_ids": list(corpus.model_ids)}) + "\n")
        for rec in corpus.records:
            doc = voc_xml_bytes(
                rec.true_class, rec.boxes, rec.grid.image_width, rec.grid.image_height
            )
            rel = os.path.join("annotations", f"{rec.image_id}.xml")
            with open(os.path.join(args.out, rel), "wb") as xml_fh:
                xml_fh.write(doc)
            fh.write(json.dumps({
                "image_id": rec.image_id,
                "true_class": rec.true_class,
                "width": rec.grid.image_width,
                "height": rec.grid.image_height,
                "annotation_path": rel,
                "predictions": [
                    {
                        "model_id": p.model_id,
                        "predicted_class": p.predicted_class,
                        "confidence": p.confidence,
                    }
                    for p in rec.predictions
                ],
            }) + "\n")
    return EXIT_OK


def _influence_records(
    corpus: Corpus,
    predictors: Sequence[Predictor],
    config: PipelineConfig,
    with_attention: bool,
) -> Iterable[InfluenceMap]:
    for rec in corpus.records:
        pixels, _ = synth_image(config.seed, rec.image_id, rec.grid)
        img = tokenize(pixels, rec.grid, image_id=rec.image_id)
        for p in predictors:
            probs = predict(p, img, tuple(range(rec.grid.n_tokens)))
            target = int(np.argmax(probs))
            yield compute_influence_map(p, img, target, workers=config.workers)
            if with_attention:
                if not isinstance(p, MiniViT):
                    raise TsikitError(f"predictor {p.model_id!r} exposes no attention")
                att = attention_map(p, img)
                yield InfluenceMap(
                    image_id=rec.image_id,
                    model_id=p.model_id,
                    kind=KIND_ATTENTION,
                    target_class=target,
                    base_confidence=float(probs[target]),
                    scores=att.weights,
                    grid=att.grid,
                )


def cmd_influence(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    corpus = _load_manifest(args.annotations, config)
    if args.predictor == PREDICTOR_OFFLINE:
        if not args.scores:
            raise TsikitError("offline predictor requires --scores")
        by_image = _records_by_image(_load_records(args.scores))
        records = []
        for rec in corpus.records:
            found = by_image.get(rec.image_id)
            if not found:
                raise SchemaViolationError(f"no score records for image {rec.image_id!r}")
            for m in found:
                if m.grid != rec.grid:
                    raise SchemaViolationError(
                        f"score record for {rec.image_id!r} uses a different grid"
                    )
            records.extend(sorted(found, key=lambda m: (m.model_id, m.kind)))
    else:
        predictors = _predictor_panel(args.predictor, corpus, config)
        records = _influence_records(corpus, predictors, config, args.attention)
    with _open_out(args.out) as fh:
        dump_score_records(records, fh, meta=_meta(config, "influence"))
    return EXIT_OK


def _tsi_row(m: InfluenceMap, rec: ImageRecord, config: PipelineConfig) -> dict:
    part = bbox_to_partition(rec.grid, rec.boxes, config.overlap_rule)
    scores = tsi_scores(m, part)
    subset = assign_subset(rec, threshold=config.threshold, overlap_rule=config.overlap_rule)
    return {
        "image_id": m.image_id,
        "model_id": m.model_id,
        "kind": m.kind,
        "target_class": m.target_class,
        "subset": subset.value,
        "coverage": coverage(part),
        "confidence": m.base_confidence,
        "true_class": rec.true_class,
        "a_tsi": scores.a_tsi.value,
        "a_flag": scores.a_tsi.flag,
        "m_tsi": scores.m_tsi.value,
        "m_flag": scores.m_tsi.flag,
    }


def cmd_tsi(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    corpus = _load_manifest(args.annotations, config)
    records = _load_records(args.scores)
    by_id = {rec.image_id: rec for rec in corpus.records}
    scored_ids = {m.image_id for m in records}
    unmatched = sorted(scored_ids - set(by_id)) + sorted(set(by_id) - scored_ids)
    if unmatched:
        for image_id in unmatched:
            print(f"unmatched image_id: {image_id}", file=sys.stderr)
        return EXIT_INPUT
    with _open_out(args.out) as fh:
        fh.write(json.dumps({"_meta": _meta(config, "tsi")}) + "\n")
        for m in records:
            rec = by_id[m.image_id]
            if m.grid != rec.grid:
                raise SchemaViolationError(
                    f"score record for {m.image_id!r} uses a different grid"
                )
            if not rec.boxes:
                print(f"skipping unannotated image: {m.image_id}", file=sys.stderr)
                continue
            fh.write(json.dumps(_tsi_row(m, rec, config)) + "\n")
    return EXIT_OK


def _load_tsi_rows(path: str) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text:
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaViolationError(f"invalid JSON: {exc}", line=lineno) from exc
            if not isinstance(obj, dict):
                raise SchemaViolationError("row is not an object", line=lineno)
            if "_meta" in obj:
                continue
            rows.append(_validated_tsi_row(obj, lineno))
    return rows


def _validated_tsi_row(obj: dict, lineno: int) -> dict:
    required = (
        "image_id",
        "model_id",
        "kind",
        "subset",
        "coverage",
        "confidence",
        "true_class",
        "a_tsi",
        "a_flag",
        "m_tsi",
        "m_flag",
    )
    for key in required:
        if key not in obj:
            raise SchemaViolationError(f"missing key {key!r}", line=lineno)
    try:
        obj["_subset"] = SubsetLabel(obj["subset"])
        obj["_a"] = _tsi_value(obj["a_tsi"], obj["a_flag"])
        obj["_m"] = _tsi_value(obj["m_tsi"], obj["m_flag"])
    except ValueError as exc:
        raise SchemaViolationError(str(exc), line=lineno) from exc
    if obj["kind"] not in VALID_KINDS:
        raise SchemaViolationError(f"unknown kind {obj['kind']!r}", line=lineno)
    return obj


def _tsi_value(value, flag: str) -> TsiValue:
    if flag == FLAG_FINITE:
        return TsiValue.finite(float(value))
    return TsiValue(value=None, flag=flag)


def _samples_from_rows(rows: Iterable[dict]) -> dict[str, list[TsiSample]]:
    by_kind: dict[str, list[TsiSample]] = {}
    for obj in rows:
        sample = TsiSample(
            image_id=obj["image_id"],
            model_id=obj["model_id"],
            subset=obj["_subset"],
            coverage=int(obj["coverage"]),
            confidence=float(obj["confidence"]),
            true_class=str(obj["true_class"]),
            a_tsi=obj["_a"],
            m_tsi=obj["_m"],
        )
        by_kind.setdefault(obj["kind"], []).append(sample)
    return by_kind


def _kinds_in_order(by_kind: dict[str, list]) -> list[str]:
    return [k for k in VALID_KINDS if k in by_kind]


def cmd_aggregate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    by_kind = _samples_from_rows(_load_tsi_rows(args.scores))
    os.makedirs(args.out, exist_ok=True)

    coverage_rows = []
    confidence_rows = []
    ranking_rows = []
    for kind in _kinds_in_order(by_kind):
        samples = by_kind[kind]
        tsi_eligible = [s for s in samples if s.subset in TSI_SUBSETS]
        for metric, label in METRIC_LABELS:
            table = grouped_tsi_table(tsi_eligible, metric)
            for row in table.rows:
                coverage_rows.append((kind, label, *row.group, row.n, row.mean, row.std,
                                      row.n_infinite, row.n_undefined))
            incorrect = [s for s in samples if s.subset == SubsetLabel.SOME_INCORRECT]
            table = confidence_bin_table(incorrect, metric)
            for row in table.rows:
                confidence_rows.append((kind, label, *row.group, row.n, row.mean, row.std,
                                        row.n_infinite, row.n_undefined))
        for subset in TSI_SUBSETS:
            models = sorted({s.model_id for s in samples})
            for model_id in models:
                chosen = [
                    s for s in tsi_eligible if s.subset == subset and s.model_id == model_id
                ]
                ranking = class_ranking(chosen, top_n=10)
                for rank, row in enumerate(ranking.rows, start=1):
                    ranking_rows.append(
                        (kind, subset.value, model_id, rank, row.label, row.n, row.mean, row.std)
                    )

    stat_header = ("kind", "metric", "subset", "model", "bin", "n", "mean", "std",
                   "n_infinite", "n_undefined")
    _write_csv(os.path.join(args.out, "coverage_table.csv"), config, stat_header, coverage_rows)
    _write_csv(os.path.join(args.out, "confidence_table.csv"), config, stat_header,
               confidence_rows)
    _write_csv(
        os.path.join(args.out, "class_ranking.csv"),
        config,
        ("kind", "subset", "model", "rank", "class", "n", "mean", "std"),
        ranking_rows,
    )
    return EXIT_OK


def cmd_hist(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    by_kind = _samples_from_rows(_load_tsi_rows(args.scores))
    rows = []
    for kind in _kinds_in_order(by_kind):
        samples = [s for s in by_kind[kind] if s.subset in TSI_SUBSETS]
        for metric, label in METRIC_LABELS:
            for subset in TSI_SUBSETS:
                for model_id in sorted({s.model_id for s in samples}):
                    values = [
                        s.value(metric)
                        for s in samples
                        if s.subset == subset and s.model_id == model_id
                    ]
                    if not values:
                        continue
                    hist = clamped_histogram(values, config.bin_width, config.clamp)
                    for bin_label, count in zip(hist.labels, hist.counts):
                        rows.append((kind, label, subset.value, model_id, bin_label, count))
                    rows.append((kind, label, subset.value, model_id, "undefined",
                                 hist.n_undefined))
    _write_csv(args.out, config, ("kind", "metric", "subset", "model", "bin", "count"), rows)
    return EXIT_OK


def _compare_masking(args: argparse.Namespace, config: PipelineConfig) -> int:
    corpus = _load_manifest(args.annotations, config)
    panel = _predictor_panel(args.predictor, corpus, config)
    p = panel[0]
    records = _load_records(args.scores)
    by_kind: dict[str, dict[str, InfluenceMap]] = {}
    for m in records:
        if m.model_id == p.model_id:
            by_kind.setdefault(m.kind, {})[m.image_id] = m
    if not by_kind:
        raise TsikitError(f"no score records for predictor {p.model_id!r}")
    images = []
    for rec in corpus.records:
        pixels, _ = synth_image(config.seed, rec.image_id, rec.grid)
        images.append(tokenize(pixels, rec.grid, image_id=rec.image_id))
    sources = [(kind, by_kind[kind]) for kind in _kinds_in_order(by_kind)]
    cells = masking_comparison(p, images, sources, ns=config.ns)
    _write_csv(
        args.out,
        config,
        ("source", "n", "images", "mean", "std"),
        [(c.source, c.n, c.n_images, c.mean, c.std) for c in cells],
    )
    return EXIT_OK


def _compare_proxy(args: argparse.Namespace, config: PipelineConfig) -> int:
    corpus = _load_manifest(args.annotations, config)
    by_id = {rec.image_id: rec for rec in corpus.records}
    records = _load_records(args.scores)
    keyed: dict[tuple[str, str, str], InfluenceMap] = {}
    for m in records:
        keyed[(m.kind, m.image_id, m.model_id)] = m

    base: dict[tuple[str, str], tuple] = {}
    for (kind, image_id, model_id), m in sorted(keyed.items()):
        if kind != KIND_INFLUENCE:
            continue
        rec = by_id.get(image_id)
        if rec is None or not rec.boxes:
            continue
        part = bbox_to_partition(rec.grid, rec.boxes, config.overlap_rule)
        subset = assign_subset(rec, threshold=config.threshold,
                               overlap_rule=config.overlap_rule)
        base[(image_id, model_id)] = (m, part, subset, tsi_scores(m, part))

    pairs: dict[str, list[TsiPair]] = {}

    def add_pair(comparison: str, subset, metric: str, model_id: str, image_id: str,
                 value_a: TsiValue, value_b: TsiValue) -> None:
        pairs.setdefault(comparison, []).append(
            TsiPair(subset=subset, metric=metric, model_id=model_id, image_id=image_id,
                    value_a=value_a, value_b=value_b)
        )

    for (kind, image_id, model_id), m in sorted(keyed.items()):
        if kind == KIND_INFLUENCE or (image_id, model_id) not in base:
            continue
        _, part, subset, base_scores = base[(image_id, model_id)]
        proxy_scores = tsi_scores(m, part)
        comparison = f"{kind}-vs-influence"
        add_pair(comparison, subset, METRIC_A, model_id, image_id,
                 base_scores.a_tsi, proxy_scores.a_tsi)
        add_pair(comparison, subset, METRIC_M, model_id, image_id,
                 base_scores.m_tsi, proxy_scores.m_tsi)

    for (image_id, model_id), (m, part, subset, base_scores) in sorted(base.items()):
        att = keyed.get((KIND_ATTENTION, image_id, model_id))
        if att is None:
            continue
        for k in config.top_k:
            if not 1 <= k < att.grid.n_tokens:
                continue
            att_part = attention_topk_partition(att, k)
            alt = tsi_scores(m, att_part)
            comparison = f"top{k}-attention-vs-box"
            add_pair(comparison, subset, METRIC_A, model_id, image_id,
                     base_scores.a_tsi, alt.a_tsi)
            add_pair(comparison, subset, METRIC_M, model_id, image_id,
                     base_scores.m_tsi, alt.m_tsi)

    out_rows = []
    for comparison in sorted(pairs):
        for row in proxy_correlation_study(pairs[comparison]):
            r = row.result
            out_rows.append(
                (comparison, row.subset.value, dict(METRIC_LABELS)[row.metric],
                 row.model_id, row.n_pairs, row.n_dropped,
                 r.pearson_r if r else None, r.r_squared if r else None)
            )
    _write_csv(
        args.out,
        config,
        ("comparison", "subset", "metric", "model", "n_pairs", "n_dropped",
         "pearson_r", "r_squared"),
        out_rows,
    )
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if args.mode == "masking":
        return _compare_masking(args, config)
    return _compare_proxy(args, config)


def cmd_render(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    records = _load_records(args.scores)
    for m in records:
        if args.image_id and m.image_id != args.image_id:
            continue
        if args.model_id and m.model_id != args.model_id:
            continue
        if args.kind and m.kind != args.kind:
            continue
        break
    else:
        raise TsikitError("no score record matches the requested filters")
    if args.annotations:
        corpus = _load_manifest(args.annotations, config)
        for rec in corpus.records:
            if rec.image_id == m.image_id:
                write_ppm(args.out, m, rec, config)
                return EXIT_OK
        raise TsikitError(f"no annotation for image {m.image_id!r}")
    write_pgm(args.out, m, config)
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from exc


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--workers", type=int, help="worker threads (never changes output bytes)")
    sub.add_argument("--seed", type=int, help="corpus and model seed")
    sub.add_argument("--count", type=int, help="synthetic corpus size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsikit",
        description="Token-discarding influence maps and regional spuriosity metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a deterministic synthetic corpus")
    _add_common(p)
    p.add_argument("--predictor", choices=[PREDICTOR_MINI_VIT, PREDICTOR_PLANTED],
                   default=PREDICTOR_MINI_VIT)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("influence", help="compute or ingest per-token influence records")
    _add_common(p)
    p.add_argument("--predictor",
                   choices=[PREDICTOR_MINI_VIT, PREDICTOR_PLANTED, PREDICTOR_OFFLINE],
                   default=PREDICTOR_MINI_VIT)
    p.add_argument("--annotations", required=True, help="corpus manifest path")
    p.add_argument("--scores", help="precomputed records (offline predictor)")
    p.add_argument("--attention", action="store_true",
                   help="also emit final-layer CLS attention records (mini-vit only)")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_influence)

    p = sub.add_parser("tsi", help="join score records with annotations into TSI rows")
    _add_common(p)
    p.add_argument("--scores", required=True, help="score-record JSONL")
    p.add_argument("--annotations", required=True, help="corpus manifest path")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_tsi)

    p = sub.add_parser("aggregate", help="grouped TSI tables and class rankings")
    _add_common(p)
    p.add_argument("--scores", required=True, help="TSI-row JSONL")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("hist", help="clamped TSI histograms")
    _add_common(p)
    p.add_argument("--scores", required=True, help="TSI-row JSONL")
    p.add_argument("--bin-width", dest="bin_width", type=float)
    p.add_argument("--clamp", type=float)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("compare", help="masking harness or proxy-score correlations")
    _add_common(p)
    p.add_argument("--mode", choices=["masking", "proxy"], required=True)
    p.add_argument("--scores", required=True, help="score-record JSONL")
    p.add_argument("--annotations", required=True, help="corpus manifest path")
    p.add_argument("--predictor", choices=[PREDICTOR_MINI_VIT, PREDICTOR_PLANTED],
                   default=PREDICTOR_MINI_VIT, help="masking mode predictor")
    p.add_argument("--ns", type=_int_list, help="masking sizes, e.g. 1,3,5,10,20")
    p.add_argument("--top-k", dest="top_k", type=_int_list,
                   help="attention region sizes, e.g. 5,10,20,40,80")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("render", help="render a score record as a pixmap")
    _add_common(p)
    p.add_argument("--scores", required=True, help="score-record JSONL")
    p.add_argument("--annotations", help="manifest for the green box overlay")
    p.add_argument("--image-id", dest="image_id")
    p.add_argument("--model-id", dest="model_id")
    p.add_argument("--kind", choices=list(VALID_KINDS))
    p.add_argument("--out", required=True, help="output PGM/PPM path")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaViolationError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (TsikitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
