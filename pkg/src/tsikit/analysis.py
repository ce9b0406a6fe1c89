"""Corpus-level aggregates: grouped mean/std tables, class rankings, clamped
histograms, Pearson correlation, the masking comparison harness, and the
proxy-score correlation study.

All reductions use math.fsum, so every emitted number is independent of sample
iteration order. Non-finite TSI outcomes never vanish silently: they are
excluded from means, tallied per row and per table, absorbed by the histogram's
terminal bin (infinite) or its undefined counter, and dropped pairwise with a
count in correlations.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .dataset import CONFIDENCE_BINS, COVERAGE_BINS, SubsetLabel, confidence_bin, coverage_bin
from .errors import (
    BadBinSpecError,
    BadCountError,
    ConstantSeriesError,
    EmptyInputError,
    GridMismatchError,
    LengthMismatchError,
    MissingScoresError,
)
from .influence import InfluenceMap, mask_and_measure, top_n_tokens
from .metrics import FLAG_INFINITE, FLAG_UNDEFINED, TsiValue
from .model import Predictor, TokenizedImage

METRIC_A = "a_tsi"
METRIC_M = "m_tsi"
VALID_METRICS = (METRIC_A, METRIC_M)

ALL_BIN = "All"

DEFAULT_MASK_NS = (1, 3, 5, 10, 20)
DEFAULT_BIN_WIDTH = 0.1
DEFAULT_CLAMP = 2.0

_SUBSET_RANK = {label: i for i, label in enumerate(SubsetLabel)}


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    vals = [float(v) for v in values]
    if not vals:
        raise EmptyInputError("mean_std of an empty sequence")
    n = len(vals)
    mean = math.fsum(vals) / n
    var = math.fsum((v - mean) ** 2 for v in vals) / n
    return mean, math.sqrt(var)


@dataclass(frozen=True)
class TsiSample:
    """One (image, model) TSI outcome with every grouping key attached."""

    image_id: str
    model_id: str
    subset: SubsetLabel
    coverage: int
    confidence: float
    true_class: str
    a_tsi: TsiValue
    m_tsi: TsiValue

    def value(self, metric: str) -> TsiValue:
        if metric == METRIC_A:
            return self.a_tsi
        if metric == METRIC_M:
            return self.m_tsi
        raise ValueError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class AggregateStats:
    """One table row: group key, finite-sample stats, non-finite tallies."""

    group: tuple[str, ...]
    n: int
    mean: float
    std: float
    n_infinite: int = 0
    n_undefined: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise EmptyInputError(f"row {self.group} emitted with n = {self.n}")
        if self.std < 0.0:
            raise ValueError(f"row {self.group} has negative std")


@dataclass(frozen=True)
class TsiTable:
    rows: tuple[AggregateStats, ...]
    n_infinite: int
    n_undefined: int


def _tsi_table(
    samples: Iterable[TsiSample],
    metric: str,
    bin_of,
    bin_order: Sequence[str],
) -> TsiTable:
    if metric not in VALID_METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    finite: dict[tuple, list[float]] = {}
    infinite: dict[tuple, int] = {}
    undefined: dict[tuple, int] = {}
    total_inf = 0
    total_undef = 0
    for s in samples:
        v = s.value(metric)
        if v.flag == FLAG_INFINITE:
            total_inf += 1
        elif v.flag == FLAG_UNDEFINED:
            total_undef += 1
        for key in ((s.subset, s.model_id, ALL_BIN), (s.subset, s.model_id, bin_of(s))):
            if v.is_finite:
                finite.setdefault(key, []).append(v.value)
            elif v.flag == FLAG_INFINITE:
                infinite[key] = infinite.get(key, 0) + 1
            else:
                undefined[key] = undefined.get(key, 0) + 1
    bin_rank = {label: i for i, label in enumerate([ALL_BIN, *bin_order])}
    rows = []
    for key in sorted(finite, key=lambda k: (_SUBSET_RANK[k[0]], k[1], bin_rank[k[2]])):
        mean, std = mean_std(finite[key])
        subset, model_id, bin_label = key
        rows.append(
            AggregateStats(
                group=(subset.value, model_id, bin_label),
                n=len(finite[key]),
                mean=mean,
                std=std,
                n_infinite=infinite.get(key, 0),
                n_undefined=undefined.get(key, 0),
            )
        )
    return TsiTable(rows=tuple(rows), n_infinite=total_inf, n_undefined=total_undef)


def grouped_tsi_table(samples: Iterable[TsiSample], metric: str) -> TsiTable:
    """Rows keyed by (subset, model, coverage bin), plus an All bin per pair."""
    return _tsi_table(samples, metric, lambda s: coverage_bin(s.coverage), COVERAGE_BINS)


def confidence_bin_table(samples: Iterable[TsiSample], metric: str) -> TsiTable:
    """Rows keyed by (subset, model, confidence quartile), plus an All bin."""
    return _tsi_table(samples, metric, lambda s: confidence_bin(s.confidence), CONFIDENCE_BINS)


@dataclass(frozen=True)
class ClassRankRow:
    label: str
    n: int
    mean: float
    std: float


@dataclass(frozen=True)
class ClassRanking:
    rows: tuple[ClassRankRow, ...]

    def __post_init__(self) -> None:
        keys = [(-r.mean, r.label) for r in self.rows]
        if keys != sorted(keys):
            raise ValueError("ranking rows out of order")


def class_ranking(samples: Iterable[TsiSample], top_n: int) -> ClassRanking:
    """Classes by descending mean M-TSI (ties by label), truncated to top_n."""
    by_class: dict[str, list[float]] = {}
    for s in samples:
        if s.m_tsi.is_finite:
            by_class.setdefault(s.true_class, []).append(s.m_tsi.value)
    rows = []
    for label, vals in by_class.items():
        mean, std = mean_std(vals)
        rows.append(ClassRankRow(label=label, n=len(vals), mean=mean, std=std))
    rows.sort(key=lambda r: (-r.mean, r.label))
    return ClassRanking(rows=tuple(rows[: max(0, top_n)]))


@dataclass(frozen=True)
class Histogram:
    """Uniform bins over [0, clamp); the terminal bin absorbs [clamp, ∞)."""

    bin_width: float
    clamp: float
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    n_undefined: int

    def __post_init__(self) -> None:
        if len(self.counts) != len(self.edges):
            raise BadBinSpecError("counts and edges disagree")

    @property
    def labels(self) -> tuple[str, ...]:
        interior = [
            f"[{self.edges[i]:g},{self.edges[i + 1]:g})" for i in range(len(self.edges) - 1)
        ]
        return (*interior, f"[{self.clamp:g},{self.clamp:g}+]")

    @property
    def total(self) -> int:
        return sum(self.counts)


def clamped_histogram(
    values: Iterable[TsiValue | float],
    bin_width: float = DEFAULT_BIN_WIDTH,
    clamp: float = DEFAULT_CLAMP,
) -> Histogram:
    """Half-open interior bins with left edges i * bin_width; an exact-edge value
    goes upward. Infinite flags land in the terminal bin; undefined flags are
    excluded and counted separately."""
    if bin_width <= 0.0 or clamp <= 0.0:
        raise BadBinSpecError(f"bin_width {bin_width} and clamp {clamp} must be positive")
    n_interior = round(clamp / bin_width)
    if n_interior < 1 or abs(clamp / bin_width - n_interior) > 1e-9:
        raise BadBinSpecError(f"clamp {clamp} is not a multiple of bin_width {bin_width}")
    edges = tuple(i * bin_width for i in range(n_interior + 1))
    counts = [0] * (n_interior + 1)
    n_undefined = 0
    for v in values:
        if isinstance(v, TsiValue):
            if v.flag == FLAG_UNDEFINED:
                n_undefined += 1
                continue
            if v.flag == FLAG_INFINITE:
                counts[n_interior] += 1
                continue
            x = v.value
        else:
            x = float(v)
            if math.isnan(x):
                raise ValueError("NaN histogram value")
            if math.isinf(x):
                counts[n_interior] += 1
                continue
        if x < 0.0:
            raise ValueError(f"negative histogram value {x}")
        if x >= edges[n_interior]:
            counts[n_interior] += 1
        else:
            counts[bisect_right(edges, x) - 1] += 1
    return Histogram(
        bin_width=bin_width,
        clamp=edges[n_interior],
        edges=edges,
        counts=tuple(counts),
        n_undefined=n_undefined,
    )


@dataclass(frozen=True)
class CorrelationResult:
    n: int
    pearson_r: float
    r_squared: float

    def __post_init__(self) -> None:
        if not -1.0 <= self.pearson_r <= 1.0:
            raise ValueError(f"pearson_r {self.pearson_r} outside [-1, 1]")
        if self.r_squared != self.pearson_r * self.pearson_r:
            raise ValueError("r_squared is not pearson_r squared")


def pearson(xs: Sequence[float], ys: Sequence[float]) -> CorrelationResult:
    """Product-moment correlation; r_squared is its square."""
    xs = [float(x) for x in xs]
    ys = [float(y) for y in ys]
    if len(xs) != len(ys):
        raise LengthMismatchError(f"{len(xs)} xs vs {len(ys)} ys")
    n = len(xs)
    if n < 2:
        raise ConstantSeriesError(f"correlation needs at least 2 samples, got {n}")
    mx = math.fsum(xs) / n
    my = math.fsum(ys) / n
    sxx = math.fsum((x - mx) ** 2 for x in xs)
    syy = math.fsum((y - my) ** 2 for y in ys)
    if sxx == 0.0 or syy == 0.0:
        raise ConstantSeriesError("correlation of a constant series")
    sxy = math.fsum((x - mx) * (y - my) for x, y in zip(xs, ys))
    # squared ratio keeps ys == ±xs at exactly ±1: both products round identically
    ratio = min(1.0, (sxy * sxy) / (sxx * syy))
    r = math.copysign(math.sqrt(ratio), sxy)
    return CorrelationResult(n=n, pearson_r=r, r_squared=r * r)


@dataclass(frozen=True)
class MaskingCell:
    source: str
    n: int
    n_images: int
    mean: float
    std: float


def masking_comparison(
    p: Predictor,
    images: Sequence[TokenizedImage],
    sources: Sequence[tuple[str, Mapping[str, InfluenceMap]]],
    ns: Sequence[int] = DEFAULT_MASK_NS,
) -> tuple[MaskingCell, ...]:
    """For each (source, n): discard that source's top-n tokens per image and
    aggregate the signed confidence deltas."""
    ordered = sorted(images, key=lambda im: im.image_id)
    steps = sorted({int(n) for n in ns})
    cells = []
    for name, maps in sources:
        for n in steps:
            deltas = []
            for img in ordered:
                m = maps.get(img.image_id)
                if m is None:
                    raise MissingScoresError(f"source {name!r} lacks scores for {img.image_id!r}")
                if m.grid != img.grid:
                    raise GridMismatchError(
                        f"source {name!r} grid mismatch on {img.image_id!r}"
                    )
                if not 1 <= n < img.grid.n_tokens:
                    raise BadCountError(f"n={n} outside [1, {img.grid.n_tokens})")
                discard = top_n_tokens(m, n)
                deltas.append(mask_and_measure(p, img, discard, m.target_class))
            mean, std = mean_std(deltas)
            cells.append(MaskingCell(source=name, n=n, n_images=len(deltas), mean=mean, std=std))
    return tuple(cells)


@dataclass(frozen=True)
class TsiPair:
    """Per-image TSI under two score sources, with grouping keys."""

    subset: SubsetLabel
    metric: str
    model_id: str
    image_id: str
    value_a: TsiValue
    value_b: TsiValue


@dataclass(frozen=True)
class ProxyRow:
    subset: SubsetLabel
    metric: str
    model_id: str
    n_pairs: int
    n_dropped: int
    result: CorrelationResult | None


def proxy_correlation_study(pairs: Iterable[TsiPair]) -> tuple[ProxyRow, ...]:
    """Pearson per (subset, metric, model); non-finite pairs dropped and counted."""
    grouped: dict[tuple, list[TsiPair]] = {}
    for pair in pairs:
        if pair.metric not in VALID_METRICS:
            raise ValueError(f"unknown metric {pair.metric!r}")
        grouped.setdefault((pair.subset, pair.metric, pair.model_id), []).append(pair)
    rows = []
    for key in sorted(grouped, key=lambda k: (_SUBSET_RANK[k[0]], k[1], k[2])):
        subset, metric, model_id = key
        members = sorted(grouped[key], key=lambda q: q.image_id)
        xs, ys, dropped = [], [], 0
        for q in members:
            if q.value_a.is_finite and q.value_b.is_finite:
                xs.append(q.value_a.value)
                ys.append(q.value_b.value)
            else:
                dropped += 1
        try:
            result = pearson(xs, ys)
        except ConstantSeriesError:
            result = None
        rows.append(
            ProxyRow(
                subset=subset,
                metric=metric,
                model_id=model_id,
                n_pairs=len(xs),
                n_dropped=dropped,
                result=result,
            )
        )
    return tuple(rows)
