"""Spuriosity metrics: A-TSI (mean-ratio) and M-TSI (max-ratio) of token scores
outside an annotated region against those inside, plus interpretation and the
attention-proxy region constructor.

Zero in-side denominators yield flags rather than exceptions; a model that
ignores the object entirely is an informative outcome and must survive
aggregation. Means use math.fsum so finite values are exactly permutation
invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import BadCountError, GridMismatchError
from .grid import TokenPartition
from .influence import InfluenceMap, top_n_tokens

FLAG_FINITE = "finite"
FLAG_INFINITE = "infinite"
FLAG_UNDEFINED = "undefined"

CORE_DOMINANT = "core-dominant"
BALANCED = "balanced"
SPURIOUS = "spurious"


@dataclass(frozen=True)
class TsiValue:
    """One metric outcome: a nonnegative value when finite, else a flag."""

    value: float | None
    flag: str

    def __post_init__(self) -> None:
        if self.flag not in (FLAG_FINITE, FLAG_INFINITE, FLAG_UNDEFINED):
            raise ValueError(f"unknown flag {self.flag!r}")
        if self.flag == FLAG_FINITE:
            if self.value is None or self.value < 0.0 or not math.isfinite(self.value):
                raise ValueError(f"finite flag with value {self.value}")
        elif self.value is not None:
            raise ValueError(f"{self.flag} flag carries value {self.value}")

    @classmethod
    def finite(cls, value: float) -> "TsiValue":
        return cls(value=value, flag=FLAG_FINITE)

    @classmethod
    def infinite(cls) -> "TsiValue":
        return cls(value=None, flag=FLAG_INFINITE)

    @classmethod
    def undefined(cls) -> "TsiValue":
        return cls(value=None, flag=FLAG_UNDEFINED)

    @property
    def is_finite(self) -> bool:
        return self.flag == FLAG_FINITE


@dataclass(frozen=True)
class TsiScores:
    a_tsi: TsiValue
    m_tsi: TsiValue


def _check_grids(m: InfluenceMap, part: TokenPartition) -> None:
    if m.grid != part.grid:
        raise GridMismatchError(f"map grid {m.grid} != partition grid {part.grid}")


def _ratio(out_side: float, in_side: float) -> TsiValue:
    if in_side == 0.0 and out_side == 0.0:
        return TsiValue.undefined()
    if in_side == 0.0:
        return TsiValue.infinite()
    return TsiValue.finite(out_side / in_side)


def a_tsi(m: InfluenceMap, part: TokenPartition) -> TsiValue:
    """Mean score over b_out divided by mean score over b_in."""
    _check_grids(m, part)
    if not part.b_in or not part.b_out:
        return TsiValue.undefined()
    mean_in = math.fsum(m.scores[k] for k in part.b_in) / part.n_in
    mean_out = math.fsum(m.scores[k] for k in part.b_out) / part.n_out
    return _ratio(mean_out, mean_in)


def m_tsi(m: InfluenceMap, part: TokenPartition) -> TsiValue:
    """Max score over b_out divided by max score over b_in."""
    _check_grids(m, part)
    if not part.b_in or not part.b_out:
        return TsiValue.undefined()
    max_in = max(m.scores[k] for k in part.b_in)
    max_out = max(m.scores[k] for k in part.b_out)
    return _ratio(max_out, max_in)


def tsi_scores(m: InfluenceMap, part: TokenPartition) -> TsiScores:
    return TsiScores(a_tsi=a_tsi(m, part), m_tsi=m_tsi(m, part))


def interpret(v: TsiValue) -> str | None:
    """Category by exact comparison against 1; undefined has no category."""
    if v.flag == FLAG_UNDEFINED:
        return None
    if v.flag == FLAG_INFINITE:
        return SPURIOUS
    if v.value < 1.0:
        return CORE_DOMINANT
    if v.value == 1.0:
        return BALANCED
    return SPURIOUS


def attention_topk_partition(att: InfluenceMap, k: int) -> TokenPartition:
    """b_in = the k highest-attention tokens (ties to the lower index)."""
    n = att.grid.n_tokens
    if not 1 <= k < n:
        raise BadCountError(f"k={k} outside [1, {n})")
    b_in = frozenset(top_n_tokens(att, k))
    return TokenPartition.from_b_in(att.grid, b_in)
