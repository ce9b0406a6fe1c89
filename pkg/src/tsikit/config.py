"""Pipeline configuration: one validated object carried through every command.

The config hash covers only fields that can change output bytes; the worker
count is deliberately excluded because output must be identical for any value.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, replace
from fractions import Fraction

from .errors import InvalidConfigError
from .grid import OVERLAP_ANY, OVERLAP_CENTER, TokenGrid, build_grid

DEFAULT_TOP_K = (5, 10, 20, 40, 80)
DEFAULT_NS = (1, 3, 5, 10, 20)


@dataclass(frozen=True)
class PipelineConfig:
    image_width: int = 64
    image_height: int = 64
    patch_size: int = 8
    overlap_rule: str = OVERLAP_ANY
    threshold_num: int = 160
    threshold_den: int = 196
    bin_width: float = 0.1
    clamp: float = 2.0
    top_k: tuple[int, ...] = DEFAULT_TOP_K
    ns: tuple[int, ...] = DEFAULT_NS
    count: int = 24
    seed: int = 7
    workers: int = 1

    def __post_init__(self) -> None:
        try:
            self.grid()
        except Exception as exc:
            raise InvalidConfigError(f"bad grid: {exc}") from exc
        if self.overlap_rule not in (OVERLAP_ANY, OVERLAP_CENTER):
            raise InvalidConfigError(f"unknown overlap rule {self.overlap_rule!r}")
        if self.threshold_num <= 0 or self.threshold_den <= 0:
            raise InvalidConfigError("threshold fraction must be positive")
        if self.bin_width <= 0 or self.clamp <= 0:
            raise InvalidConfigError("bin specs must be positive")
        if self.count < 0:
            raise InvalidConfigError("count must be nonnegative")
        if self.workers < 1:
            raise InvalidConfigError("workers must be at least 1")
        for name, values in (("top_k", self.top_k), ("ns", self.ns)):
            if not values or any(int(v) < 1 for v in values):
                raise InvalidConfigError(f"{name} must be a non-empty list of positive counts")

    def grid(self) -> TokenGrid:
        return build_grid(self.image_width, self.image_height, self.patch_size)

    @property
    def threshold(self) -> Fraction:
        return Fraction(self.threshold_num, self.threshold_den)

    def semantic_dict(self) -> dict:
        return {
            "image_width": self.image_width,
            "image_height": self.image_height,
            "patch_size": self.patch_size,
            "overlap_rule": self.overlap_rule,
            "threshold": [self.threshold_num, self.threshold_den],
            "bin_width": self.bin_width,
            "clamp": self.clamp,
            "top_k": list(self.top_k),
            "ns": list(self.ns),
            "count": self.count,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_FIELD_NAMES = {f.name for f in fields(PipelineConfig)}
_TUPLE_FIELDS = ("top_k", "ns")


def _coerce(updates: dict) -> dict:
    out = dict(updates)
    for key in _TUPLE_FIELDS:
        if key in out and out[key] is not None:
            out[key] = tuple(int(v) for v in out[key])
    return out


def load_config(path: str | None = None, **overrides) -> PipelineConfig:
    """Config file first (JSON object), then non-None keyword overrides."""
    base = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                base = json.load(fh)
        except OSError as exc:
            raise InvalidConfigError(f"cannot read config {path!r}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"config {path!r} is not valid JSON: {exc}") from exc
        if not isinstance(base, dict):
            raise InvalidConfigError(f"config {path!r} must hold a JSON object")
        unknown = set(base) - _FIELD_NAMES
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = _coerce(base)
    config = PipelineConfig(**merged)
    live = {k: v for k, v in overrides.items() if v is not None and k in _FIELD_NAMES}
    if live:
        config = replace(config, **_coerce(live))
    return config
