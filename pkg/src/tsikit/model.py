"""Predictor abstraction plus bundled deterministic predictors.

Two predictors ship with the toolkit so the discarding engine is runnable with
zero external assets: a seeded miniature vision transformer (a correctness
vehicle, not a trained classifier) and an analytic planted predictor whose
influence structure is known in closed form.

Token discarding is true sequence shortening: a discarded token is removed
from the sequence while every surviving token keeps its own positional
embedding. No fill value is ever substituted for a missing token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Protocol, runtime_checkable

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyTokenSetError,
    IndexOutOfRangeError,
    InvalidConfigError,
)
from .grid import TokenGrid, build_grid, token_rect


@dataclass(frozen=True)
class TokenizedImage:
    """Per-token flattened patch pixels for one image."""

    grid: TokenGrid
    tokens: np.ndarray  # (n_tokens, patch_size**2 * channels), float64
    image_id: str

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.grid.n_tokens:
            raise DimensionMismatchError(
                f"expected {self.grid.n_tokens} token vectors, got shape {self.tokens.shape}"
            )


@runtime_checkable
class Predictor(Protocol):
    """Behavioral contract for anything the discarding engine can probe.

    evaluate must be deterministic and safe for concurrent calls; it returns a
    probability vector over n_classes for the surviving token set.
    """

    model_id: str
    n_classes: int

    def evaluate(self, img: TokenizedImage, present: Iterable[int]) -> np.ndarray: ...


def tokenize(pixels: np.ndarray, grid: TokenGrid, image_id: str = "") -> TokenizedImage:
    """Cut an (H, W) or (H, W, C) float buffer into row-major patch tokens."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] != grid.image_height or arr.shape[1] != grid.image_width:
        raise DimensionMismatchError(
            f"buffer shape {np.asarray(pixels).shape} does not match "
            f"{grid.image_height}x{grid.image_width} grid"
        )
    p = grid.patch_size
    tokens = np.empty((grid.n_tokens, p * p * arr.shape[2]), dtype=np.float64)
    for k in range(grid.n_tokens):
        r = token_rect(grid, k)
        tokens[k] = arr[r.y_min : r.y_max, r.x_min : r.x_max, :].reshape(-1)
    return TokenizedImage(grid=grid, tokens=tokens, image_id=image_id)


def _canonical_present(grid: TokenGrid, present: Iterable[int]) -> tuple[int, ...]:
    idx = sorted(set(int(k) for k in present))
    if not idx:
        raise EmptyTokenSetError("present token set is empty")
    if idx[0] < 0 or idx[-1] >= grid.n_tokens:
        raise IndexOutOfRangeError(f"present indices outside [0, {grid.n_tokens})")
    return tuple(idx)


def predict(p: Predictor, img: TokenizedImage, present: Iterable[int]) -> np.ndarray:
    """Evaluate a predictor on the surviving token set, validating inputs."""
    idx = _canonical_present(img.grid, present)
    return p.evaluate(img, idx)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


@dataclass(frozen=True)
class MiniVitConfig:
    """Desk-scale transformer configuration (defaults: 4x4 grid of 8px patches)."""

    grid: TokenGrid = field(default_factory=lambda: build_grid(32, 32, 8))
    channels: int = 1
    embed_dim: int = 32
    n_heads: int = 4
    n_layers: int = 2
    mlp_dim: int = 64
    n_classes: int = 10
    use_positions: bool = True

    def validate(self) -> None:
        if self.embed_dim <= 0 or self.n_heads <= 0 or self.n_layers <= 0:
            raise InvalidConfigError("embed_dim, n_heads and n_layers must be positive")
        if self.embed_dim % self.n_heads:
            raise InvalidConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.n_classes < 2 or self.mlp_dim <= 0 or self.channels <= 0:
            raise InvalidConfigError("n_classes must be >= 2, mlp_dim and channels positive")

    @property
    def patch_dim(self) -> int:
        return self.grid.patch_size**2 * self.channels


class MiniViT:
    """Deterministic pre-LN vision transformer with a classification token.

    Weights are drawn once from a seeded generator (uniform [-0.05, 0.05],
    biases zero); the forward pass is a pure float64 function of (weights,
    present token set), so repeated evaluation is bitwise-stable.
    """

    def __init__(self, seed: int, config: MiniVitConfig | None = None):
        cfg = config or MiniVitConfig()
        cfg.validate()
        self.config = cfg
        self.model_id = f"mini-vit-s{seed}"
        self.n_classes = cfg.n_classes
        rng = np.random.default_rng(seed)

        def u(*shape: int) -> np.ndarray:
            return rng.uniform(-0.05, 0.05, size=shape)

        d = cfg.embed_dim
        self.w_embed = u(cfg.patch_dim, d)
        self.cls_token = u(d)
        self.pos = u(cfg.grid.n_tokens + 1, d)  # slot 0 belongs to the CLS token
        self.layers = []
        for _ in range(cfg.n_layers):
            self.layers.append(
                {
                    "ln1_g": np.ones(d),
                    "ln1_b": np.zeros(d),
                    "wq": u(d, d),
                    "wk": u(d, d),
                    "wv": u(d, d),
                    "wo": u(d, d),
                    "ln2_g": np.ones(d),
                    "ln2_b": np.zeros(d),
                    "w1": u(d, cfg.mlp_dim),
                    "w2": u(cfg.mlp_dim, d),
                }
            )
        self.ln_f_g = np.ones(d)
        self.ln_f_b = np.zeros(d)
        self.w_head = u(d, cfg.n_classes)

    def _attention(self, h: np.ndarray, layer: dict) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        n, d = h.shape
        hd = d // cfg.n_heads
        q = h @ layer["wq"]
        k = h @ layer["wk"]
        v = h @ layer["wv"]
        # (heads, seq, head_dim)
        q = q.reshape(n, cfg.n_heads, hd).transpose(1, 0, 2)
        k = k.reshape(n, cfg.n_heads, hd).transpose(1, 0, 2)
        v = v.reshape(n, cfg.n_heads, hd).transpose(1, 0, 2)
        att = _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(hd))
        out = (att @ v).transpose(1, 0, 2).reshape(n, d)
        return out @ layer["wo"], att

    def _forward(self, img: TokenizedImage, present: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        if img.grid != cfg.grid:
            raise DimensionMismatchError("image grid does not match model grid")
        if img.tokens.shape[1] != cfg.patch_dim:
            raise DimensionMismatchError(
                f"token feature length {img.tokens.shape[1]} != patch_dim {cfg.patch_dim}"
            )
        emb = img.tokens[list(present)] @ self.w_embed
        if cfg.use_positions:
            emb = emb + self.pos[[k + 1 for k in present]]
            seq = np.vstack([self.cls_token + self.pos[0], emb])
        else:
            seq = np.vstack([self.cls_token, emb])
        last_att = None
        for layer in self.layers:
            att_out, att = self._attention(_layer_norm(seq, layer["ln1_g"], layer["ln1_b"]), layer)
            seq = seq + att_out
            h = _layer_norm(seq, layer["ln2_g"], layer["ln2_b"])
            seq = seq + _gelu(h @ layer["w1"]) @ layer["w2"]
            last_att = att
        cls = _layer_norm(seq[0], self.ln_f_g, self.ln_f_b)
        probs = _softmax(cls @ self.w_head)
        return probs, last_att

    def evaluate(self, img: TokenizedImage, present: Iterable[int]) -> np.ndarray:
        idx = _canonical_present(img.grid, present)
        probs, _ = self._forward(img, idx)
        return probs


def mini_vit_new(seed: int, config: MiniVitConfig | None = None) -> MiniViT:
    """Construct a seeded MiniViT; identical seeds yield identical weights."""
    return MiniViT(seed, config)


@dataclass(frozen=True)
class AttentionMap:
    """Final-layer CLS attention over image tokens, averaged over heads."""

    weights: tuple[float, ...]
    grid: TokenGrid

    def renormalized(self) -> tuple[float, ...]:
        total = math.fsum(self.weights)
        if total <= 0.0:
            return self.weights
        return tuple(w / total for w in self.weights)


def attention_map(p: MiniViT, img: TokenizedImage) -> AttentionMap:
    """CLS-row attention of the final layer with the full token set present."""
    full = tuple(range(img.grid.n_tokens))
    _, att = p._forward(img, full)
    # att: (heads, seq, seq); row 0 is the CLS query, column 0 its self-weight.
    cls_row = att[:, 0, 1:].mean(axis=0)
    return AttentionMap(weights=tuple(float(w) for w in cls_row), grid=img.grid)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class PlantedPredictor:
    """Two-class analytic predictor, flat in every non-signal token.

    Class-1 confidence is sigmoid(weight * v) where v is the mean pixel value
    over the present signal tokens (0 when none survive). Discarding a
    non-signal token changes nothing, exactly; discarding signal tokens moves
    the confidence by a closed-form amount.
    """

    def __init__(self, signal_tokens: Iterable[int], weight: float, model_id: str = "planted"):
        self.signal_tokens = frozenset(int(k) for k in signal_tokens)
        if not self.signal_tokens:
            raise InvalidConfigError("signal_tokens must be non-empty")
        if weight <= 0:
            raise InvalidConfigError("weight must be positive")
        self.weight = float(weight)
        self.model_id = model_id
        self.n_classes = 2

    def signal_activation(self, img: TokenizedImage, present: Iterable[int]) -> float:
        alive = sorted(self.signal_tokens & set(present))
        if not alive:
            return 0.0
        return float(np.mean(img.tokens[alive]))

    def evaluate(self, img: TokenizedImage, present: Iterable[int]) -> np.ndarray:
        idx = _canonical_present(img.grid, present)
        p1 = _sigmoid(self.weight * self.signal_activation(img, idx))
        return np.array([1.0 - p1, p1], dtype=np.float64)


def planted_predictor(signal_tokens: Iterable[int], weight: float = 4.0) -> PlantedPredictor:
    return PlantedPredictor(signal_tokens, weight)
