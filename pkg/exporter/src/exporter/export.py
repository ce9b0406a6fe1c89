"""One-token-out influence, CLS attention, and pooled saliency for real ViTs.

The heavy lifting (TSI math, joins, aggregation) lives in the analysis
toolkit; this package only runs models and emits score records in the shared
JSONL schema. Token discarding is true sequence shortening: the class token
and every surviving patch token keep their positional embeddings, and the
discarded row is simply absent from the encoder input.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, IO, Iterable, Sequence

import torch
from PIL import Image
from torchvision.models.vision_transformer import VisionTransformer

from . import __version__

KINDS = ("influence", "attention", "saliency")

# ImageNet channel statistics, applied to every model's input
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters plus checkpoint policy for one model name."""

    name: str
    image_size: int
    patch_size: int
    num_layers: int
    num_heads: int
    hidden_dim: int
    mlp_dim: int
    num_classes: int
    needs_checkpoint: bool

    @property
    def n_tokens(self) -> int:
        side = self.image_size // self.patch_size
        return side * side


def _vit_b(name: str) -> ModelSpec:
    return ModelSpec(name=name, image_size=224, patch_size=16, num_layers=12,
                     num_heads=12, hidden_dim=768, mlp_dim=3072, num_classes=1000,
                     needs_checkpoint=True)


# supervised / dino / mae share the ViT-B/16 layout and differ only in weights;
# tiny-random is a seeded desk-scale stand-in that needs no checkpoint.
MODEL_SPECS = {
    "supervised": _vit_b("supervised"),
    "dino": _vit_b("dino"),
    "mae": _vit_b("mae"),
    "tiny-random": ModelSpec(name="tiny-random", image_size=64, patch_size=16,
                             num_layers=2, num_heads=2, hidden_dim=32, mlp_dim=64,
                             num_classes=10, needs_checkpoint=False),
}


@dataclass(frozen=True)
class ExportJob:
    """One model, one image list, one output stream."""

    model: str
    images: tuple[tuple[str, str], ...]  # (path, label) pairs
    out: str
    checkpoint: str | None = None
    device: str = "cpu"
    batch_size: int = 16
    seed: int = 0
    resume: bool = False

    def __post_init__(self) -> None:
        if self.model not in MODEL_SPECS:
            raise ValueError(f"unknown model {self.model!r}, know {sorted(MODEL_SPECS)}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        spec = MODEL_SPECS[self.model]
        if spec.needs_checkpoint and not self.checkpoint:
            raise ValueError(f"model {self.model!r} requires --checkpoint")

    @property
    def spec(self) -> ModelSpec:
        return MODEL_SPECS[self.model]


def read_image_list(path: str) -> tuple[tuple[str, str], ...]:
    """Plain text: one `<image-path> <label>` pair per line, # comments allowed."""
    pairs = []
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.rsplit(None, 1)
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected '<path> <label>'")
            img_path = parts[0]
            if not os.path.isabs(img_path):
                img_path = str(base / img_path)
            pairs.append((img_path, parts[1]))
    return tuple(pairs)


def build_model(job: ExportJob) -> VisionTransformer:
    spec = job.spec
    torch.manual_seed(job.seed)
    model = VisionTransformer(
        image_size=spec.image_size, patch_size=spec.patch_size,
        num_layers=spec.num_layers, num_heads=spec.num_heads,
        hidden_dim=spec.hidden_dim, mlp_dim=spec.mlp_dim,
        num_classes=spec.num_classes,
    )
    if job.checkpoint:
        state = torch.load(job.checkpoint, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "model" in state:
            state = state["model"]
        model.load_state_dict(state)
    model.eval()
    return model.to(job.device)


def load_pixels(path: str, spec: ModelSpec, device: str) -> torch.Tensor:
    """Decoded, resized, normalized (1, 3, H, W) float tensor."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((spec.image_size, spec.image_size))
    data = torch.frombuffer(bytearray(rgb.tobytes()), dtype=torch.uint8)
    x = data.reshape(spec.image_size, spec.image_size, 3).permute(2, 0, 1)
    x = x.to(torch.float32) / 255.0
    mean = torch.tensor(NORM_MEAN).view(3, 1, 1)
    std = torch.tensor(NORM_STD).view(3, 1, 1)
    return ((x - mean) / std).unsqueeze(0).to(device)


def embedded_sequence(model: VisionTransformer, pixels: torch.Tensor) -> torch.Tensor:
    """Class token + patch tokens with positional embeddings already added."""
    tokens = model._process_input(pixels)
    cls = model.class_token.expand(pixels.shape[0], -1, -1)
    return torch.cat([cls, tokens], dim=1) + model.encoder.pos_embedding


def run_encoder(model: VisionTransformer, seq: torch.Tensor) -> torch.Tensor:
    """Class-position probabilities for a batch of (possibly shortened) sequences."""
    out = model.encoder.ln(model.encoder.layers(model.encoder.dropout(seq)))
    return torch.softmax(model.heads(out[:, 0]), dim=-1)


@torch.inference_mode()
def influence_scores(
    model: VisionTransformer, pixels: torch.Tensor, batch_size: int
) -> tuple[int, float, list[float]]:
    """(target_class, base_confidence, per-token |confidence delta|)."""
    seq = embedded_sequence(model, pixels)
    n_tokens = seq.shape[1] - 1
    base_probs = run_encoder(model, seq)[0]
    target = int(base_probs.argmax())
    base = float(base_probs[target])
    scores: list[float] = []
    for start in range(0, n_tokens, batch_size):
        chunk = range(start, min(start + batch_size, n_tokens))
        variants = torch.stack([
            torch.cat([seq[0, : k + 1], seq[0, k + 2 :]]) for k in chunk
        ])
        probs = run_encoder(model, variants)[:, target]
        scores.extend(abs(base - float(p)) for p in probs)
    return target, base, scores


@torch.inference_mode()
def attention_weights(
    model: VisionTransformer, pixels: torch.Tensor
) -> tuple[int, float, list[float]]:
    """Head-averaged final-layer CLS attention, renormalized over image tokens."""
    seq = embedded_sequence(model, pixels)
    probs = run_encoder(model, seq)[0]
    target = int(probs.argmax())
    blocks = list(model.encoder.layers)
    for block in blocks[:-1]:
        seq = block(seq)
    last = blocks[-1]
    normed = last.ln_1(seq)
    _, att = last.self_attention(
        normed, normed, normed, need_weights=True, average_attn_weights=True
    )
    cls_row = att[0, 0, 1:]
    weights = cls_row / cls_row.sum()
    return target, float(probs[target]), [float(w) for w in weights]


def pool_to_tokens(pixel_map: torch.Tensor, patch_size: int) -> list[float]:
    """Mean absolute pixel value over each patch rect, row-major."""
    height, width = pixel_map.shape
    pooled = (
        pixel_map.abs()
        .reshape(height // patch_size, patch_size, width // patch_size, patch_size)
        .mean(dim=(1, 3))
    )
    return [float(v) for v in pooled.reshape(-1)]


def _input_grad_map(model: VisionTransformer, pixels: torch.Tensor) -> tuple[int, float, torch.Tensor]:
    x = pixels.clone().requires_grad_(True)
    logits = model(x)
    probs = torch.softmax(logits, dim=-1)[0].detach()
    target = int(probs.argmax())
    logits[0, target].backward()
    return target, float(probs[target]), x.grad[0].abs().mean(dim=0)


SALIENCY_METHODS: dict[str, Callable[[VisionTransformer, torch.Tensor], tuple[int, float, torch.Tensor]]] = {
    "input-grad": _input_grad_map,
}


def saliency_tokens(
    model: VisionTransformer, pixels: torch.Tensor, patch_size: int, method: str
) -> tuple[int, float, list[float]]:
    if method not in SALIENCY_METHODS:
        raise ValueError(f"unknown saliency method {method!r}, know {sorted(SALIENCY_METHODS)}")
    target, base, pixel_map = SALIENCY_METHODS[method](model, pixels)
    return target, base, pool_to_tokens(pixel_map, patch_size)


def validate_record(obj: dict) -> None:
    """Zero-tolerance mirror of the consumer's score-record schema."""
    required = {
        "image_id": str, "model_id": str, "kind": str, "target_class": int,
        "base_confidence": float, "grid": dict, "scores": list,
    }
    if set(obj) != set(required):
        raise ValueError(f"record keys {sorted(obj)} != {sorted(required)}")
    for key, typ in required.items():
        if not isinstance(obj[key], typ) or isinstance(obj[key], bool):
            raise ValueError(f"record field {key!r} has wrong type")
    if obj["kind"] not in KINDS:
        raise ValueError(f"unknown kind {obj['kind']!r}")
    grid = obj["grid"]
    if set(grid) != {"w", "h", "patch"} or any(
        not isinstance(grid[k], int) or grid[k] <= 0 for k in ("w", "h", "patch")
    ):
        raise ValueError(f"bad grid {grid!r}")
    if grid["w"] % grid["patch"] or grid["h"] % grid["patch"]:
        raise ValueError("patch size does not tile the grid")
    n_tokens = (grid["w"] // grid["patch"]) * (grid["h"] // grid["patch"])
    if len(obj["scores"]) != n_tokens:
        raise ValueError(f"expected {n_tokens} scores, got {len(obj['scores'])}")
    if not 0.0 <= obj["base_confidence"] <= 1.0:
        raise ValueError("base_confidence outside [0, 1]")
    for z in obj["scores"]:
        if not isinstance(z, float) or z < 0.0:
            raise ValueError("scores must be nonnegative floats")
        if obj["kind"] == "influence" and z > 1.0:
            raise ValueError("influence scores cannot exceed 1")


def _resume_path(out: str) -> str:
    return out + ".resume"


def _completed_ids(job: ExportJob) -> set[str]:
    if not job.resume or not os.path.exists(_resume_path(job.out)):
        return set()
    with open(_resume_path(job.out), "r", encoding="utf-8") as fh:
        return {line.strip() for line in fh if line.strip()}


def _job_meta(job: ExportJob, kind: str, method: str | None) -> dict:
    meta = {
        "tool": "tsi-exporter",
        "version": __version__,
        "kind": kind,
        "model": job.model,
        "checkpoint": job.checkpoint,
        "device": job.device,
        "batch_size": job.batch_size,
        "seed": job.seed,
        "images": len(job.images),
    }
    if method is not None:
        meta["method"] = method
    return meta


def _run_job(
    job: ExportJob,
    kind: str,
    per_image: Callable[[VisionTransformer, torch.Tensor], tuple[int, float, list[float]]],
    method: str | None = None,
) -> int:
    """Shared export loop: build, iterate, validate, write, log for resume."""
    spec = job.spec
    model = build_model(job)
    done = _completed_ids(job)
    mode = "a" if done else "w"
    written = 0
    with open(job.out, mode, encoding="utf-8") as out_fh, \
            open(_resume_path(job.out), mode, encoding="utf-8") as log_fh:
        if mode == "w":
            out_fh.write(json.dumps({"_meta": _job_meta(job, kind, method)}) + "\n")
        for path, _label in job.images:
            image_id = Path(path).stem
            if image_id in done:
                continue
            pixels = load_pixels(path, spec, job.device)
            target, base, scores = per_image(model, pixels)
            record = {
                "image_id": image_id,
                "model_id": job.model,
                "kind": kind,
                "target_class": target,
                "base_confidence": base,
                "grid": {"w": spec.image_size, "h": spec.image_size,
                         "patch": spec.patch_size},
                "scores": scores,
            }
            validate_record(record)
            out_fh.write(json.dumps(record) + "\n")
            out_fh.flush()
            log_fh.write(image_id + "\n")
            log_fh.flush()
            written += 1
    return written


def export_influence(job: ExportJob) -> int:
    """One influence record per image; returns the number written."""
    return _run_job(
        job, "influence",
        lambda model, px: influence_scores(model, px, job.batch_size),
    )


def export_attention(job: ExportJob) -> int:
    return _run_job(job, "attention", attention_weights)


def export_saliency(job: ExportJob, method: str = "input-grad") -> int:
    return _run_job(
        job, "saliency",
        lambda model, px: saliency_tokens(model, px, job.spec.patch_size, method),
        method=method,
    )
