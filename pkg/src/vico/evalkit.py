"""Similarity metrics with pluggable embedders, plus mask diagnostics.

The default embedders are deliberately modest stand-ins: a seeded frozen
random convolutional stack for images and the frozen text encoder's
end-of-text row for prompts. They give the metric *mechanics* a stable,
deterministic footing; plugging in stronger external embedders is just a
matter of satisfying the two-method protocol.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .image_attention import PatchMask
from .text import TextEncoderState, tokenize_plain

__all__ = [
    "Embedder",
    "RandomConvImageEmbedder",
    "TextEncoderTextEmbedder",
    "MetricReport",
    "cosine_sim",
    "image_similarity",
    "text_similarity",
    "mask_iou",
    "strip_placeholder",
]


@runtime_checkable
class Embedder(Protocol):
    name: str


class RandomConvImageEmbedder:
    """Frozen random conv features -> pooled vector. Same input, same vector."""

    def __init__(self, dim: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.name = f"random-conv-{dim}"
        self.dim = dim
        self.w1 = rng.standard_normal((16, 3, 3, 3)) / np.sqrt(27)
        self.w2 = rng.standard_normal((32, 16, 3, 3)) / np.sqrt(144)
        self.proj = rng.standard_normal((32, dim)) / np.sqrt(32)

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        x = img.astype(np.float64).transpose(2, 0, 1)[None] / 127.5 - 1.0
        x = np.maximum(_conv(x, self.w1), 0.0)
        x = x[:, :, ::2, ::2]
        x = np.maximum(_conv(x, self.w2), 0.0)
        pooled = x.mean(axis=(0, 2, 3))
        return pooled @ self.proj


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("bchwkl,ockl->bohw", win, w, optimize=True)


def strip_placeholder(prompt: str) -> str:
    """Drop the "{}" slot word from a prompt, e.g. "a photo of a {}" ->
    "a photo of a"."""
    words = [w for w in prompt.split() if w != "{}"]
    if len(words) == len(prompt.split()):
        raise ValueError(f"prompt {prompt!r} has no placeholder to omit")
    return " ".join(words)


class TextEncoderTextEmbedder:
    """Frozen text encoder's end-of-text row as the prompt vector."""

    def __init__(self, state: TextEncoderState):
        self.name = "text-encoder-eot"
        self.state = state
        self.dim = state.cfg.d_text

    def embed_text(self, prompt: str) -> np.ndarray:
        tokens = tokenize_plain(prompt, self.state.vocab, self.state.cfg.context_len)
        encoded = self.state.encode_plain_batch([tokens])
        return encoded[0, tokens.eot_index].astype(np.float64)


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.size == 0 or u.shape != v.shape:
        raise ValueError(f"cosine_sim needs equal nonzero-length vectors, got {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine_sim is undefined for zero-norm input")
    return float(np.dot(u, v) / (nu * nv))


def image_similarity(generated: list, real: list, embedder) -> float:
    """Mean pairwise cosine over every (generated, real) pair."""
    if not generated or not real:
        raise ValueError("image_similarity needs non-empty image sets")
    gen_vecs = [embedder.embed_image(g) for g in generated]
    real_vecs = [embedder.embed_image(r) for r in real]
    sims = [cosine_sim(g, r) for g in gen_vecs for r in real_vecs]
    return float(np.mean(sims))


def text_similarity(generated: list, prompt: str, image_embedder, text_embedder) -> float:
    """Mean cosine between image vectors and the placeholder-free prompt vector."""
    if not generated:
        raise ValueError("text_similarity needs at least one image")
    if image_embedder.dim != text_embedder.dim:
        raise ValueError(
            f"embedding dimensions differ: image {image_embedder.dim} vs text {text_embedder.dim}"
        )
    tvec = text_embedder.embed_text(strip_placeholder(prompt))
    sims = [cosine_sim(image_embedder.embed_image(g), tvec) for g in generated]
    return float(np.mean(sims))


def _majority_downsample(truth: np.ndarray, hw: tuple) -> np.ndarray:
    truth = np.asarray(truth, dtype=bool)
    th, tw = truth.shape
    h, w = hw
    if th % h or tw % w:
        raise ValueError(f"truth grid {truth.shape} is not an integer multiple of mask grid {hw}")
    fy, fx = th // h, tw // w
    blocks = truth.reshape(h, fy, w, fx).mean(axis=(1, 3))
    return blocks > 0.5  # strict majority; exact ties count as background


def mask_iou(predicted, truth: np.ndarray) -> float:
    """Intersection over union after majority-downsampling the truth grid.

    ``predicted`` is a PatchMask (with its grid shape) or a binary array.
    Both-empty masks count as a perfect match.
    """
    if isinstance(predicted, PatchMask):
        if predicted.hw is None:
            raise ValueError("PatchMask has no grid shape attached")
        pred = predicted.values.reshape(predicted.hw).astype(bool)
    else:
        pred = np.asarray(predicted).astype(bool)
    truth_small = _majority_downsample(truth, pred.shape) if np.asarray(truth).shape != pred.shape else np.asarray(truth, dtype=bool)
    inter = np.logical_and(pred, truth_small).sum()
    union = np.logical_or(pred, truth_small).sum()
    if union == 0:
        return 1.0
    return float(inter / union)


@dataclass
class MetricReport:
    image_similarity: float = None
    text_similarity: float = None
    mask_iou: float = None
    per_prompt: dict = field(default_factory=dict)
    sample_count: int = 0
    embedders: dict = field(default_factory=dict)

    def validate(self) -> None:
        for v in (self.image_similarity, self.text_similarity):
            if v is not None and not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                raise ValueError(f"similarity {v} outside [-1, 1]")
        if self.mask_iou is not None and not 0.0 <= self.mask_iou <= 1.0:
            raise ValueError(f"IoU {self.mask_iou} outside [0, 1]")

    def to_json(self) -> str:
        self.validate()
        return json.dumps(
            {
                "image_similarity": self.image_similarity,
                "text_similarity": self.text_similarity,
                "mask_iou": self.mask_iou,
                "per_prompt": self.per_prompt,
                "sample_count": self.sample_count,
                "embedders": self.embedders,
            },
            indent=2,
            sort_keys=True,
        )
