"""Image cross-attention with attention-derived object masks.

This is the trainable plug-in around the frozen backbone. At each enabled
decoder block the frozen text attention runs twice, once on the denoising
stream and once on the captured reference tokens. The reference-stream
attention column of the learnable token is Otsu-binarized into a patch
mask, which then gates the reference keys of the image cross-attention.
The same reference-stream map also feeds the column regularizer that ties
the learnable token to the end-of-text token.

Masks are computed per block at that block's native resolution, from the
head-averaged column, and the degenerate (no separation) case falls back
to an all-ones mask so the attention signal is never annihilated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as N

__all__ = [
    "OtsuResult",
    "AttentionRecord",
    "PatchMask",
    "ImageAttentionBlock",
    "ReferenceConditions",
    "VicoBlockRecord",
    "otsu_threshold",
    "object_mask",
    "object_masks_per_sample",
    "masked_attention_core",
    "masked_image_attention",
    "vico_block_forward",
    "attention_regularizer",
    "concat_references",
]


# ---------------------------------------------------------------------------
# Otsu binarization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OtsuResult:
    threshold: float
    degenerate: bool

    def __float__(self) -> float:
        return self.threshold


def otsu_threshold(values, bins: int = 256) -> OtsuResult:
    """Histogram threshold maximizing inter-class variance w0*w1*(mu0-mu1)^2.

    Candidate thresholds are the interior bin boundaries; ties resolve to
    the lowest qualifying boundary. Constant input has no separation and
    comes back flagged degenerate with the constant itself as threshold.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("otsu_threshold: empty input")
    if not np.all(np.isfinite(v)):
        raise ValueError("otsu_threshold: non-finite input values")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi or bins < 2:
        return OtsuResult(lo, True)
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    hist = hist.astype(np.float64)
    total = hist.sum()
    levels = np.arange(bins, dtype=np.float64)
    w0 = np.cumsum(hist)
    m0 = np.cumsum(hist * levels)
    total_m = m0[-1]
    best_var, best_k = -1.0, None
    for k in range(1, bins):
        n0 = w0[k - 1]
        n1 = total - n0
        if n0 == 0.0 or n1 == 0.0:
            continue
        mu0 = m0[k - 1] / n0
        mu1 = (total_m - m0[k - 1]) / n1
        var = (n0 / total) * (n1 / total) * (mu0 - mu1) ** 2
        if var > best_var:
            best_var, best_k = var, k
    if best_k is None:
        return OtsuResult(lo, True)
    return OtsuResult(float(edges[best_k]), False)


# ---------------------------------------------------------------------------
# Records and masks
# ---------------------------------------------------------------------------


@dataclass
class AttentionRecord:
    """Post-softmax attention map of one block, kept live for gradients."""

    block_index: int
    probs: N.Tensor  # [B, heads, D_p, D_t]
    stream: str  # "denoise" | "reference"
    hw: tuple = None

    def __post_init__(self):
        if self.stream not in ("denoise", "reference"):
            raise ValueError(f"unknown stream tag {self.stream!r}")


@dataclass
class PatchMask:
    """Binary mask over reference patches at one block resolution."""

    block_index: int
    values: np.ndarray  # uint8 in {0,1}, length D_p
    threshold: float
    degenerate: bool = False
    hw: tuple = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        if self.values.ndim != 1 or not np.isin(self.values, (0, 1)).all():
            raise ValueError("mask values must be a flat 0/1 vector")


def _column(record: AttentionRecord, index) -> np.ndarray:
    """Head-averaged learnable-token column, [B, D_p], detached."""
    probs = record.probs.data
    b = probs.shape[0]
    if np.isscalar(index) or np.asarray(index).ndim == 0:
        index = np.full(b, int(index), dtype=np.int64)
    idx = np.asarray(index, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= probs.shape[-1]):
        raise ValueError(f"token index out of range for {probs.shape[-1]} columns")
    cols = np.take_along_axis(probs, idx[:, None, None, None], axis=-1)[..., 0]
    return cols.mean(axis=1)


def _binarize(col: np.ndarray, block_index: int, hw, bins: int) -> PatchMask:
    res = otsu_threshold(col, bins=bins)
    if res.degenerate:
        return PatchMask(block_index, np.ones(col.shape[0], dtype=np.uint8), res.threshold, True, hw)
    return PatchMask(block_index, (col > res.threshold).astype(np.uint8), res.threshold, False, hw)


def object_mask(record: AttentionRecord, s_star_index, bins: int = 256) -> PatchMask:
    """Mask from the batch- and head-averaged column (shared-reference form)."""
    col = _column(record, s_star_index).mean(axis=0)
    return _binarize(col, record.block_index, record.hw, bins)


def object_masks_per_sample(record: AttentionRecord, s_star_index, segments=None, bins: int = 256) -> list:
    """One head-averaged mask per batch row, Otsu'd per reference segment.

    ``segments`` gives the per-reference token counts when the record spans
    several concatenated references; each segment is thresholded on its own.
    """
    cols = _column(record, s_star_index)
    masks = []
    for b in range(cols.shape[0]):
        col = cols[b]
        if segments is None or len(segments) <= 1:
            masks.append(_binarize(col, record.block_index, record.hw, bins))
        else:
            parts, taus, degen, start = [], [], [], 0
            for count in segments:
                piece = _binarize(col[start : start + count], record.block_index, record.hw, bins)
                parts.append(piece.values)
                taus.append(piece.threshold)
                degen.append(piece.degenerate)
                start += count
            masks.append(
                PatchMask(record.block_index, np.concatenate(parts), float(taus[0]), all(degen), record.hw)
            )
    return masks


# ---------------------------------------------------------------------------
# Image cross-attention (the trainable psi blocks)
# ---------------------------------------------------------------------------


def masked_attention_core(q: N.Tensor, k: N.Tensor, v: N.Tensor, mask, scale: float) -> tuple:
    """softmax(QK^T*scale) with the reference mask applied row-wise.

    ``mask`` is a constant 0/1 array of shape [D_kv] or [B, D_kv] (or None);
    it multiplies the post-softmax rows with no renormalization. Returns
    (attended values, pre-mask probabilities).
    """
    logits = N.mul(N.matmul(q, N.transpose(k, (0, 1, 3, 2))), scale)
    probs = N.softmax_last(logits)
    used = probs
    if mask is not None:
        m = np.asarray(mask)
        if m.ndim == 1:
            gate = m.astype(probs.dtype)
        elif m.ndim == 2:
            gate = np.broadcast_to(m[:, None, None, :].astype(probs.dtype), probs.shape)
        else:
            raise N.ShapeError(f"mask must be 1-D or [B, D_kv], got shape {m.shape}")
        if gate.shape[-1] != probs.shape[-1]:
            raise N.ShapeError(
                f"mask length {gate.shape[-1]} does not match {probs.shape[-1]} reference tokens"
            )
        used = N.mul(probs, N.const(gate))
    return N.matmul(used, v), probs


class ImageAttentionBlock:
    """Trainable cross-attention block over reference tokens.

    Mirrors the frozen text cross-attention block, except the key/value
    projections read reference tokens of the block's own width. The output
    projection and the second feed-forward matrix start at zero so a fresh
    block is an exact no-op on the residual stream.
    """

    def __init__(self, rng, d_model: int, d_kv: int, heads: int):
        self.d_model = d_model
        self.d_kv = d_kv
        self.heads = heads
        dt = N.get_default_dtype()

        def init(shape):
            std = 1.0 / np.sqrt(shape[0])
            return N.Tensor((rng.standard_normal(shape) * std).astype(dt), requires_grad=True)

        self.p = {
            "ln1_g": N.ones((d_model,), requires_grad=True), "ln1_b": N.zeros((d_model,), requires_grad=True),
            "wq": init((d_model, d_model)),
            "wk": init((d_kv, d_model)),
            "wv": init((d_kv, d_model)),
            "wo": N.zeros((d_model, d_model), requires_grad=True), "bo": N.zeros((d_model,), requires_grad=True),
            "ln2_g": N.ones((d_model,), requires_grad=True), "ln2_b": N.zeros((d_model,), requires_grad=True),
            "w1": init((d_model, 2 * d_model)), "b1": N.zeros((2 * d_model,), requires_grad=True),
            "w2": N.zeros((2 * d_model, d_model), requires_grad=True), "b2": N.zeros((d_model,), requires_grad=True),
        }

    def forward(self, q_tokens: N.Tensor, kv_tokens: N.Tensor, mask=None) -> tuple:
        """Returns (output tokens, pre-mask attention probs [B,h,D_p,D_kv])."""
        p = self.p
        b, n, d = q_tokens.shape
        h = N.layer_norm(q_tokens, p["ln1_g"], p["ln1_b"])
        q = _split_heads(N.matmul(h, p["wq"]), self.heads)
        k = _split_heads(N.matmul(kv_tokens, p["wk"]), self.heads)
        v = _split_heads(N.matmul(kv_tokens, p["wv"]), self.heads)
        scale = 1.0 / np.sqrt(d // self.heads)
        att, probs = masked_attention_core(q, k, v, mask, scale)
        att = N.reshape(N.transpose(att, (0, 2, 1, 3)), (b, n, d))
        x = N.add(q_tokens, N.add(N.matmul(att, p["wo"]), p["bo"]))
        h2 = N.layer_norm(x, p["ln2_g"], p["ln2_b"])
        ff = N.add(N.matmul(N.silu(N.add(N.matmul(h2, p["w1"]), p["b1"])), p["w2"]), p["b2"])
        return N.add(x, ff), probs

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": v for k, v in self.p.items()}


def _split_heads(x: N.Tensor, heads: int) -> N.Tensor:
    b, t, d = x.shape
    return N.transpose(N.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def masked_image_attention(q_tokens: N.Tensor, kv_tokens: N.Tensor, block: ImageAttentionBlock, mask) -> N.Tensor:
    if mask is not None:
        m = np.asarray(mask)
        if m.shape[-1] != kv_tokens.shape[1]:
            raise N.ShapeError(
                f"mask length {m.shape[-1]} does not match {kv_tokens.shape[1]} reference tokens"
            )
    out, _ = block.forward(q_tokens, kv_tokens, mask)
    return out


# ---------------------------------------------------------------------------
# Reference-condition plumbing and the per-block wiring
# ---------------------------------------------------------------------------


@dataclass
class ReferenceConditions:
    """Per-block visual-condition tokens, possibly from several references."""

    blocks: dict  # block index -> token Tensor [B, D_p_total, d]
    counts: dict  # block index -> per-reference token counts
    hw: dict  # block index -> (h, w) of one reference grid


def concat_references(condition_sets: list) -> ReferenceConditions:
    """Merge per-reference capture lists into concatenated key/value tokens."""
    if not condition_sets:
        raise ValueError("concat_references: need at least one reference")
    first = condition_sets[0]
    blocks, counts, hw = {}, {}, {}
    for features in condition_sets:
        if [f.block_index for f in features] != [f.block_index for f in first]:
            raise ValueError("concat_references: reference captures have mismatched block structure")
    for bi, feat in enumerate(first):
        idx = feat.block_index
        parts = [cs[bi].tokens for cs in condition_sets]
        for cs in condition_sets:
            if cs[bi].tokens.shape != feat.tokens.shape:
                raise ValueError("concat_references: token shapes differ across references")
        blocks[idx] = parts[0] if len(parts) == 1 else N.concat(parts, axis=1)
        counts[idx] = [p.shape[1] for p in parts]
        hw[idx] = feat.hw
    return ReferenceConditions(blocks, counts, hw)


@dataclass
class VicoBlockRecord:
    """Everything one visually conditioned block produced."""

    denoise: AttentionRecord
    reference: AttentionRecord
    masks: list  # one PatchMask per batch row
    image_probs: N.Tensor


def vico_block_forward(
    text_attention,
    psi_block: ImageAttentionBlock,
    n_tokens: N.Tensor,
    c_T: N.Tensor,
    cond_tokens: N.Tensor,
    counts,
    key_mask,
    s_star_index,
    *,
    block_index: int,
    hw=None,
    mask_override=None,
) -> tuple:
    """One attention block with the visual condition spliced in.

    Runs the frozen text attention on both streams, derives the object mask
    from the reference-stream map, and feeds the image cross-attention.
    ``mask_override`` replaces the derived mask (used by ablation flags).
    """
    if psi_block.d_kv != cond_tokens.shape[-1]:
        raise N.ShapeError(
            f"block {block_index}: psi expects kv width {psi_block.d_kv}, "
            f"got reference tokens of width {cond_tokens.shape[-1]}"
        )
    h_hat, probs_d = text_attention(n_tokens, c_T, key_mask)
    c_hat, probs_r = text_attention(cond_tokens, c_T, key_mask)
    rec_d = AttentionRecord(block_index, probs_d, "denoise", hw)
    rec_r = AttentionRecord(block_index, probs_r, "reference", hw)
    masks = object_masks_per_sample(rec_r, s_star_index, segments=counts)
    if mask_override is not None:
        gate = np.asarray(mask_override)
    else:
        gate = np.stack([m.values for m in masks])
    out, img_probs = psi_block.forward(h_hat, c_hat, gate)
    return out, VicoBlockRecord(rec_d, rec_r, masks, img_probs)


# ---------------------------------------------------------------------------
# Column regularizer
# ---------------------------------------------------------------------------


def attention_regularizer(record: AttentionRecord, i, j) -> N.Tensor:
    """Squared distance between the max-normalized columns of tokens i and j,
    averaged over batch rows and heads."""
    probs = record.probs
    b, heads, dp, dt = probs.shape
    i_arr = np.full(b, i, dtype=np.int64) if np.isscalar(i) else np.asarray(i, dtype=np.int64)
    j_arr = np.full(b, j, dtype=np.int64) if np.isscalar(j) else np.asarray(j, dtype=np.int64)
    if np.any(i_arr == j_arr):
        raise ValueError("regularizer needs distinct token indices")
    col_i = N.select_last_per_row(probs, i_arr)  # [B, heads, D_p]
    col_j = N.select_last_per_row(probs, j_arr)
    ni = N.div(col_i, N.expand(N.max_last(col_i), col_i.shape))
    nj = N.div(col_j, N.expand(N.max_last(col_j), col_j.shape))
    diff = N.sub(ni, nj)
    return N.mean_(N.sum_(N.mul(diff, diff), axis=-1))
