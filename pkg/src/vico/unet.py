"""Frozen mini U-Net denoiser with indexed text cross-attention blocks.

The layout is a reduced mirror of the usual latent-diffusion scheme: an
encoder with one attention block after every residual block, a middle
attention block, and a decoder where every residual block is followed by
attention. Attention blocks are numbered globally encoder -> middle ->
decoder; visual-condition wiring hooks into a configured subset of the
decoder indices.

Attention operates in token form [B, H*W, C], and each block is cross
attention against the text rows followed by a feed-forward sublayer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as N
from .image_attention import AttentionRecord, ReferenceConditions, VicoBlockRecord, vico_block_forward

__all__ = [
    "UNetConfig",
    "BlockFeatures",
    "TextCrossAttentionBlock",
    "MiniUNet",
    "attention_block_index",
    "timestep_embedding",
]


@dataclass
class UNetConfig:
    latent_shape: tuple = (3, 32, 32)
    base_channels: int = 32
    channel_mults: tuple = (1, 2)
    enc_res_blocks: tuple = (1, 2)
    dec_res_blocks: tuple = (2, 2)
    groups: int = 8
    heads: int = 4
    cond_dim: int = 32
    context_len: int = 16
    vico_block_indices: tuple = (4, 6)
    # A stride-2 stem runs the whole network on a half-resolution grid,
    # the same trick latent diffusion plays with its autoencoder.
    stem_stride: int = 2

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.enc_res_blocks = tuple(self.enc_res_blocks)
        self.dec_res_blocks = tuple(self.dec_res_blocks)
        self.vico_block_indices = tuple(self.vico_block_indices)
        if len(self.enc_res_blocks) != len(self.channel_mults) or len(self.dec_res_blocks) != len(self.channel_mults):
            raise ValueError("res-block tuples must have one entry per channel mult")
        bad = set(self.vico_block_indices) - set(self.attention_index_map["decoder"])
        if bad:
            raise ValueError(f"vico blocks {sorted(bad)} are not decoder attention indices")

    @property
    def time_dim(self) -> int:
        return self.base_channels * 2

    @property
    def attention_index_map(self) -> dict:
        n_enc = sum(self.enc_res_blocks)
        n_dec = sum(self.dec_res_blocks)
        return {
            "encoder": list(range(n_enc)),
            "middle": [n_enc],
            "decoder": list(range(n_enc + 1, n_enc + 1 + n_dec)),
        }

    @property
    def num_attention_blocks(self) -> int:
        return sum(self.enc_res_blocks) + 1 + sum(self.dec_res_blocks)


def attention_block_index(cfg: UNetConfig, section: str, position: int) -> int:
    """Global attention index for the position-th block of a section."""
    amap = cfg.attention_index_map
    if section not in amap:
        raise ValueError(f"unknown section {section!r}")
    indices = amap[section]
    if not 0 <= position < len(indices):
        raise ValueError(f"section {section!r} has {len(indices)} attention blocks, not index {position}")
    return indices[position]


@dataclass
class BlockFeatures:
    """Token-form output of one attention block from the reference pass."""

    block_index: int
    tokens: N.Tensor  # [B, D_p, d]
    hw: tuple


def timestep_embedding(t_ids, dim: int, dtype) -> np.ndarray:
    """Classic sinusoidal embedding of integer timesteps, shape [B, dim]."""
    t = np.asarray(t_ids, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def _normal(rng, shape, std) -> N.Tensor:
    return N.const((rng.standard_normal(shape) * std).astype(N.get_default_dtype()))


def _linear_init(rng, d_in, d_out):
    return _normal(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))


def _conv_init(rng, o, c, k):
    return _normal(rng, (o, c, k, k), 1.0 / np.sqrt(c * k * k))


def _to_tokens(x: N.Tensor) -> tuple:
    b, c, h, w = x.shape
    return N.transpose(N.reshape(x, (b, c, h * w)), (0, 2, 1)), (h, w)


def _to_spatial(tokens: N.Tensor, hw: tuple) -> N.Tensor:
    b, n, c = tokens.shape
    return N.reshape(N.transpose(tokens, (0, 2, 1)), (b, c) + hw)


class TextCrossAttentionBlock:
    """Cross attention of image tokens onto text rows, then feed-forward."""

    def __init__(self, rng, d_model: int, cond_dim: int, heads: int):
        self.d_model = d_model
        self.heads = heads
        self.p = {
            "ln1_g": N.ones((d_model,)), "ln1_b": N.zeros((d_model,)),
            "wq": _linear_init(rng, d_model, d_model),
            "wk": _linear_init(rng, cond_dim, d_model),
            "wv": _linear_init(rng, cond_dim, d_model),
            "wo": _linear_init(rng, d_model, d_model), "bo": N.zeros((d_model,)),
            "ln2_g": N.ones((d_model,)), "ln2_b": N.zeros((d_model,)),
            "w1": _linear_init(rng, d_model, 2 * d_model), "b1": N.zeros((2 * d_model,)),
            "w2": _linear_init(rng, 2 * d_model, d_model), "b2": N.zeros((d_model,)),
        }

    def forward(self, tokens: N.Tensor, c_T: N.Tensor, key_mask: np.ndarray) -> tuple:
        """Returns (output tokens, attention probabilities [B,h,N,D_t])."""
        p = self.p
        b, n, d = tokens.shape
        h = N.layer_norm(tokens, p["ln1_g"], p["ln1_b"])
        q = _split_heads(N.matmul(h, p["wq"]), self.heads)
        k = _split_heads(N.matmul(c_T, p["wk"]), self.heads)
        v = _split_heads(N.matmul(c_T, p["wv"]), self.heads)
        scale = 1.0 / np.sqrt(d // self.heads)
        logits = N.mul(N.matmul(q, N.transpose(k, (0, 1, 3, 2))), scale)
        if key_mask is not None:
            logits = N.add(logits, N.const(np.broadcast_to(key_mask, logits.shape)))
        probs = N.softmax_last(logits)
        att = N.reshape(N.transpose(N.matmul(probs, v), (0, 2, 1, 3)), (b, n, d))
        x = N.add(tokens, N.add(N.matmul(att, p["wo"]), p["bo"]))
        h2 = N.layer_norm(x, p["ln2_g"], p["ln2_b"])
        ff = N.add(N.matmul(N.silu(N.add(N.matmul(h2, p["w1"]), p["b1"])), p["w2"]), p["b2"])
        return N.add(x, ff), probs

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": v for k, v in self.p.items()}


def _split_heads(x: N.Tensor, heads: int) -> N.Tensor:
    b, t, d = x.shape
    return N.transpose(N.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


class ResBlock:
    def __init__(self, rng, in_ch: int, out_ch: int, time_dim: int, groups: int):
        self.in_ch, self.out_ch, self.groups = in_ch, out_ch, groups
        self.p = {
            "gn1_g": N.ones((in_ch,)), "gn1_b": N.zeros((in_ch,)),
            "conv1_w": _conv_init(rng, out_ch, in_ch, 3), "conv1_b": N.zeros((out_ch,)),
            "temb_w": _linear_init(rng, time_dim, out_ch), "temb_b": N.zeros((out_ch,)),
            "gn2_g": N.ones((out_ch,)), "gn2_b": N.zeros((out_ch,)),
            "conv2_w": _conv_init(rng, out_ch, out_ch, 3), "conv2_b": N.zeros((out_ch,)),
        }
        if in_ch != out_ch:
            self.p["skip_w"] = _conv_init(rng, out_ch, in_ch, 1)

    def forward(self, x: N.Tensor, temb: N.Tensor) -> N.Tensor:
        p = self.p
        h = N.conv2d(N.silu(N.group_norm(x, self.groups, p["gn1_g"], p["gn1_b"])), p["conv1_w"], p["conv1_b"], pad=1)
        h = N.add_spatial(h, N.add(N.matmul(N.silu(temb), p["temb_w"]), p["temb_b"]))
        h = N.conv2d(N.silu(N.group_norm(h, self.groups, p["gn2_g"], p["gn2_b"])), p["conv2_w"], p["conv2_b"], pad=1)
        skip = x if self.in_ch == self.out_ch else N.conv2d(x, p["skip_w"])
        return N.add(h, skip)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": v for k, v in self.p.items()}


class MiniUNet:
    """The frozen denoising backbone (theta)."""

    def __init__(self, cfg: UNetConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        base, mults = cfg.base_channels, cfg.channel_mults
        chans = [base * m for m in mults]
        td = cfg.time_dim

        self.time_w1 = _linear_init(rng, base, td)
        self.time_b1 = N.zeros((td,))
        self.time_w2 = _linear_init(rng, td, td)
        self.time_b2 = N.zeros((td,))

        if cfg.stem_stride == 2:
            self.conv_in_w = _conv_init(rng, chans[0], cfg.latent_shape[0], 2)
        elif cfg.stem_stride == 1:
            self.conv_in_w = _conv_init(rng, chans[0], cfg.latent_shape[0], 3)
        else:
            raise ValueError(f"stem_stride must be 1 or 2, got {cfg.stem_stride}")
        self.conv_in_b = N.zeros((chans[0],))

        def make_attn():
            return TextCrossAttentionBlock(rng, ch, cfg.cond_dim, cfg.heads)

        self.enc = []
        self.attn_channels = {}
        attn_idx = 0
        prev = chans[0]
        for li, ch in enumerate(chans):
            level = {"res": [], "attn": [], "down": None}
            for _ in range(cfg.enc_res_blocks[li]):
                level["res"].append(ResBlock(rng, prev, ch, td, cfg.groups))
                level["attn"].append(make_attn())
                self.attn_channels[attn_idx] = ch
                attn_idx += 1
                prev = ch
            if li != len(chans) - 1:
                # 2x2 stride-2 conv halves the grid with an exact extent.
                level["down"] = (_conv_init(rng, ch, ch, 2), N.zeros((ch,)))
            self.enc.append(level)

        ch = chans[-1]
        self.mid_res1 = ResBlock(rng, ch, ch, td, cfg.groups)
        self.mid_attn = make_attn()
        self.attn_channels[attn_idx] = ch
        attn_idx += 1
        self.mid_res2 = ResBlock(rng, ch, ch, td, cfg.groups)

        # Decoder levels run innermost (coarsest) first.
        self.dec = []
        skip_chans = self._encoder_skip_channels(chans)
        prev = chans[-1]
        for li in reversed(range(len(chans))):
            ch = chans[li]
            level = {"res": [], "attn": [], "up": None}
            for _ in range(cfg.dec_res_blocks[li]):
                skip_ch = skip_chans.pop()
                level["res"].append(ResBlock(rng, prev + skip_ch, ch, td, cfg.groups))
                level["attn"].append(make_attn())
                self.attn_channels[attn_idx] = ch
                attn_idx += 1
                prev = ch
            if li != 0:
                level["up"] = (_conv_init(rng, ch, ch, 3), N.zeros((ch,)))
            self.dec.append(level)

        self.out_gn_g = N.ones((chans[0],))
        self.out_gn_b = N.zeros((chans[0],))
        self.conv_out_w = _conv_init(rng, cfg.latent_shape[0], chans[0], 3)
        self.conv_out_b = N.zeros((cfg.latent_shape[0],))

    def _encoder_skip_channels(self, chans) -> list:
        skips = [chans[0]]  # conv_in
        for li, ch in enumerate(chans):
            skips.extend([ch] * self.cfg.enc_res_blocks[li])
        return skips

    # -- parameter access -------------------------------------------------
    def params(self) -> dict:
        out = {
            "unet.time_w1": self.time_w1, "unet.time_b1": self.time_b1,
            "unet.time_w2": self.time_w2, "unet.time_b2": self.time_b2,
            "unet.conv_in_w": self.conv_in_w, "unet.conv_in_b": self.conv_in_b,
            "unet.out_gn_g": self.out_gn_g, "unet.out_gn_b": self.out_gn_b,
            "unet.conv_out_w": self.conv_out_w, "unet.conv_out_b": self.conv_out_b,
        }
        for li, level in enumerate(self.enc):
            for ri, res in enumerate(level["res"]):
                out.update(res.params(f"unet.enc{li}.res{ri}"))
            for ai, attn in enumerate(level["attn"]):
                out.update(attn.params(f"unet.enc{li}.attn{ai}"))
            if level["down"] is not None:
                out[f"unet.enc{li}.down_w"], out[f"unet.enc{li}.down_b"] = level["down"]
        out.update(self.mid_res1.params("unet.mid.res1"))
        out.update(self.mid_attn.params("unet.mid.attn"))
        out.update(self.mid_res2.params("unet.mid.res2"))
        for li, level in enumerate(self.dec):
            for ri, res in enumerate(level["res"]):
                out.update(res.params(f"unet.dec{li}.res{ri}"))
            for ai, attn in enumerate(level["attn"]):
                out.update(attn.params(f"unet.dec{li}.attn{ai}"))
            if level["up"] is not None:
                out[f"unet.dec{li}.up_w"], out[f"unet.dec{li}.up_b"] = level["up"]
        return out

    # -- forward passes ------------------------------------------------------
    def forward(
        self,
        z: N.Tensor,
        t_ids,
        c_T: N.Tensor,
        key_mask: np.ndarray | None,
        *,
        psi: dict | None = None,
        ref: ReferenceConditions | None = None,
        s_star_idx=None,
        capture: list | None = None,
        records: dict | None = None,
        mask_override=None,
    ) -> N.Tensor:
        """Single configurable pass; see the wrappers below for the variants."""
        cfg = self.cfg
        sin = N.const(timestep_embedding(t_ids, cfg.base_channels, z.dtype))
        temb = N.add(N.matmul(N.silu(N.add(N.matmul(sin, self.time_w1), self.time_b1)), self.time_w2), self.time_b2)

        attn_state = {"idx": 0}

        def attn_site(h, block):
            idx = attn_state["idx"]
            attn_state["idx"] += 1
            tokens, hw = _to_tokens(h)
            if psi is not None and idx in psi:
                out_tokens, rec = vico_block_forward(
                    block.forward,
                    psi[idx],
                    tokens,
                    c_T,
                    ref.blocks[idx],
                    ref.counts[idx],
                    key_mask,
                    s_star_idx,
                    block_index=idx,
                    hw=hw,
                    mask_override=None if mask_override is None else mask_override.get(idx),
                )
                if records is not None:
                    records[idx] = rec
            else:
                out_tokens, probs = block.forward(tokens, c_T, key_mask)
                if records is not None:
                    records[idx] = AttentionRecord(idx, probs, "denoise", hw)
            if capture is not None:
                capture.append(BlockFeatures(idx, out_tokens, hw))
            return _to_spatial(out_tokens, hw)

        if cfg.stem_stride == 2:
            h = N.conv2d(z, self.conv_in_w, self.conv_in_b, stride=2)
        else:
            h = N.conv2d(z, self.conv_in_w, self.conv_in_b, pad=1)
        skips = [h]
        for level in self.enc:
            for res, attn in zip(level["res"], level["attn"]):
                h = attn_site(res.forward(h, temb), attn)
                skips.append(h)
            if level["down"] is not None:
                h = N.conv2d(h, level["down"][0], level["down"][1], stride=2)

        h = self.mid_res2.forward(attn_site(self.mid_res1.forward(h, temb), self.mid_attn), temb)

        for level in self.dec:
            for res, attn in zip(level["res"], level["attn"]):
                h = attn_site(res.forward(N.concat([h, skips.pop()], axis=1), temb), attn)
            if level["up"] is not None:
                h = N.conv2d(N.upsample_nearest2x(h), level["up"][0], level["up"][1], pad=1)

        if cfg.stem_stride == 2:
            h = N.upsample_nearest2x(h)
        h = N.silu(N.group_norm(h, cfg.groups, self.out_gn_g, self.out_gn_b))
        return N.conv2d(h, self.conv_out_w, self.conv_out_b, pad=1)

    def forward_denoise(self, z_t: N.Tensor, t_ids, c_T: N.Tensor, key_mask=None) -> tuple:
        """Vanilla pass; returns (eps_hat, per-block denoise-stream records)."""
        records: dict = {}
        eps_hat = self.forward(z_t, t_ids, c_T, key_mask, records=records)
        return eps_hat, [records[k] for k in sorted(records)]

    def forward_capture(self, z_r: N.Tensor, t_ids, c_T: N.Tensor, key_mask=None) -> list:
        """Vanilla pass over a clean reference latent, capturing every
        attention block's token output as the per-block visual condition."""
        capture: list = []
        self.forward(z_r, t_ids, c_T, key_mask, capture=capture)
        return capture
