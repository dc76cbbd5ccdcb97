"""Assembly of the frozen backbone, frozen text encoder, and trainable plug-in."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as N
from .image_attention import ImageAttentionBlock, ReferenceConditions, concat_references
from .text import TextConfig, TextEncoderState, TokenSequence, Vocabulary
from .unet import MiniUNet, UNetConfig

__all__ = ["ModelConfig", "VicoModel"]


@dataclass
class ModelConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    text: TextConfig = field(default_factory=TextConfig)
    model_seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.text.d_text != self.unet.cond_dim:
            raise ValueError(
                f"text width {self.text.d_text} must match unet cond_dim {self.unet.cond_dim}"
            )
        if self.text.context_len != self.unet.context_len:
            raise ValueError("text and unet context lengths differ")

    def to_json_dict(self) -> dict:
        return {
            "unet": {
                "latent_shape": list(self.unet.latent_shape),
                "base_channels": self.unet.base_channels,
                "channel_mults": list(self.unet.channel_mults),
                "enc_res_blocks": list(self.unet.enc_res_blocks),
                "dec_res_blocks": list(self.unet.dec_res_blocks),
                "groups": self.unet.groups,
                "heads": self.unet.heads,
                "cond_dim": self.unet.cond_dim,
                "context_len": self.unet.context_len,
                "vico_block_indices": list(self.unet.vico_block_indices),
                "stem_stride": self.unet.stem_stride,
            },
            "text": {
                "d_text": self.text.d_text,
                "context_len": self.text.context_len,
                "heads": self.text.heads,
                "layers": self.text.layers,
                "ff_mult": self.text.ff_mult,
            },
            "model_seed": self.model_seed,
            "precision": self.precision,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        u = dict(d["unet"])
        u["latent_shape"] = tuple(u["latent_shape"])
        u["channel_mults"] = tuple(u["channel_mults"])
        u["enc_res_blocks"] = tuple(u["enc_res_blocks"])
        u["dec_res_blocks"] = tuple(u["dec_res_blocks"])
        u["vico_block_indices"] = tuple(u["vico_block_indices"])
        return cls(
            unet=UNetConfig(**u),
            text=TextConfig(**d["text"]),
            model_seed=d["model_seed"],
            precision=d.get("precision", "f32"),
        )


class VicoModel:
    """Frozen theta + frozen text encoder + trainable (psi, s_star)."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None):
        N.set_default_dtype(cfg.precision)
        self.cfg = cfg
        self.vocab = vocab or Vocabulary.default()
        seeds = np.random.SeedSequence(cfg.model_seed).spawn(3)
        self.text = TextEncoderState(cfg.text, self.vocab, seed=_seed_int(seeds[0]))
        self.unet = MiniUNet(cfg.unet, seed=_seed_int(seeds[1]))
        psi_rng = np.random.default_rng(seeds[2])
        self.psi = {}
        for idx in cfg.unet.vico_block_indices:
            d_model = self.unet.attn_channels[idx]
            self.psi[idx] = ImageAttentionBlock(psi_rng, d_model, d_model, cfg.unet.heads)

    @property
    def latent_shape(self) -> tuple:
        return self.cfg.unet.latent_shape

    # -- parameter partitions ---------------------------------------------
    def trainable_parameters(self) -> dict:
        params = {"text.s_star": self.text.s_star}
        for idx, block in sorted(self.psi.items()):
            params.update(block.params(f"psi.{idx}"))
        return params

    def frozen_arrays(self) -> dict:
        out = dict(self.text.frozen_parameters())
        out.update({k: t.data for k, t in self.unet.params().items()})
        return out

    def zero_grads(self) -> None:
        for p in self.trainable_parameters().values():
            p.zero_grad()

    # -- conditioning -------------------------------------------------------
    def encode_prompts(self, tokens: list) -> tuple:
        """Returns (c_T [B,D_t,d], additive key mask, i indices, j indices)."""
        c_T = self.text.encode_batch(tokens)
        b = len(tokens)
        dt = self.cfg.text.context_len
        mask = np.zeros((b, 1, 1, dt), dtype=c_T.data.dtype)
        for k, seq in enumerate(tokens):
            mask[k, :, :, seq.eot_index + 1 :] = TextEncoderState.NEG
        i_idx = np.array([s.s_star_index for s in tokens], dtype=np.int64)
        j_idx = np.array([s.eot_index for s in tokens], dtype=np.int64)
        return c_T, mask, i_idx, j_idx

    def encode_plain_prompts(self, tokens: list) -> tuple:
        """Conditioning for placeholder-free prompts (backbone warm-up)."""
        c_T = N.const(self.text.encode_plain_batch(tokens))
        b = len(tokens)
        dt = self.cfg.text.context_len
        mask = np.zeros((b, 1, 1, dt), dtype=c_T.data.dtype)
        for k, seq in enumerate(tokens):
            mask[k, :, :, seq.eot_index + 1 :] = TextEncoderState.NEG
        return c_T, mask

    # -- forward passes -------------------------------------------------------
    def capture_reference(self, z_r, t_ids, c_T, key_mask) -> list:
        """Per-block visual-condition tokens from the vanilla pass on the
        clean reference latent.

        The captured tokens are treated as conditioning data: the pass runs
        without gradient tracking, so the learnable embedding trains through
        the attention blocks that consume the conditions, not through their
        extraction."""
        z = z_r if isinstance(z_r, N.Tensor) else N.const(np.asarray(z_r))
        with N.no_grad():
            features = self.unet.forward_capture(z, t_ids, c_T, key_mask)
        return features

    def build_conditions(self, references, t_ids, c_T, key_mask) -> ReferenceConditions:
        captures = [self.capture_reference(z_r, t_ids, c_T, key_mask) for z_r in references]
        return concat_references(captures)

    def predict_noise(self, z_t, t_ids, tokens, references, collect: bool = False) -> tuple:
        """Visually conditioned denoising prediction.

        ``references`` is a list of reference latents [B,C,H,W] (one entry
        per reference image, each batched like z_t), or a prebuilt
        ReferenceConditions. Returns (eps_hat, {block: VicoBlockRecord}).
        """
        c_T, key_mask, i_idx, _ = self.encode_prompts(tokens)
        if isinstance(references, ReferenceConditions):
            ref = references
        else:
            ref = self.build_conditions(references, t_ids, c_T, key_mask)
        records: dict = {}
        z = z_t if isinstance(z_t, N.Tensor) else N.const(np.asarray(z_t))
        eps_hat = self.unet.forward(
            z, t_ids, c_T, key_mask,
            psi=self.psi, ref=ref, s_star_idx=i_idx, records=records,
        )
        if not collect:
            records = {k: v for k, v in records.items() if k in self.psi}
        return eps_hat, records

    def vanilla_predict(self, z_t, t_ids, tokens) -> N.Tensor:
        """The un-augmented frozen backbone (no visual condition)."""
        c_T, key_mask, _, _ = self.encode_prompts(tokens)
        z = z_t if isinstance(z_t, N.Tensor) else N.const(np.asarray(z_t))
        eps_hat, _ = self.unet.forward_denoise(z, t_ids, c_T, key_mask)
        return eps_hat


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint64)[0])
