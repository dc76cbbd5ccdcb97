"""Training loop: loss assembly, optimization recipe, and freeze auditing.

Two phases live here. ``pretrain_backbone`` briefly trains the raw U-Net on
a procedural multi-sprite corpus (standing in for a large pretrained model),
after which the backbone is frozen for good. ``fit`` is personalization
proper: only the learnable embedding row and the image-attention blocks
move, at their own learning rates, against the denoising loss plus the
weighted attention-column regularizer.

All randomness in a run flows through one generator whose state is saved
in checkpoints, so a resumed run is bitwise identical to an uninterrupted
one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import numerics as N
from .codec import img_to_latent
from .diffusion import NoiseSchedule, build_schedule, denoising_loss, q_sample
from .image_attention import attention_regularizer, object_mask, AttentionRecord
from .model import ModelConfig, VicoModel
from .synthetic import compose_scene, pretrain_pool
from .text import tokenize, tokenize_plain

__all__ = [
    "TrainConfig",
    "PretrainConfig",
    "DatasetSpec",
    "BatchPlan",
    "Adam",
    "TrainingDiverged",
    "sample_batch",
    "train_step",
    "fit",
    "pretrain_backbone",
    "snapshot_hashes",
    "assert_frozen",
    "FreezeReport",
    "reference_mask",
    "mask_iou_diagnostic",
]

DEFAULT_TEMPLATES = [
    "a photo of a {}",
    "a picture of a {}",
    "an image of a {}",
    "a rendering of a {}",
    "a photo of the {}",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_reg: float = 5e-4
    lr_s_star: float = 5e-3
    lr_psi: float = 1e-5
    batch_size: int = 4
    steps: int = 400
    seed: int = 0
    precision: str = "f32"
    checkpoint_interval: int = 100
    init_word: str = "object"

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.lr_s_star <= 0 or self.lr_psi <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("bad batch size or step count")


@dataclass
class PretrainConfig:
    steps: int = 1200
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 0
    n_sprites: int = 8
    image_size: int = 32
    timesteps: int = 1000


@dataclass
class DatasetSpec:
    image_paths: list
    mask_paths: list = field(default_factory=list)
    prompt_templates: list = field(default_factory=lambda: list(DEFAULT_TEMPLATES))

    def __post_init__(self):
        if not self.image_paths:
            raise ValueError("dataset needs at least one image")
        for t in self.prompt_templates:
            if t.split().count("{}") != 1:
                raise ValueError(f"template {t!r} must contain exactly one '{{}}' slot")

    def __len__(self) -> int:
        return len(self.image_paths)

    @classmethod
    def from_manifest(cls, manifest_path, templates=None) -> "DatasetSpec":
        path = Path(manifest_path)
        with open(path) as fh:
            manifest = json.load(fh)
        root = path.parent
        return cls(
            image_paths=[str(root / p) for p in manifest["images"]],
            mask_paths=[str(root / p) for p in manifest.get("masks", [])],
            prompt_templates=list(templates) if templates else list(DEFAULT_TEMPLATES),
        )

    def load_latents(self, dtype=None) -> np.ndarray:
        return np.stack([img_to_latent(np.asarray(Image.open(p).convert("RGB")), dtype) for p in self.image_paths])

    def load_masks(self) -> list:
        return [np.asarray(Image.open(p).convert("L")) > 127 for p in self.mask_paths]


@dataclass
class BatchPlan:
    target_indices: np.ndarray
    ref_indices: np.ndarray
    template_indices: np.ndarray


def sample_batch(n_images: int, n_templates: int, step: int, batch: int, rng: np.random.Generator) -> BatchPlan:
    """Targets walk the dataset in sequential order; each reference is drawn
    uniformly from the other images. A single-image dataset serves as its
    own reference."""
    if n_images < 1:
        raise ValueError("empty dataset")
    targets = np.array([(step * batch + k) % n_images for k in range(batch)], dtype=np.int64)
    refs = np.empty(batch, dtype=np.int64)
    templates = np.empty(batch, dtype=np.int64)
    for k in range(batch):
        if n_images == 1:
            refs[k] = targets[k]
        else:
            draw = int(rng.integers(0, n_images - 1))
            refs[k] = draw if draw < targets[k] else draw + 1
        templates[k] = int(rng.integers(0, n_templates))
    return BatchPlan(targets, refs, templates)


class Adam:
    """Adaptive-moment optimizer with one learning rate per parameter group."""

    def __init__(self, groups: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.groups = {}  # name -> (tensor, lr)
        for group_name, (params, lr) in groups.items():
            for name, p in params.items():
                if not p.requires_grad:
                    raise ValueError(f"optimizer got a frozen parameter {name}")
                if name in self.groups:
                    raise ValueError(f"duplicate parameter {name}")
                self.groups[name] = (p, float(lr))
        self.m = {name: np.zeros_like(p.data) for name, (p, _) in self.groups.items()}
        self.v = {name: np.zeros_like(p.data) for name, (p, _) in self.groups.items()}
        self.t = 0

    def registered(self) -> list:
        return sorted(self.groups)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, (p, lr) in self.groups.items():
            g = p.grad
            dt = p.data.dtype.type
            m = self.m[name]
            v = self.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.data -= dt(lr) * update

    def zero_grad(self) -> None:
        for p, _ in self.groups.values():
            p.zero_grad()

    def state_arrays(self) -> dict:
        out = {}
        for name in self.groups:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, blobs: dict, t: int) -> None:
        for name in self.groups:
            self.m[name][...] = blobs[f"opt.m.{name}"].reshape(self.m[name].shape)
            self.v[name][...] = blobs[f"opt.v.{name}"].reshape(self.v[name].shape)
        self.t = t


def make_optimizer(model: VicoModel, cfg: TrainConfig) -> Adam:
    psi_params = {}
    for idx, block in sorted(model.psi.items()):
        psi_params.update(block.params(f"psi.{idx}"))
    return Adam({
        "s_star": ({"text.s_star": model.text.s_star}, cfg.lr_s_star),
        "psi": (psi_params, cfg.lr_psi),
    })


# ---------------------------------------------------------------------------
# Training steps
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    model: VicoModel
    optimizer: Adam
    sched: NoiseSchedule
    cfg: TrainConfig
    dataset: DatasetSpec
    latents: np.ndarray
    rng: np.random.Generator
    step: int = 0
    curve: list = field(default_factory=list)  # (step, total, denoise, reg)


def train_step(state: TrainState) -> dict:
    cfg = state.cfg
    model = state.model
    n = len(state.dataset)
    plan = sample_batch(n, len(state.dataset.prompt_templates), state.step, cfg.batch_size, state.rng)
    t_ids = state.rng.integers(0, state.sched.timesteps, size=cfg.batch_size)
    z0 = state.latents[plan.target_indices]
    eps = state.rng.standard_normal(z0.shape).astype(z0.dtype)
    refs = state.latents[plan.ref_indices]
    tokens = [
        tokenize(state.dataset.prompt_templates[k], model.vocab, model.cfg.text.context_len)
        for k in plan.template_indices
    ]
    z_t = q_sample(N.const(z0), t_ids, N.const(eps), state.sched)
    eps_hat, records = model.predict_noise(z_t, t_ids, tokens, [refs])
    loss_den = denoising_loss(N.const(eps), eps_hat)
    i_idx = np.array([s.s_star_index for s in tokens], dtype=np.int64)
    j_idx = np.array([s.eot_index for s in tokens], dtype=np.int64)
    if cfg.lambda_reg > 0.0:
        terms = [attention_regularizer(records[b].reference, i_idx, j_idx) for b in sorted(records)]
        reg = terms[0]
        for term in terms[1:]:
            reg = N.add(reg, term)
        reg = N.mul(reg, 1.0 / len(terms))
        total = N.add(loss_den, N.mul(reg, cfg.lambda_reg))
        reg_value = reg.item()
    else:
        total = loss_den
        reg_value = 0.0
    den_value = loss_den.item()
    # reported total is the exact decomposition of the reported parts
    losses = {"total": den_value + cfg.lambda_reg * reg_value, "denoise": den_value, "reg": reg_value}
    if not all(np.isfinite(v) for v in losses.values()):
        raise TrainingDiverged(f"non-finite loss at step {state.step}: {losses}")
    N.backward(total)
    state.optimizer.step()
    state.optimizer.zero_grad()
    state.curve.append((state.step, losses["total"], losses["denoise"], losses["reg"]))
    state.step += 1
    return losses


def fit(
    dataset: DatasetSpec,
    cfg: TrainConfig,
    model: VicoModel,
    sched: NoiseSchedule | None = None,
    checkpoint_dir=None,
    on_checkpoint=None,
    resume_state: TrainState | None = None,
) -> TrainState:
    """Run the personalization recipe; returns the final training state.

    ``on_checkpoint(state, path)`` fires at every interval checkpoint and at
    the final step when a checkpoint directory is given.
    """
    from .checkpoint import save_checkpoint  # local import, cycle-free

    N.set_default_dtype(cfg.precision)
    sched = sched or build_schedule(1000)
    if resume_state is not None:
        state = resume_state
    else:
        model.text.init_placeholder(cfg.init_word)
        state = TrainState(
            model=model,
            optimizer=make_optimizer(model, cfg),
            sched=sched,
            cfg=cfg,
            dataset=dataset,
            latents=dataset.load_latents(),
            rng=np.random.default_rng(cfg.seed),
            step=0,
        )
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    while state.step < cfg.steps:
        train_step(state)
        is_interval = cfg.checkpoint_interval > 0 and state.step % cfg.checkpoint_interval == 0
        if ckpt_dir and (is_interval or state.step == cfg.steps):
            path = ckpt_dir / f"checkpoint_{state.step:06d}.ckpt"
            save_checkpoint(path, state)
            if on_checkpoint:
                on_checkpoint(state, path)
    return state


# ---------------------------------------------------------------------------
# Backbone warm-up (the stand-in for a pretrained diffusion model)
# ---------------------------------------------------------------------------


def _thaw(params: dict) -> None:
    for p in params.values():
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)


def _freeze(params: dict) -> None:
    for p in params.values():
        p.requires_grad = False
        p.grad = None


def pretrain_backbone(model: VicoModel, cfg: PretrainConfig, sched: NoiseSchedule | None = None) -> list:
    """Train theta alone on a procedural multi-sprite corpus, then freeze it.

    Every sprite identity is bound to a vocabulary noun and prompts name it,
    which forces the text cross-attention to carry identity and is what
    makes the learnable-token column meaningful later. Returns the loss
    curve as (step, loss) pairs.
    """
    sched = sched or build_schedule(cfg.timesteps)
    rng = np.random.default_rng(cfg.seed)
    pool = pretrain_pool(rng, cfg.n_sprites, cfg.image_size)
    theta = model.unet.params()
    _thaw(theta)
    opt = Adam({"theta": (theta, cfg.lr)})
    curve = []
    templates = DEFAULT_TEMPLATES
    dtype = N.get_default_dtype()
    try:
        for step in range(cfg.steps):
            imgs, prompts = [], []
            for _ in range(cfg.batch_size):
                word, sprite = pool[int(rng.integers(0, len(pool)))]
                img, _ = compose_scene(rng, sprite, cfg.image_size)
                imgs.append(img_to_latent(img, dtype))
                template = templates[int(rng.integers(0, len(templates)))]
                prompts.append(template.replace("{}", word))
            z0 = np.stack(imgs)
            t_ids = rng.integers(0, sched.timesteps, size=cfg.batch_size)
            eps = rng.standard_normal(z0.shape).astype(dtype)
            tokens = [tokenize_plain(p, model.vocab, model.cfg.text.context_len) for p in prompts]
            c_T, key_mask = model.encode_plain_prompts(tokens)
            z_t = q_sample(N.const(z0), t_ids, N.const(eps), sched)
            eps_hat, _ = model.unet.forward_denoise(z_t, t_ids, c_T, key_mask)
            loss = denoising_loss(N.const(eps), eps_hat)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite warm-up loss at step {step}")
            N.backward(loss)
            opt.step()
            opt.zero_grad()
            curve.append((step, value))
    finally:
        _freeze(theta)
    return curve


# ---------------------------------------------------------------------------
# Freeze contract
# ---------------------------------------------------------------------------


@dataclass
class FreezeReport:
    changed: list

    @property
    def ok(self) -> bool:
        return not self.changed


def snapshot_hashes(model: VicoModel) -> dict:
    return {name: hashlib.sha256(arr.tobytes()).hexdigest() for name, arr in model.frozen_arrays().items()}


def assert_frozen(model: VicoModel, baseline: dict) -> FreezeReport:
    """Report-only check that every frozen parameter hash is unchanged."""
    now = snapshot_hashes(model)
    changed = sorted(set(baseline) ^ set(now) | {k for k in baseline if k in now and baseline[k] != now[k]})
    return FreezeReport(changed)


# ---------------------------------------------------------------------------
# Mask quality diagnostic
# ---------------------------------------------------------------------------


def reference_mask(model: VicoModel, z_r: np.ndarray, prompt: str, block_index: int,
                   sched: NoiseSchedule, timesteps=(50, 250, 500, 750)):
    """Object mask of a reference image at one block, from the learnable
    token's reference-stream attention column averaged over a timestep grid."""
    tokens = tokenize(prompt, model.vocab, model.cfg.text.context_len)
    c_T, key_mask, i_idx, _ = model.encode_prompts([tokens])
    cols = []
    hw = None
    with N.no_grad():
        for t in timesteps:
            features = model.capture_reference(z_r[None] if z_r.ndim == 3 else z_r, np.array([t]), c_T, key_mask)
            feat = next(f for f in features if f.block_index == block_index)
            block = _attention_block_at(model, block_index)
            _, probs = block.forward(feat.tokens, c_T, key_mask)
            hw = feat.hw
            cols.append(probs.data[0].mean(axis=0)[:, tokens.s_star_index])
    record_like = np.mean(cols, axis=0)
    rec = AttentionRecord(block_index, N.const(record_like[None, None, :, None]), "reference", hw)
    return object_mask(rec, 0)


def _attention_block_at(model: VicoModel, block_index: int):
    counter = 0
    for level in model.unet.enc:
        for attn in level["attn"]:
            if counter == block_index:
                return attn
            counter += 1
    if counter == block_index:
        return model.unet.mid_attn
    counter += 1
    for level in model.unet.dec:
        for attn in level["attn"]:
            if counter == block_index:
                return attn
            counter += 1
    raise ValueError(f"no attention block {block_index}")


def mask_iou_diagnostic(model: VicoModel, z_r: np.ndarray, truth: np.ndarray, prompt: str,
                        block_index: int, sched: NoiseSchedule, timesteps=(50, 250, 500, 750)) -> float:
    from .evalkit import mask_iou

    mask = reference_mask(model, z_r, prompt, block_index, sched, timesteps)
    return mask_iou(mask, truth)
