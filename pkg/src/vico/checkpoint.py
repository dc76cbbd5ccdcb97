"""Binary checkpoint format.

Layout: magic "VICOCKPT", u32 version, u32 manifest length, manifest JSON,
then named blobs (u32 name length, name, u32 rank, u32 extents, float32
little-endian data), and a trailing CRC32 over everything before it.

The manifest carries the model/train config echo, step counter, RNG state,
the vocabulary, and hashes of every frozen parameter; the blobs carry all
parameter values (frozen ones included, so a load can verify the backbone
bit for bit) plus optimizer moments.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, VicoModel
from .text import Vocabulary

MAGIC = b"VICOCKPT"
VERSION = 1

__all__ = ["CheckpointError", "save_checkpoint", "save_backbone", "load_checkpoint", "restore_model", "CheckpointData"]


class CheckpointError(ValueError):
    pass


def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    header = struct.pack("<I", len(name_b)) + name_b
    header += struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    return header + data.tobytes()


def _write(path, manifest: dict, blobs: dict) -> None:
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    manifest_b = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(manifest_b))
    body += manifest_b
    for name in sorted(blobs):
        body += _pack_blob(name, blobs[name])
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


@dataclass
class CheckpointData:
    manifest: dict
    blobs: dict


def load_checkpoint(path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12:
        raise CheckpointError("checkpoint file too short")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checksum mismatch; checkpoint is corrupted")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    manifest = json.loads(raw[off : off + mlen].decode("utf-8"))
    off += mlen
    blobs = {}
    end = len(raw) - 4
    while off < end:
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        blobs[name] = arr.copy()
    if off != end:
        raise CheckpointError("trailing bytes after last blob")
    return CheckpointData(manifest, blobs)


def _frozen_hashes(model: VicoModel) -> dict:
    # Hashes are over the serialized (little-endian float32) form so they
    # stay comparable regardless of the in-memory precision mode.
    return {
        k: hashlib.sha256(np.ascontiguousarray(v, dtype="<f4").tobytes()).hexdigest()
        for k, v in model.frozen_arrays().items()
    }


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: str(v) for k, v in state["state"].items()},
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _restore_rng(spec: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": spec["bit_generator"],
        "state": {k: int(v) for k, v in spec["state"].items()},
        "has_uint32": spec["has_uint32"],
        "uinteger": spec["uinteger"],
    }
    return rng


def save_checkpoint(path, state) -> None:
    """Write a personalized-training checkpoint from a TrainState."""
    model = state.model
    manifest = {
        "format_version": VERSION,
        "kind": "personalized",
        "model_config": model.cfg.to_json_dict(),
        "train_config": {
            "lambda_reg": state.cfg.lambda_reg,
            "lr_s_star": state.cfg.lr_s_star,
            "lr_psi": state.cfg.lr_psi,
            "batch_size": state.cfg.batch_size,
            "steps": state.cfg.steps,
            "seed": state.cfg.seed,
            "precision": state.cfg.precision,
            "checkpoint_interval": state.cfg.checkpoint_interval,
            "init_word": state.cfg.init_word,
        },
        "step": state.step,
        "optimizer_t": state.optimizer.t,
        "rng_state": _rng_state(state.rng),
        "frozen_hashes": _frozen_hashes(model),
        "vocab": model.vocab.to_json_dict(),
    }
    blobs = {name: p.data for name, p in model.trainable_parameters().items()}
    blobs.update(state.optimizer.state_arrays())
    blobs.update(model.frozen_arrays())
    _write(path, manifest, blobs)


def save_backbone(path, model: VicoModel) -> None:
    """Write a frozen-backbone checkpoint (no trainable or optimizer state)."""
    manifest = {
        "format_version": VERSION,
        "kind": "backbone",
        "model_config": model.cfg.to_json_dict(),
        "frozen_hashes": _frozen_hashes(model),
        "vocab": model.vocab.to_json_dict(),
    }
    _write(path, manifest, model.frozen_arrays())


def _load_frozen_into(model: VicoModel, data: CheckpointData) -> None:
    hashes = data.manifest["frozen_hashes"]
    frozen_views = dict(model.text.frozen_parameters())
    frozen_views.update({k: t.data for k, t in model.unet.params().items()})
    for name, target in frozen_views.items():
        if name not in data.blobs:
            raise CheckpointError(f"missing frozen blob {name}")
        blob = data.blobs[name]
        if hashlib.sha256(np.ascontiguousarray(blob, dtype="<f4").tobytes()).hexdigest() != hashes[name]:
            raise CheckpointError(f"frozen parameter {name} does not match its manifest hash")
        target[...] = blob.astype(target.dtype).reshape(target.shape)


def restore_model(data: CheckpointData) -> VicoModel:
    """Rebuild a model from a checkpoint, verifying frozen hashes."""
    cfg = ModelConfig.from_json_dict(data.manifest["model_config"])
    vocab = Vocabulary.from_json_dict(data.manifest["vocab"])
    model = VicoModel(cfg, vocab)
    _load_frozen_into(model, data)
    if data.manifest["kind"] == "personalized":
        for name, p in model.trainable_parameters().items():
            if name not in data.blobs:
                raise CheckpointError(f"missing trainable blob {name}")
            p.data[...] = data.blobs[name].astype(p.data.dtype).reshape(p.shape)
    return model


def restore_train_state(data: CheckpointData, dataset, sched=None):
    """Rebuild a full TrainState (model, optimizer moments, RNG, step)."""
    from .diffusion import build_schedule
    from .trainer import TrainConfig, TrainState, make_optimizer

    if data.manifest["kind"] != "personalized":
        raise CheckpointError("not a personalized-training checkpoint")
    model = restore_model(data)
    cfg = TrainConfig(**data.manifest["train_config"])
    optimizer = make_optimizer(model, cfg)
    optimizer.load_state_arrays(data.blobs, data.manifest["optimizer_t"])
    state = TrainState(
        model=model,
        optimizer=optimizer,
        sched=sched or build_schedule(1000),
        cfg=cfg,
        dataset=dataset,
        latents=dataset.load_latents(),
        rng=_restore_rng(data.manifest["rng_state"]),
        step=data.manifest["step"],
    )
    return state
