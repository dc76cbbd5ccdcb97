import numpy as np
import pytest

import vico.numerics as N
from vico import checkpoint as C
from vico import diffusion as D
from vico import synthetic
from vico import trainer as TR
from vico.model import ModelConfig, VicoModel
from vico.text import TextConfig
from vico.unet import UNetConfig

SMALL_MODEL = dict(
    unet=UNetConfig(
        latent_shape=(3, 16, 16),
        base_channels=16,
        channel_mults=(1, 2),
        enc_res_blocks=(1, 2),
        dec_res_blocks=(2, 2),
        groups=8,
        heads=4,
        cond_dim=32,
        vico_block_indices=(4, 6),
        stem_stride=1,
    ),
    text=TextConfig(),
)


@pytest.fixture()
def dataset(tmp_path):
    synthetic.generate_dataset(tmp_path / "data", n_images=3, image_size=16, seed=5)
    return TR.DatasetSpec.from_manifest(tmp_path / "data" / "manifest.json")


def _small_model(seed=0):
    return VicoModel(ModelConfig(model_seed=seed, **SMALL_MODEL))


def _cfg(**kw):
    base = dict(steps=3, batch_size=2, seed=9, checkpoint_interval=0)
    base.update(kw)
    return TR.TrainConfig(**base)


# ---------------------------------------------------------------------------
# Data sampling policy
# ---------------------------------------------------------------------------


def test_sequential_targets_and_distinct_references():
    rng = np.random.default_rng(0)
    seen_targets = []
    for step in range(5):
        plan = TR.sample_batch(5, 3, step, 1, rng)
        seen_targets.append(int(plan.target_indices[0]))
        assert plan.ref_indices[0] != plan.target_indices[0]
    assert seen_targets == [0, 1, 2, 3, 4]


def test_single_image_is_its_own_reference():
    rng = np.random.default_rng(1)
    plan = TR.sample_batch(1, 2, 7, 3, rng)
    assert np.all(plan.ref_indices == plan.target_indices)


def test_reference_frequency_uniform():
    rng = np.random.default_rng(2)
    counts = {k: 0 for k in range(1, 5)}
    for step in range(1000):
        plan = TR.sample_batch(5, 3, step * 0, 1, rng)  # target fixed at 0
        counts[int(plan.ref_indices[0])] += 1
    for k, c in counts.items():
        assert abs(c / 1000 - 0.25) <= 0.05, (k, c)


def test_policy_over_1000_batches():
    rng = np.random.default_rng(3)
    for step in range(1000):
        plan = TR.sample_batch(5, 3, step, 4, rng)
        expect = [(step * 4 + k) % 5 for k in range(4)]
        assert plan.target_indices.tolist() == expect
        assert np.all(plan.ref_indices != plan.target_indices)
        assert np.all((0 <= plan.template_indices) & (plan.template_indices < 3))


# ---------------------------------------------------------------------------
# Train steps
# ---------------------------------------------------------------------------


def test_lambda_zero_total_equals_denoise(dataset):
    model = _small_model()
    state = TR.fit(dataset, _cfg(lambda_reg=0.0, steps=2), model)
    for step, total, den, reg in state.curve:
        assert total == den and reg == 0.0


def test_loss_decomposition(dataset):
    model = _small_model()
    state = TR.fit(dataset, _cfg(steps=3), model)
    for step, total, den, reg in state.curve:
        assert total == pytest.approx(den + state.cfg.lambda_reg * reg, abs=1e-9)


def test_frozen_hashes_stable_over_training(dataset):
    model = _small_model()
    baseline = TR.snapshot_hashes(model)
    TR.fit(dataset, _cfg(steps=3), model)
    report = TR.assert_frozen(model, baseline)
    assert report.ok, report.changed


def test_freeze_detector_catches_tampering(dataset):
    model = _small_model()
    baseline = TR.snapshot_hashes(model)
    model.unet.conv_in_w.data[0, 0, 0, 0] += 1.0
    report = TR.assert_frozen(model, baseline)
    assert report.changed == ["unet.conv_in_w"]


def test_optimizer_partition_exact():
    model = _small_model()
    opt = TR.make_optimizer(model, _cfg())
    assert set(opt.registered()) == set(model.trainable_parameters())
    with pytest.raises(ValueError, match="frozen"):
        TR.Adam({"bad": ({"unet.conv_in_w": model.unet.conv_in_w}, 1e-3)})


def test_s_star_moves_and_word_row_does_not(dataset):
    model = _small_model()
    word_row = model.text.table[model.vocab.lookup("object")].copy()
    TR.fit(dataset, _cfg(steps=1), model)
    assert not np.array_equal(model.text.s_star.data, word_row)
    assert model.text.table[model.vocab.lookup("object")].tobytes() == word_row.tobytes()


def test_steps_zero_leaves_state_at_init(dataset):
    model = _small_model()
    before = model.text.s_star.data.copy()
    state = TR.fit(dataset, _cfg(steps=0), model)
    assert state.step == 0 and state.curve == []
    # init_placeholder ran, so s_star equals the init word row
    assert model.text.s_star.data.tobytes() == model.text.table[model.vocab.lookup("object")].tobytes()
    del before


def test_training_deterministic_bitwise(dataset):
    s1 = TR.fit(dataset, _cfg(steps=3), _small_model(seed=4))
    s2 = TR.fit(dataset, _cfg(steps=3), _small_model(seed=4))
    assert s1.model.text.s_star.data.tobytes() == s2.model.text.s_star.data.tobytes()
    for idx in s1.model.psi:
        for k in s1.model.psi[idx].p:
            assert s1.model.psi[idx].p[k].data.tobytes() == s2.model.psi[idx].p[k].data.tobytes()
    assert s1.curve == s2.curve


def test_divergence_aborts_with_step_number(dataset):
    model = _small_model()
    model.psi[4].p["wo"].data[...] = np.nan  # fit() re-inits s_star, so poison psi
    with pytest.raises(TR.TrainingDiverged, match="step 0"):
        TR.fit(dataset, _cfg(steps=1), model)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(dataset, tmp_path):
    model = _small_model()
    state = TR.fit(dataset, _cfg(steps=2), model)
    path = tmp_path / "ck.ckpt"
    C.save_checkpoint(path, state)
    data = C.load_checkpoint(path)
    restored = C.restore_model(data)
    for name, p in model.trainable_parameters().items():
        assert restored.trainable_parameters()[name].data.tobytes() == p.data.tobytes(), name
    for name, arr in model.frozen_arrays().items():
        assert restored.frozen_arrays()[name].tobytes() == arr.tobytes(), name


def test_checkpoint_checksum_tamper_detected(dataset, tmp_path):
    model = _small_model()
    state = TR.fit(dataset, _cfg(steps=1), model)
    path = tmp_path / "ck.ckpt"
    C.save_checkpoint(path, state)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(C.CheckpointError, match="checksum"):
        C.load_checkpoint(path)


def test_checkpoint_version_and_magic_checks(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(C.CheckpointError, match="magic"):
        C.load_checkpoint(bad)


def test_resume_equals_uninterrupted(dataset, tmp_path):
    full = TR.fit(dataset, _cfg(steps=4), _small_model(seed=6))

    half_model = _small_model(seed=6)
    state = TR.fit(dataset, _cfg(steps=2), half_model)
    state.cfg.steps = 4  # extend the same run
    path = tmp_path / "mid.ckpt"
    C.save_checkpoint(path, state)
    resumed = C.restore_train_state(C.load_checkpoint(path), dataset, state.sched)
    done = TR.fit(dataset, resumed.cfg, resumed.model, resumed.sched, resume_state=resumed)

    assert done.model.text.s_star.data.tobytes() == full.model.text.s_star.data.tobytes()
    for idx in full.model.psi:
        for k in full.model.psi[idx].p:
            assert done.model.psi[idx].p[k].data.tobytes() == full.model.psi[idx].p[k].data.tobytes()


# ---------------------------------------------------------------------------
# Backbone warm-up
# ---------------------------------------------------------------------------


def test_pretrain_trains_and_refreezes():
    model = _small_model(seed=7)
    before = model.unet.conv_in_w.data.copy()
    curve = TR.pretrain_backbone(model, TR.PretrainConfig(steps=3, batch_size=2, image_size=16, n_sprites=2, seed=1))
    assert len(curve) == 3
    assert not np.array_equal(model.unet.conv_in_w.data, before)
    for name, p in model.unet.params().items():
        assert not p.requires_grad and p.grad is None, name
    # text encoder untouched by warm-up
    model2 = _small_model(seed=7)
    for k, v in model.text.frozen_parameters().items():
        assert v.tobytes() == model2.text.frozen_parameters()[k].tobytes()
