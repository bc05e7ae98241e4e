import numpy as np
import pytest
import torch

from audiocond.bench import make_melody_benchmark
from audiocond.checkpoint import load_checkpoint, save_checkpoint
from audiocond.diffusion import v_target
from audiocond.errors import ConfigError, DivergenceError
from audiocond.model import ModelConfig, build_model
from audiocond.training import AdapterTrainer, TrainingBatch, prepare_clips, training_step


def tiny_config(**kw):
    return ModelConfig(blocks=2, model_dim=12, c_r=12, head_count=2, frame_size=8, **kw)


@pytest.fixture(scope="module")
def small_bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    manifest, records = make_melody_benchmark(out, n_clips=3, seconds=0.2, segments=2, seed=1)
    return manifest, records


def build_trainer(records, adapter="melody-only", seed=0, **kw):
    cfg = tiny_config()
    model, codec = build_model(cfg, seed=seed)
    clips = prepare_clips(records, cfg, codec, clip_seconds=0.2, adapter=adapter)
    trainer = AdapterTrainer(model, clips, adapter, seed=seed, batch_size=2, lr=1e-3, **kw)
    return model, codec, trainer


def test_prepare_clips_extracts_by_adapter(small_bench):
    _, records = small_bench
    cfg = tiny_config()
    model, codec = build_model(cfg, seed=0)
    melody_clips = prepare_clips(records, cfg, codec, clip_seconds=0.2, adapter="melody-only")
    assert all(c.melody is not None and c.dynamics is None for c in melody_clips)
    attr_clips = prepare_clips(records, cfg, codec, clip_seconds=0.2, adapter="attr")
    assert all(c.melody is not None and c.dynamics is not None and c.rhythm is not None for c in attr_clips)
    audio_clips = prepare_clips(records, cfg, codec, clip_seconds=0.2, adapter="audio")
    assert all(c.melody is None for c in audio_clips)
    with pytest.raises(ConfigError):
        prepare_clips(records, cfg, codec, clip_seconds=0.2, adapter="chords")


def test_losses_decrease_on_overfit(small_bench):
    _, records = small_bench
    model, codec, trainer = build_trainer(records, cond_dropout=False, random_masking=False)
    losses = trainer.run(150)
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_training_deterministic_replay(small_bench):
    _, records = small_bench
    _, _, t1 = build_trainer(records, seed=7)
    _, _, t2 = build_trainer(records, seed=7)
    assert t1.run(12) == t2.run(12)


def test_resume_reproduces_continuous_run(small_bench, tmp_path):
    _, records = small_bench
    # run A: 16 uninterrupted steps
    model_a, _, trainer_a = build_trainer(records, seed=3)
    losses_a = trainer_a.run(16)

    # run B: 8 steps, checkpoint, reload, 8 more
    model_b, codec_b, trainer_b = build_trainer(records, seed=3)
    trainer_b.run(8)
    path = tmp_path / "resume.bin"
    opt_tensors, trainer_meta = trainer_b.export_state()
    save_checkpoint(path, model_b, codec_b, meta={"trainer": trainer_meta}, extra_tensors=opt_tensors)

    model_c, codec_c, meta, extras = load_checkpoint(path)
    cfg = model_c.cfg
    clips = prepare_clips(records, cfg, codec_c, clip_seconds=0.2, adapter="melody-only")
    trainer_c = AdapterTrainer(model_c, clips, "melody-only", seed=3, batch_size=2, lr=1e-3)
    trainer_c.restore_state(extras, meta["trainer"])
    assert trainer_c.step_count == 8
    losses_c = trainer_c.run(8)
    np.testing.assert_allclose(losses_c, losses_a[8:], rtol=1e-5)


def test_divergence_raises():
    cfg = tiny_config()
    model, _ = build_model(cfg, seed=0)

    class NanModel:
        def __call__(self, x_t, t, **kw):
            return x_t * float("nan")

    batch = TrainingBatch(
        x0=torch.zeros(1, 4, cfg.latent_channels),
        eps=torch.zeros(1, 4, cfg.latent_channels),
        t=torch.tensor([0.5]),
    )
    opt = torch.optim.AdamW([torch.nn.Parameter(torch.zeros(1))])
    with pytest.raises(DivergenceError):
        training_step(NanModel(), batch, opt)


def test_batch_respects_dropout_record(small_bench):
    _, records = small_bench
    _, _, trainer = build_trainer(records, seed=1)
    saw_drop = saw_keep = False
    for _ in range(40):
        batch = trainer.make_batch()
        if batch.drops.get("attr"):
            assert batch.attr is None
            saw_drop = True
        elif "attr" in batch.drops:
            assert batch.attr is not None
            saw_keep = True
    assert saw_drop and saw_keep


def test_audio_adapter_batches_mask_latent(small_bench):
    _, records = small_bench
    model, codec, trainer = build_trainer(records, adapter="audio", seed=2, cond_dropout=False)
    batch = trainer.make_batch()
    assert batch.audio is not None and batch.attr is None
    # masked frames are exactly zero, kept frames match x0
    diff = (batch.audio - batch.x0).abs().sum(dim=2)
    zeroed = batch.audio.abs().sum(dim=2) == 0
    assert bool(((diff == 0) | zeroed).all())
    assert bool(zeroed.any()) and bool((~zeroed).any())
