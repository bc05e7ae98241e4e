"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

AC-8 and AC-9 train the 16-clip overfit benchmark from scratch (two runs,
with and without rotary embeddings); expect roughly half an hour on a small
CPU box. Deselect with `-m "not slow"` during development.
"""

import filecmp
import functools
import os
import subprocess
import sys

import numpy as np
import pytest
import torch

from audiocond import dataio
from audiocond.bench import (
    BENCH_EVAL_STEPS,
    BENCH_SCALES,
    BENCH_SECONDS,
    make_melody_benchmark,
    regeneration_accuracy,
    train_melody_overfit,
)
from audiocond.checkpoint import save_checkpoint
from audiocond.codec import LatentCodec
from audiocond.conditioners import ConditionMask, complementary_mask, sample_training_masks
from audiocond.diffusion import alpha, apply_condition_dropout, sample, sigma, v_target, SampleInputs
from audiocond.guidance import GuidanceScales, compose, required_passes
from audiocond.metrics import melody_accuracy, pearson, rhythm_f1, smoothness_value
from audiocond.model import ModelConfig, build_model
from audiocond.pipeline import generate
from audiocond.rope import build_angles, rotate

from conftest import sine, stereo

MELODY_CHANCE = 1.0 / 12.0


def criterion(name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"{name}: FAIL")
                raise
            print(f"{name}: PASS")

        return wrapper

    return deco


# --- AC-1: rotary embedding suite ----------------------------------------------


@criterion("AC-1 rope suite")
def test_ac1_rope_suite():
    spec = build_angles(8)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(16, 8, generator=g)
    assert torch.equal(rotate(spec, x, 0), x)

    for m in (3, 512, 10_000):
        y = rotate(spec, x, m)
        norms_x = x.reshape(-1, 4, 2).norm(dim=-1)
        norms_y = y.reshape(-1, 4, 2).norm(dim=-1)
        assert (norms_x - norms_y).abs().max() <= 1e-6

    q = torch.randn(8, generator=g)
    k = torch.randn(8, generator=g)
    rng = np.random.default_rng(1)
    for _ in range(120):
        diff = int(rng.integers(-40, 41))
        base = int(rng.integers(max(0, -diff), 4000))
        shift = int(rng.integers(0, 4000))
        m, n = base + max(diff, 0), base + max(-diff, 0)
        d1 = torch.dot(rotate(spec, q, m), rotate(spec, k, n))
        d2 = torch.dot(rotate(spec, q, m + shift), rotate(spec, k, n + shift))
        assert abs(d1 - d2) <= 1e-5

    v = torch.randn(8, generator=g)
    for m, n in [(0, 5), (123, 456), (5000, 4999)]:
        a = rotate(spec, rotate(spec, v, m), n)
        b = rotate(spec, v, m + n)
        assert (a - b).abs().max() <= 1e-6


# --- AC-2: zero-init identity ----------------------------------------------------


@criterion("AC-2 zero-init identity")
def test_ac2_zero_init_identity():
    cfg = ModelConfig()
    model, _ = build_model(cfg, seed=0)
    g = torch.Generator().manual_seed(7)
    for _ in range(20):
        x = torch.randn(1, 12, cfg.latent_channels, generator=g)
        t = torch.rand(1, generator=g)
        text = torch.randn(1, 4, cfg.model_dim, generator=g)
        attr = torch.randn(1, 12, cfg.c_r, generator=g)
        audio = torch.randn(1, 12, cfg.latent_channels, generator=g)
        with torch.no_grad():
            adapted = model(x, t, text=text, attr=attr, audio=audio)
            bare = model(x, t, text=text)
        assert (adapted - bare).abs().max() <= 1e-6


# --- AC-3: attention oracle -------------------------------------------------------


@criterion("AC-3 attention oracle")
def test_ac3_attention_oracle():
    from test_attention import oracle_attention
    from audiocond.attention import DecoupledAdapter, FrozenAttentionWeights, decoupled_cross_attention
    from audiocond.rope import condition_positions

    for dh in (2, 8):
        spec = build_angles(dh)
        for m in (1, 2, 8, 32):
            for n in (1, 2, 8, 32):
                torch.manual_seed(m * 1000 + n * 10 + dh)
                w = FrozenAttentionWeights(dh, dh, 1)
                a = DecoupledAdapter(w, kind="attribute")
                with torch.no_grad():
                    a.wk_prime.weight.add_(0.1 * torch.randn_like(a.wk_prime.weight))
                    a.wv_prime.weight.add_(0.1 * torch.randn_like(a.wv_prime.weight))
                x = torch.randn(m, dh)
                c = torch.randn(n, dh)
                fast = decoupled_cross_attention(w, a, spec, x, c).detach().numpy()
                ref = oracle_attention(
                    w.wq.weight.numpy(), a.wk_prime.weight.detach().numpy(),
                    a.wv_prime.weight.detach().numpy(), x.numpy(), c.numpy(),
                    heads=1, angles=spec.angles.numpy(),
                    q_pos=np.arange(m), k_pos=condition_positions(n, m).numpy(),
                )
                np.testing.assert_allclose(fast, ref, atol=1e-5)


# --- AC-4: gradient checks -------------------------------------------------------


@criterion("AC-4 gradient checks")
def test_ac4_gradient_checks():
    from audiocond.diffusion import noisy_latent

    for instance in range(10):
        cfg = ModelConfig(blocks=2, model_dim=12, c_r=12, head_count=2, frame_size=8)
        model, _ = build_model(cfg, seed=instance)
        model = model.double()
        rng = np.random.default_rng(100 + instance)
        x0 = torch.from_numpy(rng.standard_normal((1, 5, cfg.latent_channels)))
        eps = torch.from_numpy(rng.standard_normal((1, 5, cfg.latent_channels)))
        t = torch.tensor([rng.uniform(0.1, 0.9)], dtype=torch.float64)
        text = torch.from_numpy(rng.standard_normal((1, 2, cfg.model_dim)))
        attr = torch.from_numpy(rng.standard_normal((1, 5, cfg.c_r)))

        def loss_value():
            pred = model(noisy_latent(x0, eps, t), t, text=text, attr=attr)
            return torch.mean((pred - v_target(x0, eps, t)) ** 2)

        params = [
            model.blocks[0].attr_adapter.wk_prime.weight,
            model.blocks[1].attr_adapter.wv_prime.weight,
            model.blocks[0].attr_adapter.combiner.weight,
            model.blocks[1].attr_adapter.combiner.bias,
        ]
        grads = torch.autograd.grad(loss_value(), params)
        h = 1e-3
        for p, g in zip(params, grads):
            flat = p.data.view(-1)
            picks = rng.choice(flat.numel(), size=min(5, flat.numel()), replace=False)
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_value().item()
                flat[i] = orig - h
                down = loss_value().item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                ga = g.view(-1)[i].item()
                assert abs(ga - fd) / (abs(ga) + abs(fd) + 1e-9) < 1e-2


# --- AC-5: CFG algebra and dropout rates -------------------------------------------


@criterion("AC-5 guidance algebra and dropout rates")
def test_ac5_guidance_and_dropout():
    assert compose([0.0, 1.0, 2.0, 3.0], [7.0, 2.0, 1.0]) == 10.0

    rng = np.random.default_rng(0)
    estimates = [rng.standard_normal((3, 4)) for _ in range(4)]
    np.testing.assert_array_equal(compose(estimates, [1.0, 1.0, 1.0]), estimates[-1])

    u, s = estimates[0], estimates[1]
    np.testing.assert_array_equal(compose([u, s], [4.0]), u + 4.0 * (s - u))
    assert required_passes(["text"]) == [frozenset(), frozenset({"text"})]

    drops = {"text": 0, "attr": 0, "audio": 0}
    n = 10_000
    gen = np.random.default_rng(42)
    for _ in range(n):
        _, d = apply_condition_dropout(gen, {"text": 1, "attr": 1, "audio": 1})
        for k in drops:
            drops[k] += d[k]
    assert 0.28 <= drops["text"] / n <= 0.32
    assert 0.48 <= drops["attr"] / n <= 0.52
    assert 0.48 <= drops["audio"] / n <= 0.52


# --- AC-6: schedule and v-target ----------------------------------------------------


@criterion("AC-6 schedule and v-target")
def test_ac6_schedule_and_v_target():
    t = np.linspace(0.0, 1.0, 1001)
    assert np.abs(alpha(t) ** 2 + sigma(t) ** 2 - 1.0).max() < 1e-6

    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4, 8)).astype(np.float32)
    eps = rng.standard_normal((4, 8)).astype(np.float32)
    assert np.array_equal(v_target(x0, eps, 0.0), eps)
    assert np.array_equal(v_target(x0, eps, 1.0), -x0)

    target = rng.standard_normal((1, 6, 16)).astype(np.float32)

    class Stub:
        def __call__(self, x_t, t_b, **kw):
            tt = float(t_b[0])
            return (alpha(tt) * x_t - torch.from_numpy(target)) / sigma(tt)

    out = sample(Stub(), 6, 16, SampleInputs(), GuidanceScales(), steps=1, rng=np.random.default_rng(0))
    np.testing.assert_allclose(out, target[0], atol=1e-4)


# --- AC-7: metrics oracles -----------------------------------------------------------


@criterion("AC-7 metrics oracles")
def test_ac7_metrics_oracles():
    from test_metrics import band_noise, random_class_tones

    x = stereo(sine(330.0, 1.0))
    assert melody_accuracy(x, x) == 1.0
    assert melody_accuracy(stereo(sine(440.0, 1.0)), stereo(sine(466.16, 1.0))) == 0.0
    acc = melody_accuracy(random_class_tones(seed=1, n_segments=700), random_class_tones(seed=2, n_segments=700))
    assert abs(acc - MELODY_CHANCE) <= 0.03

    beats = np.arange(0.5, 8.0, 0.5)
    assert rhythm_f1(beats, estimated_beats=beats + 0.050) == 1.0
    assert rhythm_f1(beats, estimated_beats=beats + 0.100) == 0.0

    rng = np.random.default_rng(0)
    a = rng.standard_normal(200)
    assert abs(pearson(a, a) - 1.0) <= 1e-9
    assert abs(pearson(a, -a) + 1.0) <= 1e-9
    assert abs(pearson(a, 2.5 * a + 4.0) - 1.0) <= 1e-9

    flat = stereo(np.full(3 * 44100, 0.25, dtype=np.float32))
    assert abs(smoothness_value(flat, 1.5)) <= 1e-6
    lo = band_noise(0, 2000, 5.0, seed=3)
    hi = band_noise(4000, 8000, 5.0, seed=4)
    hard_clip = np.concatenate([lo, hi])
    hard = smoothness_value(hard_clip, 5.0)
    assert hard < -0.1
    lo10 = band_noise(0, 2000, 10.0, seed=3)
    hi10 = band_noise(4000, 8000, 10.0, seed=4)
    t_ax = np.arange(len(lo10)) / 44100.0
    gain = np.clip((t_ax - 4.0) / 2.0, 0.0, 1.0).astype(np.float32)[:, None]
    cross = lo10 * (1 - gain) + hi10 * gain
    assert smoothness_value(cross, 5.0) > hard


# --- AC-8 / AC-9: overfit ablation benchmark -----------------------------------------


@pytest.fixture(scope="module")
def overfit_runs(tmp_path_factory):
    torch.set_num_threads(2)
    bench_dir = tmp_path_factory.mktemp("overfit_bench")
    manifest, records = make_melody_benchmark(bench_dir, n_clips=16, seconds=BENCH_SECONDS, segments=6, seed=0)

    rope_model, rope_codec, rope_losses = train_melody_overfit(records, disable_rope=False, seed=0)
    norope_model, norope_codec, norope_losses = train_melody_overfit(records, disable_rope=True, seed=0)

    results = {
        "records": records,
        "rope_initial_loss": float(np.mean(rope_losses[:10])),
        "rope_final_loss": float(np.mean(rope_losses[-50:])),
        "rope_acc": regeneration_accuracy(
            rope_model, rope_codec, records, use_melody=True, scales=BENCH_SCALES,
            steps=BENCH_EVAL_STEPS, seed=0,
        ),
        "rope_acc_no_adapter": regeneration_accuracy(
            rope_model, rope_codec, records, use_melody=False, scales=BENCH_SCALES,
            steps=BENCH_EVAL_STEPS, seed=0,
        ),
        "norope_acc": regeneration_accuracy(
            norope_model, norope_codec, records, use_melody=True, scales=BENCH_SCALES,
            steps=BENCH_EVAL_STEPS, seed=0,
        ),
    }
    print(
        f"\n[overfit benchmark] rope acc {np.mean(results['rope_acc']):.3f}, "
        f"no-rope acc {np.mean(results['norope_acc']):.3f}, "
        f"adapter-off acc {np.mean(results['rope_acc_no_adapter']):.3f}, "
        f"loss {results['rope_initial_loss']:.3f} -> {results['rope_final_loss']:.3f}"
    )
    return results


@pytest.mark.slow
@criterion("AC-8 rope ablation direction")
def test_ac8_rope_ablation_direction(overfit_runs):
    rope = float(np.mean(overfit_runs["rope_acc"]))
    norope = float(np.mean(overfit_runs["norope_acc"]))
    assert rope - norope >= 0.15
    assert abs(norope - MELODY_CHANCE) <= 0.1


@pytest.mark.slow
@criterion("AC-9 overfit controllability")
def test_ac9_overfit_controllability(overfit_runs):
    rope = float(np.mean(overfit_runs["rope_acc"]))
    assert rope >= 0.4
    assert overfit_runs["rope_final_loss"] <= 0.5 * overfit_runs["rope_initial_loss"]
    off = float(np.mean(overfit_runs["rope_acc_no_adapter"]))
    assert abs(off - MELODY_CHANCE) <= 0.1


# --- AC-10: inpaint/outpaint contract --------------------------------------------------


@criterion("AC-10 inpaint/outpaint contract")
def test_ac10_inpaint_outpaint_contract():
    cfg = ModelConfig()
    model, codec = build_model(cfg, seed=0)
    ref = stereo(sine(392.0, 1.0, amplitude=0.6))

    out = generate(
        model, codec, caption="context", task="outpaint",
        reference_audio=ref, keep_spans=[(0.0, 0.5)], steps=10, seed=0,
    )
    keep_frames = int(round(0.5 * 44100 / codec.frame_size))
    keep_samples = keep_frames * codec.frame_size
    assert np.abs(out.audio[:keep_samples] - ref[:keep_samples]).max() <= 1e-4

    rng = np.random.default_rng(0)
    for _ in range(50):
        masks = sample_training_masks(rng, (97, 50, 211))
        for mask in masks:
            comp = complementary_mask(mask, len(mask.keep))
            assert not (mask.keep & comp.keep).any()
            assert (mask.keep | comp.keep).all()

    m = codec.frame_count(len(ref))
    latent = codec.encode(ref).frames * cfg.latent_scale
    final = sample(
        model, m, cfg.latent_channels, SampleInputs(), GuidanceScales(),
        steps=8, mode="naive_masking", reference=latent, keep_mask=np.ones(m, dtype=bool),
        rng=np.random.default_rng(1),
    )
    np.testing.assert_array_equal(final, latent)


# --- AC-11: determinism ------------------------------------------------------------------


@criterion("AC-11 generate determinism")
def test_ac11_generate_determinism(tmp_path):
    cfg = ModelConfig(blocks=2)
    model, codec = build_model(cfg, seed=0)
    ckpt = tmp_path / "det.ckpt"
    save_checkpoint(ckpt, model, codec, meta={"adapter": "attr"})

    outs = []
    for i, threads in enumerate(("1", "2")):
        wav = tmp_path / f"det{i}.wav"
        env = dict(os.environ, OMP_NUM_THREADS=threads, MKL_NUM_THREADS=threads)
        proc = subprocess.run(
            [sys.executable, "-m", "audiocond.cli", "generate", "--ckpt", str(ckpt),
             "--caption", "determinism probe", "--seconds", "0.5", "--steps", "10",
             "--seed", "11", "--out", str(wav)],
            env=env, capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        outs.append(wav)
    assert filecmp.cmp(outs[0], outs[1], shallow=False)
    # and a third run in-process matches too
    from audiocond.cli import main

    wav3 = tmp_path / "det3.wav"
    assert main(["generate", "--ckpt", str(ckpt), "--caption", "determinism probe",
                 "--seconds", "0.5", "--steps", "10", "--seed", "11", "--out", str(wav3)]) == 0
    assert filecmp.cmp(outs[0], wav3, shallow=False)
