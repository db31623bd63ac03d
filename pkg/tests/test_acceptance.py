"""Acceptance criteria, one test each, with one printed PASS/FAIL line per criterion.

The training criteria (5 to 8) share session-scoped runs on a seeded synthetic
corpus, so the whole module takes the better part of an hour on one core.
"""

import math
import time
from collections import Counter

import numpy as np
import pytest
from conftest import record_criterion

from flowrestore import degrade, flow, metrics, nn
from flowrestore import tensor as T
from flowrestore.data import ClipRecord, read_manifest, write_manifest, write_synthetic_clips
from flowrestore.degrade import DegradationSpec, MixtureConfig
from flowrestore.flow import FieldToggles, FlowState, SolverSettings
from flowrestore.tensor import Tensor
from flowrestore.train import FrameCache, TrainConfig, TrainState, checkpoint_bytes, eval_pairs, evaluate, restore_batch, train

ITERATIONS = 2000
PROMPT_ITERATIONS = 600
NOISE = MixtureConfig.single("gaussian_noise", sigma=0.1)


def two_task_mix() -> MixtureConfig:
    weights = {"blur": 0.5, "noise": 0.5, "compression": 0.0, "weather": 0.0, "other": 0.0}
    kinds = {"blur": ["gaussian_blur"], "noise": ["gaussian_noise"], "compression": [], "weather": [], "other": []}
    mix = MixtureConfig(weights=weights, kinds=kinds, seed=7)
    mix.ranges["gaussian_blur"]["sigma"] = [1.5, 1.5]
    mix.ranges["gaussian_noise"]["sigma"] = [0.1, 0.1]
    mix.validate()
    return mix


# ---------------------------------------------------------------- shared fixtures


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """24 clips x 10 frames of 64x64 synthetic footage: 16 train, 1 val, 7 test clips."""
    root = tmp_path_factory.mktemp("acceptance_corpus")
    dirs = write_synthetic_clips(root / "clean", clips=24, frames_per_clip=10, size=64, seed=1)
    clips = []
    for i, d in enumerate(dirs):
        split = "train" if i < 16 else ("val" if i < 17 else "test")
        clips.append(ClipRecord(d.name, [f"clean/{d.name}/{f.name}" for f in sorted(d.iterdir())], 10, split))
    write_manifest(clips, root / "manifest.jsonl")
    return read_manifest(root / "manifest.jsonl")


def _timed_train(corpus, mix, config, arch=nn.ArchConfig(), out_dir=None):
    start = time.perf_counter()
    result = train(corpus, mix, config, arch, out_dir=out_dir)
    return result, time.perf_counter() - start


@pytest.fixture(scope="session")
def full_run(corpus, tmp_path_factory):
    cfg = TrainConfig(iterations=ITERATIONS, batch_size=4, lr=1e-4, crop=64, seed=0, toggles=FieldToggles())
    return _timed_train(corpus, NOISE, cfg, out_dir=tmp_path_factory.mktemp("full"))


@pytest.fixture(scope="session")
def simplified_run(corpus, tmp_path_factory):
    cfg = TrainConfig(iterations=ITERATIONS, batch_size=4, lr=1e-4, crop=64, seed=0, toggles=FieldToggles.preset("simplified"))
    return _timed_train(corpus, NOISE, cfg, out_dir=tmp_path_factory.mktemp("simplified"))


def _final_state(result):
    # evaluate the last iterate: the held-out split never influences training
    return result.state


# ---------------------------------------------------------------- 1: gradient audit


def test_c1_gradient_audit():
    start = time.perf_counter()
    arch = nn.ArchConfig()
    rng = np.random.default_rng(0)
    params = nn.init_params(arch, rng)
    x = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    target = Tensor(rng.uniform(size=(1, 3, 8, 8)))

    def loss():
        out, _ = flow.restore_frame(x, params, arch, SolverSettings(), FieldToggles())
        return T.l1_loss(out, target)

    err = T.finite_diff_check(loss, list(params.values()), h=1e-5, max_coords=64, rng=np.random.default_rng(1))
    elapsed = time.perf_counter() - start
    ok = err <= 1e-4 and elapsed < 60
    record_criterion(1, ok, f"max rel err {err:.2e} over 64 params (<= 1e-4), {elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 2: transport identity


def test_c2_momentum_transport_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    params = nn.init_params(nn.ArchConfig(levels=1, base_channels=4, prompt_dim=4), rng)
    worst = 0.0
    for _ in range(20):
        x_in = Tensor(rng.uniform(size=(2, 3, 16, 16)))
        anchor = Tensor(rng.normal(scale=2.0, size=(2, 3, 16, 16)))
        z = nn.PromptVector(Tensor(rng.uniform(0, 0.1, size=(2, 4, 1, 1))), 4, "literal")
        out, _ = flow.euler_integrate(x_in, anchor, z, SolverSettings(5, 0.2), FieldToggles.preset("momentum-only"), params)
        worst = max(worst, float(np.max(np.abs(out.data - anchor.data))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 1
    record_criterion(2, ok, f"max |x_T - anchor| {worst:.2e} (<= 1e-9), {elapsed:.3f}s (< 1s)")
    assert ok


# ---------------------------------------------------------------- 3: potential gradient


def test_c3_potential_gradient_and_tanh_bound():
    rng = np.random.default_rng(3)
    worst_fd = 0.0
    for _ in range(5):
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        anchor = Tensor(rng.normal(size=(1, 3, 4, 4)))
        # U is quadratic: central differences are exact up to rounding, so use the widest allowed step
        worst_fd = max(worst_fd, T.finite_diff_check(lambda: flow.potential(x, anchor), x, h=1e-3))
    arch = nn.ArchConfig(levels=2, base_channels=4, prompt_dim=4)
    params = nn.init_params(arch, rng)
    worst_tanh = 0.0
    for scale in (0.1, 1.0, 10.0, 100.0):
        x_in = Tensor(rng.uniform(size=(1, 3, 8, 8)))
        anchor = Tensor(rng.normal(scale=scale, size=(1, 3, 8, 8)))
        z = nn.prompt_generate(x_in, params, arch)
        _, trace = flow.euler_integrate(x_in, anchor, z, SolverSettings(), FieldToggles(), params, capture=True)
        for s in trace.steps[:-1]:
            state = FlowState(Tensor(s.x), anchor, T.sub(anchor, x_in), t=s.step)
            terms = flow.field_terms(state, z, FieldToggles(), params)
            worst_tanh = max(worst_tanh, float(np.max(np.abs(terms["potential"].data))))
    ok = worst_fd <= 1e-8 and worst_tanh < 1
    record_criterion(3, ok, f"potential grad rel err {worst_fd:.2e} (<= 1e-8), max |tanh term| {worst_tanh:.6f} (< 1)")
    assert ok


# ---------------------------------------------------------------- 4: decay


def test_c4_decay_behaviour():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    ok = True
    details = []
    for rate in (0.5, 1.0, 3.0):
        scales = [flow.decay_scale(FlowState(x, x, x, t=t, dt=0.2, decay_rate=rate), FieldToggles()) for t in range(6)]
        good = scales[0] == 1.0 and all(b < a for a, b in zip(scales, scales[1:]))
        ok &= good
        details.append(f"rate {rate}: {scales[0]:.0f}->{scales[-1]:.4f}")
    off = [flow.decay_scale(FlowState(x, x, x, t=t), FieldToggles(decay=False)) for t in range(6)]
    ok &= all(s == 1.0 for s in off)
    record_criterion(4, ok, "; ".join(details) + "; decay off constant 1")
    assert ok


# ---------------------------------------------------------------- 5: toy denoising


def _held_out(corpus, mix):
    return eval_pairs(corpus, "test", mix, FrameCache(corpus))


def _scores(state, pairs):
    restored = restore_batch(state, [p[1] for p in pairs])
    p_in = np.mean([metrics.psnr(p[1], p[2]) for p in pairs])
    p_out = np.mean([metrics.psnr(r, p[2]) for r, p in zip(restored, pairs)])
    s_in = np.mean([metrics.ssim(p[1], p[2]) for p in pairs])
    s_out = np.mean([metrics.ssim(r, p[2]) for r, p in zip(restored, pairs)])
    return p_in, p_out, s_in, s_out


@pytest.mark.slow
def test_c5_toy_training_efficacy(corpus, full_run):
    result, elapsed = full_run
    pairs = _held_out(corpus, NOISE)
    p_in, p_out, s_in, s_out = _scores(_final_state(result), pairs)
    ok = p_out - p_in >= 3.0 and s_out - s_in >= 0.05 and elapsed <= 900
    record_criterion(
        5,
        ok,
        f"held-out PSNR {p_in:.2f} -> {p_out:.2f} dB (gain {p_out - p_in:+.2f}, need >= 3), "
        f"SSIM {s_in:.4f} -> {s_out:.4f} (gain {s_out - s_in:+.4f}, need >= 0.05), "
        f"{ITERATIONS} iters in {elapsed / 60:.1f} min (<= 15)",
    )
    assert ok


# ---------------------------------------------------------------- 6: ablation direction


@pytest.mark.slow
def test_c6_full_beats_simplified(corpus, full_run, simplified_run):
    pairs = _held_out(corpus, NOISE)
    full = _scores(_final_state(full_run[0]), pairs)[1]
    simple = _scores(_final_state(simplified_run[0]), pairs)[1]
    ok = full >= simple + 0.3
    record_criterion(6, ok, f"full {full:.2f} dB vs simplified {simple:.2f} dB (need full >= simplified + 0.3)")
    assert ok


# ---------------------------------------------------------------- 7: monotone flow path


@pytest.mark.slow
def test_c7_flow_path_monotone(corpus, full_run):
    state = _final_state(full_run[0])
    pairs = _held_out(corpus, NOISE)
    monotone = 0
    with T.no_grad():
        for _, degraded, clean, _ in pairs:
            _, trace = flow.restore_frame(
                degraded, state.params, state.arch, state.config.solver, state.config.toggles, capture=True, target=clean
            )
            monotone += flow.is_monotone_nonincreasing(trace.l1_curve())
    frac = monotone / len(pairs)
    ok = frac >= 0.9
    record_criterion(7, ok, f"{monotone}/{len(pairs)} held-out frames ({frac:.0%}) have non-increasing l1 to ground truth (need >= 90%)")
    assert ok


# ---------------------------------------------------------------- 8: prompt separation


@pytest.mark.slow
def test_c8_prompt_separation(corpus, tmp_path_factory):
    mix = two_task_mix()
    arch = nn.ArchConfig(prompt_mode="pool_late")
    cfg = TrainConfig(iterations=PROMPT_ITERATIONS, batch_size=4, lr=1e-4, crop=64, seed=0)
    result, _ = _timed_train(corpus, mix, cfg, arch, out_dir=tmp_path_factory.mktemp("prompt"))
    state = result.state
    cache = FrameCache(corpus)
    items = []
    index = 0
    with T.no_grad():
        for clip in corpus.split("test"):
            for rel in clip.frames:
                # alternate the two tasks over held-out frames so every frame is used once
                kind = "gaussian_noise" if index % 2 == 0 else "gaussian_blur"
                params = {"sigma": 0.1} if kind == "gaussian_noise" else {"sigma": 1.5}
                degraded = degrade.apply(DegradationSpec(kind, params, seed=1000 + index), cache.get(rel))
                z = nn.prompt_generate(degraded, state.params, arch).z.data.ravel()
                items.append((z, kind))
                index += 1
    intra, inter, ratio = metrics.prompt_separation(items)
    ok = ratio >= 1.5 and len(items) >= 64
    record_criterion(8, ok, f"inter/intra = {inter:.4g}/{intra:.4g} = {ratio:.2f} on {len(items)} held-out frames (need >= 1.5)")
    assert ok


# ---------------------------------------------------------------- 9: metric oracles


def _naive_ssim(a, b):
    r = np.arange(11) - 5.0
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * 1.5**2))
    g /= g.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for c in range(a.shape[1]):
        for i in range(a.shape[2] - 10):
            for j in range(a.shape[3] - 10):
                pa, pb = a[0, c, i : i + 11, j : j + 11], b[0, c, i : i + 11, j : j + 11]
                ma, mb = (g * pa).sum(), (g * pb).sum()
                va, vb = (g * (pa - ma) ** 2).sum(), (g * (pb - mb) ** 2).sum()
                cov = (g * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_c9_metric_oracles():
    rng = np.random.default_rng(9)
    zero = np.zeros((1, 3, 16, 16))
    const = metrics.psnr(zero, zero + 0.5)
    x = rng.uniform(size=(1, 3, 16, 16))
    self_ssim = metrics.ssim(x, x)
    worst_p = worst_s = 0.0
    for _ in range(3):
        a = rng.uniform(size=(1, 3, 16, 16))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        mse = np.mean([(p - q) ** 2 for p, q in zip(a.ravel(), b.ravel())])
        worst_p = max(worst_p, abs(metrics.psnr(a, b) - 10 * math.log10(1 / mse)))
        worst_s = max(worst_s, abs(metrics.ssim(a, b) - _naive_ssim(a, b)))
    ok = abs(const - 6.0206) <= 1e-6
    ok &= abs(self_ssim - 1) <= 1e-12 and worst_p <= 1e-9 and worst_s <= 1e-6
    record_criterion(
        9,
        ok,
        f"PSNR const-diff {const:.6f} dB, SSIM(x,x)-1 = {self_ssim - 1:.1e}, "
        f"oracle gaps PSNR {worst_p:.1e} (<= 1e-9) SSIM {worst_s:.1e} (<= 1e-6)",
    )
    assert ok


# ---------------------------------------------------------------- 10: counters


def _hand_param_count() -> int:
    # reference config: 3 levels, widths 16/32/64, prompt width 16, literal prompts
    prompt = (3 * 32 + 32) + 2 * 32 + (32 * 16 + 16) + 2 * 16

    def block(cin, c):
        return (9 * cin * c + c) + 2 * c + (9 * c * c + c) + 2 * c + (16 * c + c) + 1

    encoder = block(3, 16) + (9 * 16 * 32 + 32) + block(32, 32) + (9 * 32 * 64 + 64) + block(64, 64)
    bottleneck = block(64, 64)
    decoder = (9 * 96 * 32 + 32) + block(32, 32) + (9 * 48 * 16 + 16) + block(16, 16)
    head = (9 * 16 * 3 + 3) + (16 * 3 + 3) + 1
    return prompt + encoder + bottleneck + decoder + head


def test_c10_counters(capsys):
    from flowrestore.cli import main

    assert main(["inspect", "-v", "--height", "64", "--width", "64"]) == 0
    out = capsys.readouterr().out
    printed = int(next(line for line in out.splitlines() if line.startswith("parameters:")).split()[1])
    layers = dict(nn.layer_macs(nn.ArchConfig(), 64, 64))
    hand_layers = {
        "enc0.conv1": 16 * 3 * 3 * 3 * 64 * 64,  # 3 -> 16 at full resolution
        "down1": 64 * 32 * 3 * 3 * 16 * 16,  # stride-2 conv 32 -> 64 onto 16x16
        "fuse0": 16 * 48 * 3 * 3 * 64 * 64,  # concat of 32 + 16 channels back to 16
    }
    printed_layers = {}
    for line in out.splitlines():
        parts = line.split()
        if len(parts) == 2 and parts[0] in hand_layers:
            printed_layers[parts[0]] = int(parts[1])
    hand = _hand_param_count()
    ok = printed == hand and all(layers[k] == v == printed_layers.get(k) for k, v in hand_layers.items())
    record_criterion(10, ok, f"inspect parameters {printed} vs hand count {hand}; MACs match on {sorted(hand_layers)}")
    assert ok


# ---------------------------------------------------------------- 11: determinism


def test_c11_determinism(corpus, tmp_path):
    arch = nn.ArchConfig(levels=2, base_channels=8, prompt_dim=8)
    cfg = TrainConfig(iterations=6, batch_size=2, crop=32, val_every=3, seed=5)
    a = train(corpus, NOISE, cfg, arch, out_dir=tmp_path / "a")
    b = train(corpus, NOISE, cfg, arch, out_dir=tmp_path / "b")
    same_ckpt = (tmp_path / "a" / "last.ufr").read_bytes() == (tmp_path / "b" / "last.ufr").read_bytes()
    pairs = _held_out(corpus, NOISE)[:4]
    r1 = restore_batch(a.state, [p[1] for p in pairs])
    r2 = restore_batch(b.state, [p[1] for p in pairs])
    same_restore = all(np.array_equal(x, y) for x, y in zip(r1, r2))
    ok = same_ckpt and same_restore and checkpoint_bytes(a.state) == checkpoint_bytes(b.state)
    record_criterion(11, ok, f"checkpoints byte-identical: {same_ckpt}; restores bitwise identical: {same_restore}")
    assert ok


# ---------------------------------------------------------------- 12: degradation statistics


def test_c12_degradation_statistics():
    mix = MixtureConfig(seed=12)
    counts = Counter(degrade.spec_at(mix, i).category for i in range(10_000))
    freqs = [counts[c] / 10_000 for c in degrade.CATEGORIES]
    targets = (0.30, 0.25, 0.20, 0.15, 0.10)
    freq_ok = all(abs(f - t) <= 0.02 for f, t in zip(freqs, targets))
    clean = np.full((1, 3, 128, 128), 0.5)
    sp = degrade.apply(DegradationSpec("salt_pepper", {"p": 0.1}, seed=12), clean).data
    frac = float(np.any(sp != 0.5, axis=1).mean())
    frame = np.random.default_rng(12).uniform(size=(1, 3, 32, 32))
    identity_ok = all(np.array_equal(degrade.apply(degrade.identity_spec(k), frame).data, frame) for k in degrade.PARAM_LIMITS)
    ok = freq_ok and abs(frac - 0.1) <= 0.01 and identity_ok
    record_criterion(
        12,
        ok,
        "frequencies " + ", ".join(f"{c} {f:.4f}" for c, f in zip(degrade.CATEGORIES, freqs))
        + f"; salt-pepper fraction {frac:.4f}; identity edges exact: {identity_ok}",
    )
    assert ok
