"""Acceptance gate: one test per criterion, each recording a pass/fail line.

The model-dependent criteria share one toy model trained inside the session
(500 synthetic sequences, 2000 iterations), so this module takes roughly
twenty minutes on one CPU core.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest
import torch

from groupchoreo.diffusion import (
    GuidanceConfig,
    build_cosine_schedule,
    posterior_mean_variance,
    q_sample,
    reverse_step_ddim,
    reverse_step_ddpm,
)
from groupchoreo.longform import (
    generate_long,
    match_dancers_bruteforce,
    match_dancers_hungarian,
    rotation_jumps,
    seam_frames,
)
from groupchoreo.metrics import (
    frechet_distance,
    generation_diversity,
    gmc,
    gmr,
    mmc_beat_alignment,
    motion_change_curve,
    tif,
)
from groupchoreo.model import GCDModel
from groupchoreo.motion import GroupSequence, MotionSequence, Pose
from groupchoreo.network import DenoiserNet, ModelConfig, MultiHeadAttention, global_mask, local_mask
from groupchoreo.sampling import audio_tensor, draw_initial, sample_batch, score_samples, seeded_generators
from groupchoreo.synth import (
    SynthDatasetSpec,
    build_dataset,
    generate_group_dance,
    generate_music_track,
)
from groupchoreo.contrastive import guidance_gradient
from groupchoreo.training import TrainConfig, Trainer, load_manifest

pytestmark = pytest.mark.slow

TINY = ModelConfig.toy(d=16, n_heads=2, L=1, ff_size=32, mlp_hidden=16, M=20)


# ---------------------------------------------------------------------------
# criterion 1


def test_c01_diffusion_identities(record):
    start = time.perf_counter()
    sched = build_cosine_schedule(100)
    rng = np.random.default_rng(0)
    x0, xm = rng.normal(size=(2, 500))
    mean, _ = posterior_mean_variance(x0, xm, 1, sched)
    err_post = float(np.abs(mean - x0).max())

    g = torch.Generator().manual_seed(0)
    x0_t = torch.randn(8, 147, dtype=torch.float64, generator=g)
    eps = torch.randn(8, 147, dtype=torch.float64, generator=g)
    err_ddim = max(
        (reverse_step_ddim(q_sample(x0_t, m, eps, sched), x0_t, m, 0, sched) - x0_t).abs().max().item()
        for m in range(1, 101)
    )

    worst_var = 0.0
    for m in (5, 25, 50, 75, 95):
        noise = torch.randn(20_000, dtype=torch.float64, generator=g)
        v = q_sample(torch.zeros(20_000, dtype=torch.float64), m, noise, sched).var().item()
        worst_var = max(worst_var, abs(v / (1 - sched.alpha_bar[m]) - 1))
    elapsed = time.perf_counter() - start
    ok = err_post < 1e-6 and err_ddim < 1e-5 and worst_var < 0.03 and elapsed < 10
    record(1, ok, f"posterior err {err_post:.1e}, DDIM err {err_ddim:.1e}, "
                  f"MC variance rel err {worst_var:.3f}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# criterion 4


def test_c04_mask_isolation(record):
    start = time.perf_counter()
    torch.manual_seed(0)
    attn = MultiHeadAttention(16, 4).double()
    N, T = 3, 10
    x = torch.randn(2, N * T, 16, dtype=torch.float64)
    y = x.clone()
    y[:, 2 * T:] += torch.randn(2, T, 16, dtype=torch.float64)  # perturb the last dancer only
    with torch.no_grad():
        leak_local = (attn(x, x, local_mask(N, T)) - attn(y, y, local_mask(N, T)))[:, : 2 * T].abs().max().item()
        leak_global = (attn(x, x, global_mask(N, T)) - attn(y, y, global_mask(N, T)))[:, : 2 * T].abs().max().item()
    # the full denoiser with group attention disabled keeps dancers isolated too
    cfg = ModelConfig.toy(d=16, n_heads=2, L=2, ff_size=32, mlp_hidden=16, M=20, use_group_attention=False)
    net = DenoiserNet(cfg).double()
    g = torch.Generator().manual_seed(1)
    xs = torch.randn(1, N, T, 147, dtype=torch.float64, generator=g)
    audio = torch.randn(1, T, cfg.D_a, dtype=torch.float64, generator=g)
    z = torch.randn(1, cfg.d, dtype=torch.float64, generator=g)
    ys = xs.clone()
    ys[:, 2] += torch.randn(T, 147, dtype=torch.float64, generator=g)
    with torch.no_grad():
        leak_net = (net.denoise(xs, 5, audio, z) - net.denoise(ys, 5, audio, z))[:, :2].abs().max().item()
    elapsed = time.perf_counter() - start
    ok = leak_local < 1e-6 and leak_net < 1e-6 and leak_global > 0 and elapsed < 1
    record(4, ok, f"local leakage {leak_local:.1e} (denoiser {leak_net:.1e}), global leakage {leak_global:.3f}, "
                  f"{elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# criterion 5


def _central_difference_check(fn, params, n_coords: int, rng, h: float = 1e-6, min_grad: float = 1e-5):
    """Worst relative error over ``n_coords`` coordinates whose analytic gradient exceeds ``min_grad``."""
    for p in params:
        p.grad = None
    fn().backward()
    candidates = [(p, idx) for p in params if p.grad is not None
                  for idx in zip(*np.nonzero(p.grad.abs().numpy() > min_grad))]
    picks = rng.choice(len(candidates), size=min(n_coords, len(candidates)), replace=False)
    worst = 0.0
    for k in picks:
        p, idx = candidates[k]
        idx = tuple(int(i) for i in idx)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = fn().item()
            p[idx] = orig - h
            down = fn().item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return worst, len(picks)


def test_c05_gradient_correctness(record):
    start = time.perf_counter()
    audio = [generate_music_track(110 + 5 * i, 1, 30, seed=i) for i in range(3)]
    dataset = [(a, generate_group_dance(a, 2, 0.5, seed=i)) for i, a in enumerate(audio)]
    model = GCDModel(TINY, seed=0).double()
    # full gradient through the denoised negatives, so the objective matches its finite differences
    cfg = TrainConfig(batch_size=3, T=12, M=20, n_negatives=4, seed=0, checkpoint_every=0, nce_negative_grad=True)
    tr = Trainer(cfg, dataset, model=model)
    x0, aud = tr.sampler.sample(np.random.default_rng(0))
    x0, aud = x0.double(), aud.double()

    def loss(keys):
        def fn():
            tr.gen.manual_seed(7)
            tr.rng = np.random.default_rng(7)
            comps = tr.compute_losses(x0, aud)
            return sum(comps[k] for k in keys)
        return fn

    params = list(model.parameters())
    rng = np.random.default_rng(0)
    results = {
        "L_simple": _central_difference_check(loss(["l_simple"]), params, 20, rng),
        "L_geo": _central_difference_check(loss(["l_pos", "l_vel", "l_foot"]), params, 20, rng),
        "L_nce": _central_difference_check(loss(["l_nce"]), params, 20, rng),
    }
    # training default: negatives denoised without gradient, which leaves the encoder gradient exact
    tr.cfg = TrainConfig(**{**cfg.to_dict(), "nce_negative_grad": False})
    results["L_nce encoder, default"] = _central_difference_check(loss(["l_nce"]), list(model.encoder.parameters()), 20, rng)
    # guidance gradient with respect to the noisy sample
    x = torch.randn(1, 2, 12, 147, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    w = torch.randn(1, TINY.d, dtype=torch.float64)
    grad = guidance_gradient(x, w, 6, model.encoder)
    worst_g, count_g = 0.0, 0
    for _ in range(20):
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        up, down = x.clone(), x.clone()
        up[idx] += 1e-6
        down[idx] -= 1e-6
        with torch.no_grad():
            numeric = (model.encoder(up, w, 6) - model.encoder(down, w, 6)).item() / 2e-6
        worst_g = max(worst_g, abs(grad[idx].item() - numeric) / max(abs(grad[idx].item()), abs(numeric), 1e-12))
        count_g += 1
    results["guidance"] = (worst_g, count_g)
    elapsed = time.perf_counter() - start
    ok = all(err < 1e-3 and n >= 20 for err, n in results.values()) and elapsed < 120
    detail = ", ".join(f"{k} {err:.1e} ({n} coords)" for k, (err, n) in results.items())
    record(5, ok, f"worst relative error: {detail}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# criterion 6


def test_c06_hungarian_optimality(record):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        cost = rng.uniform(0, 5, size=(5, 5))
        if match_dancers_hungarian(cost).cost != match_dancers_bruteforce(cost).cost:
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 5
    record(6, ok, f"{mismatches}/200 mismatches against exhaustive search, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# criterion 7


def _root_path(x, z=None):
    data = np.tile(Pose.identity((0.0, 0.975, 0.0)).flatten(), (len(x), 1))
    data[:, 0] = x
    if z is not None:
        data[:, 2] = z
    return data


def test_c07_metric_oracles(record):
    start = time.perf_counter()
    checks = {}
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(64, 24))
    checks["FID identical"] = frechet_distance(feats, feats) < 1e-5
    audio = generate_music_track(120, 3, 30, seed=0)
    groups = [generate_group_dance(audio, 3, 0.6, seed=s) for s in range(4)]
    checks["GMR identical"] = gmr(groups, groups) < 1e-5
    a = np.array([-1.0, 1.0]) / math.sqrt(2)
    checks["Frechet 1-D mean shift"] = abs(frechet_distance(a, a + 1) - 1) < 1e-6
    checks["Frechet 1-D scale"] = abs(frechet_distance(a, 3 * a) - 4) < 1e-6
    t = np.arange(150)
    locked = MotionSequence(_root_path(-0.3 * np.cos(np.pi * t / 15)))
    checks["MMC beat-locked"] = mmc_beat_alignment(locked, list(range(0, 150, 15))) == 1.0
    synced = generate_group_dance(audio, 2, 1.0, seed=3)
    checks["MMC synthetic beat-locked dance"] = all(
        mmc_beat_alignment(d, audio.beat_frames) >= 0.95 for d in synced.dancers
    )
    offset = MotionSequence(_root_path(0.001 * (np.arange(80) - 40.0) ** 2))
    checks["MMC sigma offset"] = abs(mmc_beat_alignment(offset, [43]) - math.exp(-0.5)) < 1e-6
    line = np.linspace(0, 3, 50)
    apart = GroupSequence(np.stack([_root_path(line), _root_path(line, np.full(50, 2.0))]))
    together = GroupSequence(np.stack([_root_path(line), _root_path(line)]))
    checks["TIF separated"] = tif(apart) == 0
    checks["TIF co-located"] = tif(together) == 1
    clone = synced.data[:1].repeat(3, axis=0)
    checks["GMC clones"] = abs(gmc(GroupSequence(clone)) - 100) < 1e-6
    elapsed = time.perf_counter() - start
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and elapsed < 30
    record(7, ok, f"{len(checks) - len(failed)}/{len(checks)} oracles hold"
                  + (f" (failed: {', '.join(failed)})" if failed else "") + f", {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# shared toy model for criteria 2, 3, 8 and 9

TOY_RUN = dict(iterations=2000, learning_rate=2e-3, batch_size=24, seed=0, checkpoint_every=0)
TOY_DANCERS = (2, 3)
N_SEEDS = 20
EVAL_DANCERS, EVAL_FRAMES = 3, 60


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    build_dataset(SynthDatasetSpec(n_sequences=500, n_dancers_range=TOY_DANCERS, seed=0), root / "train")
    build_dataset(SynthDatasetSpec(n_sequences=50, n_dancers_range=TOY_DANCERS, seed=1), root / "heldout")
    return load_manifest(root / "train" / "manifest.json"), load_manifest(root / "heldout" / "manifest.json")


@pytest.fixture(scope="module")
def toy_run(toy_data):
    trainer = Trainer(TrainConfig(**TOY_RUN), toy_data[0])
    start = time.perf_counter()
    trainer.run()
    return trainer, time.perf_counter() - start


@pytest.fixture(scope="module")
def toy_model(toy_run):
    model = toy_run[0].model
    model.eval()
    return model


@pytest.fixture(scope="module")
def eval_audio():
    return generate_music_track(120, EVAL_FRAMES / 30, 30, seed=123)


@pytest.fixture(scope="module")
def guided(toy_model, eval_audio):
    """Per-seed contrastive score, GMC and GenDiv at each guidance weight (DDIM, 50 steps)."""
    seeds = list(range(N_SEEDS))
    out = {}
    for gamma in (-1.0, 0.0, 1.0):
        start = time.perf_counter()
        groups = sample_batch(toy_model, eval_audio, EVAL_DANCERS, EVAL_FRAMES, "ddim", 50, gamma, seeds=seeds)
        out[gamma] = {
            "score": score_samples(toy_model, groups, eval_audio, seeds),
            "gmc": np.array([gmc(g) for g in groups]),
            "gendiv": np.array([generation_diversity(g.dancers) for g in groups]),
            "seconds": time.perf_counter() - start,
        }
    return out


def _paired(a, b):
    """Mean and standard error of the per-seed difference ``a - b``."""
    d = np.asarray(a) - np.asarray(b)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(len(d)))


# ---------------------------------------------------------------------------
# criterion 8


def test_c08_toy_training_convergence(record, toy_run, toy_data):
    trainer, elapsed = toy_run
    l_simple = [row["l_simple"] for row in trainer.history]
    first, final = float(np.mean(l_simple[:10])), float(np.mean(l_simple[-10:]))
    held = Trainer(TrainConfig(**{**TOY_RUN, "seed": 1}), toy_data[1], model=trainer.model).evaluate(20)
    ok = (len(l_simple) == 2000 and elapsed <= 30 * 60 and final <= 0.5 * first and held["margin"] > 0)
    record(8, ok, f"L_simple {first:.3f} -> {final:.3f} (ratio {final / first:.3f}), "
                  f"held-out margin {held['margin']:.3f}, {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------------------
# criterion 2


def test_c02_guidance_neutrality_and_direction(record, toy_model, eval_audio, guided):
    start = time.perf_counter()
    # gamma = 0 with an encoder attached is the unguided step, bit for bit
    sched, enc = toy_model.schedule, toy_model.encoder
    g = torch.Generator().manual_seed(5)
    x = torch.randn(2, EVAL_DANCERS, 20, 147, generator=g)
    x0_hat = torch.randn(2, EVAL_DANCERS, 20, 147, generator=g)
    w = torch.randn(2, toy_model.cfg.d, generator=g)
    neutral = GuidanceConfig(0.0, lambda xm, m: enc(xm, w, m))
    step_equal = all(
        torch.equal(reverse_step_ddpm(x, x0_hat, m, sched, neutral, torch.Generator().manual_seed(m)),
                    reverse_step_ddpm(x, x0_hat, m, sched, None, torch.Generator().manual_seed(m)))
        for m in range(1, sched.M + 1)
    )
    # the full sampler at gamma = 0 against a hand-written unguided chain with the same generators
    seeds = [0, 1]
    gens = seeded_generators(seeds)
    xt, z = draw_initial(gens, (EVAL_DANCERS, EVAL_FRAMES, 147), toy_model.cfg.d)
    with torch.no_grad():
        feats = audio_tensor(eval_audio, EVAL_FRAMES).unsqueeze(0).expand(len(seeds), -1, -1)
        tokens = toy_model.denoiser.encode_music(feats)
        wt = toy_model.denoiser.group_embedding(tokens, EVAL_DANCERS, z)
        for m in range(sched.M, 0, -1):
            xt = reverse_step_ddpm(xt, toy_model.denoiser(xt, m, tokens, wt), m, sched, None, gens)
    manual = toy_model.denormalize(xt).double().numpy()
    sampled = sample_batch(toy_model, eval_audio, EVAL_DANCERS, EVAL_FRAMES, "ddpm", gamma=0.0, seeds=seeds,
                           return_array=True)
    chain_equal = np.array_equal(manual, sampled)

    means = [float(guided[gm]["score"].mean()) for gm in (-1.0, 0.0, 1.0)]
    elapsed = time.perf_counter() - start + sum(v["seconds"] for v in guided.values())
    ok = step_equal and chain_equal and means[0] < means[1] < means[2] and elapsed < 300
    record(2, ok, f"gamma=0 bitwise equal to unguided: steps {step_equal}, sampler {chain_equal}; "
                  f"mean score over {N_SEEDS} seeds at gamma -1/0/+1: "
                  + "/".join(f"{v:.3f}" for v in means) + f", {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# criterion 3


def test_c03_consistency_diversity_tradeoff(record, guided):
    div_diff, div_se = _paired(guided[-1.0]["gendiv"], guided[1.0]["gendiv"])
    gmc_diff, gmc_se = _paired(guided[1.0]["gmc"], guided[-1.0]["gmc"])
    ok = div_diff > div_se and gmc_diff > gmc_se
    record(3, ok, f"GenDiv(-1) - GenDiv(+1) = {div_diff:.3f} (SE {div_se:.3f}); "
                  f"GMC(+1) - GMC(-1) = {gmc_diff:.3f} (SE {gmc_se:.3f}); {N_SEEDS} paired seeds")
    assert ok


# ---------------------------------------------------------------------------
# criterion 9


def test_c09_long_form_non_degeneracy(record, toy_model):
    start = time.perf_counter()
    audio = generate_music_track(120, 60, 30, seed=7)
    group, plan = generate_long(toy_model, audio, 3, window_frames=TrainConfig().T, sampler="ddim", n_ddim_steps=50,
                                gamma=0.5, seed=0, return_plan=True)
    curve = motion_change_curve(group, 30)
    first, last = float(curve[:300].mean()), float(curve[-300:].mean())
    jumps = rotation_jumps(group)
    seam_idx = np.array(seam_frames(plan)) - 1  # jumps[t - 1] is the transition into frame t
    at_seams = np.zeros(len(jumps), dtype=bool)
    at_seams[seam_idx] = True
    seam_max, off_max = float(jumps[at_seams].max()), float(jumps[~at_seams].max())
    elapsed = time.perf_counter() - start
    ok = group.n_frames == 1800 and last >= 0.5 * first and seam_max <= 2 * off_max
    record(9, ok, f"motion change last/first 10 s = {last:.3f}/{first:.3f} ({last / first:.2f}); "
                  f"seam jump max {seam_max:.3f} rad vs off-seam max {off_max:.3f} rad over {len(plan)} windows, "
                  f"{elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# criterion 10

ABLATION_RUN = dict(iterations=300, learning_rate=2e-3, batch_size=8, seed=0, checkpoint_every=0)
ABLATIONS = {
    "full": {},
    "no group attention": {"use_group_attention": False},
    "no L_geo / L_nce": {"use_geo": False, "use_nce": False},
}


def test_c10_ablation_plumbing(record, toy_data, eval_audio):
    start = time.perf_counter()
    seeds = list(range(N_SEEDS))
    stats = {}
    for name, flags in ABLATIONS.items():
        trainer = Trainer(TrainConfig(**ABLATION_RUN, **flags), toy_data[0])
        trainer.run()
        groups = sample_batch(trainer.model, eval_audio, EVAL_DANCERS, EVAL_FRAMES, "ddim", 50, 0.0, seeds=seeds)
        values = np.array([gmc(g) for g in groups])
        stats[name] = (float(values.mean()), float(values.std(ddof=1) / math.sqrt(len(values))))
    full_mean, full_se = stats["full"]
    gaps = {name: (abs(m - full_mean), 2 * math.hypot(se, full_se)) for name, (m, se) in stats.items() if name != "full"}
    elapsed = time.perf_counter() - start
    ok = all(gap > bar for gap, bar in gaps.values())
    record(10, ok, "GMC " + ", ".join(f"{k} {m:.2f}±{se:.2f}" for k, (m, se) in stats.items())
                   + "; |gap| vs 2 SE: " + ", ".join(f"{k} {g:.2f}/{b:.2f}" for k, (g, b) in gaps.items())
                   + f"; {elapsed:.0f}s")
    assert ok
