"""Release gate: one test per acceptance criterion, one PASS/FAIL line each.

Each test prints a single ``ACCEPT <name>: PASS/FAIL (...)`` verdict (visible
with ``pytest -s``) and then asserts it.  The two criteria that need real
training time are marked ``slow``; everything else finishes in seconds to a
few minutes on one CPU core.
"""

import dataclasses
import json
import math
import os
import statistics

import numpy as np
import pytest
import torch

from ndgan.kernels import (
    GlobalFeatureCache,
    compute_global_features,
    estimate_sampling_error,
    make_kernel,
    metrics_kernel,
)
from ndgan.losses import (
    FeatureProjection,
    LossWeights,
    adversarial_losses,
    dime_loss,
    nickel_loss,
    total_loss,
)
from ndgan.metrics import (
    density_coverage,
    frechet_distance,
    generator_features,
    precision_recall,
    score_features,
)
from ndgan.nets import (
    build_network,
    compression_rate,
    discriminator_spec,
    generator_spec,
    load_checkpoint,
    parameter_hash,
)
from ndgan.train import TrainConfig, distill, train_teacher
from ndgan.wavelet import haar_decompose, haar_reconstruct


def _verdict(name: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPT {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# 1. compression-rate arithmetic against the published teacher/student budgets


def test_compression_arithmetic():
    big = compression_rate(14.90e9, 1.38e9) * 100.0
    small = compression_rate(14.90e9, 0.16e9) * 100.0
    ok = abs(big - 90.7) <= 0.1 and abs(small - 98.9) <= 0.1
    _verdict("compression-arithmetic", ok, f"{big:.2f}% and {small:.2f}%")


# ---------------------------------------------------------------------------
# 2. wavelet analysis: perfect reconstruction, energy conservation, hand case


def test_wavelet_reconstruction_energy_and_hand_case():
    torch.manual_seed(0)
    x = torch.randn(2, 3, 16, 16)
    bands = haar_decompose(x)
    recon_err = float((haar_reconstruct(bands) - x).abs().max())
    energy_in = float(x.pow(2).sum())
    energy_out = float(sum(b.pow(2).sum() for b in (bands.ll, bands.lh, bands.hl, bands.hh)))
    energy_rel = abs(energy_in - energy_out) / energy_in

    hand = haar_decompose(torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
    hand_ok = (
        float(hand.ll) == 5.0
        and float(hand.lh) == -2.0
        and float(hand.hl) == -1.0
        and float(hand.hh) == 0.0
    )
    ok = recon_err <= 1e-6 and energy_rel <= 1e-5 and hand_ok
    _verdict(
        "wavelet-suite",
        ok,
        f"recon {recon_err:.2e}, energy rel {energy_rel:.2e}, 2x2 exact {hand_ok}",
    )


# ---------------------------------------------------------------------------
# 3. every loss gradient matches central finite differences in float64


def _scalar(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def _input_grad_rel_err(fn, x0: torch.Tensor, h: float = 1e-6) -> float:
    """Max |FD - autograd| over max |autograd| for grads w.r.t. the input."""
    xg = x0.detach().clone().requires_grad_(True)
    (auto,) = torch.autograd.grad(fn(xg), xg)
    auto = auto.reshape(-1)
    flat = x0.detach().clone().reshape(-1)
    fd = torch.empty_like(flat)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        hi = _scalar(fn(flat.reshape(x0.shape)))
        flat[i] = orig - h
        lo = _scalar(fn(flat.reshape(x0.shape)))
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * h)
    scale = max(float(auto.abs().max()), 1e-10)
    return float((fd - auto).abs().max()) / scale


def _param_grad_rel_err(loss_fn, module: torch.nn.Module, h: float = 1e-6) -> float:
    """Same comparison for grads w.r.t. every parameter of ``module``."""
    params = list(module.parameters())
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    auto = torch.cat(
        [
            (g if g is not None else torch.zeros_like(p)).reshape(-1)
            for g, p in zip(grads, params)
        ]
    )
    fd = torch.empty_like(auto)
    pos = 0
    for p in params:
        view = p.data.reshape(-1)
        for i in range(view.numel()):
            orig = float(view[i])
            view[i] = orig + h
            hi = _scalar(loss_fn())
            view[i] = orig - h
            lo = _scalar(loss_fn())
            view[i] = orig
            fd[pos] = (hi - lo) / (2.0 * h)
            pos += 1
    scale = max(float(auto.abs().max()), 1e-10)
    return float((fd - auto).abs().max()) / scale


def test_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    kernel = make_kernel("fd-check", "percept", seed=31, feature_dim=6, input_size=8)
    kernel.extractor.double()
    d_teacher = build_network(discriminator_spec(8, 2), seed=41).double()
    d_student = build_network(discriminator_spec(8, 2), seed=42).double()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64) * 0.5
    t_imgs = torch.randn(2, 3, 8, 8, dtype=torch.float64) * 0.5
    cache = GlobalFeatureCache(
        kernel_name="fd-check",
        mean_feature=np.linspace(-0.2, 0.3, 6),
        num_samples=64,
        generator_checkpoint_hash="fd",
        created_at="now",
    )
    t_feats = [torch.randn(2, 2, 4, 4, dtype=torch.float64)]
    proj = FeatureProjection([((2, 4), (2, 4))], seed=5).double()
    weights = LossWeights(lambda_dime_a=2.0, lambda_dime_b=1.5, lambda_nickel=1.0, r1_gamma=0.3)

    def composed(img):
        adv = adversarial_losses(t_imgs, img, d_teacher, d_student, compute="generator")
        _, taps = d_student(img)
        nick = nickel_loss(t_feats, taps, proj)
        da = dime_loss(kernel, img, global_cache=cache, mode="global")
        db = dime_loss(kernel, img, teacher_images=t_imgs, mode="paired")
        return total_loss(adv.g_teacher, adv.g_student, da, db, nick, weights).total

    errs = {
        "dime-paired": _input_grad_rel_err(
            lambda img: dime_loss(kernel, img, teacher_images=t_imgs, mode="paired"), x
        ),
        "dime-global": _input_grad_rel_err(
            lambda img: dime_loss(kernel, img, global_cache=cache, mode="global"), x
        ),
        "nickel": _input_grad_rel_err(
            lambda img: nickel_loss(t_feats, d_student(img)[1], proj), x
        ),
        "adv-generator": _input_grad_rel_err(
            lambda img: adversarial_losses(
                t_imgs, img, d_teacher, d_student, compute="generator"
            ).g_loss,
            x,
        ),
        "adv-discriminator": _param_grad_rel_err(
            lambda: adversarial_losses(
                t_imgs, x, d_teacher, d_student, r1_gamma=0.3, compute="discriminator"
            ).ds_loss,
            d_student,
        ),
        "total": _input_grad_rel_err(composed, x),
    }
    worst = max(errs.values())
    ok = worst < 1e-4
    _verdict(
        "gradient-suite",
        ok,
        ", ".join(f"{k} {v:.2e}" for k, v in errs.items()),
    )


# ---------------------------------------------------------------------------
# 4. metric oracles: closed-form Gaussians, brute-force kNN, invariances


def _brute_knn(real, fake, k):
    def dist(p, q):
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, q)))

    def radius(points, i):
        return sorted(dist(points[i], points[j]) for j in range(len(points)) if j != i)[k - 1]

    real_r = [radius(real, i) for i in range(len(real))]
    fake_r = [radius(fake, j) for j in range(len(fake))]
    precision = np.mean([any(dist(f, r) <= real_r[i] for i, r in enumerate(real)) for f in fake])
    recall = np.mean([any(dist(r, f) <= fake_r[j] for j, f in enumerate(fake)) for r in real])
    density = sum(dist(f, r) <= real_r[i] for f in fake for i, r in enumerate(real)) / (
        k * len(fake)
    )
    coverage = np.mean([any(dist(f, r) <= real_r[i] for f in fake) for i, r in enumerate(real)])
    return float(precision), float(recall), float(density), float(coverage)


def test_metric_oracles():
    f1 = frechet_distance([0.0], [[1.0]], [1.0], [[1.0]])
    f2 = frechet_distance([0.0], [[1.0]], [0.0], [[4.0]])
    f3 = frechet_distance([0.0, 0.0], np.eye(2), [1.0, 1.0], np.eye(2))
    closed_ok = abs(f1 - 1.0) <= 1e-6 and abs(f2 - 1.0) <= 1e-6 and abs(f3 - 2.0) <= 1e-6

    rng = np.random.default_rng(7)
    real = rng.standard_normal((50, 3))
    fake = rng.standard_normal((50, 3)) * 1.2 + 0.1
    ours = (*precision_recall(real, fake, k=4), *density_coverage(real, fake, k=4))
    brute = _brute_knn(real.tolist(), fake.tolist(), 4)
    brute_ok = ours == brute

    perm = (
        *precision_recall(real[rng.permutation(50)], fake[rng.permutation(50)], k=4),
        *density_coverage(real[rng.permutation(50)], fake[rng.permutation(50)], k=4),
    )
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    shift = rng.standard_normal(3) * 4
    iso = (
        *precision_recall(real @ q.T + shift, fake @ q.T + shift, k=4),
        *density_coverage(real @ q.T + shift, fake @ q.T + shift, k=4),
    )
    invariance_ok = ours == perm and ours == iso

    ok = closed_ok and brute_ok and invariance_ok
    _verdict(
        "metric-oracles",
        ok,
        f"closed-form {closed_ok}, brute-force {brute_ok}, invariance {invariance_ok}",
    )


# ---------------------------------------------------------------------------
# 5. mean-embedding sampling error follows ~N^(-1/2)


def test_sampling_error_power_law():
    kernel = make_kernel("slope-check", "percept", seed=11, feature_dim=16, input_size=16)
    gen = build_network(generator_spec(16, 8, 16), seed=77)
    reference = compute_global_features(kernel, gen, num_samples=65536, batch_size=512, seed=9)
    curve = estimate_sampling_error(
        kernel, gen, sample_sizes=[256, 1024, 4096, 16384], trials=3, reference=reference
    )
    slope = curve.loglog_slope()
    ok = -0.7 <= slope <= -0.3
    _verdict("sampling-error-law", ok, f"log-log slope {slope:.3f}")


# ---------------------------------------------------------------------------
# 6. distilling a teacher into an identical copy costs nothing


def test_identity_distillation_is_free():
    spec = generator_spec(32, 32, 64)
    teacher = build_network(spec, seed=90)
    student = build_network(spec, seed=90)
    kernel = make_kernel("identity-check", "percept", seed=101, input_size=32)

    from ndgan.data import sample_latents

    z = sample_latents(64, 32, 900, "identity-check")
    with torch.no_grad():
        t_imgs = teacher(z)
        s_imgs = student(z)
    paired = float(dime_loss(kernel, s_imgs, teacher_images=t_imgs, mode="paired"))

    mk = metrics_kernel(32)
    feats_a = generator_features(mk, teacher, 1024, seed=900, stream_id="identity/a")
    feats_b = generator_features(mk, student, 1024, seed=900, stream_id="identity/b")
    noise_fid = score_features(feats_a, feats_b).fid

    ok = paired == 0.0 and noise_fid < 0.5
    _verdict("identity-distillation", ok, f"paired loss {paired}, self FID {noise_fid:.4f}")


# ---------------------------------------------------------------------------
# 7/8. trend + stability at scale: shared desk protocol


# Shared settings for the two long-running trend/stability checks.  The
# embedding kernels are fitted on the task before distillation so their
# features carry task signal, and the R1 penalty is kept light for every
# method so differences in equilibrium drift come from the distillation
# terms rather than from gradient damping.
DESK_PROTOCOL = dict(
    steps=1200,
    eval_every=50,
    dime_mode="both",
    kernel_fit_steps=200,
    global_samples=8192,
    global_batch=256,
    weights=LossWeights(lambda_dime_a=2.0, lambda_dime_b=1.5, lambda_nickel=20.0, r1_gamma=0.05),
)
DISTILL_SEEDS = (11, 12, 13)


@pytest.fixture(scope="module")
def desk_teacher(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("desk") / "teacher")
    cfg = TrainConfig(steps=1200, eval_every=100, seed=0, global_samples=8192, global_batch=256)
    result = train_teacher(cfg, out)
    assert result.status == "completed"
    return cfg, os.path.join(out, "ckpt-final")


def _run_distill(base_cfg, teacher_ckpt, out_root, method, seed, target, **extra):
    cfg = dataclasses.replace(
        base_cfg, method=method, seed=seed, compression_target=target, **DESK_PROTOCOL, **extra
    )
    out = os.path.join(out_root, f"{method}-s{seed}-t{int(target * 100)}")
    return distill(cfg, teacher_ckpt, out)


@pytest.mark.slow
def test_method_ordering_at_moderate_compression(desk_teacher, tmp_path):
    base_cfg, teacher_ckpt = desk_teacher
    fids = {m: [] for m in ("nickel-dime", "dime", "adv-only")}
    drifts = {m: [] for m in fids}
    for seed in DISTILL_SEEDS:
        for method in fids:
            result = _run_distill(base_cfg, teacher_ckpt, str(tmp_path), method, seed, 0.90)
            assert result.status == "completed", f"{method} seed {seed} aborted"
            fids[method].append(result.best_fid)
            drifts[method].append(result.drift)
    med = {m: statistics.median(v) for m, v in fids.items()}
    med_drift = {m: statistics.median(v) for m, v in drifts.items()}
    ordering_ok = med["nickel-dime"] <= med["dime"] <= med["adv-only"]
    drift_ok = med_drift["nickel-dime"] < med_drift["adv-only"]
    _verdict(
        "trend-at-90pct",
        ordering_ok and drift_ok,
        "median FID "
        + ", ".join(f"{m} {med[m]:.4f}" for m in med)
        + "; median drift "
        + ", ".join(f"{m} {med_drift[m]:.3f}" for m in med_drift),
    )


@pytest.mark.slow
def test_extreme_compression_stability(desk_teacher, tmp_path):
    base_cfg, teacher_ckpt = desk_teacher
    ours = _run_distill(base_cfg, teacher_ckpt, str(tmp_path), "nickel-dime", 11, 0.99)
    baseline = _run_distill(base_cfg, teacher_ckpt, str(tmp_path), "adv-only", 11, 0.99)
    ours_ok = ours.status == "completed" and ours.diverged_at is None
    _verdict(
        "stability-at-99pct",
        ours_ok,
        f"nickel-dime {ours.status} (FID {ours.best_fid:.4f}); "
        f"adv-only {baseline.status} (FID {baseline.best_fid:.4f}, allowed to diverge)",
    )


# ---------------------------------------------------------------------------
# 9. identical seeds reproduce identical artifacts bit for bit


def test_rerun_reproducibility(tmp_path):
    cfg = TrainConfig(
        resolution=16,
        base_channels=8,
        latent_dim=16,
        batch_size=8,
        steps=4,
        eval_every=4,
        eval_samples=1000,
        log_every=2,
        global_samples=256,
        global_batch=128,
        compression_target=0.9,
        prune_tolerance=0.06,
        seed=5,
    )
    teacher_out = str(tmp_path / "teacher")
    train_teacher(cfg, teacher_out)
    teacher_ckpt = os.path.join(teacher_out, "ckpt-final")

    dcfg = dataclasses.replace(cfg, steps=3, method="nickel-dime")
    results, hashes, logs = [], [], []
    for tag in ("a", "b"):
        out = str(tmp_path / f"student-{tag}")
        results.append(distill(dcfg, teacher_ckpt, out))
        ckpt = load_checkpoint(os.path.join(out, "ckpt-final"))
        hashes.append(
            (
                parameter_hash(ckpt.build("generator")),
                parameter_hash(ckpt.build("student_discriminator")),
            )
        )
        with open(os.path.join(out, "losses.jsonl"), "rb") as fh:
            logs.append(fh.read())

    same_hashes = hashes[0] == hashes[1]
    same_logs = logs[0] == logs[1]
    same_report = results[0].report == results[1].report and (
        results[0].best_fid == results[1].best_fid
    )
    ok = same_hashes and same_logs and same_report
    _verdict(
        "reproducibility",
        ok,
        f"checkpoint hashes {same_hashes}, loss logs {same_logs}, reports {same_report}",
    )
