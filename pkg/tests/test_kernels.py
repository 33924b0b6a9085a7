import numpy as np
import pytest
import torch

from ndgan.data import sample_latents
from ndgan.errors import ConfigurationError, InputError, NumericError
from ndgan.kernels import (
    GlobalFeatureCache,
    SamplingErrorCurve,
    compute_global_features,
    default_kernels,
    embed,
    estimate_sampling_error,
    fit_classifier_kernel,
    get_or_compute_global_features,
    load_cache,
    make_kernel,
    metrics_kernel,
    save_cache,
)
from ndgan.nets import build_network, generator_spec


@pytest.fixture(scope="module")
def small_gen():
    return build_network(generator_spec(16, base_channels=8, latent_dim=8), seed=0)


def test_make_kernel_is_deterministic():
    a = make_kernel("k", "percept", seed=3, input_size=16)
    b = make_kernel("k", "percept", seed=3, input_size=16)
    c = make_kernel("k", "percept", seed=4, input_size=16)
    x = torch.randn(2, 3, 16, 16)
    assert torch.equal(a.embed(x), b.embed(x))
    assert not torch.equal(a.embed(x), c.embed(x))


def test_unknown_arch_rejected():
    with pytest.raises(ConfigurationError):
        make_kernel("k", "resnet152", seed=0)


def test_embed_shape_and_channel_check():
    k = make_kernel("k", "texture", seed=0, feature_dim=12, input_size=16)
    out = k.embed(torch.randn(5, 3, 16, 16))
    assert out.shape == (5, 12)
    with pytest.raises(InputError):
        k.embed(torch.randn(5, 1, 16, 16))
    with pytest.raises(InputError):
        k.embed(torch.randn(3, 16, 16))


def test_embed_resizes_mismatched_inputs():
    k = make_kernel("k", "percept", seed=0, input_size=16)
    out = k.embed(torch.randn(2, 3, 32, 32))
    assert out.shape == (2, k.feature_dim)


def test_embed_is_differentiable_but_kernel_is_frozen():
    k = make_kernel("k", "percept", seed=1, input_size=16)
    assert all(not p.requires_grad for p in k.extractor.parameters())
    x = torch.randn(2, 3, 16, 16, requires_grad=True)
    k.embed(x).sum().backward()
    assert x.grad is not None and float(x.grad.abs().sum()) > 0


def test_module_level_embed_delegates():
    k = make_kernel("k", "percept", seed=1, input_size=16)
    x = torch.randn(2, 3, 16, 16)
    assert torch.equal(embed(k, x), k.embed(x))


def test_default_and_metrics_kernels_are_distinct():
    a, b = default_kernels(16)
    m = metrics_kernel(16)
    names = {a.name, b.name, m.name}
    assert len(names) == 3
    x = torch.randn(2, 3, 16, 16)
    outs = [k.embed(x) for k in (a, b, m)]
    assert not torch.equal(outs[0], outs[1])
    assert not torch.equal(outs[0], outs[2])


def test_global_features_reproducible_and_hashed(small_gen):
    k = make_kernel("k", "percept", seed=2, input_size=16)
    c1 = compute_global_features(k, small_gen, 256, batch_size=64, seed=9)
    c2 = compute_global_features(k, small_gen, 256, batch_size=64, seed=9)
    np.testing.assert_array_equal(c1.mean_feature, c2.mean_feature)
    assert c1.num_samples == 256 and c1.kernel_name == "k"
    assert c1.generator_checkpoint_hash == c2.generator_checkpoint_hash


def test_global_mean_matches_reordered_summation(small_gen):
    # Recompute the same sample set by replaying the latent stream with the
    # batches visited in reverse; compensated accumulation keeps the means
    # equal to well under 1e-6 relative.
    k = make_kernel("k", "percept", seed=2, input_size=16)
    n, bs = 512, 64
    cache = compute_global_features(k, small_gen, n, batch_size=bs, seed=4)
    total = np.zeros(k.feature_dim, dtype=np.float64)
    with torch.no_grad():
        for step in reversed(range(n // bs)):
            z = sample_latents(small_gen.latent_dim, bs, 4, "global-features", step=step)
            total += k.embed(small_gen(z)).double().numpy().sum(axis=0)
    ref = total / n
    scale = np.abs(ref).max()
    assert np.abs(cache.mean_feature - ref).max() <= 1e-6 * max(scale, 1.0)


def test_global_mean_merges_across_halves(small_gen):
    k = make_kernel("k", "percept", seed=2, input_size=16)
    n, bs = 512, 64
    full = compute_global_features(k, small_gen, n, batch_size=bs, seed=4).mean_feature
    halves = []
    with torch.no_grad():
        for lo, hi in ((0, n // bs // 2), (n // bs // 2, n // bs)):
            acc = np.zeros(k.feature_dim, dtype=np.float64)
            for step in range(lo, hi):
                z = sample_latents(small_gen.latent_dim, bs, 4, "global-features", step=step)
                acc += k.embed(small_gen(z)).double().numpy().sum(axis=0)
            halves.append(acc / (n // 2))
    merged = (halves[0] + halves[1]) / 2
    assert np.abs(full - merged).max() <= 1e-6 * max(np.abs(full).max(), 1.0)


def test_global_features_validates_sizes(small_gen):
    k = make_kernel("k", "percept", seed=2, input_size=16)
    with pytest.raises(InputError):
        compute_global_features(k, small_gen, 16, batch_size=64)


class _NanGen:
    latent_dim = 8

    def __call__(self, z):
        img = torch.zeros(z.shape[0], 3, 16, 16)
        return img * float("nan")


def test_non_finite_features_name_the_batch():
    k = make_kernel("k", "percept", seed=2, input_size=16)
    with pytest.raises(NumericError, match="batch 0"):
        compute_global_features(k, _NanGen(), 128, batch_size=64)


def test_sampling_error_replay_is_exact(small_gen):
    k = make_kernel("k", "percept", seed=2, input_size=16)
    cache = compute_global_features(k, small_gen, 512, batch_size=128, seed=5)
    curve = estimate_sampling_error(k, small_gen, [512], trials=1, reference=cache)
    assert curve.errors[0] == 0.0


def test_sampling_error_shrinks_with_n(small_gen):
    k = make_kernel("k", "percept", seed=2, input_size=16)
    cache = compute_global_features(k, small_gen, 4096, batch_size=256, seed=5)
    curve = estimate_sampling_error(k, small_gen, [64, 1024], trials=2, reference=cache)
    assert curve.errors[1] < curve.errors[0]


def test_loglog_slope_recovers_power_law():
    curve = SamplingErrorCurve(sample_sizes=[256, 1024, 4096], errors=[1.0 / 16, 1.0 / 32, 1.0 / 64])
    assert curve.loglog_slope() == pytest.approx(-0.5, abs=1e-9)
    degenerate = SamplingErrorCurve(sample_sizes=[256, 1024], errors=[0.0, 0.0])
    with pytest.raises(NumericError):
        degenerate.loglog_slope()


def test_cache_save_load_round_trip(tmp_path, small_gen):
    k = make_kernel("k", "percept", seed=2, input_size=16)
    cache = compute_global_features(k, small_gen, 128, batch_size=64, seed=1)
    save_cache(cache, str(tmp_path))
    loaded = load_cache(
        str(tmp_path), cache.kernel_name, cache.generator_checkpoint_hash, cache.kernel_params_hash
    )
    assert loaded is not None
    np.testing.assert_array_equal(loaded.mean_feature, cache.mean_feature)
    assert loaded.num_samples == 128 and loaded.seed == 1 and loaded.batch_size == 64
    assert loaded.kernel_params_hash == cache.kernel_params_hash != ""
    assert (
        load_cache(
            str(tmp_path), "other-kernel", cache.generator_checkpoint_hash, cache.kernel_params_hash
        )
        is None
    )


def test_get_or_compute_hits_and_misses(tmp_path, small_gen):
    k = make_kernel("k", "percept", seed=2, input_size=16)
    a = get_or_compute_global_features(str(tmp_path), k, small_gen, 128, batch_size=64, seed=1)
    b = get_or_compute_global_features(str(tmp_path), k, small_gen, 128, batch_size=64, seed=1)
    np.testing.assert_array_equal(a.mean_feature, b.mean_feature)
    # A different request invalidates the stored entry and recomputes.
    c = get_or_compute_global_features(str(tmp_path), k, small_gen, 256, batch_size=64, seed=1)
    assert c.num_samples == 256


def test_cache_keyed_by_kernel_weights_not_name(tmp_path, small_gen):
    # Two kernels with the same display name but different weights must not
    # share a cache entry -- fitting mutates weights while keeping the name.
    k1 = make_kernel("k", "percept", seed=2, input_size=16)
    k2 = make_kernel("k", "percept", seed=9, input_size=16)
    a = get_or_compute_global_features(str(tmp_path), k1, small_gen, 128, batch_size=64, seed=1)
    b = get_or_compute_global_features(str(tmp_path), k2, small_gen, 128, batch_size=64, seed=1)
    assert a.kernel_params_hash != b.kernel_params_hash
    assert not np.array_equal(a.mean_feature, b.mean_feature)
    # Both entries coexist: asking again with k1 hits its own entry exactly.
    again = get_or_compute_global_features(str(tmp_path), k1, small_gen, 128, batch_size=64, seed=1)
    np.testing.assert_array_equal(again.mean_feature, a.mean_feature)


def test_cache_validation_rejects_bad_entries():
    bad = GlobalFeatureCache("k", np.array([np.nan, 1.0]), 10, "h", "now")
    with pytest.raises(NumericError):
        bad.validate()
    empty = GlobalFeatureCache("k", np.zeros(2), 0, "h", "now")
    with pytest.raises(InputError):
        empty.validate()


def test_fit_adapts_then_refreezes():
    from ndgan.data import synthetic_mixture

    k = make_kernel("k", "percept", seed=3, input_size=16)
    before = k.parameter_total()
    mix = synthetic_mixture(4, std=0.05, resolution=16)
    loss = fit_classifier_kernel(k, mix, steps=3, batch_size=8, seed=0)
    assert np.isfinite(loss)
    assert k.parameter_total() != before
    assert all(not p.requires_grad for p in k.extractor.parameters())
    x = torch.randn(2, 3, 16, 16)
    assert torch.equal(k.embed(x), k.embed(x))
