"""Frozen embedding kernels and teacher global-feature machinery.

A kernel is a small fixed feature extractor treated as a characteristic
kernel: matching mean embeddings between two sample sets approximates
matching the underlying distributions.  The teacher's mean embedding is
precomputed once over many samples ("global features") so the teacher side
of the distillation loss carries essentially no batch sampling error.

Two desk-scale kernels ship by default, one classifier-shaped and one
texture-shaped; both are drop-in replaceable by large pretrained extractors
exposing the same embed() surface.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn, Tensor

from .data import sample_latents
from .errors import ConfigurationError, InputError, NumericError

CACHE_SCHEMA = "featcache.v1"


@dataclass
class Preprocess:
    """Resize recipe applied before the extractor (inputs already in [-1, 1])."""

    size: int

    def __call__(self, images: Tensor) -> Tensor:
        if images.shape[-1] == self.size and images.shape[-2] == self.size:
            return images
        return F.interpolate(images, size=(self.size, self.size), mode="bilinear", align_corners=False)


class _ConvExtractor(nn.Module):
    """Small tanh convnet; tanh keeps the map smooth for gradient checks."""

    def __init__(self, widths: list[int], kernels: list[int], feature_dim: int):
        super().__init__()
        convs = []
        in_ch = 3
        for w, k in zip(widths, kernels):
            convs.append(nn.Conv2d(in_ch, w, k, stride=2, padding=k // 2))
            in_ch = w
        self.convs = nn.ModuleList(convs)
        self.out = nn.Linear(in_ch, feature_dim)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = torch.tanh(conv(x))
        x = x.mean(dim=(2, 3))
        return self.out(x)


class EmbeddingKernel:
    """A frozen extractor mapping (B, 3, H, W) images to (B, feature_dim)."""

    def __init__(self, name: str, extractor: nn.Module, feature_dim: int, preprocess: Preprocess):
        self.name = name
        self.feature_dim = feature_dim
        self.preprocess = preprocess
        self.extractor = extractor
        self.freeze()

    def freeze(self) -> None:
        self.extractor.eval()
        for p in self.extractor.parameters():
            p.requires_grad_(False)

    def embed(self, images: Tensor) -> Tensor:
        """Deterministic feature embedding; differentiable w.r.t. the images."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise InputError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        feats = self.extractor(self.preprocess(images))
        return feats

    def parameter_total(self) -> float:
        """Sum of absolute parameter values (freeze-invariant probe)."""
        return float(sum(p.detach().abs().sum().item() for p in self.extractor.parameters()))


def embed(kernel: EmbeddingKernel, images: Tensor) -> Tensor:
    return kernel.embed(images)


_ARCHS = {
    "percept": {"widths": [16, 32, 64], "kernels": [3, 3, 3]},
    "texture": {"widths": [24, 48], "kernels": [5, 3]},
}


def make_kernel(name: str, arch: str, seed: int, feature_dim: int = 32, input_size: int = 32) -> EmbeddingKernel:
    """Build a frozen kernel with deterministic seed-keyed weights."""
    if arch not in _ARCHS:
        raise ConfigurationError(f"unknown kernel arch {arch!r}; have {sorted(_ARCHS)}")
    net = _ConvExtractor(feature_dim=feature_dim, **_ARCHS[arch])
    gen = torch.Generator().manual_seed(seed)
    gain = 5.0 / 3.0  # tanh
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight.shape[1] * (m.weight[0, 0].numel() if m.weight.ndim == 4 else 1)
                m.weight.normal_(0.0, 1.0, generator=gen).mul_(gain / math.sqrt(fan_in))
                m.bias.zero_()
    return EmbeddingKernel(name, net, feature_dim, Preprocess(input_size))


def default_kernels(input_size: int = 32, feature_dim: int = 32) -> list[EmbeddingKernel]:
    """The two distillation kernels used when a config does not override them."""
    return [
        make_kernel("percept-a", "percept", seed=101, feature_dim=feature_dim, input_size=input_size),
        make_kernel("texture-b", "texture", seed=202, feature_dim=feature_dim, input_size=input_size),
    ]


def metrics_kernel(input_size: int = 32, feature_dim: int = 32) -> EmbeddingKernel:
    """The evaluation embedding, deliberately distinct from training kernels."""
    return make_kernel("metrics-v1", "percept", seed=7777, feature_dim=feature_dim, input_size=input_size)


def fit_classifier_kernel(
    kernel: EmbeddingKernel, dataset, steps: int = 200, batch_size: int = 32, lr: float = 1e-3, seed: int = 0
) -> float:
    """Adapt a kernel's extractor to the target domain, then refreeze it.

    Trains a throwaway 4-way rotation-prediction head (a label-free pretext
    task) so the features become dataset-specific.  Returns the final pretext
    cross-entropy.
    """
    head = nn.Linear(kernel.feature_dim, 4)
    # Re-init the head from the fit seed: the ctor draws from the global RNG,
    # which would make fitted weights depend on process history.
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(kernel.feature_dim)
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=gen)
        head.bias.uniform_(-bound, bound, generator=gen)
    for p in kernel.extractor.parameters():
        p.requires_grad_(True)
    kernel.extractor.train()
    opt = torch.optim.Adam(list(kernel.extractor.parameters()) + list(head.parameters()), lr=lr)
    loss_val = float("nan")
    for step in range(steps):
        images = dataset.batch(batch_size, step=step, seed=seed)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 915, step])))
        rots = torch.from_numpy(rng.integers(0, 4, images.shape[0]))
        rotated = torch.stack([torch.rot90(img, int(k), dims=(1, 2)) for img, k in zip(images, rots)])
        logits = head(kernel.extractor(kernel.preprocess(rotated)))
        loss = F.cross_entropy(logits, rots)
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_val = float(loss.item())
    kernel.freeze()
    return loss_val


@dataclass
class GlobalFeatureCache:
    """Precomputed mean embedding of one generator under one kernel."""

    kernel_name: str
    mean_feature: np.ndarray
    num_samples: int
    generator_checkpoint_hash: str
    created_at: str
    seed: int = 0
    batch_size: int = 256
    kernel_params_hash: str = ""

    def validate(self) -> None:
        if self.num_samples < 1:
            raise InputError("cache needs num_samples >= 1")
        if not np.all(np.isfinite(self.mean_feature)):
            raise NumericError("cache mean contains non-finite entries")


def generator_hash(generator) -> str:
    if isinstance(generator, nn.Module):
        from .nets import parameter_hash

        return parameter_hash(generator)
    return hashlib.sha256(repr(generator).encode()).hexdigest()[:16]


def kernel_fingerprint(kernel: EmbeddingKernel) -> str:
    """Identity of the kernel's actual weights, not just its display name.

    Names collide: a fitted kernel keeps its factory name but embeds
    differently, so caches must key on the parameters themselves.
    """
    from .nets import parameter_hash

    return parameter_hash(kernel.extractor)[:16]


class _KahanMean:
    """Compensated streaming sum; merge order changes results < 1e-12."""

    def __init__(self, dim: int):
        self.sum = np.zeros(dim, dtype=np.float64)
        self.comp = np.zeros(dim, dtype=np.float64)
        self.count = 0

    def add(self, batch_sum: np.ndarray, n: int) -> None:
        y = batch_sum - self.comp
        t = self.sum + y
        self.comp = (t - self.sum) - y
        self.sum = t
        self.count += n

    def mean(self) -> np.ndarray:
        return self.sum / max(self.count, 1)


def _stream_mean(kernel, generator, num_samples, batch_size, seed, stream_id) -> np.ndarray:
    acc = _KahanMean(kernel.feature_dim)
    done = 0
    step = 0
    latent_dim = generator.latent_dim
    with torch.no_grad():
        while done < num_samples:
            b = min(batch_size, num_samples - done)
            z = sample_latents(latent_dim, b, seed, stream_id, step=step)
            feats = kernel.embed(generator(z)).double().cpu().numpy()
            if not np.all(np.isfinite(feats)):
                raise NumericError(f"non-finite features in batch {step} of {stream_id}")
            acc.add(feats.sum(axis=0), b)
            done += b
            step += 1
    return acc.mean()


def compute_global_features(
    kernel: EmbeddingKernel,
    generator,
    num_samples: int,
    batch_size: int = 256,
    seed: int = 0,
) -> GlobalFeatureCache:
    """Stream the generator's mean embedding without materializing features.

    Batches are drawn from the named stream ("global-features", step = batch
    index), so a later estimator run with the same seed can replay the exact
    sample set.
    """
    if not (num_samples >= batch_size >= 1):
        raise InputError(f"need num_samples >= batch_size >= 1, got {num_samples}, {batch_size}")
    mean = _stream_mean(kernel, generator, num_samples, batch_size, seed, "global-features")
    cache = GlobalFeatureCache(
        kernel_name=kernel.name,
        mean_feature=mean,
        num_samples=num_samples,
        generator_checkpoint_hash=generator_hash(generator),
        created_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        seed=seed,
        batch_size=batch_size,
        kernel_params_hash=kernel_fingerprint(kernel),
    )
    cache.validate()
    return cache


@dataclass
class SamplingErrorCurve:
    """Empirical mean-embedding error as a function of sample count."""

    sample_sizes: list[int]
    errors: list[float]
    trials: int = 1

    def loglog_slope(self) -> float:
        sizes = np.asarray(self.sample_sizes, dtype=np.float64)
        errs = np.asarray(self.errors, dtype=np.float64)
        keep = errs > 0
        if keep.sum() < 2:
            raise NumericError("need >= 2 nonzero errors to fit a slope")
        slope = np.polyfit(np.log(sizes[keep]), np.log(errs[keep]), 1)[0]
        return float(slope)


def estimate_sampling_error(
    kernel: EmbeddingKernel,
    generator,
    sample_sizes: list[int],
    trials: int,
    reference: GlobalFeatureCache,
    batch_size: int | None = None,
    seed: int | None = None,
) -> SamplingErrorCurve:
    """Measure ||mean_N - reference mean||_2 averaged over trials, per N.

    Trial 0 replays the reference's own sample stream, so N equal to the
    reference size with the reference seed reproduces its mean exactly.
    """
    reference.validate()
    batch_size = reference.batch_size if batch_size is None else batch_size
    seed = reference.seed if seed is None else seed
    errors = []
    for n in sample_sizes:
        errs = []
        for t in range(trials):
            stream = "global-features" if t == 0 else f"global-features/trial{t}"
            mean_n = _stream_mean(kernel, generator, n, min(batch_size, n), seed, stream)
            errs.append(float(np.linalg.norm(mean_n - reference.mean_feature)))
        errors.append(float(np.mean(errs)))
    return SamplingErrorCurve(sample_sizes=list(sample_sizes), errors=errors, trials=trials)


def cache_paths(
    cache_dir: str, kernel_name: str, gen_hash: str, kernel_params_hash: str = ""
) -> tuple[str, str]:
    middle = f"-{kernel_params_hash}" if kernel_params_hash else ""
    stem = os.path.join(cache_dir, f"{kernel_name}{middle}-{gen_hash}")
    return stem + ".npy", stem + ".json"


def save_cache(cache: GlobalFeatureCache, cache_dir: str) -> str:
    os.makedirs(cache_dir, exist_ok=True)
    npy, manifest = cache_paths(
        cache_dir, cache.kernel_name, cache.generator_checkpoint_hash, cache.kernel_params_hash
    )
    np.save(npy, cache.mean_feature)
    meta = {
        "schema": CACHE_SCHEMA,
        "kernel_name": cache.kernel_name,
        "num_samples": cache.num_samples,
        "generator_checkpoint_hash": cache.generator_checkpoint_hash,
        "created_at": cache.created_at,
        "seed": cache.seed,
        "batch_size": cache.batch_size,
        "kernel_params_hash": cache.kernel_params_hash,
    }
    tmp = manifest + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(meta, fh, indent=2)
    os.replace(tmp, manifest)
    return npy


def load_cache(
    cache_dir: str, kernel_name: str, gen_hash: str, kernel_params_hash: str = ""
) -> GlobalFeatureCache | None:
    npy, manifest = cache_paths(cache_dir, kernel_name, gen_hash, kernel_params_hash)
    if not (os.path.exists(npy) and os.path.exists(manifest)):
        return None
    with open(manifest) as fh:
        meta = json.load(fh)
    if meta.get("schema") != CACHE_SCHEMA:
        return None
    if meta.get("kernel_params_hash", "") != kernel_params_hash:
        return None
    cache = GlobalFeatureCache(
        kernel_name=meta["kernel_name"],
        mean_feature=np.load(npy),
        num_samples=meta["num_samples"],
        generator_checkpoint_hash=meta["generator_checkpoint_hash"],
        created_at=meta["created_at"],
        seed=meta.get("seed", 0),
        batch_size=meta.get("batch_size", 256),
        kernel_params_hash=meta.get("kernel_params_hash", ""),
    )
    cache.validate()
    return cache


def get_or_compute_global_features(
    cache_dir: str,
    kernel: EmbeddingKernel,
    generator,
    num_samples: int,
    batch_size: int = 256,
    seed: int = 0,
) -> GlobalFeatureCache:
    """Cache lookup keyed by (kernel identity, generator hash); recompute on
    miss or when the stored sampling parameters differ from the request.

    Kernel identity is the weight fingerprint, not just the name: fitting a
    kernel in place changes its embeddings, and a stale mean from the unfitted
    weights would silently poison every loss that consumes it.
    """
    gh = generator_hash(generator)
    kh = kernel_fingerprint(kernel)
    cached = load_cache(cache_dir, kernel.name, gh, kh)
    if (
        cached is not None
        and cached.num_samples == num_samples
        and cached.seed == seed
        and cached.batch_size == batch_size
    ):
        return cached
    cache = compute_global_features(kernel, generator, num_samples, batch_size=batch_size, seed=seed)
    save_cache(cache, cache_dir)
    return cache
