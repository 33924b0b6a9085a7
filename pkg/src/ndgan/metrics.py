"""Sample-quality metrics computed in a fixed embedding space.

All metrics operate on float64 feature matrices from a frozen evaluation
kernel (kept distinct from any kernel used in training, so scores are not
trivially optimized).  The Frechet distance compares Gaussian moment
summaries; the k-nearest-neighbour family (precision, recall, density,
coverage) compares estimated supports.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .data import sample_latents
from .errors import InputError, NumericError

# Relative tolerance for negative eigenvalues of nominally-PSD matrices;
# anything worse than this is a real numerical failure, not roundoff.
_EIG_TOL = 1e-6


@dataclass
class FeatureStats:
    """Gaussian summary (mean, covariance) of a feature sample."""

    mean: np.ndarray
    cov: np.ndarray
    n: int = 0

    def validate(self) -> None:
        if self.mean.ndim != 1 or self.cov.shape != (self.mean.size, self.mean.size):
            raise InputError(
                f"need mean (d,) and cov (d, d), got {self.mean.shape} and {self.cov.shape}"
            )
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise NumericError("feature stats contain non-finite entries")


def compute_stats(features: np.ndarray) -> FeatureStats:
    """Mean and unbiased covariance of an (n, d) feature matrix."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise InputError(f"need an (n >= 2, d) feature matrix, got shape {feats.shape}")
    stats = FeatureStats(mean=feats.mean(axis=0), cov=np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1]), n=feats.shape[0])
    stats.validate()
    return stats


def _clipped_eigvals(mat: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(mat)
    floor = -_EIG_TOL * max(1.0, float(vals.max(initial=0.0)))
    if float(vals.min(initial=0.0)) < floor:
        raise NumericError(f"{what} has eigenvalue {vals.min():.3e}, beyond roundoff tolerance")
    return np.clip(vals, 0.0, None), vecs


def _psd_sqrt(mat: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = _clipped_eigvals(mat, what)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mean_a: np.ndarray, cov_a: np.ndarray, mean_b: np.ndarray, cov_b: np.ndarray) -> float:
    """Closed-form Frechet distance between two Gaussians.

    ||mu_a - mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a^1/2 cov_b cov_a^1/2)^1/2),
    with the cross term evaluated through symmetric eigendecompositions so the
    result is real by construction.
    """
    mean_a = np.asarray(mean_a, dtype=np.float64).reshape(-1)
    mean_b = np.asarray(mean_b, dtype=np.float64).reshape(-1)
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mean_a.shape != mean_b.shape or cov_a.shape != cov_b.shape:
        raise InputError("feature stats have mismatched dimensions")
    sqrt_a = _psd_sqrt(cov_a, "covariance")
    cross = sqrt_a @ cov_b @ sqrt_a
    cross_vals, _ = _clipped_eigvals((cross + cross.T) / 2.0, "covariance product")
    mean_term = float(((mean_a - mean_b) ** 2).sum())
    trace_term = float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(cross_vals).sum())
    value = mean_term + trace_term
    # The exact value is >= 0; tiny negatives are roundoff.
    if value < -_EIG_TOL:
        raise NumericError(f"frechet distance came out {value:.3e}")
    return max(value, 0.0)


def fid(stats_a: FeatureStats, stats_b: FeatureStats) -> float:
    stats_a.validate()
    stats_b.validate()
    return frechet_distance(stats_a.mean, stats_a.cov, stats_b.mean, stats_b.cov)


def pairwise_distances(a: np.ndarray, b: np.ndarray, block: int = 256) -> np.ndarray:
    """Euclidean distance matrix, blocked over rows to bound memory."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InputError(f"need (n, d) and (m, d) matrices, got {a.shape} and {b.shape}")
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for i in range(0, a.shape[0], block):
        diff = a[i : i + block, None, :] - b[None, :, :]
        out[i : i + block] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def knn_radii(points: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if points.shape[0] <= k:
        raise InputError(f"need more than k={k} points, got {points.shape[0]}")
    dists = pairwise_distances(points, points)
    # Column 0 of the sorted rows is the self-distance (0), so the k-th
    # neighbour excluding self sits at column k.
    return np.sort(dists, axis=1)[:, k]


def precision_recall(real_features: np.ndarray, fake_features: np.ndarray, k: int = 5) -> tuple[float, float]:
    """Support overlap with closed k-NN balls.

    Precision: fraction of fakes inside at least one real ball.
    Recall: fraction of reals inside at least one fake ball.
    """
    real_radii = knn_radii(real_features, k)
    fake_radii = knn_radii(fake_features, k)
    d_fr = pairwise_distances(fake_features, real_features)
    precision = float((d_fr <= real_radii[None, :]).any(axis=1).mean())
    recall = float((d_fr.T <= fake_radii[None, :]).any(axis=1).mean())
    return precision, recall


def density_coverage(real_features: np.ndarray, fake_features: np.ndarray, k: int = 5) -> tuple[float, float]:
    """Density counts real-ball memberships per fake (can exceed 1 when fakes
    crowd dense regions); coverage is the fraction of real balls holding at
    least one fake."""
    real_radii = knn_radii(real_features, k)
    d_fr = pairwise_distances(fake_features, real_features)
    inside = d_fr <= real_radii[None, :]
    density = float(inside.sum() / (k * fake_features.shape[0]))
    coverage = float(inside.any(axis=0).mean())
    return density, coverage


@dataclass
class MetricReport:
    """One evaluation of a generator against a reference sample."""

    fid: float
    precision: float
    recall: float
    density: float
    coverage: float
    n_real: int
    n_fake: int
    k: int
    kernel_name: str = ""

    def as_dict(self) -> dict:
        return {k: v for k, v in vars(self).items()}


def score_features(
    real_features: np.ndarray,
    fake_features: np.ndarray,
    k: int = 5,
    kernel_name: str = "",
) -> MetricReport:
    """All metrics on precomputed features; no sample-size floor (callers
    that consume raw features are expected to know what they are doing)."""
    real = np.asarray(real_features, dtype=np.float64)
    fake = np.asarray(fake_features, dtype=np.float64)
    if not (np.all(np.isfinite(real)) and np.all(np.isfinite(fake))):
        raise NumericError("feature matrices contain non-finite entries")
    value = frechet_distance(
        real.mean(axis=0),
        np.cov(real, rowvar=False).reshape(real.shape[1], real.shape[1]),
        fake.mean(axis=0),
        np.cov(fake, rowvar=False).reshape(fake.shape[1], fake.shape[1]),
    )
    precision, recall = precision_recall(real, fake, k=k)
    density, coverage = density_coverage(real, fake, k=k)
    return MetricReport(
        fid=value,
        precision=precision,
        recall=recall,
        density=density,
        coverage=coverage,
        n_real=real.shape[0],
        n_fake=fake.shape[0],
        k=k,
        kernel_name=kernel_name,
    )


def embed_images(kernel, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Embed a stack of images in batches; returns float64 (n, d)."""
    chunks = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            chunks.append(kernel.embed(images[i : i + batch_size]).double().cpu().numpy())
    return np.concatenate(chunks, axis=0)


def generator_features(
    kernel,
    generator,
    n_samples: int,
    seed: int = 0,
    batch_size: int = 256,
    stream_id: str = "metrics/fake",
) -> np.ndarray:
    """Embed fresh generator samples drawn from a named latent stream."""
    feats = []
    done, step = 0, 0
    with torch.no_grad():
        while done < n_samples:
            b = min(batch_size, n_samples - done)
            z = sample_latents(generator.latent_dim, b, seed, stream_id, step=step)
            feats.append(kernel.embed(generator(z)).double().cpu().numpy())
            done += b
            step += 1
    return np.concatenate(feats, axis=0)


def evaluate_pair(
    kernel,
    dataset,
    generator,
    n_samples: int = 1024,
    k: int = 5,
    seed: int = 0,
    batch_size: int = 256,
) -> MetricReport:
    """Score a generator against a dataset with fresh samples on both sides.

    Enforces n_samples >= 1000: the Frechet statistics and k-NN radii are
    too noisy below that to support pass/fail comparisons.
    """
    if n_samples < 1000:
        raise InputError(f"n_samples must be >= 1000 for stable metrics, got {n_samples}")
    real = dataset.sample(n_samples, seed=seed)
    real_feats = embed_images(kernel, real, batch_size=batch_size)
    fake_feats = generator_features(kernel, generator, n_samples, seed=seed, batch_size=batch_size)
    return score_features(real_feats, fake_feats, k=k, kernel_name=kernel.name)
