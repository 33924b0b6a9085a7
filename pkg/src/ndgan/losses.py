"""Training losses for compression by dual distillation.

Three families combine into the student generator objective:

* ``dime_loss`` -- distribution matching through frozen embedding kernels,
  either paired per-latent or against a precomputed teacher mean embedding.
* ``nickel_loss`` -- the student discriminator is asked to reconstruct the
  teacher generator's intermediate feature maps; agreement is scored on the
  detail (high-frequency) bands of a Haar transform so the student is pushed
  toward textures the pixel losses under-weight.
* ``adversarial_losses`` -- nonsaturating logistic terms against both the
  frozen teacher discriminator and the trainable student discriminator,
  with optional R1 gradient penalty on reals for the student one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import nn, Tensor

from .errors import ConfigurationError, InputError, NumericError
from .kernels import EmbeddingKernel, GlobalFeatureCache
from .wavelet import haar_decompose

Scalar = Union[float, Tensor]

METHODS = ("nickel-dime", "dime", "nickel", "adv-only")


@dataclass
class LossWeights:
    """Mixing weights for the student generator objective."""

    lambda_dime_a: float = 20.0
    lambda_dime_b: float = 15.0
    lambda_nickel: float = 10.0
    r1_gamma: float = 1.0

    def validate(self) -> None:
        for name, v in vars(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"weight {name} must be finite and >= 0, got {v}")

    @classmethod
    def for_method(cls, method: str, **overrides) -> "LossWeights":
        """Ablation presets; R1 stays on in all of them (it regularizes the
        discriminator, not the distillation)."""
        base = cls(**overrides) if overrides else cls()
        if method == "nickel-dime":
            w = base
        elif method == "dime":
            w = replace(base, lambda_nickel=0.0)
        elif method == "nickel":
            w = replace(base, lambda_dime_a=0.0, lambda_dime_b=0.0)
        elif method == "adv-only":
            w = replace(base, lambda_dime_a=0.0, lambda_dime_b=0.0, lambda_nickel=0.0)
        else:
            raise ConfigurationError(f"unknown method {method!r}; have {METHODS}")
        w.validate()
        return w


def dime_loss(
    kernel: EmbeddingKernel,
    student_images: Tensor,
    teacher_images: Optional[Tensor] = None,
    global_cache: Optional[GlobalFeatureCache] = None,
    mode: str = "global",
) -> Tensor:
    """Embedding-space distribution match between student and teacher.

    Args:
        kernel: frozen feature extractor.
        student_images: (B, 3, H, W) student samples, gradients flow here.
        teacher_images: teacher samples for the same latents (paired mode).
        global_cache: precomputed teacher mean embedding (global mode).
        mode: "paired" matches per-sample embeddings (L1 summed over the
            feature dim, averaged over the batch); "global" matches the
            student batch-mean embedding to the cached teacher mean (L1),
            which removes the teacher-side sampling noise.
    """
    student_feats = kernel.embed(student_images)
    if mode == "paired":
        if teacher_images is None:
            raise ConfigurationError("paired mode needs teacher_images")
        if teacher_images.shape[0] != student_images.shape[0]:
            raise InputError(
                f"paired batches must match: {teacher_images.shape[0]} vs {student_images.shape[0]}"
            )
        teacher_feats = kernel.embed(teacher_images).detach()
        return (student_feats - teacher_feats).abs().sum(dim=1).mean()
    if mode == "global":
        if global_cache is None:
            raise ConfigurationError("global mode needs a global feature cache")
        if global_cache.kernel_name != kernel.name:
            raise ConfigurationError(
                f"cache was built with kernel {global_cache.kernel_name!r}, not {kernel.name!r}"
            )
        target = torch.as_tensor(global_cache.mean_feature, dtype=student_feats.dtype)
        return (student_feats.mean(dim=0) - target).abs().sum()
    raise ConfigurationError(f"unknown dime mode {mode!r}")


class FeatureProjection(nn.Module):
    """Learnable 1x1 channel maps aligning student taps to teacher taps.

    One conv per matched layer; a bilinear resize follows when the spatial
    sizes differ.  These are trained jointly with the student discriminator.
    """

    def __init__(self, pairs: Sequence[tuple[tuple[int, int], tuple[int, int]]], seed: int = 0):
        super().__init__()
        self.targets = [tuple(t) for _, t in pairs]
        gen = torch.Generator().manual_seed(seed)
        convs = []
        for (s_ch, _s_size), (t_ch, _t_size) in pairs:
            conv = nn.Conv2d(s_ch, t_ch, kernel_size=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, 1.0, generator=gen).mul_(1.0 / math.sqrt(s_ch))
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)

    @classmethod
    def from_specs(cls, student_disc_spec, teacher_gen_spec, seed: int = 0) -> "FeatureProjection":
        s_taps = student_disc_spec.tap_shapes()
        t_taps = teacher_gen_spec.tap_shapes()
        if len(s_taps) != len(t_taps):
            raise ConfigurationError(
                f"tap count mismatch: student discriminator has {len(s_taps)}, teacher generator {len(t_taps)}"
            )
        return cls(list(zip(s_taps, t_taps)), seed=seed)

    def forward(self, index: int, x: Tensor) -> Tensor:
        t_ch, t_size = self.targets[index]
        y = self.convs[index](x)
        if y.shape[-1] != t_size or y.shape[-2] != t_size:
            y = F.interpolate(y, size=(t_size, t_size), mode="bilinear", align_corners=False)
        return y


def nickel_loss(
    teacher_feats: Sequence[Tensor],
    student_feats: Sequence[Tensor],
    projections: Optional[FeatureProjection] = None,
) -> Tensor:
    """High-frequency feature match, teacher generator vs student discriminator.

    For each matched layer the student tap is projected onto the teacher
    tap's shape and both are Haar-decomposed; the L1 distance is averaged
    over the three stacked detail bands, then over layers.  Teacher features
    are treated as constants.
    """
    if len(teacher_feats) != len(student_feats):
        raise InputError(f"layer count mismatch: {len(teacher_feats)} vs {len(student_feats)}")
    if not teacher_feats:
        raise ConfigurationError("need at least one matched layer")
    terms = []
    for i, (t, s) in enumerate(zip(teacher_feats, student_feats)):
        t = t.detach()
        if projections is not None:
            s = projections(i, s)
        if s.shape != t.shape:
            raise InputError(f"layer {i}: projected shape {tuple(s.shape)} != teacher {tuple(t.shape)}")
        diff = haar_decompose(s).detail - haar_decompose(t).detail
        terms.append(diff.abs().mean())
    return torch.stack(terms).mean()


@dataclass
class AdversarialTerms:
    """Generator- and discriminator-side adversarial losses plus probes."""

    g_teacher: Optional[Tensor] = None
    g_student: Optional[Tensor] = None
    g_loss: Optional[Tensor] = None
    ds_logistic: Optional[Tensor] = None
    ds_penalty: Optional[Tensor] = None
    ds_loss: Optional[Tensor] = None
    real_logit_mean: Optional[float] = None
    fake_logit_mean: Optional[float] = None


def adversarial_losses(
    real_images: Tensor,
    fake_images: Tensor,
    d_teacher: nn.Module,
    d_student: nn.Module,
    r1_gamma: float = 0.0,
    compute: str = "both",
) -> AdversarialTerms:
    """Nonsaturating logistic GAN terms under two discriminators.

    The generator loss is the average of softplus(-logit) under the teacher
    and student discriminators, reported as two halves so the weighted total
    decomposes additively.  The student discriminator loss is
    softplus(-real) + softplus(fake) plus (r1_gamma / 2) times the R1
    penalty E[||grad_x D(x)||^2] on reals.  ``compute`` restricts the work
    to one side ("generator" / "discriminator") for the training loop.
    """
    if compute not in ("both", "generator", "discriminator"):
        raise ConfigurationError(f"unknown compute mode {compute!r}")
    out = AdversarialTerms()

    if compute in ("both", "generator"):
        logit_t_fake, _ = d_teacher(fake_images)
        logit_s_fake, _ = d_student(fake_images)
        out.g_teacher = F.softplus(-logit_t_fake).mean() / 2
        out.g_student = F.softplus(-logit_s_fake).mean() / 2
        out.g_loss = out.g_teacher + out.g_student

    if compute in ("both", "discriminator"):
        fake_d = fake_images.detach()
        logit_s_fake_d, _ = d_student(fake_d)
        if r1_gamma > 0:
            real_r = real_images.detach().clone().requires_grad_(True)
            logit_s_real, _ = d_student(real_r)
            grad = torch.autograd.grad(logit_s_real.sum(), real_r, create_graph=True)[0]
            out.ds_penalty = grad.pow(2).sum(dim=(1, 2, 3)).mean()
        else:
            logit_s_real, _ = d_student(real_images)
            out.ds_penalty = fake_d.new_zeros(())
        out.ds_logistic = F.softplus(-logit_s_real).mean() + F.softplus(logit_s_fake_d).mean()
        out.ds_loss = out.ds_logistic + 0.5 * r1_gamma * out.ds_penalty
        out.real_logit_mean = float(logit_s_real.detach().mean())
        out.fake_logit_mean = float(logit_s_fake_d.detach().mean())

    return out


@dataclass
class LossBreakdown:
    """Additive decomposition of the student generator objective.

    Invariant: total == adv_teacher_d + adv_student_d
    + lambda_dime_a * dime_a + lambda_dime_b * dime_b
    + lambda_nickel * nickel, accumulated in exactly that order.
    """

    adv_teacher_d: Scalar
    adv_student_d: Scalar
    dime_a: Scalar
    dime_b: Scalar
    nickel: Scalar
    total: Scalar

    def as_dict(self) -> dict:
        return {name: _to_float(value) for name, value in vars(self).items()}


def _to_float(x: Scalar) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def total_loss(
    adv_teacher_d: Scalar,
    adv_student_d: Scalar,
    dime_a: Scalar,
    dime_b: Scalar,
    nickel: Scalar,
    weights: LossWeights,
) -> LossBreakdown:
    """Weighted sum of components; accepts tensors (stays differentiable)
    or plain floats.  Raises NumericError naming the first non-finite part."""
    weights.validate()
    components = {
        "adv_teacher_d": adv_teacher_d,
        "adv_student_d": adv_student_d,
        "dime_a": dime_a,
        "dime_b": dime_b,
        "nickel": nickel,
    }
    for name, value in components.items():
        if not math.isfinite(_to_float(value)):
            raise NumericError(f"loss component {name} is non-finite")
    total = adv_teacher_d + adv_student_d
    total = total + weights.lambda_dime_a * dime_a
    total = total + weights.lambda_dime_b * dime_b
    total = total + weights.lambda_nickel * nickel
    return LossBreakdown(
        adv_teacher_d=adv_teacher_d,
        adv_student_d=adv_student_d,
        dime_a=dime_a,
        dime_b=dime_b,
        nickel=nickel,
        total=total,
    )
