"""Training loops: teacher pretraining and student distillation.

Both loops share the same scaffolding: stateless per-step RNG streams (so a
resumed run recomputes exactly the batches it would have seen), JSONL loss
and stability logs, periodic embedding-space FID evaluation, best-checkpoint
retention, and a divergence detector that aborts a collapsing run instead of
letting it burn the budget.

The distillation loop trains a pruned student generator against (a) frozen
teacher and trainable student discriminators, (b) kernel-space distribution
matching with precomputed teacher mean embeddings, and (c) a student
discriminator that is simultaneously taught to reconstruct the teacher
generator's features (scored on Haar detail bands), so its adversarial
signal stays informative at high compression.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import data as data_mod
from . import kernels as kernels_mod
from . import metrics as metrics_mod
from . import nets as nets_mod
from .errors import ConfigurationError, InputError, NumericError
from .losses import (
    FeatureProjection,
    LossWeights,
    METHODS,
    adversarial_losses,
    dime_loss,
    nickel_loss,
    total_loss,
)

log = logging.getLogger(__name__)

CONFIG_SCHEMA = "ndgan.v1"
DIME_MODES = ("global", "paired", "both")


def derive_seed(seed: int, label: str) -> int:
    """Stable per-purpose seed from a run seed and a label."""
    return int(np.random.SeedSequence([seed, zlib.crc32(label.encode())]).generate_state(1)[0])


@dataclass
class TrainConfig:
    """One experiment's worth of knobs; serializes to/from JSON."""

    resolution: int = 32
    base_channels: int = 32
    latent_dim: int = 64
    batch_size: int = 32
    steps: int = 1500
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.99
    seed: int = 0
    method: str = "nickel-dime"
    dime_mode: str = "global"
    compression_target: float = 0.90
    prune_tolerance: float = 0.02
    prune_discriminator: bool = False
    eval_every: int = 50
    eval_samples: int = 1024
    global_samples: int = 50000
    global_batch: int = 256
    kernel_dim: int = 32
    kernel_fit_steps: int = 0
    log_every: int = 10
    divergence_patience: int = 5
    divergence_factor: float = 1.5
    cache_dir: Optional[str] = None
    dataset: dict | str = field(default_factory=lambda: {"kind": "mixture", "modes": 8, "std": 0.05})
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        checks = [
            (self.resolution >= 8, "resolution must be >= 8"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.steps >= 1, "steps must be >= 1"),
            (self.lr > 0, "lr must be positive"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)"),
            (self.method in METHODS, f"method must be one of {METHODS}"),
            (self.dime_mode in DIME_MODES, f"dime_mode must be one of {DIME_MODES}"),
            (0 <= self.compression_target < 1, "compression_target must lie in [0, 1)"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
            (self.eval_samples >= 1000, "eval_samples must be >= 1000"),
            (self.global_samples >= self.global_batch >= 1, "need global_samples >= global_batch >= 1"),
            (self.kernel_dim >= 2, "kernel_dim must be >= 2"),
            (self.log_every >= 1, "log_every must be >= 1"),
            (self.divergence_patience >= 1, "divergence_patience must be >= 1"),
            (self.divergence_factor > 1, "divergence_factor must exceed 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)
        self.weights.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = CONFIG_SCHEMA
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        schema = d.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigurationError(f"unsupported config schema {schema!r} (expected {CONFIG_SCHEMA})")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        if isinstance(d.get("weights"), dict):
            try:
                d["weights"] = LossWeights(**d["weights"])
            except TypeError as exc:
                raise ConfigurationError(f"bad weights block: {exc}") from exc
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class StabilityRecord:
    """Per-log-interval probe of the student discriminator's operating point."""

    step: int
    real_logit_mean: float
    fake_logit_mean: float
    ds_loss: float


def equilibrium_drift(fake_logit_means: list[float], tail: float = 0.25) -> float:
    """Mean |fake logit| over the last `tail` fraction of records.

    Near the ideal adversarial equilibrium the discriminator cannot tell fakes
    from reals and its logits hover around zero; a large drift means one side
    is winning.
    """
    if not fake_logit_means:
        return float("nan")
    start = int(math.floor(len(fake_logit_means) * (1.0 - tail)))
    window = fake_logit_means[min(start, len(fake_logit_means) - 1):]
    return float(np.mean(np.abs(window)))


class DivergenceDetector:
    """Flags a run whose eval FID sits far above its own best for too long."""

    def __init__(self, patience: int = 5, factor: float = 1.5):
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.streak = 0

    def update(self, fid_value: float) -> bool:
        if fid_value < self.best:
            self.best = fid_value
        if fid_value > self.best * self.factor:
            self.streak += 1
        else:
            self.streak = 0
        return self.streak >= self.patience

    def state(self) -> dict:
        return {"best": self.best, "streak": self.streak}

    def restore(self, state: dict) -> None:
        self.best = float(state.get("best", math.inf))
        self.streak = int(state.get("streak", 0))


def append_jsonl(path: str, row: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(row) + "\n")


def read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


@dataclass
class RunResult:
    """Outcome summary of a training or distillation run."""

    kind: str
    status: str  # "completed" | "diverged" | "aborted"
    steps_done: int
    best_fid: float
    final_fid: float
    checkpoint_path: str
    out_dir: str
    drift: float = float("nan")
    compression: Optional[float] = None
    diverged_at: Optional[int] = None
    report: Optional[dict] = None

    def as_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)


def _optimizer_arrays(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    arrays = {}
    for idx, state in opt.state_dict()["state"].items():
        for key, val in state.items():
            # copy: .numpy() aliases the live state tensor, and the snapshot
            # must not mutate when training continues after a checkpoint.
            arrays[f"{idx}.{key}"] = (
                val.detach().cpu().numpy().copy() if torch.is_tensor(val) else np.asarray(val)
            )
    return arrays


def _restore_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    state: dict[int, dict] = {}
    for flat, arr in arrays.items():
        idx_s, key = flat.split(".", 1)
        # clone so the optimizer owns its buffers instead of aliasing the
        # checkpoint arrays (step() updates them in place).
        state.setdefault(int(idx_s), {})[key] = torch.from_numpy(np.asarray(arr)).clone()
    sd = opt.state_dict()
    opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


def _freeze(net: torch.nn.Module) -> torch.nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def _real_eval_features(kernel, dataset, cfg: TrainConfig) -> np.ndarray:
    real = dataset.sample(cfg.eval_samples, seed=derive_seed(cfg.seed, "eval-real"))
    return metrics_mod.embed_images(kernel, real, batch_size=cfg.global_batch)


def _eval_fid(kernel, real_feats: np.ndarray, generator, cfg: TrainConfig, step: int) -> float:
    fake_feats = metrics_mod.generator_features(
        kernel,
        generator,
        cfg.eval_samples,
        seed=cfg.seed,
        batch_size=cfg.global_batch,
        stream_id=f"eval/{step}",
    )
    d = real_feats.shape[1]
    return metrics_mod.frechet_distance(
        real_feats.mean(axis=0),
        np.cov(real_feats, rowvar=False).reshape(d, d),
        fake_feats.mean(axis=0),
        np.cov(fake_feats, rowvar=False).reshape(d, d),
    )


def _final_report(kernel, real_feats: np.ndarray, generator, cfg: TrainConfig) -> dict:
    fake_feats = metrics_mod.generator_features(
        kernel, generator, cfg.eval_samples, seed=cfg.seed, batch_size=cfg.global_batch, stream_id="final-eval"
    )
    return metrics_mod.score_features(real_feats, fake_feats, kernel_name=kernel.name).as_dict()


def train_teacher(cfg: TrainConfig, out_dir: str, resume: bool = False) -> RunResult:
    """Adversarially pretrain the teacher pair on the configured dataset.

    Nonsaturating logistic losses, R1 on reals, Adam with the configured
    betas, strict 1:1 discriminator/generator updates.  Writes losses.jsonl,
    stability.jsonl, ckpt-best/ (lowest eval FID) and ckpt-final/ under
    ``out_dir`` and returns a RunResult.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.json"))
    dataset = data_mod.open_dataset(cfg.dataset, cfg.resolution)

    g_spec = nets_mod.generator_spec(cfg.resolution, cfg.base_channels, cfg.latent_dim)
    d_spec = nets_mod.discriminator_spec(cfg.resolution, cfg.base_channels)
    gen = nets_mod.build_network(g_spec, derive_seed(cfg.seed, "teacher-generator"))
    disc = nets_mod.build_network(d_spec, derive_seed(cfg.seed, "teacher-discriminator"))
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))

    detector = DivergenceDetector(cfg.divergence_patience, cfg.divergence_factor)
    start_step = 0
    if resume:
        ckpt = nets_mod.load_checkpoint(os.path.join(out_dir, "ckpt-final"))
        gen = ckpt.build("generator")
        disc = ckpt.build("discriminator")
        opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        _restore_optimizer(opt_g, ckpt.arrays("opt_g"))
        _restore_optimizer(opt_d, ckpt.arrays("opt_d"))
        detector.restore(ckpt.manifest["meta"].get("detector", {}))
        start_step = ckpt.step

    eval_kernel = kernels_mod.metrics_kernel(cfg.resolution, cfg.kernel_dim)
    real_feats = _real_eval_features(eval_kernel, dataset, cfg)

    def save(tag: str, step: int) -> str:
        path = os.path.join(out_dir, tag)
        nets_mod.save_checkpoint(
            path,
            {"generator": gen, "discriminator": disc},
            step=step,
            seed=cfg.seed,
            extra_arrays={"opt_g": _optimizer_arrays(opt_g), "opt_d": _optimizer_arrays(opt_d)},
            meta={"detector": detector.state(), "kind": "teacher"},
        )
        return path

    losses_path = os.path.join(out_dir, "losses.jsonl")
    stability_path = os.path.join(out_dir, "stability.jsonl")
    best_fid = detector.best
    final_fid = float("nan")
    fake_logit_means: list[float] = []
    status = "completed"
    diverged_at = None
    step = start_step

    for step in range(start_step, cfg.steps):
        real = dataset.batch(cfg.batch_size, step=step, seed=cfg.seed)
        with torch.no_grad():
            fake = gen(data_mod.sample_latents(cfg.latent_dim, cfg.batch_size, cfg.seed, "teacher/fake-d", step))
        adv = adversarial_losses(
            real, fake, disc, disc, r1_gamma=cfg.weights.r1_gamma, compute="discriminator"
        )
        opt_d.zero_grad()
        adv.ds_loss.backward()
        opt_d.step()

        fake_g = gen(data_mod.sample_latents(cfg.latent_dim, cfg.batch_size, cfg.seed, "teacher/fake-g", step))
        logit_fake, _ = disc(fake_g)
        g_loss = F.softplus(-logit_fake).mean()
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rec = StabilityRecord(step, adv.real_logit_mean, adv.fake_logit_mean, float(adv.ds_loss.detach()))
            fake_logit_means.append(rec.fake_logit_mean)
            append_jsonl(stability_path, asdict(rec))
            append_jsonl(losses_path, {"step": step, "g_loss": float(g_loss.detach()), "ds_loss": float(adv.ds_loss.detach())})

        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            final_fid = _eval_fid(eval_kernel, real_feats, gen, cfg, step)
            append_jsonl(losses_path, {"step": step, "eval_fid": final_fid})
            if final_fid <= detector.best:
                save("ckpt-best", step + 1)
            if detector.update(final_fid):
                status = "diverged"
                diverged_at = step
                log.warning("teacher run diverged at step %d (fid %.3f)", step, final_fid)
                break

    best_fid = detector.best
    final_path = save("ckpt-final", step + 1)
    report = _final_report(eval_kernel, real_feats, gen, cfg) if status == "completed" else None
    result = RunResult(
        kind="teacher",
        status=status,
        steps_done=step + 1,
        best_fid=best_fid,
        final_fid=final_fid,
        checkpoint_path=os.path.join(out_dir, "ckpt-best") if status == "diverged" else final_path,
        out_dir=out_dir,
        drift=equilibrium_drift(fake_logit_means),
        diverged_at=diverged_at,
        report=report,
    )
    result.save(os.path.join(out_dir, "result.json"))
    return result


def _load_teacher(teacher_path: str):
    ckpt = nets_mod.load_checkpoint(teacher_path)
    gen = _freeze(ckpt.build("generator"))
    disc = _freeze(ckpt.build("discriminator"))
    return ckpt, gen, disc


def distill(cfg: TrainConfig, teacher_path: str, out_dir: str, resume: bool = False) -> RunResult:
    """Compress a pretrained teacher into a pruned student generator.

    Per step: (1) the student discriminator (plus the tap projections) takes
    a gradient step on real-vs-student logistic loss with R1, plus the
    teacher-feature reconstruction loss on Haar detail bands; (2) the student
    generator takes a step on the averaged teacher/student adversarial terms
    plus the kernel-space distribution matches against precomputed teacher
    mean embeddings.  Weight presets come from ``cfg.method``.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.json"))
    dataset = data_mod.open_dataset(cfg.dataset, cfg.resolution)
    teacher_ckpt, t_gen, t_disc = _load_teacher(teacher_path)
    t_gen_spec = teacher_ckpt.spec("generator")
    t_disc_spec = teacher_ckpt.spec("discriminator")
    if t_gen_spec.resolution != cfg.resolution:
        raise ConfigurationError(
            f"teacher resolution {t_gen_spec.resolution} != config resolution {cfg.resolution}"
        )

    if cfg.compression_target > 0:
        s_gen_spec = nets_mod.prune_spec(t_gen_spec, cfg.compression_target, tolerance=cfg.prune_tolerance)
    else:
        s_gen_spec = t_gen_spec
    cost = nets_mod.count_cost(s_gen_spec, reference=t_gen_spec)
    s_disc_spec = (
        nets_mod.scale_spec(t_disc_spec, s_gen_spec.channel_multiplier)
        if cfg.prune_discriminator
        else t_disc_spec
    )

    s_gen = nets_mod.build_network(s_gen_spec, derive_seed(cfg.seed, "student-generator"))
    nets_mod.inherit_parameters(s_gen, t_gen)
    s_disc = nets_mod.build_network(s_disc_spec, derive_seed(cfg.seed, "student-discriminator"))
    nets_mod.inherit_parameters(s_disc, t_disc)
    projections = FeatureProjection.from_specs(s_disc_spec, t_gen_spec, seed=derive_seed(cfg.seed, "projections"))

    weights = LossWeights.for_method(cfg.method, **asdict(cfg.weights))
    opt_g = torch.optim.Adam(s_gen.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(
        itertools.chain(s_disc.parameters(), projections.parameters()),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
    )

    use_dime = weights.lambda_dime_a > 0 or weights.lambda_dime_b > 0
    kernel_list = kernels_mod.default_kernels(cfg.resolution, cfg.kernel_dim) if use_dime else []
    if kernel_list and cfg.kernel_fit_steps > 0:
        for kernel in kernel_list:
            kernels_mod.fit_classifier_kernel(
                kernel, dataset, steps=cfg.kernel_fit_steps, batch_size=cfg.batch_size,
                seed=derive_seed(cfg.seed, f"kernel-fit/{kernel.name}"),
            )
    caches = {}
    if kernel_list and cfg.dime_mode in ("global", "both"):
        cache_dir = cfg.cache_dir or os.path.join(data_mod.default_cache_root(), "global-features")
        for kernel in kernel_list:
            caches[kernel.name] = kernels_mod.get_or_compute_global_features(
                cache_dir, kernel, t_gen, cfg.global_samples, batch_size=cfg.global_batch, seed=cfg.seed
            )
            log.info("global features ready for kernel %s (%d samples)", kernel.name, cfg.global_samples)

    detector = DivergenceDetector(cfg.divergence_patience, cfg.divergence_factor)
    start_step = 0
    if resume:
        ckpt = nets_mod.load_checkpoint(os.path.join(out_dir, "ckpt-final"))
        s_gen = ckpt.build("generator")
        s_disc = ckpt.build("student_discriminator")
        projections.load_state_dict(
            {k: torch.from_numpy(v) for k, v in ckpt.arrays("projections").items()}
        )
        opt_g = torch.optim.Adam(s_gen.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        opt_d = torch.optim.Adam(
            itertools.chain(s_disc.parameters(), projections.parameters()),
            lr=cfg.lr,
            betas=(cfg.beta1, cfg.beta2),
        )
        _restore_optimizer(opt_g, ckpt.arrays("opt_g"))
        _restore_optimizer(opt_d, ckpt.arrays("opt_d"))
        detector.restore(ckpt.manifest["meta"].get("detector", {}))
        start_step = ckpt.step

    eval_kernel = kernels_mod.metrics_kernel(cfg.resolution, cfg.kernel_dim)
    real_feats = _real_eval_features(eval_kernel, dataset, cfg)

    def save(tag: str, step: int) -> str:
        path = os.path.join(out_dir, tag)
        nets_mod.save_checkpoint(
            path,
            {"generator": s_gen, "student_discriminator": s_disc},
            step=step,
            seed=cfg.seed,
            extra_arrays={
                "projections": {k: v.detach().cpu().numpy() for k, v in projections.state_dict().items()},
                "opt_g": _optimizer_arrays(opt_g),
                "opt_d": _optimizer_arrays(opt_d),
            },
            meta={
                "detector": detector.state(),
                "kind": "distill",
                "method": cfg.method,
                "teacher": teacher_ckpt.manifest["components"]["generator"]["param_hash"],
                "compression": cost.compression_rate,
            },
        )
        return path

    losses_path = os.path.join(out_dir, "losses.jsonl")
    stability_path = os.path.join(out_dir, "stability.jsonl")
    final_fid = float("nan")
    fake_logit_means: list[float] = []
    status = "completed"
    diverged_at = None
    step = start_step

    for step in range(start_step, cfg.steps):
        try:
            real = dataset.batch(cfg.batch_size, step=step, seed=cfg.seed)
            z_d = data_mod.sample_latents(cfg.latent_dim, cfg.batch_size, cfg.seed, "distill/fake-d", step)
            with torch.no_grad():
                fake_d = s_gen(z_d)
            adv_d = adversarial_losses(
                real, fake_d, t_disc, s_disc, r1_gamma=weights.r1_gamma, compute="discriminator"
            )
            if weights.lambda_nickel > 0:
                with torch.no_grad():
                    t_img, t_taps = t_gen.forward_features(z_d)
                _, s_taps = s_disc(t_img)
                nickel_val = nickel_loss(t_taps, s_taps, projections)
            else:
                nickel_val = torch.zeros(())
            d_total = adv_d.ds_loss + weights.lambda_nickel * nickel_val
            if not math.isfinite(float(d_total.detach())):
                raise NumericError(f"discriminator loss non-finite at step {step}")
            opt_d.zero_grad()
            d_total.backward()
            opt_d.step()

            z_g = data_mod.sample_latents(cfg.latent_dim, cfg.batch_size, cfg.seed, "distill/fake-g", step)
            fake_g = s_gen(z_g)
            adv_g = adversarial_losses(real, fake_g, t_disc, s_disc, compute="generator")
            dime_vals = []
            for kernel in kernel_list:
                terms = []
                if cfg.dime_mode in ("global", "both"):
                    terms.append(dime_loss(kernel, fake_g, global_cache=caches[kernel.name], mode="global"))
                if cfg.dime_mode in ("paired", "both"):
                    with torch.no_grad():
                        t_img_g = t_gen(z_g)
                    terms.append(dime_loss(kernel, fake_g, teacher_images=t_img_g, mode="paired"))
                dime_vals.append(torch.stack(terms).mean())
            while len(dime_vals) < 2:
                dime_vals.append(torch.zeros(()))
            breakdown = total_loss(
                adv_g.g_teacher, adv_g.g_student, dime_vals[0], dime_vals[1], float(nickel_val.detach()), weights
            )
            opt_g.zero_grad()
            breakdown.total.backward()
            opt_g.step()
        except NumericError as exc:
            status = "aborted"
            log.error("run aborted at step %d: %s", step, exc)
            break

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rec = StabilityRecord(step, adv_d.real_logit_mean, adv_d.fake_logit_mean, float(adv_d.ds_loss.detach()))
            fake_logit_means.append(rec.fake_logit_mean)
            append_jsonl(stability_path, asdict(rec))
            append_jsonl(losses_path, {"step": step, "ds_loss": float(adv_d.ds_loss.detach()), **breakdown.as_dict()})

        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            final_fid = _eval_fid(eval_kernel, real_feats, s_gen, cfg, step)
            append_jsonl(losses_path, {"step": step, "eval_fid": final_fid})
            if final_fid <= detector.best:
                save("ckpt-best", step + 1)
            if detector.update(final_fid):
                status = "diverged"
                diverged_at = step
                log.warning("distillation diverged at step %d (fid %.3f)", step, final_fid)
                break

    final_path = save("ckpt-final", step + 1)
    report = _final_report(eval_kernel, real_feats, s_gen, cfg) if status == "completed" else None
    result = RunResult(
        kind="distill",
        status=status,
        steps_done=step + (0 if status == "aborted" else 1),
        best_fid=detector.best,
        final_fid=final_fid,
        checkpoint_path=os.path.join(out_dir, "ckpt-best") if status != "completed" else final_path,
        out_dir=out_dir,
        drift=equilibrium_drift(fake_logit_means),
        compression=cost.compression_rate,
        diverged_at=diverged_at,
        report=report,
    )
    result.save(os.path.join(out_dir, "result.json"))
    return result
