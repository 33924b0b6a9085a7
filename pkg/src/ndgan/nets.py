"""Convolutional generator/discriminator specs, pruning, and cost accounting.

Architectures are declared as a chain of layer descriptors so that parameter
and multiply-accumulate counts can be derived exactly from the spec, and so
that uniform channel scaling (the pruning knob) is a spec-level rewrite.
The discriminator carries a small upsampling head after its encoder; the
head's intermediate maps are the feature taps used for teacher-to-student
feature distillation, and its final map feeds the logit.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn, Tensor

from .errors import ConfigurationError, InfeasibleError, InputError

NETSPEC_SCHEMA = "netspec.v1"
CHECKPOINT_SCHEMA = "ckpt.v1"


@dataclass(frozen=True)
class LayerSpec:
    """One block of the network chain.

    op "conv": a 3x3 (or kxk head) convolution; the builder derives stride-2
    downsampling, nearest-upsample + conv, or same-size conv from the ratio of
    `size` (output spatial extent) to the previous layer's size.
    op "dense": the latent projection, a kxk transposed conv from a 1x1 input.
    """

    op: str
    in_ch: int
    out_ch: int
    size: int
    kernel: int

    def macs(self) -> int:
        if self.op == "dense":
            return self.kernel * self.kernel * self.in_ch * self.out_ch
        return self.kernel * self.kernel * self.in_ch * self.out_ch * self.size * self.size

    def params(self) -> int:
        return self.kernel * self.kernel * self.in_ch * self.out_ch + self.out_ch


@dataclass
class NetworkSpec:
    """Declarative architecture of a generator or discriminator."""

    kind: str  # "generator" | "discriminator"
    resolution: int
    base_channels: int
    channel_multiplier: float = 1.0
    latent_dim: Optional[int] = None
    layer_list: list[LayerSpec] = field(default_factory=list)
    feature_taps: list[int] = field(default_factory=list)

    def validate(self) -> None:
        if self.kind not in ("generator", "discriminator"):
            raise ConfigurationError(f"unknown network kind {self.kind!r}")
        r = self.resolution
        if r < 8 or (r & (r - 1)) != 0:
            raise ConfigurationError(f"resolution must be a power of two >= 8, got {r}")
        if not (0.0 < self.channel_multiplier <= 1.0):
            raise ConfigurationError(
                f"channel_multiplier must lie in (0, 1], got {self.channel_multiplier}"
            )
        if self.kind == "generator" and not self.latent_dim:
            raise ConfigurationError("generator spec needs latent_dim")
        if not self.layer_list:
            raise ConfigurationError("empty layer list")
        for i, layer in enumerate(self.layer_list):
            if layer.in_ch < 1 or layer.out_ch < 1:
                raise ConfigurationError(f"layer {i} has channel count < 1")
            if i > 0 and self.layer_list[i - 1].out_ch != layer.in_ch:
                raise ConfigurationError(
                    f"channel chain broken at layer {i}: "
                    f"{self.layer_list[i - 1].out_ch} -> {layer.in_ch}"
                )
        for t in self.feature_taps:
            if not (0 <= t < len(self.layer_list)):
                raise ConfigurationError(f"feature tap {t} out of range")

    def tap_shapes(self) -> list[tuple[int, int]]:
        """(channels, spatial size) of each declared feature tap."""
        return [
            (self.layer_list[t].out_ch, self.layer_list[t].size) for t in self.feature_taps
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = NETSPEC_SCHEMA
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        schema = d.pop("schema", NETSPEC_SCHEMA)
        if schema != NETSPEC_SCHEMA:
            raise ConfigurationError(f"unsupported netspec schema {schema!r}")
        d["layer_list"] = [LayerSpec(**l) for l in d.get("layer_list", [])]
        spec = cls(**d)
        spec.validate()
        return spec

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path: str) -> "NetworkSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CostReport:
    """Exact parameter and multiply-accumulate counts for one spec."""

    params: int
    flops: int
    compression_rate: Optional[float] = None


def compression_rate(flops_teacher: float, flops_student: float) -> float:
    """Fraction of teacher FLOPs removed: 1 - student/teacher."""
    if flops_teacher <= 0:
        raise InputError("teacher FLOPs must be positive")
    if flops_student < 0:
        raise InputError("student FLOPs must be >= 0")
    return 1.0 - flops_student / flops_teacher


def count_cost(spec: NetworkSpec, reference: Optional[NetworkSpec] = None) -> CostReport:
    """Count parameters and conv/dense multiply-accumulates of a spec.

    Normalization and activation ops are excluded.  With a reference spec the
    report also carries the achieved compression rate.
    """
    spec.validate()
    params = sum(l.params() for l in spec.layer_list)
    flops = sum(l.macs() for l in spec.layer_list)
    rate = None
    if reference is not None:
        rate = compression_rate(count_cost(reference).flops, flops)
    return CostReport(params=params, flops=flops, compression_rate=rate)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def scale_spec(spec: NetworkSpec, multiplier: float) -> NetworkSpec:
    """Uniformly scale the internal channel widths of a spec.

    Input/output channels of the chain endpoints (RGB planes, latent dim,
    logit) stay fixed; every internal junction width w becomes
    max(1, round(w * multiplier)).  Head kernels and spatial sizes are kept.
    """
    if not (0.0 < multiplier <= 1.0):
        raise ConfigurationError(f"multiplier must lie in (0, 1], got {multiplier}")
    layers = spec.layer_list
    new_layers = []
    prev_out = None
    for i, layer in enumerate(layers):
        in_ch = layer.in_ch if i == 0 else prev_out
        if i == len(layers) - 1:
            out_ch = layer.out_ch
        else:
            out_ch = max(1, _round_half_up(layer.out_ch * multiplier))
        new_layers.append(
            LayerSpec(op=layer.op, in_ch=in_ch, out_ch=out_ch, size=layer.size, kernel=layer.kernel)
        )
        prev_out = out_ch
    out = NetworkSpec(
        kind=spec.kind,
        resolution=spec.resolution,
        base_channels=spec.base_channels,
        channel_multiplier=spec.channel_multiplier * multiplier,
        latent_dim=spec.latent_dim,
        layer_list=new_layers,
        feature_taps=list(spec.feature_taps),
    )
    out.validate()
    return out


def prune_spec(
    teacher: NetworkSpec, target_compression: float, tolerance: float = 0.02
) -> NetworkSpec:
    """Pick a channel multiplier whose FLOPs compression matches the target.

    Scans multipliers on a fine grid (conv cost is roughly quadratic in width,
    but rounding makes the achieved rate a step function) and returns the spec
    whose achieved rate is closest to the target.

    Raises:
        InfeasibleError: no multiplier gets within `tolerance` of the target.
    """
    if not (0.0 < target_compression < 1.0):
        raise ConfigurationError(
            f"target compression must lie in (0, 1), got {target_compression}"
        )
    teacher.validate()
    ref_flops = count_cost(teacher).flops
    best: tuple[float, NetworkSpec] | None = None
    for step in range(10000, 0, -1):
        m = step / 10000.0
        candidate = scale_spec(teacher, m)
        achieved = compression_rate(ref_flops, count_cost(candidate).flops)
        diff = abs(achieved - target_compression)
        if best is None or diff < best[0]:
            best = (diff, candidate)
        if achieved > target_compression + tolerance:
            break  # rates only grow as m shrinks
    assert best is not None
    if best[0] > tolerance:
        raise InfeasibleError(
            f"no channel multiplier reaches compression {target_compression:.4f} "
            f"within {tolerance:.0%} (closest miss {best[0]:.4f})"
        )
    return best[1]


def _widths(base_channels: int, resolution: int, max_channels: int = 512):
    def w(size: int) -> int:
        return max(1, min(max_channels, base_channels * resolution // (2 * size)))

    return w


def generator_spec(
    resolution: int,
    base_channels: int = 32,
    latent_dim: int = 64,
    channel_multiplier: float = 1.0,
    max_channels: int = 512,
) -> NetworkSpec:
    """DCGAN-style generator chain: latent -> 4x4 trunk -> upsample convs -> RGB.

    The default feature tap is the block whose output sits at a quarter of the
    final resolution (floored at the 4x4 trunk), the map consumed by the
    discriminator-side feature distillation.
    """
    w = _widths(base_channels, resolution, max_channels)
    layers = [LayerSpec("dense", latent_dim, w(4), size=4, kernel=4)]
    size = 4
    while size < resolution // 2:
        layers.append(LayerSpec("conv", w(size), w(size * 2), size=size * 2, kernel=3))
        size *= 2
    layers.append(LayerSpec("conv", w(size), 3, size=resolution, kernel=3))
    tap_size = max(4, resolution // 4)
    taps = [i for i, l in enumerate(layers) if l.size == tap_size and l.out_ch != 3][:1]
    spec = NetworkSpec(
        kind="generator",
        resolution=resolution,
        base_channels=base_channels,
        latent_dim=latent_dim,
        layer_list=layers,
        feature_taps=taps,
    )
    if channel_multiplier != 1.0:
        spec = scale_spec(spec, channel_multiplier)
    spec.validate()
    return spec


def discriminator_spec(
    resolution: int,
    base_channels: int = 32,
    channel_multiplier: float = 1.0,
    max_channels: int = 512,
) -> NetworkSpec:
    """Encoder chain to 4x4, then an upsampling head back to quarter resolution.

    The head's last map (the default feature tap) feeds a full-extent conv
    producing the logit, so the adversarial signal passes through the same
    features that receive distillation.
    """
    w = _widths(base_channels, resolution, max_channels)
    layers = [LayerSpec("conv", 3, w(resolution // 2), size=resolution // 2, kernel=3)]
    size = resolution // 2
    while size > 4:
        layers.append(LayerSpec("conv", w(size), w(size // 2), size=size // 2, kernel=3))
        size //= 2
    tap_size = max(4, resolution // 4)
    while size < tap_size:
        layers.append(LayerSpec("conv", w(size), w(size * 2), size=size * 2, kernel=3))
        size *= 2
    taps = [len(layers) - 1]
    layers.append(LayerSpec("conv", w(size), 1, size=1, kernel=size))
    spec = NetworkSpec(
        kind="discriminator",
        resolution=resolution,
        base_channels=base_channels,
        layer_list=layers,
        feature_taps=taps,
    )
    if channel_multiplier != 1.0:
        spec = scale_spec(spec, channel_multiplier)
    spec.validate()
    return spec


class _PixelNorm(nn.Module):
    def forward(self, x: Tensor) -> Tensor:
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


def _layer_geometry(layers: list[LayerSpec], input_size: int) -> list[str]:
    """Classify each layer as stem/down/up/same/head from the size chain."""
    roles = []
    prev = input_size
    for layer in layers:
        if layer.op == "dense":
            roles.append("stem")
        elif layer.size == 1 and layer.kernel == prev:
            roles.append("head")
        elif layer.size == prev // 2:
            roles.append("down")
        elif layer.size == prev * 2:
            roles.append("up")
        elif layer.size == prev:
            roles.append("same")
        else:
            raise ConfigurationError(
                f"unsupported layer geometry {prev} -> {layer.size} (kernel {layer.kernel})"
            )
        prev = layer.size
    return roles


class GeneratorNet(nn.Module):
    """Generator built from a NetworkSpec; outputs live in [-1, 1] via tanh."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        if spec.kind != "generator":
            raise ConfigurationError("GeneratorNet needs a generator spec")
        self.spec = spec
        self.roles = _layer_geometry(spec.layer_list, 1)
        mods = []
        for layer, role in zip(spec.layer_list, self.roles):
            if role == "stem":
                mods.append(nn.ConvTranspose2d(layer.in_ch, layer.out_ch, layer.kernel))
            else:
                mods.append(nn.Conv2d(layer.in_ch, layer.out_ch, layer.kernel, padding=layer.kernel // 2))
        self.blocks = nn.ModuleList(mods)
        self.norm = _PixelNorm()

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def forward_features(self, z: Tensor) -> tuple[Tensor, list[Tensor]]:
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise InputError(f"latents must be (B, {self.spec.latent_dim}), got {tuple(z.shape)}")
        x = z[:, :, None, None]
        taps = {}
        last = len(self.blocks) - 1
        for i, (block, role) in enumerate(zip(self.blocks, self.roles)):
            if role == "up":
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x)
            if i == last:
                x = torch.tanh(x)
            else:
                x = self.norm(F.leaky_relu(x, 0.2))
            if i in self.spec.feature_taps:
                taps[i] = x
        return x, [taps[i] for i in self.spec.feature_taps]

    def forward(self, z: Tensor) -> Tensor:
        return self.forward_features(z)[0]


class DiscriminatorNet(nn.Module):
    """Discriminator with an upsampling feature head.

    forward returns (logits, tap_features); decoder blocks add the encoder
    activation of matching shape (U-Net style skip) when one exists.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        if spec.kind != "discriminator":
            raise ConfigurationError("DiscriminatorNet needs a discriminator spec")
        self.spec = spec
        self.roles = _layer_geometry(spec.layer_list, spec.resolution)
        mods = []
        for layer, role in zip(spec.layer_list, self.roles):
            stride = 2 if role == "down" else 1
            padding = 0 if role == "head" else layer.kernel // 2
            mods.append(
                nn.Conv2d(layer.in_ch, layer.out_ch, layer.kernel, stride=stride, padding=padding)
            )
        self.blocks = nn.ModuleList(mods)

    def forward(self, images: Tensor) -> tuple[Tensor, list[Tensor]]:
        r = self.spec.resolution
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != r or images.shape[3] != r:
            raise InputError(f"images must be (B, 3, {r}, {r}), got {tuple(images.shape)}")
        x = images
        encoder = {}
        taps = {}
        logit = None
        for i, (block, role, layer) in enumerate(zip(self.blocks, self.roles, self.spec.layer_list)):
            if role == "up":
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x)
            if role == "head":
                logit = x.flatten(1).squeeze(1)
            else:
                x = F.leaky_relu(x, 0.2)
                if role == "up":
                    skip = encoder.get((layer.size, layer.out_ch))
                    if skip is not None:
                        x = x + skip
                else:
                    encoder[(layer.size, layer.out_ch)] = x
            if i in self.spec.feature_taps:
                taps[i] = x
        assert logit is not None, "discriminator spec has no head layer"
        return logit, [taps[i] for i in self.spec.feature_taps]


def build_network(spec: NetworkSpec, seed: int) -> nn.Module:
    """Instantiate a spec with deterministic, seed-keyed initialization.

    Identical (spec, seed) pairs produce bit-identical parameters: weights are
    drawn N(0, 1/fan_in) from a dedicated torch.Generator in registration
    order, biases start at zero.
    """
    net = GeneratorNet(spec) if spec.kind == "generator" else DiscriminatorNet(spec)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for block in net.blocks:
            w = block.weight
            if isinstance(block, nn.ConvTranspose2d):
                fan_in = w.shape[0]  # fed from a 1x1 input map
            else:
                fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            w.normal_(0.0, 1.0, generator=gen).mul_(1.0 / math.sqrt(fan_in))
            block.bias.zero_()
    return net


def parameter_hash(net: nn.Module) -> str:
    """Stable digest of all parameter names and values."""
    h = hashlib.sha256()
    for name, p in sorted(net.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def inherit_parameters(student: nn.Module, teacher: nn.Module) -> None:
    """Warm-start a pruned network from its teacher by leading-channel slices.

    Every student tensor must be elementwise no larger than the teacher's
    tensor of the same name; when the specs are identical this is an exact
    copy.
    """
    tparams = dict(teacher.named_parameters())
    with torch.no_grad():
        for name, p in student.named_parameters():
            src = tparams.get(name)
            if src is None:
                raise InputError(f"teacher has no parameter named {name}")
            if any(a > b for a, b in zip(p.shape, src.shape)):
                raise InputError(
                    f"student parameter {name} {tuple(p.shape)} exceeds teacher {tuple(src.shape)}"
                )
            p.copy_(src[tuple(slice(0, s) for s in p.shape)])


def save_checkpoint(
    path: str,
    components: dict[str, nn.Module],
    step: int,
    seed: int,
    extra_arrays: Optional[dict[str, dict[str, np.ndarray]]] = None,
    meta: Optional[dict] = None,
) -> None:
    """Write a checkpoint directory: one npz of named arrays per component
    plus a manifest carrying spec hashes, step, and seed."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "step": step,
        "seed": seed,
        "components": {},
        "extra": sorted(extra_arrays) if extra_arrays else [],
        "meta": meta or {},
    }
    for name, net in components.items():
        arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
        np.savez(os.path.join(path, f"{name}.npz"), **arrays)
        manifest["components"][name] = {
            "file": f"{name}.npz",
            "spec": net.spec.to_dict(),
            "spec_hash": net.spec.content_hash(),
            "param_hash": parameter_hash(net),
        }
    for name, arrays in (extra_arrays or {}).items():
        np.savez(os.path.join(path, f"{name}.npz"), **arrays)
    tmp = os.path.join(path, "manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2)
    os.replace(tmp, os.path.join(path, "manifest.json"))


class Checkpoint:
    """Loaded view of a checkpoint directory."""

    def __init__(self, path: str):
        mpath = os.path.join(path, "manifest.json")
        if not os.path.exists(mpath):
            raise InputError(f"no checkpoint manifest at {mpath}")
        with open(mpath) as fh:
            self.manifest = json.load(fh)
        if self.manifest.get("schema") != CHECKPOINT_SCHEMA:
            raise ConfigurationError(f"unsupported checkpoint schema in {mpath}")
        self.path = path
        self.step = self.manifest["step"]
        self.seed = self.manifest["seed"]

    def spec(self, name: str) -> NetworkSpec:
        return NetworkSpec.from_dict(self.manifest["components"][name]["spec"])

    def arrays(self, name: str) -> dict[str, np.ndarray]:
        with np.load(os.path.join(self.path, f"{name}.npz")) as z:
            return {k: z[k].copy() for k in z.files}

    def build(self, name: str) -> nn.Module:
        net = build_network(self.spec(name), seed=0)
        state = {k: torch.from_numpy(v) for k, v in self.arrays(name).items()}
        net.load_state_dict(state)
        return net


def load_checkpoint(path: str) -> Checkpoint:
    return Checkpoint(path)
