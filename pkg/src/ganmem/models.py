"""Desk-scale residual GAN with a functional forward pass.

The generator is an FC head followed by residual up-sampling blocks and a
final (unmodulated) conv; the discriminator mirrors it with down-sampling
blocks, an FC head and a final (unmodulated) FC. Every layer is addressed by
a path such as ``G/B0/conv1`` so that base weights, statistics, styles and
checkpoint blobs all share one key space.

Blocks are numbered from the noise side: ``B0`` is the lowest-resolution
block in both networks, so per-block policies apply to G and D alike.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .modulation import ConvLayer, FCLayer, LayerStats, layer_stats

BASE_RESOLUTION = 4
LEAK = 0.2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    noise_dim: int = 64
    image_size: int = 32
    channels: int = 3
    n_blocks: int = 3
    block_channel_schedule: tuple[int, ...] = (128, 64, 32)
    conditional: bool = False
    n_classes_per_task: int = 1

    def __post_init__(self):
        object.__setattr__(self, "block_channel_schedule", tuple(self.block_channel_schedule))
        if self.noise_dim < 2:
            raise ConfigError("noise_dim must be >= 2")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if len(self.block_channel_schedule) != self.n_blocks:
            raise ConfigError("block_channel_schedule needs one entry per block")
        if any(c < 2 for c in self.block_channel_schedule):
            raise ConfigError("block channels must be >= 2")
        if self.image_size != BASE_RESOLUTION * 2**self.n_blocks:
            raise ConfigError(
                f"image_size {self.image_size} inconsistent with {self.n_blocks} x2 up-sampling "
                f"blocks from {BASE_RESOLUTION}x{BASE_RESOLUTION}"
            )
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.n_classes_per_task < 1 or (not self.conditional and self.n_classes_per_task != 1):
            raise ConfigError("n_classes_per_task must be 1 unless conditional")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channel_schedule"] = list(self.block_channel_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def fingerprint(self) -> str:
        """Hash of the structural fields (conditioning is per task)."""
        d = self.to_dict()
        d.pop("conditional")
        d.pop("n_classes_per_task")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class LayerSpec:
    path: str
    kind: str  # "fc", "pointwise" (1x1 conv, modulated row-wise) or "conv"
    shape: tuple[int, ...]
    block: str  # "FC", "B0".."B{n-1}" or "OUT"
    modulated: bool
    class_bias: bool = False

    @property
    def net(self) -> str:
        return self.path.split("/")[0]


def _block_channels(cfg: ArchConfig, m: int) -> tuple[int, int]:
    sched = cfg.block_channel_schedule
    c_in = sched[0] if m == 0 else sched[m - 1]
    return c_in, sched[m]


def layer_specs(cfg: ArchConfig) -> list[LayerSpec]:
    """All layers of G then D in forward order."""
    sched = cfg.block_channel_schedule
    n_fc = sched[0] * BASE_RESOLUTION**2
    specs = [LayerSpec("G/fc", "fc", (n_fc, cfg.noise_dim), "FC", True, True)]
    for m in range(cfg.n_blocks):
        c_in, c_out = _block_channels(cfg, m)
        specs += [
            LayerSpec(f"G/B{m}/conv0", "conv", (c_out, c_in, 3, 3), f"B{m}", True),
            LayerSpec(f"G/B{m}/conv1", "conv", (c_out, c_out, 3, 3), f"B{m}", True),
            LayerSpec(f"G/B{m}/shortcut", "pointwise", (c_out, c_in), f"B{m}", True),
        ]
    specs.append(LayerSpec("G/out", "conv", (cfg.channels, sched[-1], 3, 3), "OUT", False))

    last = cfg.n_blocks - 1
    specs.append(LayerSpec("D/conv_img", "conv", (sched[-1], cfg.channels, 3, 3), f"B{last}", True))
    for m in reversed(range(cfg.n_blocks)):
        # mirror of G block m: maps c_out -> c_in
        g_in, g_out = _block_channels(cfg, m)
        specs += [
            LayerSpec(f"D/B{m}/conv0", "conv", (g_in, g_out, 3, 3), f"B{m}", True),
            LayerSpec(f"D/B{m}/conv1", "conv", (g_in, g_in, 3, 3), f"B{m}", True),
            LayerSpec(f"D/B{m}/shortcut", "pointwise", (g_in, g_out), f"B{m}", True),
        ]
    specs.append(LayerSpec("D/fc", "fc", (sched[0], n_fc), "FC", True, True))
    specs.append(LayerSpec("D/out", "fc", (1, sched[0]), "OUT", False))
    return specs


def block_names(cfg: ArchConfig) -> list[str]:
    return ["FC"] + [f"B{m}" for m in range(cfg.n_blocks)]


@dataclass
class BaseModel:
    """Frozen generator + discriminator weights with cached layer statistics."""

    arch: ArchConfig
    layers: dict[str, FCLayer | ConvLayer]
    stats: dict[str, LayerStats] = field(default_factory=dict)

    def __post_init__(self):
        self.specs = {s.path: s for s in layer_specs(self.arch)}
        missing = set(self.specs) - set(self.layers)
        if missing:
            raise ConfigError(f"missing layers: {sorted(missing)}")
        if not self.stats:
            self.stats = {
                p: layer_stats(self.layers[p]) for p, s in self.specs.items() if s.modulated
            }

    @property
    def modulated_specs(self) -> list[LayerSpec]:
        return [s for s in self.specs.values() if s.modulated]

    def params(self) -> dict[str, tuple[Tensor, Tensor]]:
        return {p: (l.weight, l.bias) for p, l in self.layers.items()}

    def digest(self) -> str:
        """sha256 over every base weight and statistic."""
        h = hashlib.sha256()
        for p in sorted(self.layers):
            for t in (self.layers[p].weight, self.layers[p].bias):
                h.update(p.encode())
                h.update(t.detach().contiguous().numpy().tobytes())
        for p in sorted(self.stats):
            for t in (self.stats[p].mean, self.stats[p].std):
                h.update(t.detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def parameter_count(self) -> int:
        return sum(l.weight.numel() + l.bias.numel() for l in self.layers.values())

    def to(self, dtype: torch.dtype) -> "BaseModel":
        layers = {p: type(l)(l.weight.to(dtype), l.bias.to(dtype)) for p, l in self.layers.items()}
        stats = {p: LayerStats(s.mean.to(dtype), s.std.to(dtype)) for p, s in self.stats.items()}
        return BaseModel(self.arch, layers, stats)


def _make_layer(spec: LayerSpec, gen: torch.Generator, dtype) -> FCLayer | ConvLayer:
    fan_in = 1
    for d in spec.shape[1:]:
        fan_in *= d
    std = (2.0 / (1 + LEAK**2) / fan_in) ** 0.5
    w = torch.randn(spec.shape, generator=gen, dtype=torch.float64) * std
    b = torch.zeros(spec.shape[0], dtype=torch.float64)
    if spec.kind == "conv":
        return ConvLayer(w.to(dtype), b.to(dtype))
    return FCLayer(w.to(dtype), b.to(dtype))


def build_models(cfg: ArchConfig, seed: int = 0, dtype=torch.float32) -> BaseModel:
    """Randomly initialized G and D (deterministic in ``seed``)."""
    gen = torch.Generator().manual_seed(seed)
    layers = {s.path: _make_layer(s, gen, dtype) for s in layer_specs(cfg)}
    return BaseModel(cfg, layers)


def _add_bias(h: Tensor, b: Tensor) -> Tensor:
    if h.dim() == 4:
        b = b.reshape(b.shape + (1, 1)) if b.dim() == 2 else b.reshape(1, -1, 1, 1)
    return h + b


def _pointwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return _add_bias(F.conv2d(x, w[:, :, None, None]), b)


def _conv3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return F.conv2d(x, w, b, padding=1)


def _res_block(x: Tensor, params, prefix: str) -> Tensor:
    dx = _conv3(F.leaky_relu(x, LEAK), *params[f"{prefix}/conv0"])
    dx = _conv3(F.leaky_relu(dx, LEAK), *params[f"{prefix}/conv1"])
    return _pointwise(x, *params[f"{prefix}/shortcut"]) + dx


def generator_forward(cfg: ArchConfig, params, z: Tensor) -> Tensor:
    """``params`` maps layer path -> (weight, bias); bias may be per-sample."""
    w, b = params["G/fc"]
    h = _add_bias(F.linear(z, w), b)
    x = h.view(-1, cfg.block_channel_schedule[0], BASE_RESOLUTION, BASE_RESOLUTION)
    for m in range(cfg.n_blocks):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = _res_block(x, params, f"G/B{m}")
    x = _conv3(F.leaky_relu(x, LEAK), *params["G/out"])
    return torch.tanh(x)


def discriminator_forward(cfg: ArchConfig, params, x: Tensor) -> Tensor:
    """Returns pre-sigmoid logits of shape (N,)."""
    h = _conv3(x, *params["D/conv_img"])
    for m in reversed(range(cfg.n_blocks)):
        h = _res_block(h, params, f"D/B{m}")
        h = F.avg_pool2d(h, 2)
    h = h.flatten(1)
    w, b = params["D/fc"]
    h = F.leaky_relu(_add_bias(F.linear(h, w), b), LEAK)
    w, b = params["D/out"]
    return (F.linear(h, w) + b).squeeze(1)
