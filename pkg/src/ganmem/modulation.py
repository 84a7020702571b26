"""Weight normalization and style modulation of frozen FC and Conv layers.

mFiLM normalizes every row of an FC weight and re-styles it with a
per-row scale/shift; mAdaFM does the same for every (out, in) kernel slice
of a Conv filter bank. Both are pure functions of torch tensors so they can
sit inside an autograd graph that only reaches the style parameters.

The modulated weight is evaluated in the algebraically equivalent form

    W + (scale / std - 1) * (W - mean) + (shift - mean)

so that the source identity style (scale = std, shift = mean) returns the
frozen weight bit-for-bit instead of up to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

__all__ = [
    "EPS_STD",
    "InvalidInputError",
    "FCLayer",
    "ConvLayer",
    "LayerStats",
    "Style",
    "row_stats",
    "kernel_stats",
    "layer_stats",
    "normalize",
    "mfilm_modulate",
    "madafm_modulate",
    "modulate",
    "legacy_modulate",
    "init_source_style",
    "neutral_style",
]

EPS_STD = 1e-8


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class FCLayer:
    weight: Tensor  # (d_out, d_in)
    bias: Tensor  # (d_out,)

    def __post_init__(self):
        if self.weight.dim() != 2:
            raise InvalidInputError(f"FC weight must be 2-D, got {tuple(self.weight.shape)}")
        if self.weight.shape[1] < 2:
            raise InvalidInputError("FC layer needs d_in >= 2 for a row std")
        if self.bias.shape != self.weight.shape[:1]:
            raise InvalidInputError(
                f"bias shape {tuple(self.bias.shape)} does not match d_out={self.weight.shape[0]}"
            )


@dataclass(frozen=True)
class ConvLayer:
    weight: Tensor  # (C_out, C_in, K1, K2)
    bias: Tensor  # (C_out,)

    def __post_init__(self):
        if self.weight.dim() != 4:
            raise InvalidInputError(f"Conv weight must be 4-D, got {tuple(self.weight.shape)}")
        k1, k2 = self.weight.shape[2:]
        if k1 * k2 < 2:
            raise InvalidInputError("Conv kernels need K1*K2 >= 2 for a kernel std")
        if self.bias.shape != self.weight.shape[:1]:
            raise InvalidInputError(
                f"bias shape {tuple(self.bias.shape)} does not match C_out={self.weight.shape[0]}"
            )


@dataclass(frozen=True)
class LayerStats:
    """Per-row (FC) or per-kernel (Conv) mean and population std."""

    mean: Tensor
    std: Tensor


@dataclass
class Style:
    """Scale, shift and bias offset for one modulated layer.

    For FC layers ``scale``/``shift`` have shape (d_out,); for Conv layers
    (C_out, C_in). ``bias`` is (d_out,) or, for a conditional FC layer,
    (n_classes, d_out) with one offset per class.
    """

    scale: Tensor
    shift: Tensor
    bias: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"scale": self.scale, "shift": self.shift, "bias": self.bias}

    def map(self, fn) -> "Style":
        return Style(fn(self.scale), fn(self.shift), fn(self.bias))

    @property
    def class_count(self) -> int:
        return self.bias.shape[0] if self.bias.dim() == 2 else 1


def _grouped_stats(flat: Tensor) -> LayerStats:
    """Mean/population std over the last axis of ``flat`` (rows x elements)."""
    if not torch.isfinite(flat).all():
        raise InvalidInputError("weights contain non-finite entries")
    # float64 accumulation keeps the stats of float32 weights reproducible
    x = flat.detach().to(torch.float64)
    mean = x.mean(dim=-1)
    std = x.std(dim=-1, unbiased=False)
    lo, hi = x.amin(dim=-1), x.amax(dim=-1)
    constant = lo == hi
    mean = torch.where(constant, hi, mean)
    std = torch.where(constant, torch.zeros_like(std), std)
    std = std.clamp_min(EPS_STD)
    return LayerStats(mean.to(flat.dtype), std.to(flat.dtype))


def row_stats(layer: FCLayer) -> LayerStats:
    return _grouped_stats(layer.weight)


def kernel_stats(layer: ConvLayer) -> LayerStats:
    w = layer.weight
    return _grouped_stats(w.reshape(w.shape[0], w.shape[1], -1))


def layer_stats(layer: FCLayer | ConvLayer) -> LayerStats:
    if isinstance(layer, ConvLayer):
        return kernel_stats(layer)
    return row_stats(layer)


def _expand(t: Tensor, weight: Tensor) -> Tensor:
    return t.reshape(t.shape + (1,) * (weight.dim() - t.dim()))


def normalize(weight: Tensor, stats: LayerStats) -> Tensor:
    """(W - mean) / std, broadcast over rows or kernel slices."""
    return (weight - _expand(stats.mean, weight)) / _expand(stats.std, weight)


def _check_shapes(weight: Tensor, stats: LayerStats, style: Style, n_group_dims: int):
    group_shape = weight.shape[:n_group_dims]
    for name, t in (("mean", stats.mean), ("std", stats.std)):
        if t.shape != group_shape:
            raise InvalidInputError(f"stats.{name} shape {tuple(t.shape)} != {tuple(group_shape)}")
    for name, t in (("scale", style.scale), ("shift", style.shift)):
        if t.shape != group_shape:
            raise InvalidInputError(f"style.{name} shape {tuple(t.shape)} != {tuple(group_shape)}")
    if style.bias.shape[-1:] != weight.shape[:1] or style.bias.dim() > 2:
        raise InvalidInputError(f"style.bias shape {tuple(style.bias.shape)} incompatible with layer")


def _modulated_weight(weight: Tensor, stats: LayerStats, scale: Tensor, shift: Tensor) -> Tensor:
    mean = _expand(stats.mean, weight)
    ratio = _expand(scale / stats.std, weight)
    return weight + (ratio - 1) * (weight - mean) + (_expand(shift, weight) - mean)


def _modulated_bias(bias: Tensor, offset: Tensor, class_ids: Tensor | None) -> Tensor:
    if offset.dim() == 2:
        if class_ids is None:
            raise InvalidInputError("conditional bias needs class ids")
        if class_ids.numel() and (class_ids.min() < 0 or class_ids.max() >= offset.shape[0]):
            raise InvalidInputError(f"class id out of range [0, {offset.shape[0]})")
        return bias + offset[class_ids]
    return bias + offset


def mfilm_modulate(
    layer: FCLayer, stats: LayerStats, style: Style, class_ids: Tensor | None = None
) -> FCLayer:
    """Row-wise modulation of an FC layer.

    With a conditional style the returned bias has one row per entry of
    ``class_ids``; the FCLayer invariant is then relaxed to (N, d_out).
    """
    _check_shapes(layer.weight, stats, style, 1)
    w = _modulated_weight(layer.weight, stats, style.scale, style.shift)
    b = _modulated_bias(layer.bias, style.bias, class_ids)
    return _raw_layer(FCLayer, w, b)


def madafm_modulate(layer: ConvLayer, stats: LayerStats, style: Style) -> ConvLayer:
    """Kernel-wise modulation of a Conv layer."""
    _check_shapes(layer.weight, stats, style, 2)
    if style.bias.dim() != 1:
        raise InvalidInputError("conv bias offset must be a vector")
    w = _modulated_weight(layer.weight, stats, style.scale, style.shift)
    return ConvLayer(w, layer.bias + style.bias)


def modulate(layer, stats: LayerStats, style: Style, class_ids: Tensor | None = None):
    if isinstance(layer, ConvLayer):
        return madafm_modulate(layer, stats, style)
    return mfilm_modulate(layer, stats, style, class_ids)


def _raw_layer(cls, weight: Tensor, bias: Tensor):
    # bypass __post_init__ when the bias is per-sample
    obj = object.__new__(cls)
    object.__setattr__(obj, "weight", weight)
    object.__setattr__(obj, "bias", bias)
    return obj


def legacy_modulate(layer_or_features, style: Style, mode: str, class_ids: Tensor | None = None):
    """Unnormalized modulation used by the NoNorm ablation.

    ``film_features``: ``layer_or_features`` is a feature tensor (..., d) and
    the result is ``scale * h + shift``.
    ``adafm_nonorm``: ``layer_or_features`` is an FCLayer or ConvLayer and the
    weight becomes ``scale * W + shift`` (broadcast per row / per kernel),
    with the bias offset added as usual.
    """
    if mode == "film_features":
        h = layer_or_features
        if style.scale.shape != h.shape[-1:] or style.shift.shape != h.shape[-1:]:
            raise InvalidInputError("feature-wise scale/shift must match the last feature axis")
        return style.scale * h + style.shift
    if mode != "adafm_nonorm":
        raise ValueError(f"unknown legacy mode {mode!r}")
    layer = layer_or_features
    w = layer.weight
    n_group = 2 if isinstance(layer, ConvLayer) else 1
    if style.scale.shape != w.shape[:n_group] or style.shift.shape != w.shape[:n_group]:
        raise InvalidInputError("scale/shift shape does not match the layer")
    w_hat = _expand(style.scale, w) * w + _expand(style.shift, w)
    if isinstance(layer, ConvLayer):
        return ConvLayer(w_hat, layer.bias + style.bias)
    return _raw_layer(FCLayer, w_hat, _modulated_bias(layer.bias, style.bias, class_ids))


def init_source_style(layer, stats: LayerStats, n_classes: int = 1) -> Style:
    """Style that makes modulation reproduce ``layer`` exactly.

    Identity under the mFiLM/mAdaFM formula forces scale = std and
    shift = mean (with zero bias offsets).
    """
    out = layer.weight.shape[0]
    if n_classes > 1 and isinstance(layer, FCLayer):
        bias = layer.weight.new_zeros(n_classes, out)
    else:
        bias = layer.weight.new_zeros(out)
    return Style(stats.std.clone(), stats.mean.clone(), bias)


def neutral_style(layer, n_classes: int = 1) -> Style:
    """scale = 1, shift = 0, bias = 0.

    Under mFiLM/mAdaFM this is the pure normalized base; under the
    unnormalized ``adafm_nonorm`` form it reproduces the layer exactly.
    """
    group = layer.weight.shape[:2] if isinstance(layer, ConvLayer) else layer.weight.shape[:1]
    out = layer.weight.shape[0]
    bias_shape = (n_classes, out) if n_classes > 1 and isinstance(layer, FCLayer) else (out,)
    return Style(
        layer.weight.new_ones(group),
        layer.weight.new_zeros(group),
        layer.weight.new_zeros(bias_shape),
    )
