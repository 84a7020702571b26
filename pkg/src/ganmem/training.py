"""Adversarial objective, R1 penalty and the per-task training loops."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import torch
import torch.nn.functional as F
from torch import Tensor

from .data import ImageDataset
from .models import BaseModel, discriminator_forward, generator_forward
from .modulation import (
    ConvLayer,
    FCLayer,
    init_source_style,
    legacy_modulate,
    modulate,
    neutral_style,
)
from .registry import StyleSet

log = logging.getLogger(__name__)

ABLATIONS = (None, "NoNorm", "NoBias")


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    r1_gamma: float = 10.0
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0 or self.r1_gamma < 0:
            raise ValueError(f"invalid hyperparameters {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def gan_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Logistic discriminator loss and non-saturating generator loss."""
    loss_d = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    loss_g = F.softplus(-d_fake).mean()
    return loss_d, loss_g


def r1_penalty(d_fn: Callable[[Tensor], Tensor], x_real: Tensor, gamma: float = 10.0) -> Tensor:
    """(gamma / 2) * E ||grad_x D(x)||^2 on real samples."""
    x = x_real.detach().requires_grad_(True)
    out = d_fn(x)
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        return out.sum() * 0.0
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(1).mean()


def styled_params(
    base: BaseModel,
    styles: dict,
    class_ids: Tensor | None = None,
    ablation: str | None = None,
    net: str | None = None,
) -> dict[str, tuple[Tensor, Tensor]]:
    """Layer path -> (weight, bias) with every modulated layer re-styled."""
    params = {}
    for path, spec in base.specs.items():
        if net is not None and spec.net != net:
            continue
        layer = base.layers[path]
        if not spec.modulated:
            params[path] = (layer.weight, layer.bias)
            continue
        try:
            style = styles[path]
        except KeyError:
            raise KeyError(f"no style for modulated layer {path}") from None
        ids = class_ids if spec.class_bias else None
        if ablation == "NoNorm":
            out = legacy_modulate(layer, style, "adafm_nonorm", ids)
        else:
            out = modulate(layer, base.stats[path], style, ids)
        params[path] = (out.weight, out.bias)
    return params


def initial_styles(base: BaseModel, class_count: int = 1, ablation: str | None = None) -> StyleSet:
    """Starting point for a new task: the source identity of the chosen modulation form."""
    layers = {}
    for spec in base.modulated_specs:
        layer = base.layers[spec.path]
        n = class_count if spec.class_bias else 1
        if ablation == "NoNorm":
            layers[spec.path] = neutral_style(layer, n)
        else:
            layers[spec.path] = init_source_style(layer, base.stats[spec.path], n)
    return StyleSet(0, layers, class_count, base.arch.fingerprint())


def generate(
    base: BaseModel,
    styles: StyleSet | None,
    n: int,
    seed: int,
    class_ids: Tensor | None = None,
    ablation: str | None = None,
    chunk: int = 256,
) -> Tensor:
    """``n`` samples from fixed noise drawn with ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    dtype = next(iter(base.layers.values())).weight.dtype
    z = torch.randn(n, base.arch.noise_dim, generator=gen, dtype=torch.float32).to(dtype)
    if styles is not None and styles.class_count > 1 and class_ids is None:
        class_ids = torch.randint(styles.class_count, (n,), generator=gen)
    out = []
    with torch.no_grad():
        for i in range(0, n, chunk):
            ids = None if class_ids is None else class_ids[i : i + chunk]
            if styles is None:
                params = base.params()
            else:
                params = styled_params(base, styles.layers, ids, ablation, net="G")
            out.append(generator_forward(base.arch, params, z[i : i + chunk]))
    return torch.cat(out) if out else torch.empty(0)


def sampler_for(base: BaseModel, styles: StyleSet | None, ablation=None):
    """(n, seed) -> images, as consumed by the FID evaluator."""
    return lambda n, seed: generate(base, styles, n, seed, ablation=ablation)


@dataclass
class GanProblem:
    """What one adversarial run optimizes.

    ``g_params``/``d_params`` map a batch of class ids (or None) to the
    layer parameters of the respective network; ``g_vars``/``d_vars`` are the
    leaf tensors handed to the optimizers.
    """

    base: BaseModel
    g_params: Callable
    d_params: Callable
    g_vars: list[Tensor]
    d_vars: list[Tensor]
    class_count: int = 1
    g_penalty: Callable[[], Tensor] | None = None
    d_penalty: Callable[[], Tensor] | None = None
    sampler: Callable | None = None


def run_adversarial(
    problem: GanProblem,
    data: ImageDataset,
    hyper: TrainHyper,
    evaluator=None,
    sink: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Alternating one-D-step / one-G-step loop; returns the metrics log."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    arch = problem.base.arch
    conditional = problem.class_count > 1
    if conditional and data.labels is None:
        raise ValueError("conditional training needs labelled data")
    gen = torch.Generator().manual_seed(hyper.seed)
    betas = (hyper.adam_beta1, hyper.adam_beta2)
    opt_g = torch.optim.Adam(problem.g_vars, lr=hyper.lr, betas=betas) if problem.g_vars else None
    opt_d = torch.optim.Adam(problem.d_vars, lr=hyper.lr, betas=betas) if problem.d_vars else None
    records = []
    bs = hyper.batch_size

    def emit(rec):
        records.append(rec)
        if sink is not None:
            sink(rec)

    for step in range(1, hyper.steps + 1):
        idx = torch.randint(len(data), (bs,), generator=gen)
        x_real = data.images[idx]
        y_real = data.labels[idx] if conditional else None
        z = torch.randn(bs, arch.noise_dim, generator=gen)
        y_fake = torch.randint(problem.class_count, (bs,), generator=gen) if conditional else None

        # discriminator step
        with torch.no_grad():
            x_fake = generator_forward(arch, problem.g_params(y_fake), z)
        pd_real = problem.d_params(y_real)
        d_real = discriminator_forward(arch, pd_real, x_real)
        d_fake = discriminator_forward(arch, problem.d_params(y_fake), x_fake)
        loss_d, _ = gan_losses(d_real, d_fake)
        r1 = r1_penalty(lambda x: discriminator_forward(arch, pd_real, x), x_real, hyper.r1_gamma)
        total_d = loss_d + r1
        if problem.d_penalty is not None:
            total_d = total_d + problem.d_penalty()
        if not torch.isfinite(total_d):
            raise NumericalError(f"non-finite discriminator loss at step {step}: {total_d.item()}")
        if opt_d is not None:
            opt_d.zero_grad(set_to_none=True)
            total_d.backward()
            opt_d.step()

        # generator step
        x_fake = generator_forward(arch, problem.g_params(y_fake), z)
        d_fake = discriminator_forward(arch, problem.d_params(y_fake), x_fake)
        _, loss_g = gan_losses(d_real.detach(), d_fake)
        penalty = problem.g_penalty() if problem.g_penalty is not None else None
        total_g = loss_g if penalty is None else loss_g + penalty
        if not torch.isfinite(total_g):
            raise NumericalError(f"non-finite generator loss at step {step}: {total_g.item()}")
        if opt_g is not None:
            opt_g.zero_grad(set_to_none=True)
            total_g.backward()
            opt_g.step()

        rec = {
            "step": step,
            "loss_D": loss_d.item(),
            "loss_G": loss_g.item(),
            "r1": r1.item(),
            "fid_surrogate": None,
        }
        if penalty is not None:
            rec["penalty"] = penalty.item()
        last = step == hyper.steps
        if evaluator is not None and problem.sampler is not None and (
            last or (hyper.eval_every and step % hyper.eval_every == 0)
        ):
            rec["fid_surrogate"] = evaluator(problem.sampler)
        emit(rec)
    return records


def _leaf(t: Tensor) -> Tensor:
    return t.detach().clone().requires_grad_(True)


def train_task(
    base: BaseModel,
    data: ImageDataset,
    hyper: TrainHyper,
    *,
    task_id: int = 1,
    class_count: int = 1,
    ablation: str | None = None,
    evaluator=None,
    sink=None,
) -> tuple[StyleSet, list[dict]]:
    """Learn one task's style parameters atop the frozen base."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    if len(data) == 0:
        raise ValueError("dataset is empty")
    before = base.digest()
    init = initial_styles(base, class_count, ablation)
    styles = {}
    g_vars, d_vars = [], []
    for path, style in init.layers.items():
        trained = style.map(_leaf)
        if ablation == "NoBias":
            trained.bias = style.bias.detach().clone()
        styles[path] = trained
        bucket = g_vars if path.startswith("G/") else d_vars
        bucket += [t for t in trained.tensors().values() if t.requires_grad]

    def current() -> StyleSet:
        return StyleSet(
            task_id,
            {p: s.map(lambda t: t.detach().clone()) for p, s in styles.items()},
            class_count,
            base.arch.fingerprint(),
        )

    problem = GanProblem(
        base,
        g_params=lambda ids: styled_params(base, styles, ids, ablation, net="G"),
        d_params=lambda ids: styled_params(base, styles, ids, ablation, net="D"),
        g_vars=g_vars,
        d_vars=d_vars,
        class_count=class_count,
        sampler=lambda n, seed: generate(base, current(), n, seed, ablation=ablation),
    )
    records = run_adversarial(problem, data, hyper, evaluator, sink)
    if base.digest() != before:
        raise RuntimeError("frozen base weights changed during style training")
    return current(), records


def finetune_all(
    base: BaseModel, data: ImageDataset, hyper: TrainHyper, evaluator=None, sink=None
) -> tuple[BaseModel, list[dict]]:
    """Baseline: every G and D parameter trainable (the input base is copied)."""
    before = base.digest()
    weights = {p: (_leaf(l.weight), _leaf(l.bias)) for p, l in base.layers.items()}
    g_vars = [t for p, wb in weights.items() if p.startswith("G/") for t in wb]
    d_vars = [t for p, wb in weights.items() if p.startswith("D/") for t in wb]

    def snapshot() -> BaseModel:
        layers = {}
        for p, (w, b) in weights.items():
            cls = ConvLayer if base.specs[p].kind == "conv" else FCLayer
            layers[p] = cls(w.detach().clone(), b.detach().clone())
        return BaseModel(base.arch, layers)

    problem = GanProblem(
        base,
        g_params=lambda ids: weights,
        d_params=lambda ids: weights,
        g_vars=g_vars,
        d_vars=d_vars,
        sampler=lambda n, seed: generate(snapshot(), None, n, seed),
    )
    records = run_adversarial(problem, data, hyper, evaluator, sink)
    if base.digest() != before:
        raise RuntimeError("input model changed during fine-tuning")
    if hyper.steps == 0:
        return base, records
    return snapshot(), records


def pretrain_base(arch, data: ImageDataset, hyper: TrainHyper, seed: int = 0, evaluator=None, sink=None):
    """Train G and D from scratch on the source dataset; stats are computed on return."""
    from .models import build_models

    return finetune_all(build_models(arch, seed), data, hyper, evaluator, sink)


def style_parameter_count(base: BaseModel) -> int:
    return initial_styles(base).parameter_count()


def write_ndjson(records: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
