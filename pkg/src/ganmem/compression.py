"""Low-rank compression of conv scale/shift matrices with a shared knowledge base.

For every compressible matrix (a conv layer's scale or shift in a covered
block) task ``t`` learns a departure from the source identity value,

    Gamma_t = source + L_kb diag(lam_t) R_kb^T + E_t,

where ``L_kb``/``R_kb`` are the append-only left/right bases collected from
earlier tasks and ``E_t = U diag(s) V^T`` is a free factorization whose
coefficients carry a weighted L1 (nuclear-norm surrogate) penalty. After
training, ``E_t`` is re-factorized by an exact SVD, truncated to the energy
budget of its block, and the kept singular directions are appended to the
bases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch
from torch import Tensor

from .data import ImageDataset
from .models import BaseModel
from .modulation import InvalidInputError, Style
from .registry import StyleSet
from .training import (
    GanProblem,
    TrainHyper,
    generate,
    initial_styles,
    run_adversarial,
    styled_params,
)

MATRIX_PARAMS = ("scale", "shift")
DEFAULT_KEEP = {"B0": 80.0, "B1": 80.0, "B2": 90.0, "B3": 95.0}


@dataclass(frozen=True)
class EnergyPolicy:
    keep: dict = field(default_factory=lambda: dict(DEFAULT_KEEP))
    r: float = 0.01
    compress_discriminator: bool = True
    refit_fraction: float = 0.0

    def __post_init__(self):
        if not 0 <= self.refit_fraction < 1:
            raise ValueError("refit_fraction must be in [0, 1)")
        for block, x in self.keep.items():
            if not 0 < x <= 100:
                raise ValueError(f"energy percent for {block} must be in (0, 100], got {x}")
        if self.r < 0:
            raise ValueError("regularization weight must be >= 0")

    def percent(self, block: str) -> float | None:
        return self.keep.get(block)

    def to_dict(self) -> dict:
        return {"keep": dict(self.keep), "r": self.r, "compress_discriminator": self.compress_discriminator,
                "refit_fraction": self.refit_fraction}


def compressible_keys(base: BaseModel, policy: EnergyPolicy) -> list[str]:
    """``layer_path/param`` for every conv scale/shift matrix the policy covers."""
    keys = []
    for spec in base.modulated_specs:
        if spec.kind != "conv" or policy.percent(spec.block) is None:
            continue
        if spec.net == "D" and not policy.compress_discriminator:
            continue
        keys += [f"{spec.path}/{p}" for p in MATRIX_PARAMS]
    return keys


def _split(key: str) -> tuple[str, str]:
    path, param = key.rsplit("/", 1)
    return path, param


def source_offset(base: BaseModel, key: str) -> Tensor:
    path, param = _split(key)
    stats = base.stats[path]
    return stats.std if param == "scale" else stats.mean


# ---------------------------------------------------------------- operations


def reconstruct(left: Tensor, right: Tensor, lam: Tensor, u: Tensor, s: Tensor, v: Tensor) -> Tensor:
    """``left diag(lam) right^T + u diag(s) v^T``.

    ``left``/``right`` are the knowledge-base snapshot the task was trained
    against; ``u, s, v`` the (retained) residual factors.
    """
    if left.shape[1] != lam.shape[0] or right.shape[1] != lam.shape[0]:
        raise ValueError(
            f"knowledge-base width {left.shape[1]}/{right.shape[1]} != {lam.shape[0]} coefficients"
        )
    if u.shape[1] != s.shape[0] or v.shape[1] != s.shape[0]:
        raise ValueError("residual factor widths disagree")
    out = (u * s) @ v.T
    if lam.shape[0]:
        out = out + (left * lam) @ right.T
    return out


def sparsity_penalty(s: Tensor, task_index: int, r: float = 0.01) -> Tensor:
    """``r * ||eta * s||_1`` with eta = 1 for the first task, else 0.1 + sigmoid(10 j / J)."""
    if task_index < 1:
        raise ValueError("task_index counts from 1")
    if task_index == 1:
        return r * s.abs().sum()
    j = torch.arange(s.shape[-1], dtype=s.dtype)
    eta = 0.1 + torch.sigmoid(10.0 * j / s.shape[-1])
    return r * (eta * s.abs()).sum()


def energy_truncate(
    mat: Tensor, percent: float, reference_energy: float | None = None
) -> tuple[Tensor, Tensor, Tensor]:
    """Shortest singular prefix whose discarded energy is within budget.

    Keeps the minimal ``k`` with ``sum_{i>=k} s_i^2 <= (1 - percent/100) * E``
    where ``E`` is ``reference_energy`` or, by default, ``sum s_i^2`` of
    ``mat`` itself. Singular values at round-off level count as zero.
    Returns ``(U_k, s_k, V_k)`` with ``mat ~= U_k diag(s_k) V_k^T``.
    """
    if not 0 < percent <= 100:
        raise ValueError(f"percent must be in (0, 100], got {percent}")
    a = torch.as_tensor(mat).detach().to(torch.float64)
    if a.dim() != 2:
        raise InvalidInputError("expected a matrix")
    if not torch.isfinite(a).all():
        raise InvalidInputError("matrix has non-finite entries")
    u, s, vh = torch.linalg.svd(a, full_matrices=False)
    if s.numel():
        tol = float(s[0]) * max(a.shape) * torch.finfo(torch.float64).eps
        s = torch.where(s > tol, s, torch.zeros_like(s))
    sq = s**2
    energy = float(sq.sum())
    ref = energy if reference_energy is None else float(reference_energy)
    budget = (1.0 - percent / 100.0) * ref
    # tail[k] = energy discarded when keeping the first k values
    tail = torch.cat([sq.flip(0).cumsum(0).flip(0), sq.new_zeros(1)])
    k = int(torch.nonzero(tail <= budget)[0])
    dtype = mat.dtype if isinstance(mat, Tensor) and mat.is_floating_point() else torch.float64
    return u[:, :k].to(dtype), s[:k].to(dtype), vh[:k].T.to(dtype)


class KnowledgeBase:
    """Append-only left/right bases per compressible matrix."""

    def __init__(self, left=None, right=None, snapshots=None):
        self.left: dict[str, Tensor] = dict(left or {})
        self.right: dict[str, Tensor] = dict(right or {})
        # task id -> {key: width at the start of that task}
        self.snapshots: dict[int, dict[str, int]] = {t: dict(v) for t, v in (snapshots or {}).items()}

    def width(self, key: str) -> int:
        return 0 if key not in self.left else self.left[key].shape[1]

    def snapshot(self, key: str, width: int | None = None, shape=None, dtype=torch.float32):
        if key not in self.left:
            if width:
                raise ValueError(f"knowledge base has no columns for {key}")
            m, n = shape if shape is not None else (0, 0)
            return torch.zeros(m, 0, dtype=dtype), torch.zeros(n, 0, dtype=dtype)
        k = self.width(key) if width is None else width
        if k > self.width(key):
            raise ValueError(f"snapshot width {k} exceeds knowledge base width {self.width(key)}")
        return self.left[key][:, :k], self.right[key][:, :k]

    def total_width(self) -> int:
        return sum(self.width(k) for k in self.left)

    def copy(self) -> "KnowledgeBase":
        return KnowledgeBase(self.left, self.right, self.snapshots)


def kb_update(kb: KnowledgeBase, task_id: int, new_columns: dict[str, tuple[Tensor, Tensor]]) -> KnowledgeBase:
    """Return a knowledge base with ``(U_hat, V_hat)`` appended per key.

    Existing column tensors are reused untouched; widths before the append
    are recorded as the snapshot of ``task_id``.
    """
    out = kb.copy()
    if task_id in out.snapshots:
        raise ValueError(f"task {task_id} already recorded in the knowledge base")
    out.snapshots[task_id] = {key: kb.width(key) for key in new_columns}
    for key, (u, v) in new_columns.items():
        if u.shape[1] != v.shape[1]:
            raise ValueError(f"{key}: left/right column counts differ")
        if key in out.left:
            if u.shape[0] != out.left[key].shape[0] or v.shape[0] != out.right[key].shape[0]:
                raise ValueError(f"{key}: column dimension mismatch")
            if u.shape[1]:
                out.left[key] = torch.cat([out.left[key], u.to(out.left[key].dtype)], 1)
                out.right[key] = torch.cat([out.right[key], v.to(out.right[key].dtype)], 1)
        else:
            out.left[key] = u.detach().clone()
            out.right[key] = v.detach().clone()
    return out


# ---------------------------------------------------------------- styles


@dataclass
class CompressedFactor:
    lam: Tensor  # coefficients on the snapshot columns
    s: Tensor  # retained singular values (descending)
    u: Tensor  # retained left singular vectors (also appended to the KB)
    v: Tensor

    @property
    def kb_width(self) -> int:
        return self.lam.shape[0]

    @property
    def rank(self) -> int:
        return self.s.shape[0]


@dataclass
class CompressedStyle:
    """One task's compressed style: plain tensors plus per-matrix factors."""

    task_id: int
    plain: dict[str, Style]  # every modulated layer; compressed matrices hold placeholders
    factors: dict[str, CompressedFactor]
    class_count: int = 1
    arch_fingerprint: str = ""

    def frozen_copy(self, task_id: int) -> "CompressedStyle":
        clone = lambda t: t.detach().clone()  # noqa: E731
        return CompressedStyle(
            task_id,
            {p: s.map(clone) for p, s in self.plain.items()},
            {k: CompressedFactor(clone(f.lam), clone(f.s), clone(f.u), clone(f.v)) for k, f in self.factors.items()},
            self.class_count,
            self.arch_fingerprint,
        )

    def matrix(self, base: BaseModel, kb: KnowledgeBase, key: str) -> Tensor:
        f = self.factors[key]
        offset = source_offset(base, key)
        left, right = kb.snapshot(key, f.kb_width, offset.shape, offset.dtype)
        return offset + reconstruct(left, right, f.lam, f.u, f.s, f.v)

    def realize(self, base: BaseModel, kb: KnowledgeBase) -> StyleSet:
        layers = {p: s.map(lambda t: t.clone()) for p, s in self.plain.items()}
        for key in self.factors:
            path, param = _split(key)
            setattr(layers[path], param, self.matrix(base, kb, key))
        return StyleSet(self.task_id, layers, self.class_count, self.arch_fingerprint)


def parameter_accounting(base: BaseModel, compressed: CompressedStyle) -> dict:
    """New parameters for the compressed matrices vs storing them densely."""
    per_key = {}
    naive = compr = 0
    for key, f in compressed.factors.items():
        m, n = source_offset(base, key).shape
        k_new = f.kb_width + f.rank * (m + n + 1)
        per_key[key] = {"rank": f.rank, "kb_width": f.kb_width, "naive": m * n, "compressed": k_new}
        naive += m * n
        compr += k_new
    return {
        "params_naive": naive,
        "params_compressed": compr,
        "ratio": compr / naive if naive else math.nan,
        "per_matrix": per_key,
    }


# ---------------------------------------------------------------- training


# initial column norm of the raw (unnormalized) U, V; Adam moves entries by ~lr
# per step, so smaller columns turn their directions faster
FACTOR_COLUMN_NORM = 0.1


def _directions(rows: int, cols: int, gen: torch.Generator, dtype) -> Tensor:
    x = torch.randn(rows, cols, generator=gen, dtype=torch.float64)
    x = FACTOR_COLUMN_NORM * x / x.norm(dim=0, keepdim=True)
    return x.to(dtype).requires_grad_(True)


class _Factorized:
    """Trainable ``lam, U, s, V`` for one matrix during a task.

    ``s`` is stored divided by ``gain = sqrt(m n / r_max)`` so that one Adam
    step moves each entry of ``E`` about as far as a step on a dense matrix
    would; ``true_s()`` is the singular-value scale the penalty sees.
    """

    def __init__(self, offset: Tensor, left: Tensor, right: Tensor, r_max: int, gen: torch.Generator):
        m, n = offset.shape
        self.offset, self.left, self.right = offset, left, right
        self.gain = math.sqrt(m * n / r_max)
        dtype = offset.dtype
        self.lam = torch.zeros(left.shape[1], dtype=dtype, requires_grad=True)
        self.u = _directions(m, r_max, gen, dtype)
        self.v = _directions(n, r_max, gen, dtype)
        self.s = torch.zeros(r_max, dtype=dtype, requires_grad=True)
        self.fixed = False

    def variables(self) -> list[Tensor]:
        if self.fixed:
            return [self.lam, self.s]
        return [self.lam, self.u, self.s, self.v]

    def true_s(self) -> Tensor:
        return self.gain * self.s

    def factors(self) -> tuple[Tensor, Tensor, Tensor]:
        if self.fixed:
            return self.u, self.true_s(), self.v
        u = self.u / self.u.norm(dim=0, keepdim=True)
        v = self.v / self.v.norm(dim=0, keepdim=True)
        return u, self.true_s(), v

    @torch.no_grad()
    def truncate_(self, percent: float):
        """Replace ``E`` by its energy-truncated SVD and freeze its singular vectors.

        The energy budget is measured against the whole learned deviation
        ``L diag(lam) R^T + E``, so directions already covered by the
        knowledge base make the new residual cheaper to drop.
        """
        ref = float(self.deviation().double().pow(2).sum())
        u, s, v = energy_truncate(self.residual(), percent, reference_energy=ref)
        dtype = self.offset.dtype
        self.u, self.v = u.to(dtype), v.to(dtype)
        self.s = (s.to(dtype) / self.gain).requires_grad_(True)
        self.lam = self.lam.detach().clone().requires_grad_(True)
        self.fixed = True

    def residual(self) -> Tensor:
        u, s, v = self.factors()
        return (u * s) @ v.T

    def deviation(self) -> Tensor:
        return reconstruct(self.left, self.right, self.lam, *self.factors())

    def matrix(self) -> Tensor:
        return self.offset + self.deviation()


def train_task_compressed(
    base: BaseModel,
    data: ImageDataset,
    hyper: TrainHyper,
    kb: KnowledgeBase,
    policy: EnergyPolicy,
    *,
    task_id: int = 1,
    task_index: int | None = None,
    class_count: int = 1,
    evaluator=None,
    sink=None,
) -> tuple[CompressedStyle, KnowledgeBase, list[dict]]:
    """Train one task with factorized scale/shift matrices, then truncate and grow the KB.

    ``task_index`` selects the sparsity weighting (1 = first compressed
    task); it defaults to one plus the number of tasks already in ``kb``.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    task_index = len(kb.snapshots) + 1 if task_index is None else task_index
    before = base.digest()
    keys = compressible_keys(base, policy)
    gen = torch.Generator().manual_seed(hyper.seed + 7919)

    init = initial_styles(base, class_count)
    plain = {p: s.map(lambda t: t.detach().clone().requires_grad_(True)) for p, s in init.layers.items()}
    factors: dict[str, _Factorized] = {}
    for key in keys:
        offset = source_offset(base, key)
        left, right = kb.snapshot(key, shape=offset.shape, dtype=offset.dtype)
        factors[key] = _Factorized(offset, left, right, min(offset.shape), gen)

    def styles_now() -> dict[str, Style]:
        out = {p: Style(s.scale, s.shift, s.bias) for p, s in plain.items()}
        for key, fac in factors.items():
            path, param = _split(key)
            setattr(out[path], param, fac.matrix())
        return out

    def penalty(net: str):
        ks = [k for k in keys if k.startswith(net + "/")]
        if not ks or policy.r == 0:
            return None
        return lambda: sum(sparsity_penalty(factors[k].true_s(), task_index, policy.r) for k in ks)

    frozen_plain = {f"{p}/{n}" for p in plain for n in ("scale", "shift") if f"{p}/{n}" in factors}

    def variables(net: str) -> list[Tensor]:
        out = []
        for path, style in plain.items():
            if path.startswith(net + "/"):
                out += [t for n, t in style.tensors().items() if f"{path}/{n}" not in frozen_plain]
        for key, fac in factors.items():
            if key.startswith(net + "/"):
                out += fac.variables()
        return out

    def current_set() -> StyleSet:
        with torch.no_grad():
            layers = {p: s.map(lambda t: t.detach().clone()) for p, s in styles_now().items()}
        return StyleSet(task_id, layers, class_count, base.arch.fingerprint())

    def run(h: TrainHyper, offset: int) -> list[dict]:
        problem = GanProblem(
            base,
            g_params=lambda ids: styled_params(base, styles_now(), ids, net="G"),
            d_params=lambda ids: styled_params(base, styles_now(), ids, net="D"),
            g_vars=variables("G"),
            d_vars=variables("D"),
            class_count=class_count,
            g_penalty=penalty("G"),
            d_penalty=penalty("D"),
            sampler=lambda n, seed: generate(base, current_set(), n, seed),
        )
        shifted = None if sink is None else (lambda rec: sink({**rec, "step": rec["step"] + offset}))
        recs = run_adversarial(problem, data, h, evaluator, shifted)
        return [{**rec, "step": rec["step"] + offset} for rec in recs]

    # the refit phase shares the step budget, so totals match uncompressed training
    refit = int(round(policy.refit_fraction * hyper.steps))
    main = replace(hyper, steps=hyper.steps - refit)
    records = run(main, 0) if main.steps else []
    for key, fac in factors.items():
        fac.truncate_(policy.percent(base.specs[_split(key)[0]].block))
    if refit:
        records += run(replace(hyper, steps=refit, seed=hyper.seed + 1), main.steps)

    out_factors, new_columns = {}, {}
    with torch.no_grad():
        for key, fac in factors.items():
            u, s, v = (t.detach() for t in fac.factors())
            # keep singular values non-negative and descending after the refit
            order = torch.argsort(s.abs(), descending=True)
            u, s, v = u[:, order] * torch.sign(s[order]).where(s[order] != 0, torch.ones(())), s[order].abs(), v[:, order]
            out_factors[key] = CompressedFactor(fac.lam.detach().clone(), s, u, v)
            new_columns[key] = (u, v)
    new_kb = kb_update(kb, task_id, new_columns)
    plain_out = {p: s.map(lambda t: t.detach().clone()) for p, s in plain.items()}
    compressed = CompressedStyle(task_id, plain_out, out_factors, class_count, base.arch.fingerprint())
    if base.digest() != before:
        raise RuntimeError("frozen base weights changed during compressed training")
    return compressed, new_kb, records
