"""Surrogate FID, singular-value diagnostics and forgetting tables.

The surrogate FID replaces the Inception network with a small conv net whose
random weights are fixed by a committed seed. Its values are only
comparable with each other, never with published FID numbers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

EMBEDDER_SEED = 20200615
NEG_EIG_TOL = 1e-8


class Embedder:
    """Fixed random-feature conv net: two conv stages plus colour moments."""

    def __init__(self, channels: int = 3, width: int = 24, seed: int = EMBEDDER_SEED):
        g = torch.Generator().manual_seed(seed)
        self.w1 = torch.randn(width, channels, 3, 3, generator=g) / (channels * 9) ** 0.5
        self.b1 = 0.1 * torch.randn(width, generator=g)
        self.w2 = torch.randn(width, width, 3, 3, generator=g) / (width * 9) ** 0.5
        self.b2 = 0.1 * torch.randn(width, generator=g)
        self.dim = 2 * width + 2 * channels

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        x = images.float()
        h1 = F.relu(F.conv2d(x, self.w1, self.b1, stride=2, padding=1))
        h2 = F.relu(F.conv2d(h1, self.w2, self.b2, stride=2, padding=1))
        return torch.cat(
            [h1.mean((2, 3)), h2.mean((2, 3)), x.mean((2, 3)), x.std((2, 3), unbiased=False)], 1
        )


_DEFAULT = None


def default_embedder() -> Embedder:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = Embedder()
    return _DEFAULT


def embed(images: torch.Tensor, embedder: Embedder | None = None, chunk: int = 512) -> np.ndarray:
    if images.dim() != 4:
        raise ValueError(f"expected (N, C, H, W) images, got {tuple(images.shape)}")
    embedder = embedder or default_embedder()
    feats = [embedder(images[i : i + chunk]) for i in range(0, images.shape[0], chunk)]
    return torch.cat(feats).double().numpy() if feats else np.zeros((0, embedder.dim))


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] < 2:
            raise ValueError("need at least two samples")
        return cls(feats.mean(0), np.cov(feats, rowvar=False).reshape(feats.shape[1], -1), feats.shape[0])


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    a = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(a)
    tol = NEG_EIG_TOL * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol:
        raise FloatingPointError(f"matrix not PSD: min eigenvalue {w.min():.3e}")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})."""
    diff = a.mean - b.mean
    sa = _psd_sqrt(a.cov)
    # (S_a S_b)^{1/2} has the same trace as (S_a^{1/2} S_b S_a^{1/2})^{1/2}
    inner = sa @ b.cov @ sa
    inner = 0.5 * (inner + inner.T)
    w = np.linalg.eigvalsh(inner)
    tol = NEG_EIG_TOL * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol:
        raise FloatingPointError(f"product not PSD: min eigenvalue {w.min():.3e}")
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_sqrt)
    return max(d, 0.0)


class FIDEvaluator:
    """Surrogate FID of a sampler against a fixed reference image set."""

    def __init__(self, real_images: torch.Tensor, n_samples: int | None = None, seed: int = 12345,
                 embedder: Embedder | None = None):
        self.embedder = embedder or default_embedder()
        n_real = real_images.shape[0]
        self.n = min(n_real, 2048) if n_samples is None else n_samples
        self.seed = seed
        self.real = FeatureStats.from_features(embed(real_images, self.embedder))

    def images(self, images: torch.Tensor) -> float:
        return frechet_distance(self.real, FeatureStats.from_features(embed(images, self.embedder)))

    def __call__(self, sampler) -> float:
        """``sampler(n, seed)`` must return ``n`` images."""
        return self.images(sampler(self.n, self.seed))


def singular_spectrum_report(styles, params=("scale", "shift")) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Max-normalized singular-value curves of every conv scale/shift matrix.

    Accepts a StyleSet or a plain ``{path: Style}`` mapping. Index and value
    axes are each divided by their maximum (index counted from 0).
    """
    layers = getattr(styles, "layers", styles)
    out = {}
    for path, style in layers.items():
        for name in params:
            mat = getattr(style, name)
            if mat.dim() != 2:
                continue
            s = np.linalg.svd(mat.detach().double().numpy(), compute_uv=False)
            idx = np.arange(len(s), dtype=np.float64)
            x = idx / idx.max() if len(s) > 1 else idx
            y = s / s.max() if s.max() > 0 else s
            out[f"{path}/{name}"] = (x, y)
    return out


@dataclass
class ForgettingTable:
    """values[k, t] = metric of task k+1 after training task t+1 (NaN for k > t)."""

    values: np.ndarray
    metric: str = "fid_surrogate"

    def to_tsv(self) -> str:
        n = self.values.shape[0]
        lines = ["task\\after\t" + "\t".join(str(t + 1) for t in range(n))]
        for k in range(n):
            cells = ["" if np.isnan(v) else repr(float(v)) for v in self.values[k]]
            lines.append(f"{k + 1}\t" + "\t".join(cells))
        return "\n".join(lines) + "\n"

    def records(self) -> list[dict]:
        n = self.values.shape[0]
        return [
            {"task": k + 1, "after": t + 1, self.metric: float(self.values[k, t])}
            for t in range(n)
            for k in range(t + 1)
        ]

    def rows_constant(self) -> bool:
        return all(
            np.all(self.values[k, k:] == self.values[k, k]) for k in range(self.values.shape[0])
        )


def forgetting_report(history, metric: str = "fid_surrogate") -> ForgettingTable:
    """Build the lower-triangular table from ``{(task, after_task): value}`` (1-based)."""
    if not history:
        raise ValueError("empty history")
    n = max(max(k, t) for k, t in history)
    values = np.full((n, n), np.nan)
    for (k, t), v in history.items():
        if k > t:
            raise ValueError(f"task {k} cannot be evaluated after task {t}")
        values[k - 1, t - 1] = v
    return ForgettingTable(values, metric)
