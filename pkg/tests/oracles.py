"""Independent reference computations shared by unit and acceptance tests."""
import numpy as np
import torch
import torch.nn.functional as F

from ganmem.compression import _Factorized
from ganmem.modulation import ConvLayer, FCLayer, Style, init_source_style, layer_stats, modulate


def central_differences(fn, params, h=1e-6):
    """d fn / d p for every entry of every tensor in ``params`` (modified in place, then restored)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = fn().item()
                flat[i] = old - h
                down = fn().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = a.flatten().double(), n.flatten().double()
        scale = torch.maximum(a.abs(), n.abs())
        big = scale > floor
        if big.any():
            worst = max(worst, float(((a - n).abs()[big] / scale[big]).max()))
        if (~big).any():
            # gradients at round-off level: require absolute agreement instead
            worst = max(worst, float((a - n).abs()[~big].max()) / floor)
    return worst


class TwoLayerToy:
    """FC (mFiLM) feeding a conv (mAdaFM): the smallest stack with both modulation kinds.

    ``compressed=True`` re-expresses the conv scale and shift as
    ``source + L diag(lam) R^T + U diag(s) V^T`` with a non-empty knowledge base.
    """

    def __init__(self, compressed=False, seed=0):
        g = torch.Generator().manual_seed(seed)
        d = torch.float64
        self.fc = FCLayer(torch.randn(12, 5, generator=g, dtype=d), torch.randn(12, generator=g, dtype=d))
        self.conv = ConvLayer(torch.randn(4, 3, 3, 3, generator=g, dtype=d), torch.randn(4, generator=g, dtype=d))
        self.fc_stats, self.conv_stats = layer_stats(self.fc), layer_stats(self.conv)
        self.x = torch.randn(6, 5, generator=g, dtype=d)
        self.probe = torch.randn(6, 4, 2, 2, generator=g, dtype=d)

        def perturbed(style):
            return style.map(lambda t: (t + 0.1 * torch.randn(t.shape, generator=g, dtype=d)).requires_grad_(True))

        self.fc_style = perturbed(init_source_style(self.fc, self.fc_stats))
        self.conv_style = perturbed(init_source_style(self.conv, self.conv_stats))
        self.compressed = compressed
        self.factors = {}
        if compressed:
            for name, offset in (("scale", self.conv_stats.std), ("shift", self.conv_stats.mean)):
                left = torch.linalg.qr(torch.randn(4, 2, generator=g, dtype=d))[0]
                right = torch.linalg.qr(torch.randn(3, 2, generator=g, dtype=d))[0]
                fac = _Factorized(offset, left, right, 3, g)
                with torch.no_grad():
                    fac.lam = torch.randn(2, generator=g, dtype=d).requires_grad_(True)
                    fac.s = (0.1 * torch.randn(3, generator=g, dtype=d)).requires_grad_(True)
                self.factors[name] = fac

    def params(self):
        out = list(self.fc_style.tensors().values()) + [self.conv_style.bias]
        if self.compressed:
            for fac in self.factors.values():
                out += fac.variables()
        else:
            out += [self.conv_style.scale, self.conv_style.shift]
        return out

    def loss(self):
        conv_style = self.conv_style
        if self.compressed:
            conv_style = Style(self.factors["scale"].matrix(), self.factors["shift"].matrix(), conv_style.bias)
        fc = modulate(self.fc, self.fc_stats, self.fc_style)
        conv = modulate(self.conv, self.conv_stats, conv_style)
        h = F.leaky_relu(F.linear(self.x, fc.weight, fc.bias), 0.2).view(6, 3, 2, 2)
        out = F.conv2d(h, conv.weight, conv.bias, padding=1)
        return (torch.tanh(out) * self.probe).sum()


def gradient_check(compressed=False, seed=0):
    toy = TwoLayerToy(compressed, seed)
    params = toy.params()
    analytic = torch.autograd.grad(toy.loss(), params)
    numeric = central_differences(toy.loss, params)
    return max_relative_error(analytic, numeric)


def prefix_oracle(s, percent, shape=None):
    """Smallest k such that the kept prefix holds >= percent of sum(s^2), by enumeration.

    Values below numpy's ``matrix_rank`` tolerance (s_max * max(m, n) * eps) are
    null directions and never need keeping.
    """
    s = np.sort(np.asarray(s, dtype=np.float64))[::-1]
    if s.size:
        tol = s[0] * (max(shape) if shape else s.size) * np.finfo(np.float64).eps
        s = np.where(s > tol, s, 0.0)
    energy = float(np.sum(s**2))
    for k in range(len(s) + 1):
        tail = float(np.sum(s[k:] ** 2))
        if tail <= (1 - percent / 100.0) * energy * (1 + 1e-12):
            return k
    return len(s)


def frechet_scipy(mu1, s1, mu2, s2):
    from scipy import linalg

    covmean = linalg.sqrtm(s1 @ s2)
    covmean = np.real(covmean)
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2 * np.trace(covmean))

