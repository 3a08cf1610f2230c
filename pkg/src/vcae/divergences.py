"""Kernel MMD, diagonal-Gaussian KL and the batch variance penalty.

All functions take and return torch tensors so they can sit inside a loss;
gradients flow through every one of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


class DegenerateBatchError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    C: float
    kind: str = "IMQ"

    def __post_init__(self):
        if self.kind != "IMQ":
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if not self.C > 0:
            raise ValueError(f"kernel constant must be positive, got {self.C}")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def imq_kernel(x, y, C: float) -> torch.Tensor:
    """k(x, y) = C / (C + ||x - y||^2), evaluated over the last axis."""
    if not C > 0:
        raise ValueError(f"kernel constant must be positive, got {C}")
    x, y = _as_tensor(x), _as_tensor(y)
    return C / (C + ((x - y) ** 2).sum(-1))


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # explicit differences: the expanded |a|^2 + |b|^2 - 2ab form loses the
    # exact zero on the diagonal and is noticeably noisier in float32
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def imq_gram(a: torch.Tensor, b: torch.Tensor, C: float) -> torch.Tensor:
    return C / (C + _sq_dists(a, b))


def mmd_unbiased(a, b, kernel: KernelSpec | float) -> torch.Tensor:
    """Unbiased U-statistic estimate of MMD^2 between two sample sets."""
    C = kernel.C if isinstance(kernel, KernelSpec) else float(kernel)
    a, b = _as_tensor(a), _as_tensor(b)
    n, m = a.shape[0], b.shape[0]
    if n < 2 or m < 2:
        raise DegenerateBatchError(f"MMD needs at least 2 samples per set, got {n} and {m}")
    k_aa = imq_gram(a, a, C)
    k_bb = imq_gram(b, b, C)
    k_ab = imq_gram(a, b, C)
    within_a = (k_aa.sum() - k_aa.diagonal().sum()) / (n * (n - 1))
    within_b = (k_bb.sum() - k_bb.diagonal().sum()) / (m * (m - 1))
    return within_a + within_b - 2.0 * k_ab.mean()


def gaussian_kl_diag(mean, std) -> torch.Tensor:
    """KL(N(mean, diag(std^2)) || N(0, I)) summed over the last axis."""
    mean, std = _as_tensor(mean), _as_tensor(std)
    if (std <= 0).any():
        raise ValueError("standard deviations must be positive")
    var = std ** 2
    return 0.5 * (mean ** 2 + var - 1.0 - torch.log(var)).sum(-1)


def batch_total_variance(z) -> torch.Tensor:
    """Sum over dimensions of the per-dimension population variance of a batch."""
    z = _as_tensor(z)
    if z.ndim != 2 or z.shape[0] < 2:
        raise DegenerateBatchError(f"variance needs a (B>=2, d) batch, got shape {tuple(z.shape)}")
    centred = z - z.mean(0, keepdim=True)
    return (centred ** 2).sum(1).mean()


class _ZeroKinkAbs(torch.autograd.Function):
    """|x| whose derivative at exactly 0 is 0 (torch.abs agrees, made explicit)."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.abs()

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * torch.sign(x)


def variance_penalty(z, target: float) -> torch.Tensor:
    """|batch_total_variance(z) - target|."""
    return _ZeroKinkAbs.apply(batch_total_variance(z) - target)
