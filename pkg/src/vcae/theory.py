"""Numerical checks of the noise/Jacobian expansion, the Frobenius bound and channel capacity."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from .models import AutoencoderPair, mlp, seeded

DEFAULT_SIGMAS = (0.1, 0.05, 0.025, 0.0125)


class DomainError(ValueError):
    pass


def decoder_jacobian(z: torch.Tensor, pair: AutoencoderPair) -> torch.Tensor:
    """Jacobian of the flattened decoder output at a single code ``z`` (x_dim x z_dim)."""
    z = z.reshape(-1)

    def f(v):
        return pair.decode(v.unsqueeze(0)).reshape(-1)

    jac = torch.autograd.functional.jacobian(f, z.detach())
    if not torch.isfinite(jac).all():
        raise FloatingPointError("non-finite decoder Jacobian")
    return jac


def fd_jacobian(z: torch.Tensor, pair: AutoencoderPair, h: float = 1e-6) -> torch.Tensor:
    """Central finite-difference Jacobian, for cross-checking ``decoder_jacobian``."""
    z = z.reshape(-1).detach()
    cols = []
    with torch.no_grad():
        for j in range(len(z)):
            e = torch.zeros_like(z)
            e[j] = h
            up = pair.decode((z + e).unsqueeze(0)).reshape(-1)
            dn = pair.decode((z - e).unsqueeze(0)).reshape(-1)
            cols.append((up - dn) / (2 * h))
    return torch.stack(cols, dim=1)


@dataclass
class Prop1Report:
    sigma: float
    mc_estimate: float
    expansion: float
    residual: float
    mc_samples: int
    # control-variate residual E[||x - x_hat||^2 - ||a - J eps||^2] and its standard error
    residual_cv: float = 0.0
    residual_cv_se: float = 0.0

    @property
    def relative_residual(self) -> float:
        return self.residual / self.expansion if self.expansion else 0.0


def prop1_check(x: torch.Tensor, pair: AutoencoderPair, sigmas: Sequence[float] = DEFAULT_SIGMAS,
                mc_samples: int = 100_000, seed: int = 0, chunk: int = 10_000) -> list[Prop1Report]:
    """Monte Carlo E||x - dec(enc(x) + eps)||^2 against ||x - dec(enc(x))||^2 + sigma^2 ||J||_F^2.

    ``x`` is a single item; ``sigma`` is the noise standard deviation.
    Noise is drawn in antithetic pairs (eps, -eps).
    """
    if mc_samples < 1000 or mc_samples % 2:
        raise ValueError("mc_samples must be an even number >= 1000")
    if any(s < 0 for s in sigmas) or list(sigmas) != sorted(sigmas, reverse=True):
        raise ValueError("sigmas must be nonnegative and descending")
    pair.eval()
    x = x.reshape(1, *pair.input_shape).to(next(pair.parameters(), torch.zeros((), dtype=x.dtype)).dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        mu = pair.encode(x)
        a = (x - pair.decode(mu)).reshape(-1)
    jac = decoder_jacobian(mu[0], pair).to(x.dtype)
    base = float(a @ a)
    frob = float((jac ** 2).sum())
    reports = []
    for sigma in sigmas:
        expansion = base + sigma ** 2 * frob
        if sigma == 0:
            reports.append(Prop1Report(0.0, base, expansion, 0.0, mc_samples))
            continue
        plain, diffs = [], []
        half = mc_samples // 2
        with torch.no_grad():
            for i in range(0, half, chunk // 2):
                n = min(chunk // 2, half - i)
                e = sigma * torch.randn(n, mu.shape[1], generator=gen, dtype=x.dtype)
                e = torch.cat([e, -e])
                err = ((x - pair.decode(mu + e)) ** 2).reshape(2 * n, -1).sum(1)
                lin = ((a - e @ jac.T) ** 2).sum(1)
                plain.append(err)
                # average antithetic partners so odd-order terms cancel pairwise
                diffs.append(((err - lin)[:n] + (err - lin)[n:]) / 2)
        mc = torch.cat(plain).mean().item()
        d = torch.cat(diffs)
        reports.append(Prop1Report(sigma, mc, expansion, mc - expansion, mc_samples,
                                   d.mean().item(), (d.std() / math.sqrt(len(d))).item()))
    return reports


def residual_slope(reports: Sequence[Prop1Report], use_cv: bool = True) -> float:
    """Least-squares slope of log|residual| against log sigma."""
    pts = [(r.sigma, abs(r.residual_cv if use_cv else r.residual)) for r in reports if r.sigma > 0]
    s = np.log([p[0] for p in pts])
    v = np.log([max(p[1], 1e-300) for p in pts])
    return float(np.polyfit(s, v, 1)[0])


def write_prop1_csv(reports: Sequence[Prop1Report], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [asdict(r) for r in reports]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def plot_prop1(reports: Sequence[Prop1Report], path: str | Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = [r for r in reports if r.sigma > 0]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.loglog([r.sigma for r in pts], [abs(r.residual_cv) for r in pts], "o-", label="|residual|")
    ax.loglog([r.sigma for r in pts], [r.residual_cv_se for r in pts], "x--", label="std. error")
    ax.set_xlabel("sigma")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


# --------------------------------------------------------------------------
# small decoders for the expansion check


class _Projection(nn.Module):
    def __init__(self, z_dim: int):
        super().__init__()
        self.z_dim = z_dim

    def forward(self, x):
        return x[:, :self.z_dim]


class _Graph(nn.Module):
    """z -> [z, g(z)]; paired with a projection encoder, enc(dec(z)) = z exactly."""

    def __init__(self, g: nn.Module):
        super().__init__()
        self.g = g

    def forward(self, z):
        return torch.cat([z, self.g(z)], dim=1)


def linear_pair(x_dim: int = 8, z_dim: int = 3, seed: int = 0) -> AutoencoderPair:
    with seeded(seed):
        pair = AutoencoderPair(nn.Linear(x_dim, z_dim), nn.Linear(z_dim, x_dim), z_dim, (x_dim,), 1,
                               "linear")
    return pair.double()


def mlp_pair(x_dim: int = 8, z_dim: int = 3, hidden: int = 16, seed: int = 0) -> AutoencoderPair:
    with seeded(seed):
        pair = AutoencoderPair(mlp([x_dim, hidden, z_dim], "tanh"), mlp([z_dim, hidden, x_dim], "tanh"),
                               z_dim, (x_dim,), 1, "mlp")
    return pair.double()


def graph_pair(x_dim: int = 8, z_dim: int = 3, hidden: int = 16, seed: int = 0) -> AutoencoderPair:
    if x_dim <= z_dim:
        raise ValueError("x_dim must exceed z_dim")
    with seeded(seed):
        dec = _Graph(mlp([z_dim, hidden, x_dim - z_dim], "tanh"))
        pair = AutoencoderPair(_Projection(z_dim), dec, z_dim, (x_dim,), 1, "graph")
    return pair.double()


PROP1_PRESETS = {"linear": linear_pair, "mlp": mlp_pair, "graph": graph_pair}


def prop1_preset(name: str, seed: int = 0, on_manifold: bool | None = None):
    """(pair, x) for a named preset.

    With ``on_manifold`` the input is a decoded code, so the noise-free
    reconstruction is exact; this is the default for the graph preset.
    """
    pair = PROP1_PRESETS[name](seed=seed)
    on_manifold = name == "graph" if on_manifold is None else on_manifold
    gen = torch.Generator().manual_seed(seed + 1)
    if on_manifold:
        z0 = torch.randn(1, pair.z_dim, generator=gen, dtype=torch.float64)
        with torch.no_grad():
            x = pair.decode(z0)[0]
    else:
        x = torch.randn(pair.input_shape, generator=gen, dtype=torch.float64)
    return pair, x


# --------------------------------------------------------------------------
# Frobenius / Lipschitz and capacity


class FrobLipGap(NamedTuple):
    frob_sq: float
    lip: float
    gap: float          # frob_sq - lip**2, always >= 0
    stated_gap: float   # frob_sq - lip, the unsquared variant


def frobenius_lipschitz_gap(a) -> FrobLipGap:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    s = np.linalg.svd(a, compute_uv=False)  # descending
    if s.size == 0:
        return FrobLipGap(0.0, 0.0, 0.0, 0.0)
    lip = float(s[0])
    # singular values below the numerical-rank tolerance count as zero
    tail = s[1:][s[1:] > s[0] * max(a.shape) * np.finfo(np.float64).eps]
    # summing the tail directly keeps the gap nonnegative in floating point
    gap = float(np.sum(tail ** 2))
    frob_sq = lip ** 2 + gap
    return FrobLipGap(frob_sq, lip, gap, frob_sq - lip)


def capacity_bound(z_dim: int, noise_variance: float) -> float:
    """Information-rate bound (z_dim / 2) log2(1 / noise_variance) in bits."""
    if not 0 < noise_variance <= 1:
        raise DomainError(f"noise_variance must lie in (0, 1], got {noise_variance}")
    if z_dim < 1:
        raise DomainError("z_dim must be >= 1")
    return z_dim / 2 * math.log2(1.0 / noise_variance)
