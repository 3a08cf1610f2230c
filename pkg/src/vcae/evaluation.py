"""Fréchet distances over pluggable features, latent summaries and plots."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import AutoencoderPair, seeded

log = logging.getLogger(__name__)

HIST_BINS = 80
COV_RIDGE = 1e-6


class MissingArtifactError(ValueError):
    pass


# --------------------------------------------------------------------------
# Fréchet distance


def _sqrt_psd(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(c)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _check_cov(c: np.ndarray, name: str, tol: float) -> np.ndarray:
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if c.shape[0] != c.shape[1]:
        raise ValueError(f"{name} is not square: {c.shape}")
    if np.abs(c - c.T).max() > tol * max(1.0, np.abs(c).max()):
        raise ValueError(f"{name} is not symmetric")
    return (c + c.T) / 2


def frechet_distance(mu1, cov1, mu2, cov2, sym_tol: float = 1e-6) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)) for PSD covariances.

    The trace term is computed from the eigenvalues of S1^(1/2) S2 S1^(1/2)
    (symmetric, same spectrum as S1 S2), with negative rounding clamped to 0.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    c1 = _check_cov(cov1, "cov1", sym_tol)
    c2 = _check_cov(cov2, "cov2", sym_tol)
    if not (mu1.shape == mu2.shape and c1.shape == c2.shape == (len(mu1), len(mu1))):
        raise ValueError("moment shapes do not match")
    s1 = _sqrt_psd(c1)
    m = s1 @ c2 @ s1
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh((m + m.T) / 2), 0.0, None)).sum()
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def moments(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise ValueError("need an n x f feature matrix with n >= 2")
    return f.mean(0), np.atleast_2d(np.cov(f, rowvar=False))


# --------------------------------------------------------------------------
# feature extractors


class FeatureExtractor:
    """Deterministic map from a data batch to an n x f feature matrix."""

    provenance = "external"

    def __init__(self, fn: Callable[[torch.Tensor], torch.Tensor | np.ndarray], dim: int,
                 name: str = "external", provenance: str = "external"):
        if dim < 2:
            raise ValueError("feature dimension must be >= 2")
        self.fn, self.dim, self.name, self.provenance = fn, dim, name, provenance

    def __call__(self, x: torch.Tensor) -> np.ndarray:
        out = self.fn(x)
        if isinstance(out, torch.Tensor):
            out = out.detach().cpu().double().numpy()
        return np.asarray(out, dtype=np.float64).reshape(len(x), -1)


def raw_pixels(item_shape: Sequence[int]) -> FeatureExtractor:
    dim = int(np.prod(item_shape))
    return FeatureExtractor(lambda x: x.reshape(len(x), -1), dim, "raw_pixels", "raw_pixels")


class SmallClassifier(nn.Module):
    def __init__(self, in_ch: int = 1, n_classes: int = 10, features: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, 16, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, 2, 1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(4), nn.Flatten(),
            nn.Linear(32 * 16, features),
        )
        self.head = nn.Linear(features, n_classes)

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(F.relu(self.body(x)))


def train_classifier(data: torch.Tensor, labels: torch.Tensor, epochs: int = 2, seed: int = 0,
                     batch_size: int = 128, lr: float = 1e-3, features: int = 64) -> SmallClassifier:
    with seeded(seed):
        net = SmallClassifier(data.shape[1], int(labels.max()) + 1, features)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    net.train()
    for _ in range(epochs):
        order = torch.randperm(len(data), generator=gen)
        for i in range(0, len(data), batch_size):
            idx = order[i:i + batch_size]
            loss = F.cross_entropy(net(data[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    return net


def classifier_features(net: SmallClassifier, name: str = "classifier") -> FeatureExtractor:
    def fn(x):
        with torch.no_grad():
            return torch.cat([net.features(x[i:i + 1000]) for i in range(0, len(x), 1000)])

    dim = net.head.in_features
    return FeatureExtractor(fn, dim, name, "trained_classifier")


class FeatureCache:
    """Feature matrices stored as ``<root>/<dataset>__<extractor>__<split>.npz``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, dataset: str, extractor: str, split: str) -> Path:
        return self.root / f"{dataset}__{extractor}__{split}.npz"

    def get(self, dataset: str, extractor: FeatureExtractor, split: str,
            data: torch.Tensor) -> np.ndarray:
        p = self.path(dataset, extractor.name, split)
        if p.exists():
            with np.load(p, allow_pickle=False) as d:
                return d["features"]
        feats = extractor(data)
        p.parent.mkdir(parents=True, exist_ok=True)
        np.savez(p, features=feats)
        return feats


def fid_score(real: torch.Tensor, generated: torch.Tensor, extractor: FeatureExtractor,
              ridge: float = COV_RIDGE) -> float:
    """Fréchet distance between feature moments, with ``ridge * I`` added to both covariances."""
    mu1, c1 = moments(extractor(real))
    mu2, c2 = moments(extractor(generated))
    eye = ridge * np.eye(len(mu1))
    return frechet_distance(mu1, c1 + eye, mu2, c2 + eye)


# --------------------------------------------------------------------------
# latent statistics


def encode_all(pair: AutoencoderPair, data: torch.Tensor, chunk: int = 1000) -> torch.Tensor:
    pair.eval()
    with torch.no_grad():
        return torch.cat([pair.encode(data[i:i + chunk]) for i in range(0, len(data), chunk)])


def latent_stats(pair: AutoencoderPair, data: torch.Tensor, out_dir: str | Path | None = None,
                 labels: torch.Tensor | None = None) -> dict:
    """Noise-free per-dim mean/variance and total variance (population variance)."""
    z = encode_all(pair, data).double().numpy()
    var = z.var(axis=0)
    stats = {"mean": z.mean(axis=0).tolist(), "variance": var.tolist(),
             "total_variance": float(var.sum())}
    if out_dir is not None and z.shape[1] == 2:
        stats["scatter"] = str(plot_scatter(z, Path(out_dir) / "latent_scatter.png", labels))
    return stats


# --------------------------------------------------------------------------
# plots


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _require(name: str, arr) -> np.ndarray:
    if arr is None:
        raise MissingArtifactError(f"missing artifact: {name}")
    a = arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else np.asarray(arr)
    if a.size == 0 or len(a) == 0:
        raise MissingArtifactError(f"empty artifact: {name}")
    return a


def plot_histograms(z, path: str | Path, bins: int = HIST_BINS) -> Path:
    z = _require("latents", z)
    plt = _plt()
    d = z.shape[1]
    cols = min(d, 4)
    rows = -(-d // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.2 * rows), squeeze=False)
    for i, ax in enumerate(axes.flat):
        if i < d:
            ax.hist(z[:, i], bins=bins)
            ax.set_title(f"z{i}", fontsize=8)
        else:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return Path(path)


def plot_scatter(z, path: str | Path, labels=None) -> Path:
    z = _require("latents", z)
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 4))
    c = None if labels is None else np.asarray(labels)
    ax.scatter(z[:, 0], z[:, 1], s=2, c=c, cmap="tab10" if c is not None else None)
    ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def image_grid(images, ncol: int) -> np.ndarray:
    """Tile (n, C, H, W) images in [0, 1] into an (rows*H, ncol*W, C) uint8 array."""
    x = _require("images", images)
    n, c, h, w = x.shape
    rows = -(-n // ncol)
    grid = np.zeros((rows * h, ncol * w, c), dtype=np.float64)
    for i in range(n):
        r, k = divmod(i, ncol)
        grid[r * h:(r + 1) * h, k * w:(k + 1) * w] = np.transpose(x[i], (1, 2, 0))
    return (np.clip(grid, 0, 1) * 255).round().astype(np.uint8)


def save_grid(images, path: str | Path, ncol: int) -> Path:
    from PIL import Image

    g = image_grid(images, ncol)
    Image.fromarray(g[..., 0] if g.shape[2] == 1 else g).save(path)
    return Path(path)


def traversals(pair: AutoencoderPair, z, steps: int = 10, span: float = 2.0) -> torch.Tensor:
    """Decode codes varying one dim over mean +- span*std, others at the batch mean.

    Returns (z_dim * steps, C, H, W) ordered dim-major.
    """
    z = torch.as_tensor(_require("latents", z))
    mean, std = z.mean(0), z.std(0) if len(z) > 1 else torch.ones(z.shape[1], dtype=z.dtype)
    codes = []
    for d in range(z.shape[1]):
        for t in torch.linspace(-span, span, steps, dtype=z.dtype):
            c = mean.clone()
            c[d] = mean[d] + t * std[d]
            codes.append(c)
    pair.eval()
    with torch.no_grad():
        return pair.decode(torch.stack(codes))


def emit_plots(out_dir: str | Path, latents=None, labels=None, pair: AutoencoderPair | None = None,
               inputs=None, samples=None, steps: int = 10) -> list[Path]:
    """Write histograms, scatter, sample grid, traversals and reconstruction panels.

    Only artifacts that apply are produced (image panels need image-shaped data).
    """
    z = _require("latents", latents)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [plot_histograms(z, out / "latent_hist.png")]
    if z.shape[1] == 2:
        paths.append(plot_scatter(z, out / "latent_scatter.png", labels))
    images = pair is not None and len(pair.input_shape) == 3
    if samples is not None and _require("samples", samples).ndim == 4:
        paths.append(save_grid(samples, out / "samples.png", 10))
    if images:
        paths.append(save_grid(traversals(pair, z, steps), out / "traversals.png", steps))
        if inputs is not None:
            x = torch.as_tensor(_require("inputs", inputs))[:10]
            with torch.no_grad():
                rec = pair.decode(pair.encode(x))
            paths.append(save_grid(torch.cat([x, rec]), out / "reconstructions.png", len(x)))
    (out / "plots.json").write_text(json.dumps([p.name for p in paths]))
    return paths
