"""Invertible transform chains for latent density estimation and sampling.

Direction convention: ``forward`` maps base samples ``w ~ N(0, I)`` to the
latent space, ``inverse`` maps latent codes back to the base space. Every
layer returns ``(output, logdet)`` with ``logdet`` the per-row log absolute
Jacobian determinant of the map it just applied, so the logdets of a
forward pass and of the matching inverse pass sum to zero.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn

from .models import AutoencoderPair, seeded

LOG_2PI = math.log(2.0 * math.pi)


class FlowError(RuntimeError):
    pass


def _soft_clamp(x: torch.Tensor, bound: float = 3.0) -> torch.Tensor:
    return bound * torch.tanh(x / bound)


def standard_normal_log_prob(w: torch.Tensor) -> torch.Tensor:
    return -0.5 * (w ** 2).sum(-1) - 0.5 * w.shape[-1] * LOG_2PI


class MaskedLinear(nn.Linear):
    def __init__(self, in_features: int, out_features: int, mask: torch.Tensor):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", mask.to(self.weight.dtype))

    def forward(self, x):
        return nn.functional.linear(x, self.weight * self.mask, self.bias)


class MADE(nn.Module):
    """Autoregressive MLP: output block j depends on inputs < j only (plus context)."""

    def __init__(self, dim: int, hidden: list[int], n_out: int = 2, context_dim: int = 0):
        super().__init__()
        self.dim, self.n_out, self.context_dim = dim, n_out, context_dim
        in_deg = torch.arange(1, dim + 1)
        degrees = [in_deg]
        for h in hidden:
            degrees.append(torch.arange(h) % max(1, dim - 1) + 1)
        layers = []
        for i, h in enumerate(hidden):
            mask = (degrees[i + 1][:, None] >= degrees[i][None, :])
            layers.append(MaskedLinear(degrees[i].numel(), h, mask))
        out_deg = in_deg.repeat(n_out)
        last = degrees[-1]
        out_mask = out_deg[:, None] > last[None, :]
        self.hidden_layers = nn.ModuleList(layers)
        self.out = MaskedLinear(last.numel(), dim * n_out, out_mask)
        self.context = nn.Linear(context_dim, hidden[0]) if (context_dim and hidden) else None
        self.act = nn.ReLU()

    def forward(self, x, context=None):
        h = x
        for i, layer in enumerate(self.hidden_layers):
            h = layer(h)
            if i == 0 and self.context is not None and context is not None:
                h = h + self.context(context)
            h = self.act(h)
        return self.out(h).reshape(x.shape[0], self.n_out, self.dim).unbind(1)

    def zero_output(self):
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)


class AffineAutoregressive(nn.Module):
    """Affine autoregressive layer.

    ``conditioner_side="output"`` gives a masked autoregressive flow layer: the
    inverse (latent to base) is a single parallel pass and forward is
    sequential. ``"input"`` gives an inverse autoregressive layer, parallel
    in the forward direction.
    """

    def __init__(self, dim: int, hidden: list[int], context_dim: int = 0,
                 conditioner_side: str = "output"):
        super().__init__()
        if conditioner_side not in ("input", "output"):
            raise ValueError(conditioner_side)
        self.dim = dim
        self.side = conditioner_side
        self.made = MADE(dim, hidden, 2, context_dim)

    def _params(self, x, context):
        shift, raw = self.made(x, context)
        return shift, _soft_clamp(raw)

    def _parallel(self, x, context):
        shift, log_scale = self._params(x, context)
        return x * torch.exp(log_scale) + shift, log_scale.sum(-1)

    def _parallel_inverse(self, y, context):
        shift, log_scale = self._params(y, context)
        return (y - shift) * torch.exp(-log_scale), -log_scale.sum(-1)

    def _sequential(self, x, context):
        y = torch.zeros_like(x)
        for i in range(self.dim):
            shift, log_scale = self._params(y, context)
            y = y.clone()
            y[:, i] = x[:, i] * torch.exp(log_scale[:, i]) + shift[:, i]
        return y, log_scale.sum(-1)

    def _sequential_inverse(self, y, context):
        x = torch.zeros_like(y)
        for i in range(self.dim):
            shift, log_scale = self._params(x, context)
            x = x.clone()
            x[:, i] = (y[:, i] - shift[:, i]) * torch.exp(-log_scale[:, i])
        return x, -log_scale.sum(-1)

    def forward(self, w, context=None):
        if self.side == "input":
            return self._parallel(w, context)
        return self._sequential(w, context)

    def inverse(self, z, context=None):
        if self.side == "output":
            return self._parallel_inverse(z, context)
        return self._sequential_inverse(z, context)


class AffineCoupling(nn.Module):
    """RealNVP coupling: the first ``dim // 2`` coordinates pass through unchanged."""

    def __init__(self, dim: int, hidden: list[int], context_dim: int = 0):
        super().__init__()
        self.dim = dim
        self.k = dim // 2
        sizes = [self.k + context_dim, *hidden, 2 * (dim - self.k)]
        layers: list[nn.Module] = []
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(sizes) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def _params(self, keep, context):
        h = keep if context is None else torch.cat([keep, context], -1)
        shift, raw = self.net(h).chunk(2, -1)
        return shift, _soft_clamp(raw)

    def forward(self, w, context=None):
        keep, rest = w[:, : self.k], w[:, self.k:]
        shift, log_scale = self._params(keep, context)
        return torch.cat([keep, rest * torch.exp(log_scale) + shift], -1), log_scale.sum(-1)

    def inverse(self, z, context=None):
        keep, rest = z[:, : self.k], z[:, self.k:]
        shift, log_scale = self._params(keep, context)
        return torch.cat([keep, (rest - shift) * torch.exp(-log_scale)], -1), -log_scale.sum(-1)

    def zero_output(self):
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)


class Permutation(nn.Module):
    def __init__(self, perm):
        super().__init__()
        perm = torch.as_tensor(perm, dtype=torch.long)
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", torch.argsort(perm))

    def forward(self, w, context=None):
        return w[:, self.perm], w.new_zeros(w.shape[0])

    def inverse(self, z, context=None):
        return z[:, self.inv_perm], z.new_zeros(z.shape[0])


class ElementwiseScale(nn.Module):
    """z = w * exp(log_scale); trainable unless ``trainable=False``."""

    def __init__(self, dim: int, log_scale: float = 0.0, trainable: bool = True):
        super().__init__()
        init = torch.full((dim,), float(log_scale))
        if trainable:
            self.log_scale = nn.Parameter(init)
        else:
            self.register_buffer("log_scale", init)

    def forward(self, w, context=None):
        return w * torch.exp(self.log_scale), self.log_scale.sum().expand(w.shape[0])

    def inverse(self, z, context=None):
        return z * torch.exp(-self.log_scale), (-self.log_scale.sum()).expand(z.shape[0])


class ElementwiseShift(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.shift = nn.Parameter(torch.zeros(dim))

    def forward(self, w, context=None):
        return w + self.shift, w.new_zeros(w.shape[0])

    def inverse(self, z, context=None):
        return z - self.shift, z.new_zeros(z.shape[0])


class FlowChain(nn.Module):
    """Ordered layers f_1..f_m over a standard-normal base of dimension ``dim``."""

    def __init__(self, dim: int, layers: Iterable[nn.Module] = ()):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(layers)

    def forward(self, w, context=None):
        logdet = w.new_zeros(w.shape[0])
        for layer in self.layers:
            w, ld = layer(w, context)
            logdet = logdet + ld
        _check_finite(w, "flow_forward")
        return w, logdet

    def inverse(self, z, context=None):
        logdet = z.new_zeros(z.shape[0])
        for layer in reversed(self.layers):
            z, ld = layer.inverse(z, context)
            logdet = logdet + ld
        _check_finite(z, "flow_inverse")
        return z, logdet

    def log_prob(self, z, context=None):
        w, logdet = self.inverse(z, context)
        return standard_normal_log_prob(w) + logdet

    def sample(self, n: int, generator: torch.Generator | None = None):
        p = next(self.parameters(), None)
        dtype = p.dtype if p is not None else torch.get_default_dtype()
        w = torch.randn(n, self.dim, generator=generator, dtype=dtype)
        return self.forward(w)[0]


def _check_finite(x: torch.Tensor, where: str):
    if not torch.isfinite(x).all():
        raise FlowError(f"non-finite values in {where}")


def _as_batch(v: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (v[None, :], True) if v.ndim == 1 else (v, False)


def flow_forward(w, chain: FlowChain):
    w, single = _as_batch(torch.as_tensor(w))
    if w.shape[1] != chain.dim:
        raise ValueError(f"flow expects dimension {chain.dim}, got {w.shape[1]}")
    z, ld = chain(w)
    return (z[0], ld[0]) if single else (z, ld)


def flow_inverse(z, chain: FlowChain):
    z, single = _as_batch(torch.as_tensor(z))
    if z.shape[1] != chain.dim:
        raise ValueError(f"flow expects dimension {chain.dim}, got {z.shape[1]}")
    w, ld = chain.inverse(z)
    return (w[0], ld[0]) if single else (w, ld)


def nf_log_prob(z, chain: FlowChain):
    z, single = _as_batch(torch.as_tensor(z))
    lp = chain.log_prob(z)
    return lp[0] if single else lp


# --------------------------------------------------------------------------
# presets

FLOW_PRESETS = {
    # MAF[64,64], 5 x {Permutation, MAF[64,64]}, LinearScale, LinearShift
    "maf": dict(kind="maf", blocks=6, hidden=[64, 64], terminal_affine=True),
    "maf_desk": dict(kind="maf", blocks=6, hidden=[32, 32], terminal_affine=True),
    # RealNVP[256,256,256], 7 x {Permutation, RealNVP[256,256,256]}
    "realnvp": dict(kind="coupling", blocks=8, hidden=[256, 256, 256], terminal_affine=False),
    "realnvp_desk": dict(kind="coupling", blocks=8, hidden=[32, 32], terminal_affine=False),
}


def build_flow(preset: str | dict, dim: int, seed: int = 0, identity_init: bool = True,
               dtype: torch.dtype = torch.float32) -> FlowChain:
    """Build a chain from a named preset (or a preset dict).

    Layers are listed in the base-to-latent direction, i.e. the reverse of
    the latent-to-base listing used when describing the architecture.
    """
    p = dict(FLOW_PRESETS[preset]) if isinstance(preset, str) else dict(preset)
    rng = np.random.default_rng(seed)
    density_order: list[nn.Module] = []
    with seeded(seed):
        for b in range(p["blocks"]):
            if b > 0:
                density_order.append(Permutation(rng.permutation(dim)))
            if p["kind"] == "maf":
                layer = AffineAutoregressive(dim, p["hidden"], conditioner_side="output")
                if identity_init:
                    layer.made.zero_output()
            else:
                layer = AffineCoupling(dim, p["hidden"])
                if identity_init:
                    layer.zero_output()
            density_order.append(layer)
        if p.get("terminal_affine"):
            density_order += [ElementwiseScale(dim), ElementwiseShift(dim)]
    return FlowChain(dim, reversed(density_order)).to(dtype)


def build_iaf(dim: int, steps: int, hidden: list[int] | None = None, context_dim: int | None = None,
              seed: int = 0) -> nn.ModuleList:
    """Posterior inverse-autoregressive steps conditioned on an encoder context vector."""
    hidden = hidden or [max(16, 2 * dim)] * 2
    context_dim = dim if context_dim is None else context_dim
    rng = np.random.default_rng(seed)
    layers: list[nn.Module] = []
    with seeded(seed):
        for s in range(steps):
            if s > 0:
                layers.append(Permutation(rng.permutation(dim)))
            layer = AffineAutoregressive(dim, hidden, context_dim, conditioner_side="input")
            layer.made.zero_output()
            layers.append(layer)
    return nn.ModuleList(layers)


# --------------------------------------------------------------------------
# second-stage training and sampling


def train_flows(chain: FlowChain, latent_sampler: Callable[[torch.Generator], Iterable[torch.Tensor]],
                epochs: int = 100, learning_rate: float = 1e-3, seed: int = 0,
                log: Callable[[int, float], None] | None = None) -> list[float]:
    """Maximise mean ``nf_log_prob`` over minibatches drawn by ``latent_sampler``.

    ``latent_sampler(generator)`` yields the minibatches of one epoch. Only
    the chain's parameters are optimised. Returns the per-epoch mean loss.
    """
    params = [p for p in chain.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=learning_rate) if params else None
    gen = torch.Generator().manual_seed(seed)
    history: list[float] = []
    chain.train()
    for epoch in range(epochs):
        total, count = 0.0, 0
        for z in latent_sampler(gen):
            z = z.detach()
            loss = -chain.log_prob(z).mean()
            if not torch.isfinite(loss):
                raise FlowError(f"non-finite flow loss at epoch {epoch}")
            if opt is not None:
                opt.zero_grad()
                loss.backward()
                opt.step()
            total += loss.item() * z.shape[0]
            count += z.shape[0]
        history.append(total / max(count, 1))
        if log is not None:
            log(epoch, history[-1])
    chain.eval()
    return history


def encoder_latent_sampler(pair: AutoencoderPair, data: torch.Tensor, noise_variance: float,
                           batch_size: int = 100):
    """Epoch iterator over noisy encoder latents z = mu(x) + eps, shuffled per epoch."""
    pair.eval()
    with torch.no_grad():
        mu = torch.cat([pair.encode(data[i:i + 1000]) for i in range(0, len(data), 1000)])
    std = math.sqrt(noise_variance)

    def sampler(gen: torch.Generator):
        order = torch.randperm(len(mu), generator=gen)
        for i in range(0, len(mu), batch_size):
            m = mu[order[i:i + batch_size]]
            yield m + std * torch.randn(m.shape, generator=gen, dtype=m.dtype)

    return sampler


def sample_generative(pair: AutoencoderPair, chain: FlowChain | None, n: int,
                      generator: torch.Generator | None = None) -> torch.Tensor:
    """Draw w ~ N(0, I), push through the chain, decode."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    dtype = next(pair.parameters()).dtype if any(True for _ in pair.parameters()) else torch.float32
    pair.eval()
    if n == 0:
        return torch.empty((0, *pair.input_shape), dtype=dtype)
    with torch.no_grad():
        w = torch.randn(n, pair.z_dim, generator=generator, dtype=dtype)
        z = w if chain is None else chain(w)[0]
        return pair.decode(z)
