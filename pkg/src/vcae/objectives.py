"""Training objectives: VCAE, cWAE, VAE and VAE with a posterior IAF.

Each loss returns a dict holding the scalar ``loss`` (differentiable with
respect to the pair's parameters), its parts, and the latent sample ``z``
that downstream penalties (e.g. total correlation) act on.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .config import ConfigError, ModelConfig, Objective
from .divergences import (KernelSpec, batch_total_variance, gaussian_kl_diag, mmd_unbiased,
                          variance_penalty)
from .flows import standard_normal_log_prob
from .models import AutoencoderPair


def sample_latent(mu: torch.Tensor, noise_variance: float,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """z = mu + eps with eps ~ N(0, noise_variance * I)."""
    if noise_variance < 0:
        raise ConfigError("noise_variance must be nonnegative")
    if noise_variance == 0:
        return mu
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + math.sqrt(noise_variance) * eps


def reconstruction_error(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Squared error summed over each item, averaged over the batch."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).reshape(x.shape[0], -1).sum(1).mean()


def _expect(cfg: ModelConfig, *objectives: Objective):
    if cfg.objective not in objectives:
        raise ConfigError(f"objective {cfg.objective.value} not valid here")


def vcae_loss(x, pair: AutoencoderPair, cfg: ModelConfig, generator=None) -> dict:
    _expect(cfg, Objective.VCAE)
    z = sample_latent(pair.encode(x), cfg.noise_variance, generator)
    recon = reconstruction_error(x, pair.decode(z))
    out = {"recon": recon, "z": z, "latent_var": batch_total_variance(z).detach()}
    if cfg.penalty_weight == 0:
        out["penalty"] = torch.zeros((), dtype=recon.dtype)
        out["loss"] = recon
        return out
    out["penalty"] = variance_penalty(z, cfg.variance_target)
    out["loss"] = recon + cfg.penalty_weight * out["penalty"]
    return out


def cwae_loss(x, pair: AutoencoderPair, cfg: ModelConfig, generator=None,
              prior_generator=None) -> dict:
    _expect(cfg, Objective.CWAE)
    z = sample_latent(pair.encode(x), cfg.noise_variance, generator)
    recon = reconstruction_error(x, pair.decode(z))
    out = {"recon": recon, "z": z, "latent_var": batch_total_variance(z).detach()}
    if cfg.penalty_weight == 0:
        out["penalty"] = torch.zeros((), dtype=recon.dtype)
        out["loss"] = recon
        return out
    prior = torch.randn(z.shape, generator=prior_generator or generator, dtype=z.dtype)
    out["penalty"] = mmd_unbiased(z, prior, KernelSpec(cfg.kernel_scale))
    out["loss"] = recon + cfg.penalty_weight * out["penalty"]
    return out


def _gaussian_posterior(pair: AutoencoderPair, x):
    heads = pair.encode_all(x)
    if len(heads) < 2:
        raise ConfigError("VAE objectives need an encoder with a variance head")
    mean, log_std = heads[0], heads[1]
    # exp keeps the emitted standard deviation strictly positive
    return mean, torch.exp(log_std), heads[2:]


def vae_loss(x, pair: AutoencoderPair, cfg: ModelConfig, generator=None) -> dict:
    _expect(cfg, Objective.VAE)
    mean, std, _ = _gaussian_posterior(pair, x)
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    z = mean + std * eps
    recon = reconstruction_error(x, pair.decode(z))
    kl = gaussian_kl_diag(mean, std).mean()
    return {"recon": recon, "penalty": kl, "loss": recon + kl, "z": z,
            "latent_var": batch_total_variance(z).detach()}


def posterior_flow(z0: torch.Tensor, context: torch.Tensor | None, layers) -> tuple[torch.Tensor, torch.Tensor]:
    logdet = z0.new_zeros(z0.shape[0])
    z = z0
    for layer in layers:
        z, ld = layer(z, context)
        logdet = logdet + ld
    return z, logdet


def posterior_log_prob(mean, std, eps, context, layers):
    """(z_T, log q(z_T | x)) for z_0 = mean + std * eps pushed through ``layers``."""
    z0 = mean + std * eps
    log_q0 = standard_normal_log_prob(eps) - torch.log(std).sum(-1)
    z, logdet = posterior_flow(z0, context, layers)
    return z, log_q0 - logdet


def vae_iaf_loss(x, pair: AutoencoderPair, flow_layers: nn.ModuleList | list, cfg: ModelConfig,
                 generator=None) -> dict:
    """ELBO with a flow-corrected posterior.

    KL(q_T || p) is split as the closed-form KL(q_0 || p) plus a single-sample
    correction E[log p(z_0) - log p(z_T) - logdet], which is exactly zero for
    an empty chain, so the loss then coincides with ``vae_loss``.
    """
    _expect(cfg, Objective.VAE_IAF)
    mean, std, rest = _gaussian_posterior(pair, x)
    context = rest[0] if rest else None
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    z0 = mean + std * eps
    z, logdet = posterior_flow(z0, context, flow_layers)
    recon = reconstruction_error(x, pair.decode(z))
    kl0 = gaussian_kl_diag(mean, std)
    correction = standard_normal_log_prob(z0) - standard_normal_log_prob(z) - logdet
    kl = (kl0 + correction).mean()
    return {"recon": recon, "penalty": kl, "loss": recon + kl, "z": z,
            "latent_var": batch_total_variance(z).detach()}


def compute_loss(x, pair: AutoencoderPair, cfg: ModelConfig, generator=None, flow_layers=None) -> dict:
    if cfg.objective is Objective.VCAE:
        return vcae_loss(x, pair, cfg, generator)
    if cfg.objective is Objective.CWAE:
        return cwae_loss(x, pair, cfg, generator)
    if cfg.objective is Objective.VAE:
        return vae_loss(x, pair, cfg, generator)
    return vae_iaf_loss(x, pair, flow_layers if flow_layers is not None else [], cfg, generator)


def gradient_check(cfg: ModelConfig, batch: int = 8, step: float = 1e-3, seed: int = 0) -> float:
    """Relative error between autograd and central finite-difference gradients.

    Runs in double precision on ``cfg``'s architecture with random inputs; every
    loss evaluation reuses the same noise seed so the objective is a fixed
    function of the parameters.
    """
    from .flows import build_iaf
    from .models import build_pair

    pair = build_pair(cfg, torch.float64)
    flow = build_iaf(cfg.z_dim, cfg.iaf_steps, seed=cfg.seed).double() if cfg.objective is Objective.VAE_IAF else None
    if flow is not None:
        # identity-initialised steps would leave the flow gradients trivially zero
        with torch.no_grad():
            gen = torch.Generator().manual_seed(seed + 7)
            for p in flow.parameters():
                p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    params = [p for p in pair.parameters()] + ([p for p in flow.parameters()] if flow is not None else [])
    x = torch.randn(batch, *pair.input_shape, generator=torch.Generator().manual_seed(seed),
                    dtype=torch.float64)

    def loss_value():
        return compute_loss(x, pair, cfg, torch.Generator().manual_seed(seed + 1), flow)["loss"]

    grads = torch.autograd.grad(loss_value(), params, allow_unused=True)
    analytic = torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                          for g, p in zip(grads, params)])
    numeric = torch.empty_like(analytic)
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_value().item()
                flat[i] = orig - step
                dn = loss_value().item()
                flat[i] = orig
                numeric[k] = (up - dn) / (2 * step)
                k += 1
    return ((analytic - numeric).norm() / max(analytic.norm().item(), numeric.norm().item(), 1e-30)).item()
