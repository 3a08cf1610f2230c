"""Total-correlation penalty via a density-ratio discriminator, and the fixed-factor metric."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ConfigError, ModelConfig, Objective
from .data import FactorDataset
from .divergences import DegenerateBatchError
from .models import AutoencoderPair, seeded
from .training import TrainResult, encode_posterior, train

log = logging.getLogger(__name__)

# offset separating the discriminator's RNG stream from the model stream
DISC_STREAM_OFFSET = 104729


class UndefinedScoreError(RuntimeError):
    pass


class Discriminator(nn.Module):
    """MLP from latent codes to two logits: (joint, product of marginals)."""

    def __init__(self, z_dim: int, hidden: int = 1000, layers: int = 6, slope: float = 0.2):
        super().__init__()
        mods: list[nn.Module] = []
        width = z_dim
        for _ in range(layers):
            mods += [nn.Linear(width, hidden), nn.LeakyReLU(slope)]
            width = hidden
        mods.append(nn.Linear(width, 2))
        self.net = nn.Sequential(*mods)
        self.z_dim = z_dim

    def forward(self, z):
        return self.net(z)


def permute_dims(z: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Shuffle every column independently across the batch."""
    if z.dim() != 2 or z.shape[0] < 2:
        raise DegenerateBatchError(f"permute_dims needs a B x d batch with B >= 2, got {tuple(z.shape)}")
    b, d = z.shape
    cols = [z[torch.randperm(b, generator=generator), j] for j in range(d)]
    return torch.stack(cols, dim=1)


def tc_penalty(z: torch.Tensor, disc: nn.Module) -> torch.Tensor:
    """Density-ratio TC estimate: batch mean of logit_joint - logit_marginal."""
    logits = disc(z)
    return (logits[:, 0] - logits[:, 1]).mean()


def discriminator_step(z: torch.Tensor, disc: nn.Module, generator: torch.Generator | None,
                       optimizer: torch.optim.Optimizer) -> float:
    """One cross-entropy update: real codes are class 0, permuted codes class 1."""
    z = z.detach()
    zp = permute_dims(z, generator)
    logits = disc(torch.cat([z, zp]))
    target = torch.cat([torch.zeros(len(z), dtype=torch.long), torch.ones(len(zp), dtype=torch.long)])
    loss = F.cross_entropy(logits, target)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite discriminator loss")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


def disc_optimizer(disc: nn.Module, lr: float = 1e-4) -> torch.optim.Optimizer:
    return torch.optim.Adam(disc.parameters(), lr=lr, betas=(0.5, 0.9))


def fit_discriminator(samples: torch.Tensor, disc: nn.Module, steps: int, batch_size: int = 512,
                      lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Train ``disc`` on minibatches of fixed samples; returns the loss trace."""
    gen = torch.Generator().manual_seed(seed)
    opt = disc_optimizer(disc, lr)
    losses = []
    for _ in range(steps):
        idx = torch.randint(len(samples), (batch_size,), generator=gen)
        losses.append(discriminator_step(samples[idx], disc, gen, opt))
    return losses


def bivariate_gaussian_tc(rho: float) -> float:
    return -0.5 * float(np.log1p(-rho * rho))


class TCTrainer:
    """Alternating discriminator updates plugged into the training loop.

    After each autoencoder step the discriminator is updated on a fresh batch
    drawn with its own generator, so its randomness never touches the model
    stream.
    """

    def __init__(self, cfg: ModelConfig, disc: Discriminator | None = None, lr: float = 1e-4,
                 log_every: int = 50, batch_size: int | None = None, disc_hidden: int = 1000,
                 disc_layers: int = 6):
        self.gamma = cfg.tc_weight
        with seeded(cfg.seed + DISC_STREAM_OFFSET):
            self.disc = disc if disc is not None else Discriminator(cfg.z_dim, disc_hidden, disc_layers)
        self.optimizer = disc_optimizer(self.disc, lr)
        self.generator = torch.Generator().manual_seed(cfg.seed + DISC_STREAM_OFFSET)
        self.log_every = log_every
        self.batch_size = batch_size or cfg.optimizer.batch_size
        self._last_tc = 0.0

    def penalty(self, z: torch.Tensor) -> torch.Tensor:
        tc = tc_penalty(z, self.disc)
        self._last_tc = tc.item()
        return tc

    def after_step(self, step, pair, data, cfg, flow_layers) -> dict[str, float]:
        idx = torch.randint(len(data), (self.batch_size,), generator=self.generator)
        with torch.no_grad():
            z = encode_posterior(pair, data[idx], cfg, self.generator, flow_layers)
        loss = discriminator_step(z, self.disc, self.generator, self.optimizer)
        if self.log_every and step % self.log_every == 0:
            return {"tc_estimate": self._last_tc, "disc_loss": loss}
        return {}


TC_OBJECTIVES = {"TC-VCAE": Objective.VCAE, "TC-CWAE": Objective.CWAE, "FACTORVAE": Objective.VAE}


@dataclass
class TCResult:
    result: TrainResult
    disc: Discriminator
    history: list = field(default_factory=list)

    @property
    def pair(self) -> AutoencoderPair:
        return self.result.pair


def train_tc_model(cfg: ModelConfig, data: torch.Tensor, *, run_id: str = "tc",
                   disc: Discriminator | None = None, disc_lr: float = 1e-4,
                   log_every: int = 50, disc_hidden: int = 1000, disc_layers: int = 6) -> TCResult:
    """Train the base objective plus ``cfg.tc_weight`` times the TC estimate."""
    if cfg.objective not in TC_OBJECTIVES.values():
        raise ConfigError(f"TC training supports VCAE, CWAE and VAE bases, not {cfg.objective.value}")
    hook = TCTrainer(cfg, disc, disc_lr, log_every, disc_hidden=disc_hidden, disc_layers=disc_layers)
    res = train(cfg, data, None, run_id=run_id, tc=hook)
    return TCResult(res, hook.disc, res.history)


# --------------------------------------------------------------------------
# metric

Encoder = Callable[[torch.Tensor], torch.Tensor]


def pair_encoder(pair: AutoencoderPair, chunk: int = 1000) -> Encoder:
    """Noise-free encoder means as a plain callable."""

    def encode(x: torch.Tensor) -> torch.Tensor:
        pair.eval()
        with torch.no_grad():
            return torch.cat([pair.encode(x[i:i + chunk]) for i in range(0, len(x), chunk)])

    return encode


def _encode_indices(encoder: Encoder, ds: FactorDataset, idx: np.ndarray) -> np.ndarray:
    z = encoder(ds.get_images(idx))
    return np.asarray(z.detach().cpu().double() if isinstance(z, torch.Tensor) else z, dtype=np.float64)


def _votes(encoder, ds, n, samples, rng, scale, active):
    out = np.empty((n, 2), dtype=np.int64)
    for v in range(n):
        k = int(rng.integers(ds.num_factors))
        factors = ds.sample_factors(samples, rng)
        factors[:, k] = rng.integers(ds.factor_sizes[k])
        z = _encode_indices(encoder, ds, ds.index_of(factors))[:, active] / scale
        out[v] = (active[int(np.argmin(z.var(axis=0)))], k)
    return out


def disentanglement_score(encoder: Encoder | AutoencoderPair, ds: FactorDataset,
                          train_votes: int = 800, eval_votes: int = 800,
                          samples_per_vote: int = 100, seed: int = 0,
                          collapse_fraction: float = 0.05, std_samples: int = 10000) -> float:
    """Fixed-factor vote accuracy of a majority-vote dim -> factor classifier.

    Dimensions whose global std falls below ``collapse_fraction`` times the
    mean std are excluded. Ties (argmin variance, majority vote) go to the
    lowest index.
    """
    if isinstance(encoder, AutoencoderPair):
        encoder = pair_encoder(encoder)
    rng = np.random.default_rng(seed)
    n_std = min(len(ds), std_samples)
    idx = np.arange(len(ds)) if n_std == len(ds) else rng.choice(len(ds), n_std, replace=False)
    std = _encode_indices(encoder, ds, idx).std(axis=0)
    if not np.all(np.isfinite(std)) or std.mean() == 0:
        raise UndefinedScoreError("every latent dimension is collapsed")
    active = np.flatnonzero(std >= collapse_fraction * std.mean())
    scale = std[active]
    votes = _votes(encoder, ds, train_votes + eval_votes, samples_per_vote, rng, scale, active)
    train_v, eval_v = votes[:train_votes], votes[train_votes:]
    counts = np.zeros((len(std), ds.num_factors), dtype=np.int64)
    np.add.at(counts, (train_v[:, 0], train_v[:, 1]), 1)
    classifier = counts.argmax(axis=1)
    return float(np.mean(classifier[eval_v[:, 0]] == eval_v[:, 1]))


def chance_level(ds: FactorDataset) -> float:
    return 1.0 / ds.num_factors
