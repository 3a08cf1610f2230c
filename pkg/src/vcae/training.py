"""Stage-one training loop and evaluation of a trained pair."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import torch
import torch.nn as nn

from .config import ModelConfig, Objective
from .divergences import batch_total_variance
from .flows import build_iaf
from .models import AutoencoderPair, build_pair
from .objectives import compute_loss, posterior_flow, reconstruction_error

log = logging.getLogger(__name__)

EVAL_CHUNK = 500


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    epoch: int
    split: str
    metric: str
    value: float


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list[MetricsRecord]):
        super().__init__(message)
        self.history = history


class TCHook(Protocol):
    gamma: float

    def penalty(self, z: torch.Tensor) -> torch.Tensor: ...

    def after_step(self, step: int, pair: AutoencoderPair, data: torch.Tensor,
                   cfg: ModelConfig, flow_layers) -> dict[str, float]: ...


@dataclass
class TrainResult:
    pair: AutoencoderPair
    cfg: ModelConfig
    history: list[MetricsRecord] = field(default_factory=list)
    flow_layers: nn.ModuleList | None = None
    generator: torch.Generator | None = None
    steps: int = 0

    def final(self, split: str, metric: str) -> float:
        for r in reversed(self.history):
            if r.split == split and r.metric == metric:
                return r.value
        raise KeyError((split, metric))


def encode_posterior(pair: AutoencoderPair, x: torch.Tensor, cfg: ModelConfig,
                     generator: torch.Generator | None = None, flow_layers=None) -> torch.Tensor:
    """Latent codes: noise-free when ``generator`` is None, else one stochastic draw."""
    heads = pair.encode_all(x)
    mu = heads[0]
    if cfg.objective in (Objective.VCAE, Objective.CWAE):
        if generator is None or cfg.noise_variance == 0:
            return mu
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + math.sqrt(cfg.noise_variance) * eps
    if generator is None:
        z = mu
    else:
        z = mu + torch.exp(heads[1]) * torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    if cfg.objective is Objective.VAE_IAF and flow_layers is not None:
        z, _ = posterior_flow(z, heads[2], flow_layers)
    return z


@torch.no_grad()
def evaluate(pair: AutoencoderPair, data: torch.Tensor, cfg: ModelConfig, seed: int = 0,
             flow_layers=None) -> dict[str, float]:
    """Reconstruction error and latent total variance, noise-free and noisy."""
    was_training = pair.training
    pair.eval()
    gen = torch.Generator().manual_seed(seed)
    sums = {"recon": 0.0, "recon_noisy": 0.0}
    clean, noisy = [], []
    for i in range(0, len(data), EVAL_CHUNK):
        x = data[i:i + EVAL_CHUNK]
        z0 = encode_posterior(pair, x, cfg, None, flow_layers)
        z1 = encode_posterior(pair, x, cfg, gen, flow_layers)
        sums["recon"] += reconstruction_error(x, pair.decode(z0)).item() * len(x)
        sums["recon_noisy"] += reconstruction_error(x, pair.decode(z1)).item() * len(x)
        clean.append(z0)
        noisy.append(z1)
    pair.train(was_training)
    out = {k: v / len(data) for k, v in sums.items()}
    out["total_variance"] = batch_total_variance(torch.cat(clean)).item()
    out["total_variance_noisy"] = batch_total_variance(torch.cat(noisy)).item()
    return out


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        if len(idx) >= 2:
            yield idx


def train(cfg: ModelConfig, train_data: torch.Tensor, test_data: torch.Tensor | None = None, *,
          run_id: str = "run", eval_every: int = 0, tc: TCHook | None = None,
          pair: AutoencoderPair | None = None, dtype: torch.dtype = torch.float32) -> TrainResult:
    """Minibatch Adam training of the configured objective.

    All randomness (batch order, latent noise, prior draws) comes from one
    generator seeded with ``cfg.seed``. ``eval_every`` > 0 adds noise-free
    train/test evaluations every that many epochs; a final evaluation is
    always recorded with ``epoch`` equal to the number of epochs run.
    """
    if len(train_data) == 0:
        raise ValueError("empty training set")
    pair = pair if pair is not None else build_pair(cfg, dtype)
    flow_layers = None
    params = list(pair.parameters())
    if cfg.objective is Objective.VAE_IAF:
        flow_layers = build_iaf(cfg.z_dim, cfg.iaf_steps, seed=cfg.seed).to(dtype)
        params += list(flow_layers.parameters())
    result = TrainResult(pair, cfg, [], flow_layers)
    opt_cfg = cfg.optimizer
    if opt_cfg.epochs == 0 and not opt_cfg.steps:
        return result

    gen = torch.Generator().manual_seed(cfg.seed)
    result.generator = gen
    optimizer = torch.optim.Adam(params, lr=opt_cfg.learning_rate)
    history = result.history

    def record(epoch, split, metric, value):
        history.append(MetricsRecord(run_id, epoch, split, metric, float(value)))

    def final_eval(epoch):
        for split, data in (("train", train_data), ("test", test_data)):
            if data is None:
                continue
            for k, v in evaluate(pair, data, cfg, seed=cfg.seed + 1, flow_layers=flow_layers).items():
                record(epoch, split, k, v)

    step = 0
    max_steps = opt_cfg.steps
    epochs = opt_cfg.epochs if max_steps is None else math.ceil(
        max_steps / max(1, math.ceil(len(train_data) / opt_cfg.batch_size)))
    epoch = 0
    for epoch in range(epochs):
        lr = opt_cfg.lr_at(epoch)
        for g in optimizer.param_groups:
            g["lr"] = lr
        pair.train()
        sums = {"loss": 0.0, "recon": 0.0, "penalty": 0.0, "latent_var": 0.0}
        seen = 0
        for idx in _batches(len(train_data), opt_cfg.batch_size, gen):
            x = train_data[idx]
            out = compute_loss(x, pair, cfg, gen, flow_layers)
            loss = out["loss"]
            if tc is not None:
                tc_term = tc.penalty(out["z"])
                loss = loss + tc.gamma * tc_term
            if not torch.isfinite(loss):
                record(epoch, "train", "diverged", step)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", history)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            for k in sums:
                sums[k] += float(loss.detach()) * len(idx) if k == "loss" else float(out[k].detach()) * len(idx)
            seen += len(idx)
            if tc is not None:
                for k, v in tc.after_step(step, pair, train_data, cfg, flow_layers).items():
                    record(step, "train", k, v)
            if max_steps is not None and step >= max_steps:
                break
        for k, v in sums.items():
            record(epoch, "train", f"batch_{k}", v / max(seen, 1))
        log.debug("%s epoch %d loss %.4f", run_id, epoch, sums["loss"] / max(seen, 1))
        if eval_every and (epoch + 1) % eval_every == 0 and epoch + 1 < epochs:
            final_eval(epoch)
        if max_steps is not None and step >= max_steps:
            break
    result.steps = step
    final_eval(epoch + 1)
    pair.eval()
    return result
