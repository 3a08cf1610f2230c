"""Encoder/decoder architecture presets and the autoencoder pair."""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable

import torch
import torch.nn as nn

from .config import ConfigError, ModelConfig


class InputShapeError(ValueError):
    pass


@contextmanager
def seeded(seed: int):
    """Run a block under a fixed global torch seed without leaking RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class Identity(nn.Module):
    def forward(self, x):
        return x


class Crop2d(nn.Module):
    def __init__(self, size: int):
        super().__init__()
        self.size = size

    def forward(self, x):
        return x[..., : self.size, : self.size]


class Unflatten(nn.Module):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape(x.shape[0], *self.shape)


def _activation(name: str) -> nn.Module:
    return {"relu": nn.ReLU(), "tanh": nn.Tanh(), "softplus": nn.Softplus(),
            "leaky_relu": nn.LeakyReLU(0.2)}[name]


def mlp(sizes: list[int], activation: str = "relu", final_activation: bool = False) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2 or final_activation:
            layers.append(_activation(activation))
    return nn.Sequential(*layers)


class AutoencoderPair(nn.Module):
    """Deterministic encoder mean map and decoder mean map.

    The encoder emits ``heads * z_dim`` numbers per item: the latent mean,
    then (VAE) a log standard deviation, then (VAE+IAF) a flow context.
    """

    def __init__(self, encoder: nn.Module, decoder: nn.Module, z_dim: int,
                 input_shape: tuple[int, ...], heads: int = 1, name: str = ""):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder
        self.z_dim = z_dim
        self.input_shape = tuple(input_shape)
        self.heads = heads
        self.name = name

    def _check_input(self, x: torch.Tensor):
        if tuple(x.shape[1:]) != self.input_shape:
            raise InputShapeError(
                f"expected items of shape {self.input_shape}, got {tuple(x.shape[1:])}")

    def encode_all(self, x: torch.Tensor) -> list[torch.Tensor]:
        self._check_input(x)
        out = self.encoder(x)
        if out.shape[-1] != self.z_dim * self.heads:
            raise InputShapeError(f"encoder emitted {out.shape[-1]} values, "
                                  f"expected {self.z_dim * self.heads}")
        return list(out.split(self.z_dim, dim=-1))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode_all(x)[0]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.z_dim:
            raise InputShapeError(f"expected latents of shape (B, {self.z_dim}), got {tuple(z.shape)}")
        return self.decoder(z)

    def forward(self, x):
        return self.decode(self.encode(x))


# --------------------------------------------------------------------------
# presets


def _conv_encoder(in_ch: int, size: int, channels: list[int], ks: int, out_dim: int,
                  batchnorm: bool, hidden_dense: int | None = None) -> nn.Sequential:
    pad = (ks - 1) // 2
    layers: list[nn.Module] = []
    c = in_ch
    for nf in channels:
        layers.append(nn.Conv2d(c, nf, ks, 2, pad))
        if batchnorm:
            layers.append(nn.BatchNorm2d(nf))
        layers.append(nn.ReLU())
        c = nf
        size = (size + 2 * pad - ks) // 2 + 1
    layers.append(nn.Flatten())
    flat = c * size * size
    if hidden_dense:
        layers += [nn.Linear(flat, hidden_dense), nn.ReLU()]
        flat = hidden_dense
    layers.append(nn.Linear(flat, out_dim))
    return nn.Sequential(*layers)


def _tconv(c_in: int, c_out: int, ks: int, stride: int) -> nn.ConvTranspose2d:
    # stride 2 doubles the spatial size for both even and odd kernels
    if stride == 2:
        pad = (ks - 1) // 2
        return nn.ConvTranspose2d(c_in, c_out, ks, 2, pad, output_padding=ks % 2)
    return nn.ConvTranspose2d(c_in, c_out, ks, 1, (ks - 1) // 2)


def _tconv_decoder(z_dim: int, start: int, start_ch: int, channels: list[int], out_ch: int,
                   out_size: int, ks: int, final_stride: int, batchnorm: bool,
                   dense_hidden: int | None = None) -> nn.Sequential:
    layers: list[nn.Module] = []
    d_in = z_dim
    if dense_hidden:
        layers += [nn.Linear(z_dim, dense_hidden), nn.ReLU()]
        d_in = dense_hidden
    layers.append(nn.Linear(d_in, start * start * start_ch))
    if dense_hidden:
        layers.append(nn.ReLU())
    layers.append(Unflatten((start_ch, start, start)))
    c = start_ch
    for nf in channels:
        layers.append(_tconv(c, nf, ks, 2))
        if batchnorm:
            layers.append(nn.BatchNorm2d(nf))
        layers.append(nn.ReLU())
        c = nf
    layers.append(_tconv(c, out_ch, ks, final_stride))
    # even kernels at stride 1 grow the map by one pixel; crop back
    layers.append(Crop2d(out_size))
    return nn.Sequential(*layers)


def _scale(channels: list[int], divisor: int, floor: int = 8) -> list[int]:
    return [max(floor, c // divisor) for c in channels]


def _mnist(cfg: ModelConfig, divisor: int, heads: int):
    enc_ch = _scale([128, 256, 512, 1024], divisor)
    dec_start = _scale([1024], divisor)[0]
    dec_ch = _scale([512, 256], divisor)
    enc = _conv_encoder(1, 28, enc_ch, 4, cfg.z_dim * heads, batchnorm=True)
    dec = _tconv_decoder(cfg.z_dim, 7, dec_start, dec_ch, 1, 28, 4, 1, batchnorm=True)
    return enc, dec, (1, 28, 28)


def _celeba(cfg: ModelConfig, divisor: int, heads: int):
    enc = _conv_encoder(3, 64, _scale([128, 256, 512, 1024], divisor), 5, cfg.z_dim * heads, True)
    dec = _tconv_decoder(cfg.z_dim, 8, _scale([1024], divisor)[0], _scale([512, 256, 128], divisor),
                         3, 64, 5, 1, batchnorm=True)
    return enc, dec, (3, 64, 64)


def _shapes(cfg: ModelConfig, divisor: int, heads: int, size: int):
    enc = _conv_encoder(3, size, _scale([32, 32, 64, 64], divisor), 4, cfg.z_dim * heads,
                        batchnorm=False, hidden_dense=_scale([256], divisor)[0])
    dec = _tconv_decoder(cfg.z_dim, size // 16, _scale([64], divisor)[0], _scale([64, 32, 32], divisor),
                         3, size, 4, 2, batchnorm=False, dense_hidden=_scale([256], divisor)[0])
    return enc, dec, (3, size, size)


def _dense(cfg: ModelConfig, heads: int, default_hidden, default_act, default_x):
    opts = cfg.arch_options
    x_dim = int(opts.get("x_dim", default_x))
    hidden = list(opts.get("hidden", default_hidden))
    act = opts.get("activation", default_act)
    enc = mlp([x_dim, *hidden, cfg.z_dim * heads], act)
    dec = mlp([cfg.z_dim, *hidden, x_dim], act)
    return enc, dec, (x_dim,)


def _identity(cfg: ModelConfig, heads: int):
    if heads != 1:
        raise ConfigError("identity preset has no variance head")
    return Identity(), Identity(), (cfg.z_dim,)


def _linear(cfg: ModelConfig, heads: int):
    x_dim = int(cfg.arch_options.get("x_dim", cfg.z_dim))
    return nn.Linear(x_dim, cfg.z_dim * heads), nn.Linear(cfg.z_dim, x_dim), (x_dim,)


ARCHITECTURES: dict[str, Callable] = {
    "identity": lambda cfg, h: _identity(cfg, h),
    "linear": lambda cfg, h: _linear(cfg, h),
    "mlp": lambda cfg, h: _dense(cfg, h, [8], "tanh", 4),
    "mog_mlp": lambda cfg, h: _dense(cfg, h, [128, 128], "relu", 100),
    "mnist": lambda cfg, h: _mnist(cfg, 1, h),
    "mnist_desk": lambda cfg, h: _mnist(cfg, 8, h),
    "celeba": lambda cfg, h: _celeba(cfg, 1, h),
    "celeba_desk": lambda cfg, h: _celeba(cfg, 8, h),
    "shapes3d": lambda cfg, h: _shapes(cfg, 1, h, 64),
    "shapes3d_desk": lambda cfg, h: _shapes(cfg, 8, h, 64),
    "factor32": lambda cfg, h: _shapes(cfg, 1, h, 32),
    "factor32_desk": lambda cfg, h: _shapes(cfg, 8, h, 32),
}


def build_pair(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> AutoencoderPair:
    if cfg.architecture not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {cfg.architecture!r}; "
                          f"choose from {sorted(ARCHITECTURES)}")
    heads = cfg.objective.heads
    with seeded(cfg.seed):
        enc, dec, shape = ARCHITECTURES[cfg.architecture](cfg, heads)
        pair = AutoencoderPair(enc, dec, cfg.z_dim, shape, heads, cfg.architecture)
    return pair.to(dtype)


def input_dim(pair: AutoencoderPair) -> int:
    return math.prod(pair.input_shape)
