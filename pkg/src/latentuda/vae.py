"""Convolutional VAE whose decoder is conditioned on the input's edge map."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import (
    LossReport,
    NonFiniteLossError,
    kl_divergence,
    perceptual_loss,
    reconstruction_loss,
    to_luma,
)

# sqrt(20): largest Sobel gradient magnitude reachable on a [0, 1] image
SOBEL_MAX_MAGNITUDE = math.sqrt(20.0)

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


class GaussianPosterior(NamedTuple):
    mu: torch.Tensor
    log_var: torch.Tensor


@dataclass
class VaeConfig:
    latent_dim: int = 64
    encoder_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    decoder_channels: list[int] = field(default_factory=lambda: [256, 128, 64, 32])
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    # decoder stage whose output receives the edge map; -1 is the last (full resolution)
    edge_injection_stage: int = -1

    def __post_init__(self) -> None:
        self.input_size = tuple(self.input_size)
        self.encoder_channels = list(self.encoder_channels)
        self.decoder_channels = list(self.decoder_channels)
        if self.latent_dim < 2:
            raise ValueError(f"vae.latent_dim must be >= 2, got {self.latent_dim}")
        if not self.encoder_channels or len(self.encoder_channels) != len(self.decoder_channels):
            raise ValueError("vae.encoder_channels and vae.decoder_channels need equal, non-zero length")
        factor = 2 ** len(self.encoder_channels)
        if any(s % factor for s in self.input_size):
            raise ValueError(f"vae.input_size {self.input_size} not divisible by {factor}")
        n = len(self.decoder_channels)
        if not -n <= self.edge_injection_stage < n:
            raise ValueError(f"vae.edge_injection_stage {self.edge_injection_stage} out of range for {n} stages")

    @property
    def n_stages(self) -> int:
        return len(self.encoder_channels)

    @property
    def injection_index(self) -> int:
        return self.edge_injection_stage % self.n_stages


def extract_edges(x: torch.Tensor) -> torch.Tensor:
    """Sobel gradient magnitude of the luma channel, scaled into ``[0, 1]``.

    Borders are replicate-padded so flat regions touching the frame give no
    response. The result carries no gradient.
    """
    if x.dim() != 4:
        raise ValueError(f"extract_edges expects (B, C, H, W), got {tuple(x.shape)}")
    with torch.no_grad():
        gray = to_luma(x)
        kx = _SOBEL_X.to(dtype=x.dtype, device=x.device)
        kernels = torch.stack([kx, kx.t()]).unsqueeze(1)
        g = F.conv2d(F.pad(gray, (1, 1, 1, 1), mode="replicate"), kernels)
        mag = g.pow(2).sum(dim=1, keepdim=True).sqrt()
        return (mag / SOBEL_MAX_MAGNITUDE).clamp(0, 1)


def reparameterize(
    q: GaussianPosterior,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """``z = mu + exp(log_var / 2) * noise`` with ``noise ~ N(0, I)`` unless supplied."""
    if noise is None:
        noise = torch.randn(q.mu.shape, generator=generator, dtype=q.mu.dtype, device=q.mu.device)
    elif noise.shape != q.mu.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} does not match mu {tuple(q.mu.shape)}")
    return q.mu + torch.exp(0.5 * q.log_var) * noise


def _down(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 4, stride=2, padding=1),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.2),
    )


def _up(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.2),
    )


class VAE(nn.Module):
    def __init__(self, cfg: VaeConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or VaeConfig()
        enc, cin = [], cfg.in_channels
        for c in cfg.encoder_channels:
            enc.append(_down(cin, c))
            cin = c
        self.encoder = nn.Sequential(*enc)
        h, w = cfg.input_size
        self._bottom = (h >> cfg.n_stages, w >> cfg.n_stages)
        flat = cin * self._bottom[0] * self._bottom[1]
        self.fc_mu = nn.Linear(flat, cfg.latent_dim)
        self.fc_log_var = nn.Linear(flat, cfg.latent_dim)

        dec0 = cfg.decoder_channels[0]
        self.fc_dec = nn.Linear(cfg.latent_dim, dec0 * self._bottom[0] * self._bottom[1])
        ups = []
        chans = cfg.decoder_channels + [cfg.decoder_channels[-1]]
        for i in range(cfg.n_stages):
            extra = 1 if i - 1 == cfg.injection_index else 0
            ups.append(_up(chans[i] + extra, chans[i + 1]))
        self.decoder = nn.ModuleList(ups)
        last = chans[-1] + (1 if cfg.injection_index == cfg.n_stages - 1 else 0)
        self.head = nn.Sequential(
            nn.Conv2d(last, chans[-1], 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(chans[-1], cfg.in_channels, 3, padding=1),
        )

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[-2:]) != self.cfg.input_size or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"VAE expects (B, {self.cfg.in_channels}, {self.cfg.input_size[0]}, "
                f"{self.cfg.input_size[1]}), got {tuple(x.shape)}"
            )

    def encode(self, x: torch.Tensor) -> GaussianPosterior:
        self._check_input(x)
        h = self.encoder(x).flatten(1)
        return GaussianPosterior(self.fc_mu(h), self.fc_log_var(h))

    def decode(self, z: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ValueError(f"latent must be (B, {self.cfg.latent_dim}), got {tuple(z.shape)}")
        if tuple(edges.shape[-2:]) != self.cfg.input_size or edges.shape[1] != 1:
            raise ValueError(f"edge map must be (B, 1, *{self.cfg.input_size}), got {tuple(edges.shape)}")
        if edges.shape[0] != z.shape[0]:
            raise ValueError("edge map and latent batch sizes differ")
        h = self.fc_dec(z).view(z.shape[0], -1, *self._bottom)
        for i, up in enumerate(self.decoder):
            h = up(h)
            if i == self.cfg.injection_index:
                h = torch.cat([h, self._edges_at(edges, h.shape[-2:])], dim=1)
        return torch.sigmoid(self.head(h))

    @staticmethod
    def _edges_at(edges: torch.Tensor, size) -> torch.Tensor:
        if tuple(edges.shape[-2:]) == tuple(size):
            return edges
        return F.adaptive_avg_pool2d(edges, size)

    def forward(self, x: torch.Tensor, noise: torch.Tensor | None = None, generator: torch.Generator | None = None):
        """Returns ``(x_hat, posterior, z)`` for a sampled latent."""
        q = self.encode(x)
        z = reparameterize(q, noise=noise, generator=generator)
        return self.decode(z, extract_edges(x)), q, z

    @torch.no_grad()
    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic reconstruction through the posterior mean."""
        q = self.encode(x)
        return self.decode(q.mu, extract_edges(x))


def vae_training_step(
    vae: VAE,
    x: torch.Tensor,
    weights: tuple[float, float, float] = (1.0, 0.01, 0.1),
    feature_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> LossReport:
    """Forward pass and weighted objective; the caller runs backward and the optimizer.

    ``weights`` are ``(reconstruction, kl, perceptual)``. The perceptual term is
    skipped (reported as 0) when its weight is 0 or no ``feature_fn`` is given.
    """
    w_r, w_kl, w_p = weights
    x_hat, q, _ = vae(x, noise=noise, generator=generator)
    l_r = reconstruction_loss(x, x_hat)
    d_kl = kl_divergence(q)
    if w_p and feature_fn is not None:
        l_p = perceptual_loss(x, x_hat, feature_fn)
    else:
        l_p = torch.zeros((), dtype=x.dtype, device=x.device)
    total = w_r * l_r + w_kl * d_kl + w_p * l_p
    report = LossReport(
        values={
            "reconstruction": l_r.item(),
            "kl": d_kl.item(),
            "perceptual": l_p.item(),
            "vae_total": total.item(),
        },
        weights={"reconstruction": w_r, "kl": w_kl, "perceptual": w_p},
        total=total,
        reconstruction=x_hat,
    )
    if not math.isfinite(report.values["vae_total"]):
        raise NonFiniteLossError("VAE objective is not finite", report.values)
    return report
