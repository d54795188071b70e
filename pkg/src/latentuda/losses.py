"""Objectives and evaluation metrics.

Every function here is a pure function of its tensor inputs. Image tensors
are laid out as ``(batch, channel, height, width)`` with values in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

__all__ = [
    "SsimConfig",
    "SsimComponents",
    "LossReport",
    "NonFiniteLossError",
    "gaussian_window",
    "ssim",
    "ssim_loss",
    "kl_divergence",
    "reconstruction_loss",
    "perceptual_loss",
    "segmentation_loss",
    "iou",
    "dsc",
    "iou_per_image",
    "dsc_per_image",
    "LUMA_WEIGHTS",
    "to_luma",
]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class NonFiniteLossError(FloatingPointError):
    """Raised when an objective evaluates to NaN or Inf.

    ``components`` carries whatever breakdown was available at the time.
    """

    def __init__(self, message: str, components: dict[str, float] | None = None):
        super().__init__(message)
        self.components = dict(components or {})


@dataclass
class SsimConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    window_size: int = 11
    window_sigma: float = 1.5
    c1: float = 0.01**2
    c2: float = 0.03**2
    # None means c2 / 2
    c3: float | None = None
    channel_policy: str = "per-channel-mean"

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "window_sigma", "c1", "c2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ssim.{name} must be > 0, got {getattr(self, name)}")
        if self.c3 is not None and not self.c3 > 0:
            raise ValueError(f"ssim.c3 must be > 0, got {self.c3}")
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"ssim.window_size must be odd and >= 3, got {self.window_size}")
        if self.channel_policy not in ("per-channel-mean", "luminance-only"):
            raise ValueError(f"unknown ssim.channel_policy {self.channel_policy!r}")

    @property
    def c3_value(self) -> float:
        return self.c2 / 2 if self.c3 is None else self.c3


@dataclass
class SsimComponents:
    """Per-window similarity maps and their pooled score.

    ``luminance``, ``contrast`` and ``structure`` have shape
    ``(batch, channels, H - w + 1, W - w + 1)``. ``per_image`` is the score of
    each batch element and ``ssim`` their mean.
    """

    luminance: torch.Tensor
    contrast: torch.Tensor
    structure: torch.Tensor
    per_image: torch.Tensor
    ssim: torch.Tensor


@dataclass
class LossReport:
    """Named scalar losses plus the weights used to combine them.

    ``total`` keeps the graph so the caller can backpropagate; ``values``
    holds detached floats for logging and manifests.
    """

    values: dict[str, float]
    weights: dict[str, float] = field(default_factory=dict)
    total: torch.Tensor | None = None
    # batch the losses were computed on, when the producer has one
    reconstruction: torch.Tensor | None = None

    def to_dict(self) -> dict[str, dict[str, float]]:
        return {"values": dict(self.values), "weights": dict(self.weights)}

    def check_finite(self) -> None:
        bad = [k for k, v in self.values.items() if not math.isfinite(v)]
        if bad:
            raise NonFiniteLossError(f"non-finite loss components: {bad}", self.values)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def to_luma(x: torch.Tensor) -> torch.Tensor:
    """Collapse an RGB batch to one luma channel; single-channel input passes through."""
    if x.shape[1] == 1:
        return x
    if x.shape[1] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {x.shape[1]}")
    w = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


def gaussian_window(size: int, sigma: float, dtype=torch.float32, device=None) -> torch.Tensor:
    """Normalized 2-D Gaussian kernel of shape ``(size, size)``."""
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype=dtype, device=device)


def _gaussian_filter(t: torch.Tensor, cfg: SsimConfig) -> torch.Tensor:
    """Separable 'valid' Gaussian filtering of every channel of ``t``."""
    n = cfg.window_size
    coords = torch.arange(n, dtype=torch.float64) - (n - 1) / 2
    g = torch.exp(-(coords**2) / (2 * cfg.window_sigma**2))
    g = (g / g.sum()).to(dtype=t.dtype, device=t.device)
    c = t.shape[1]
    t = F.conv2d(t, g.view(1, 1, n, 1).expand(c, 1, n, 1), groups=c)
    return F.conv2d(t, g.view(1, 1, 1, n).expand(c, 1, 1, n), groups=c)


def _signed_pow(t: torch.Tensor, p: float) -> torch.Tensor:
    if p == 1.0:
        return t
    return torch.sign(t) * t.abs().pow(p)


def ssim(x: torch.Tensor, x_hat: torch.Tensor, cfg: SsimConfig | None = None) -> SsimComponents:
    """Gaussian-windowed SSIM over all fully-contained windows.

    The pooled score is the mean of ``l**alpha * c**beta * s**gamma`` over
    windows and channels. Non-integer exponents are applied sign-preserving so
    a negative structure term stays negative.
    """
    cfg = cfg or SsimConfig()
    _check_same_shape(x, x_hat, "ssim")
    if x.dim() != 4:
        raise ValueError(f"ssim expects (B, C, H, W) tensors, got {tuple(x.shape)}")
    if cfg.channel_policy == "luminance-only":
        x, x_hat = to_luma(x), to_luma(x_hat)
    h, w = x.shape[-2:]
    if cfg.window_size > min(h, w):
        raise ValueError(f"ssim window {cfg.window_size} larger than image {h}x{w}")

    # second moments are shift invariant; centring each channel first limits cancellation
    xc = x - x.mean(dim=(2, 3), keepdim=True)
    yc = x_hat - x_hat.mean(dim=(2, 3), keepdim=True)
    stack = torch.cat([x, x_hat, xc, yc, xc * xc, yc * yc, xc * yc], dim=1)
    mu_x, mu_y, mxc, myc, exx, eyy, exy = _gaussian_filter(stack, cfg).chunk(7, dim=1)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = exx - mxc * mxc
    var_y = eyy - myc * myc
    cov = exy - mxc * myc

    c1, c2, c3 = cfg.c1, cfg.c2, cfg.c3_value
    lum = (2 * mu_xy + c1) / (mu_xx + mu_yy + c1)

    # the sqrt has an infinite derivative at zero variance; keep it out of the
    # graph whenever the contrast*structure product reduces to the closed form
    closed_form = cfg.beta == cfg.gamma and c3 == c2 / 2
    with torch.set_grad_enabled(torch.is_grad_enabled() and not closed_form):
        sd_x, sd_y = var_x.clamp_min(0).sqrt(), var_y.clamp_min(0).sqrt()
        con = (2 * sd_x * sd_y + c2) / (sd_x * sd_x + sd_y * sd_y + c2)
        struct = (cov + c3) / (sd_x * sd_y + c3)

    if closed_form:
        cs = (2 * cov + c2) / (var_x + var_y + c2)
        score_map = _signed_pow(lum, cfg.alpha) * _signed_pow(cs, cfg.beta)
    else:
        score_map = (
            _signed_pow(lum, cfg.alpha) * _signed_pow(con, cfg.beta) * _signed_pow(struct, cfg.gamma)
        )
    per_image = score_map.flatten(1).mean(dim=1)
    return SsimComponents(lum, con, struct, per_image, per_image.mean())


def ssim_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    cfg: SsimConfig | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """``1 - SSIM``; ``reduction="none"`` returns one value per image."""
    comps = ssim(x, x_hat, cfg)
    if reduction == "none":
        return 1 - comps.per_image
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return 1 - comps.ssim


def kl_divergence(q) -> torch.Tensor:
    """KL(q || N(0, I)) for a diagonal Gaussian, summed over latent dims, averaged over the batch.

    ``q`` is anything exposing ``mu`` and ``log_var`` tensors of shape
    ``(batch, latent_dim)``.
    """
    mu, log_var = q.mu, q.log_var
    _check_same_shape(mu, log_var, "kl_divergence")
    if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
        raise NonFiniteLossError("kl_divergence: posterior parameters are not finite")
    # expm1(v) - v is exactly >= 0 under round-to-nearest, unlike exp(v) - 1 - v
    per_item = 0.5 * (mu.pow(2) + torch.expm1(log_var) - log_var).sum(dim=-1)
    return per_item.mean()


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x, x_hat, "reconstruction_loss")
    return F.mse_loss(x_hat, x)


def perceptual_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    feature_fn: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Mean squared distance between ``feature_fn`` embeddings of the two batches."""
    _check_same_shape(x, x_hat, "perceptual_loss")
    fx, fy = feature_fn(x), feature_fn(x_hat)
    if fx.shape != fy.shape:
        raise ValueError(
            f"perceptual_loss: feature shapes differ {tuple(fx.shape)} vs {tuple(fy.shape)}"
        )
    return F.mse_loss(fy, fx)


def segmentation_loss(
    pred: torch.Tensor,
    truth: torch.Tensor,
    smooth: float = 1.0,
    eps: float = 1e-7,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Dice + binary cross-entropy on probability maps.

    Returns ``(total, dice_part, bce_part)``. The dice term pools over the
    whole batch.
    """
    _check_same_shape(pred, truth, "segmentation_loss")
    truth = truth.to(pred.dtype)
    if not ((truth == 0) | (truth == 1)).all():
        raise ValueError("segmentation_loss: truth mask must be binary {0, 1}")
    inter = (pred * truth).sum()
    dice = 1 - (2 * inter + smooth) / (pred.sum() + truth.sum() + smooth)
    p = pred.clamp(eps, 1 - eps)
    bce = -(truth * p.log() + (1 - truth) * (1 - p).log()).mean()
    return dice + bce, dice, bce


def _mask_counts(pred: torch.Tensor, truth: torch.Tensor, what: str):
    _check_same_shape(pred, truth, what)
    a = (pred != 0).flatten(1)
    b = (truth != 0).flatten(1)
    inter = (a & b).sum(dim=1, dtype=torch.int64)
    size_a = a.sum(dim=1, dtype=torch.int64)
    size_b = b.sum(dim=1, dtype=torch.int64)
    return inter, size_a, size_b


def iou_per_image(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    inter, size_a, size_b = _mask_counts(pred, truth, "iou")
    union = size_a + size_b - inter
    out = inter.double() / union.clamp_min(1).double()
    return torch.where(union == 0, torch.ones_like(out), out)


def dsc_per_image(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    inter, size_a, size_b = _mask_counts(pred, truth, "dsc")
    denom = size_a + size_b
    out = (2 * inter).double() / denom.clamp_min(1).double()
    return torch.where(denom == 0, torch.ones_like(out), out)


def iou(pred: torch.Tensor, truth: torch.Tensor) -> float:
    """Mean intersection-over-union of binary masks; empty-vs-empty scores 1."""
    return float(iou_per_image(pred, truth).mean())


def dsc(pred: torch.Tensor, truth: torch.Tensor) -> float:
    """Mean Dice coefficient of binary masks; empty-vs-empty scores 1."""
    return float(dsc_per_image(pred, truth).mean())
