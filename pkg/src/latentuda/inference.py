"""Latent search: fit a frozen decoder's latent code to a target image under 1 - SSIM.

Each image in a batch is an independent problem. They are optimized together
for speed; the optimizer keeps per-coordinate state, and an image that has
converged or failed has its gradient zeroed, so batching does not couple them.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import SsimConfig, ssim_loss
from .segnet import threshold
from .vae import extract_edges

INIT_POLICIES = ("encoder", "zero", "random")


class LatentSearchError(RuntimeError):
    pass


@dataclass
class LatentSearchConfig:
    max_iterations: int = 500
    learning_rate: float = 0.05
    init_policy: str = "encoder"
    # extra runs after the first; later runs perturb the initial code with N(0, I)
    restarts: int = 0
    convergence_tol: float = 1e-4
    convergence_window: int = 10
    # weight of an optional 0.5 * |z|^2 penalty
    prior_weight: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.restarts < 0:
            raise ValueError(f"restarts must be >= 0, got {self.restarts}")
        if self.init_policy not in INIT_POLICIES:
            raise ValueError(f"init_policy must be one of {INIT_POLICIES}, got {self.init_policy!r}")
        if not self.convergence_tol > 0:
            raise ValueError(f"convergence_tol must be > 0, got {self.convergence_tol}")


@dataclass
class LatentSearchTrace:
    """Audit record of one batched search.

    ``losses[r][i]`` is the loss sequence of image ``i`` during run ``r``;
    each value is the loss of the code *before* that iteration's update.
    """

    losses: list[list[list[float]]]
    best_loss: torch.Tensor
    best_z: torch.Tensor
    best_reconstruction: torch.Tensor
    iterations_used: list[list[int]]
    restart_index_of_best: list[int]
    failed: list[list[bool]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def running_minimum(self, run: int, image: int) -> np.ndarray:
        return np.minimum.accumulate(np.asarray(self.losses[run][image]))

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "losses": self.losses,
            "best_loss": self.best_loss.tolist(),
            "iterations_used": self.iterations_used,
            "restart_index_of_best": self.restart_index_of_best,
            "failed": self.failed,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def _initial_code(vae, x_t: torch.Tensor, cfg: LatentSearchConfig, run: int, gen: torch.Generator) -> torch.Tensor:
    b = x_t.shape[0]
    d = vae.cfg.latent_dim
    if cfg.init_policy == "encoder":
        with torch.no_grad():
            z0 = vae.encode(x_t).mu.detach().clone()
    elif cfg.init_policy == "zero":
        z0 = torch.zeros(b, d, dtype=x_t.dtype, device=x_t.device)
    else:
        z0 = torch.randn(b, d, generator=gen, dtype=x_t.dtype).to(x_t.device)
        return z0
    if run > 0:
        z0 = z0 + torch.randn(b, d, generator=gen, dtype=x_t.dtype).to(x_t.device)
    return z0


def latent_search(
    x_t: torch.Tensor,
    vae,
    cfg: LatentSearchConfig | None = None,
    ssim_cfg: SsimConfig | None = None,
) -> LatentSearchTrace:
    """Minimize ``1 - SSIM(x_t, vae.decode(z, edges(x_t)))`` over ``z`` per image.

    ``vae`` only needs ``cfg.latent_dim``, ``decode(z, edges)`` and, for the
    encoder init, ``encode(x)``. It is never modified: gradients are taken
    with respect to ``z`` alone.
    """
    cfg = cfg or LatentSearchConfig()
    ssim_cfg = ssim_cfg or SsimConfig()
    gen = torch.Generator().manual_seed(cfg.seed)
    b = x_t.shape[0]
    dev = x_t.device
    edges = extract_edges(x_t)
    x_t = x_t.detach()

    best_loss = torch.full((b,), float("inf"), dtype=x_t.dtype, device=dev)
    best_z = None
    best_rec = None
    best_run = [-1] * b
    all_losses, all_iters, all_failed = [], [], []

    for run in range(cfg.restarts + 1):
        z = _initial_code(vae, x_t, cfg, run, gen).requires_grad_(True)
        opt = torch.optim.RMSprop([z], lr=cfg.learning_rate, momentum=0.0)
        active = torch.ones(b, dtype=torch.bool, device=dev)
        failed = torch.zeros(b, dtype=torch.bool, device=dev)
        run_losses: list[list[float]] = [[] for _ in range(b)]
        run_mins: list[list[float]] = [[] for _ in range(b)]
        run_best = torch.full((b,), float("inf"), dtype=torch.float64, device=dev)

        for it in range(cfg.max_iterations):
            x_s = vae.decode(z, edges)
            per_image = ssim_loss(x_t, x_s, ssim_cfg, reduction="none")
            objective = per_image
            if cfg.prior_weight:
                objective = per_image + cfg.prior_weight * 0.5 * z.pow(2).sum(dim=1)
            loss_now = per_image.detach()
            finite = torch.isfinite(loss_now)
            newly_failed = active & ~finite
            failed |= newly_failed
            active &= finite
            if not active.any():
                break

            for i in torch.nonzero(active).flatten().tolist():
                run_losses[i].append(float(loss_now[i]))
            improved = active & (loss_now.double() < run_best)
            run_best = torch.where(improved, loss_now.double(), run_best)

            better = improved & (loss_now < best_loss)
            if better.any():
                best_loss = torch.where(better, loss_now, best_loss)
                if best_z is None:
                    best_z = z.detach().clone()
                    best_rec = x_s.detach().clone()
                else:
                    best_z[better] = z.detach()[better]
                    best_rec[better] = x_s.detach()[better]
                for i in torch.nonzero(better).flatten().tolist():
                    best_run[i] = run

            # stop an image once its best-so-far barely moved over the window
            w = cfg.convergence_window
            for i in torch.nonzero(active).flatten().tolist():
                mins = run_mins[i]
                mins.append(min(mins[-1], run_losses[i][-1]) if mins else run_losses[i][-1])
                if len(mins) > w and mins[-1 - w] - mins[-1] < cfg.convergence_tol:
                    active[i] = False
            if not active.any() or it == cfg.max_iterations - 1:
                break

            grad, = torch.autograd.grad(objective.sum(), z)
            grad = torch.where(active[:, None], grad, torch.zeros_like(grad))
            z.grad = grad
            opt.step()
            opt.zero_grad(set_to_none=True)

        all_losses.append(run_losses)
        all_iters.append([len(s) for s in run_losses])
        all_failed.append(failed.tolist())

    dead = [i for i in range(b) if best_run[i] < 0]
    if dead:
        raise LatentSearchError(f"every search run diverged for batch images {dead}")
    return LatentSearchTrace(
        losses=all_losses,
        best_loss=best_loss,
        best_z=best_z,
        best_reconstruction=best_rec,
        iterations_used=all_iters,
        restart_index_of_best=best_run,
        failed=all_failed,
        config=asdict(cfg),
    )


def infer_target_mask(
    x_t: torch.Tensor,
    vae,
    seg,
    cfg: LatentSearchConfig | None = None,
    ssim_cfg: SsimConfig | None = None,
    t: float = 0.5,
    chunk_size: int = 64,
) -> tuple[torch.Tensor, LatentSearchTrace]:
    """Latent search followed by segmentation of the recovered clone.

    Large batches are searched in chunks of ``chunk_size`` images. Images never
    interact, so chunking only changes floating-point reduction order and, for
    ``init_policy="random"``, which draws each image receives.
    """
    dev = next(seg.parameters()).device
    traces = [latent_search(x_t[i : i + chunk_size].to(dev), vae, cfg, ssim_cfg) for i in range(0, x_t.shape[0], chunk_size)]
    trace = traces[0] if len(traces) == 1 else merge_traces(traces)
    with torch.no_grad():
        probs = seg(trace.best_reconstruction)
    return threshold(probs, t).to(x_t.device), trace


def merge_traces(traces: list[LatentSearchTrace]) -> LatentSearchTrace:
    runs = len(traces[0].losses)
    return LatentSearchTrace(
        losses=[sum((tr.losses[r] for tr in traces), []) for r in range(runs)],
        best_loss=torch.cat([tr.best_loss for tr in traces]),
        best_z=torch.cat([tr.best_z for tr in traces]),
        best_reconstruction=torch.cat([tr.best_reconstruction for tr in traces]),
        iterations_used=[sum((tr.iterations_used[r] for tr in traces), []) for r in range(runs)],
        restart_index_of_best=sum((tr.restart_index_of_best for tr in traces), []),
        failed=[sum((tr.failed[r] for tr in traces), []) for r in range(runs)],
        config=traces[0].config,
    )
