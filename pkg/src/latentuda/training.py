"""Training schedules and the IoU/DSC evaluation protocol."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from . import __version__
from .checkpoint import save_checkpoint
from .data import DatasetError, DomainDataset
from .inference import LatentSearchConfig, infer_target_mask
from .losses import NonFiniteLossError, SsimConfig, dsc_per_image, iou_per_image, segmentation_loss
from .segnet import SegConfig, UNet, parameter_digest, threshold
from .vae import VAE, VaeConfig, vae_training_step

log = logging.getLogger(__name__)

METHODS = ("baseline-unet", "uda")
PROTOCOLS = ("separated", "mixed")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, components: dict[str, float], checkpoint: Path | None):
        super().__init__(message)
        self.components = components
        self.checkpoint = checkpoint


@dataclass
class RunConfig:
    epochs: int = 100
    batch_size: int = 32
    vae_lr: float = 1e-4
    seg_lr: float = 1e-3
    optimizer: str = "rmsprop"
    # fractions of `epochs` spent on VAE warm-up, segmentation on frozen
    # reconstructions, and joint refinement
    stage_fractions: tuple[float, float, float] = (0.4, 0.3, 0.3)
    # (reconstruction, kl, perceptual)
    loss_weights: tuple[float, float, float] = (1.0, 0.01, 0.1)
    threshold: float = 0.5
    data_seed: int = 0
    init_seed: int = 0
    noise_seed: int = 0
    eval_batch_size: int = 64
    checkpoint_dir: str = "runs/checkpoints"
    report_dir: str = "runs/reports"

    def __post_init__(self) -> None:
        self.stage_fractions = tuple(self.stage_fractions)
        self.loss_weights = tuple(self.loss_weights)
        if self.epochs < 1:
            raise ValueError(f"run.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"run.batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer != "rmsprop":
            raise ValueError(f"run.optimizer must be 'rmsprop', got {self.optimizer!r}")
        if len(self.stage_fractions) != 3 or any(f < 0 for f in self.stage_fractions) or sum(self.stage_fractions) <= 0:
            raise ValueError(f"run.stage_fractions must be three non-negative numbers, got {self.stage_fractions}")
        if len(self.loss_weights) != 3:
            raise ValueError("run.loss_weights needs (reconstruction, kl, perceptual)")

    def stage_epochs(self) -> tuple[int, int, int]:
        total = sum(self.stage_fractions)
        a = round(self.epochs * self.stage_fractions[0] / total)
        b = round(self.epochs * self.stage_fractions[1] / total)
        return a, b, max(0, self.epochs - a - b)

    @property
    def seeds(self) -> dict[str, int]:
        return {"data": self.data_seed, "init": self.init_seed, "noise": self.noise_seed}


def platform_info() -> dict[str, str]:
    return {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "machine": platform.machine(),
        "system": platform.system(),
        "code_version": __version__,
    }


def _tensors(ds: DomainDataset, need_masks: bool = True):
    x = torch.from_numpy(ds.images())
    if not need_masks:
        return x, None
    if not ds.has_masks:
        raise DatasetError(f"dataset {ds.name!r} has items without masks")
    return x, torch.from_numpy(ds.masks()).float()


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def _rmsprop(params, lr: float) -> torch.optim.Optimizer:
    return torch.optim.RMSprop(params, lr=lr)


def _device_of(module: torch.nn.Module) -> torch.device:
    return next(module.parameters()).device


@torch.no_grad()
def predict_probs(seg: UNet, x: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    was = seg.training
    seg.eval()
    dev = _device_of(seg)
    out = torch.cat([seg(x[i : i + batch_size].to(dev)).to(x.device) for i in range(0, x.shape[0], batch_size)])
    seg.train(was)
    return out


@torch.no_grad()
def reconstruct(vae: VAE, x: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    was = vae.training
    vae.eval()
    dev = _device_of(vae)
    out = torch.cat([vae.reconstruct(x[i : i + batch_size].to(dev)).to(x.device) for i in range(0, x.shape[0], batch_size)])
    vae.train(was)
    return out


def mean_dsc(seg: UNet, x: torch.Tensor, y: torch.Tensor, t: float, batch_size: int = 64) -> float:
    return float(dsc_per_image(threshold(predict_probs(seg, x, batch_size), t), y).mean())


def _seg_epoch(seg, opt, x, y, cfg: RunConfig, epoch: int) -> tuple[dict[str, float], int]:
    seg.train()
    totals = {"seg_total": 0.0, "dice": 0.0, "bce": 0.0}
    steps = 0
    for idx in _batches(x.shape[0], cfg.batch_size, cfg.data_seed, epoch):
        total, dice, bce = segmentation_loss(seg(x[idx]), y[idx])
        if not torch.isfinite(total):
            raise NonFiniteLossError("segmentation loss is not finite", {"dice": dice.item(), "bce": bce.item()})
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        for k, v in zip(totals, (total, dice, bce)):
            totals[k] += v.item()
        steps += 1
    return {k: v / steps for k, v in totals.items()}, steps


def _load_resume(path: Path | None, resume: bool) -> dict | None:
    if not resume:
        return None
    if path is None or not path.is_file():
        raise FileNotFoundError(f"no resume state at {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def train_baseline(
    train: DomainDataset,
    validation: DomainDataset,
    cfg: RunConfig,
    seg_cfg: SegConfig,
    checkpoint_dir: str | Path | None = None,
    resume: bool = False,
    device: str | torch.device = "cpu",
) -> tuple[UNet, dict]:
    """U-Net on raw source images; returns the best-validation-DSC model and its history.

    With a checkpoint directory, the full training state is written after
    every epoch; ``resume=True`` continues from it and gives the same result
    as an uninterrupted run.
    """
    dev = torch.device(device)
    x, y = (t.to(dev) for t in _tensors(train))
    xv, yv = _tensors(validation)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    resume_path = ckpt_dir / "baseline_resume.pt" if ckpt_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.init_seed)
    seg = UNet(seg_cfg).to(dev)
    opt = _rmsprop(seg.parameters(), cfg.seg_lr)
    st = {"epoch": 0, "best_dsc": -1.0, "best_state": None, "best_epoch": -1, "epochs": []}
    saved = _load_resume(resume_path, resume)
    if saved is not None:
        seg.load_state_dict(saved["model"])
        opt.load_state_dict(saved["optimizer"])
        st = saved["state"]
        log.info("baseline resumed at epoch %d", st["epoch"])
    for epoch in range(st["epoch"], cfg.epochs):
        try:
            losses, steps = _seg_epoch(seg, opt, x, y, cfg, epoch)
        except NonFiniteLossError as exc:
            raise _diverged(exc, ckpt_dir, "baseline_best.pt") from exc
        val = mean_dsc(seg, xv, yv, cfg.threshold, cfg.eval_batch_size)
        st["epochs"].append({"epoch": epoch, "steps": steps, **losses, "val_dsc": val})
        log.info("baseline epoch %d loss %.4f val_dsc %.4f", epoch, losses["seg_total"], val)
        if val > st["best_dsc"]:
            st.update(best_dsc=val, best_state=copy.deepcopy(seg.state_dict()), best_epoch=epoch)
            if ckpt_dir:
                save_checkpoint(ckpt_dir / "baseline_best.pt", "seg", seg, optimizer=opt, epoch=epoch,
                                seed=cfg.init_seed, extra={"val_dsc": val})
        st["epoch"] = epoch + 1
        if resume_path:
            torch.save({"model": seg.state_dict(), "optimizer": opt.state_dict(), "state": st}, resume_path)
    if ckpt_dir:
        save_checkpoint(ckpt_dir / "baseline_last.pt", "seg", seg, optimizer=opt, epoch=cfg.epochs - 1, seed=cfg.init_seed)
    seg.load_state_dict(st["best_state"])
    seg.eval()
    history = {"epochs": st["epochs"], "best_val_dsc": st["best_dsc"], "best_epoch": st["best_epoch"]}
    return seg, history


def _diverged(exc: NonFiniteLossError, ckpt_dir: Path | None, name: str) -> TrainingDiverged:
    last_good = ckpt_dir / name if ckpt_dir and (ckpt_dir / name).exists() else None
    return TrainingDiverged(f"training diverged: {exc}", exc.components, last_good)


def train_uda(
    train: DomainDataset,
    validation: DomainDataset,
    cfg: RunConfig,
    vae_cfg: VaeConfig,
    seg_cfg: SegConfig,
    checkpoint_dir: str | Path | None = None,
    resume: bool = False,
    device: str | torch.device = "cpu",
) -> tuple[VAE, UNet, dict]:
    """Staged VAE + segmentation training on the source domain.

    Stage A trains the VAE alone without the perceptual term and keeps the
    weights with the lowest validation reconstruction error. Stage B trains
    the U-Net on reconstructions from that frozen VAE. Stage C updates both:
    the VAE with the perceptual term taken from the live U-Net features, the
    U-Net on the VAE's current reconstructions. The returned pair is the one
    with the best validation DSC over stages B and C.
    """
    dev = torch.device(device)
    x, y = (t.to(dev) for t in _tensors(train))
    xv, yv = _tensors(validation)
    ep_a, ep_b, ep_c = cfg.stage_epochs()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    resume_path = ckpt_dir / "uda_resume.pt" if ckpt_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    w_r, w_kl, w_p = cfg.loss_weights

    torch.manual_seed(cfg.init_seed)
    vae = VAE(vae_cfg).to(dev)
    seg = UNet(seg_cfg).to(dev)
    vae_opt = _rmsprop(vae.parameters(), cfg.vae_lr)
    seg_opt = _rmsprop(seg.parameters(), cfg.seg_lr)
    st = {
        "epoch": 0,
        "history": {"stage_epochs": [ep_a, ep_b, ep_c], "epochs": []},
        "best_lr": float("inf"),
        "best_vae": copy.deepcopy(vae.state_dict()),
        "best_dsc": -1.0,
        "best_pair": (copy.deepcopy(vae.state_dict()), copy.deepcopy(seg.state_dict())),
        "frozen_digest": None,
    }
    saved = _load_resume(resume_path, resume)
    if saved is not None:
        vae.load_state_dict(saved["vae"])
        seg.load_state_dict(saved["seg"])
        vae_opt.load_state_dict(saved["vae_optimizer"])
        seg_opt.load_state_dict(saved["seg_optimizer"])
        st = saved["state"]
        log.info("uda resumed at epoch %d", st["epoch"])
    history = st["history"]

    def val_recon_error() -> float:
        return float(((reconstruct(vae, xv, cfg.eval_batch_size) - xv) ** 2).mean())

    def save_pair(tag: str, epoch: int, extra: dict) -> None:
        if ckpt_dir:
            save_checkpoint(ckpt_dir / f"uda_vae_{tag}.pt", "vae", vae, optimizer=vae_opt, epoch=epoch,
                            seed=cfg.init_seed, extra=extra)
            save_checkpoint(ckpt_dir / f"uda_seg_{tag}.pt", "seg", seg, optimizer=seg_opt, epoch=epoch,
                            seed=cfg.init_seed, extra=extra)

    def vae_epoch(epoch: int, weights, feature_fn, update_seg: bool) -> tuple[dict[str, float], int]:
        vae.train()
        seg.train()
        gen = torch.Generator(device=dev).manual_seed(cfg.noise_seed * 100003 + epoch)
        sums: dict[str, float] = {}
        steps = 0
        for idx in _batches(x.shape[0], cfg.batch_size, cfg.data_seed, epoch):
            report = vae_training_step(vae, x[idx], weights, feature_fn, generator=gen)
            vae_opt.zero_grad(set_to_none=True)
            report.total.backward()
            vae_opt.step()
            vals = dict(report.values)
            if update_seg:
                seg_opt.zero_grad(set_to_none=True)
                total, dice, bce = segmentation_loss(seg(report.reconstruction.detach()), y[idx])
                if not torch.isfinite(total):
                    raise NonFiniteLossError("segmentation loss is not finite", {"dice": dice.item(), "bce": bce.item()})
                total.backward()
                seg_opt.step()
                vals.update(seg_total=total.item(), dice=dice.item(), bce=bce.item())
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        return {k: v / steps for k, v in sums.items()}, steps

    def keep_if_best(val: float, epoch: int, stage: str) -> None:
        if val > st["best_dsc"]:
            st["best_dsc"] = val
            st["best_pair"] = (copy.deepcopy(vae.state_dict()), copy.deepcopy(seg.state_dict()))
            save_pair("best", epoch, {"val_dsc": val, "stage": stage})

    cached = None  # frozen-VAE reconstructions for stage B
    try:
        for epoch in range(st["epoch"], ep_a + ep_b + ep_c):
            if epoch < ep_a:
                losses, steps = vae_epoch(epoch, (w_r, w_kl, 0.0), None, update_seg=False)
                v = val_recon_error()
                history["epochs"].append({"stage": "A", "epoch": epoch, "steps": steps, **losses, "val_reconstruction": v})
                log.info("uda A epoch %d recon %.5f val %.5f", epoch, losses["reconstruction"], v)
                if v < st["best_lr"]:
                    st["best_lr"], st["best_vae"] = v, copy.deepcopy(vae.state_dict())
            else:
                if st["frozen_digest"] is None:
                    # leaving stage A: continue from its best weights
                    vae.load_state_dict(st["best_vae"])
                    history["stage_a_val_reconstruction"] = st["best_lr"] if ep_a else None
                    st["frozen_digest"] = parameter_digest(vae)
                if epoch < ep_a + ep_b:
                    vae.eval()
                    if cached is None:
                        cached = (reconstruct(vae, x, cfg.eval_batch_size), reconstruct(vae, xv, cfg.eval_batch_size))
                    losses, steps = _seg_epoch(seg, seg_opt, cached[0], y, cfg, epoch)
                    val = mean_dsc(seg, cached[1], yv, cfg.threshold, cfg.eval_batch_size)
                    history["epochs"].append({"stage": "B", "epoch": epoch, "steps": steps, **losses, "val_dsc": val})
                    log.info("uda B epoch %d seg %.4f val_dsc %.4f", epoch, losses["seg_total"], val)
                    keep_if_best(val, epoch, "B")
                else:
                    if "stage_b_vae_frozen" not in history:
                        history["stage_b_vae_frozen"] = parameter_digest(vae) == st["frozen_digest"]
                    losses, steps = vae_epoch(epoch, (w_r, w_kl, w_p), seg.feature_embedding, update_seg=True)
                    val = mean_dsc(seg, reconstruct(vae, xv, cfg.eval_batch_size), yv, cfg.threshold,
                                   cfg.eval_batch_size)
                    history["epochs"].append({"stage": "C", "epoch": epoch, "steps": steps, **losses, "val_dsc": val})
                    log.info("uda C epoch %d vae %.5f seg %.4f val_dsc %.4f", epoch, losses["vae_total"],
                             losses["seg_total"], val)
                    keep_if_best(val, epoch, "C")
            st["epoch"] = epoch + 1
            if resume_path:
                torch.save({
                    "vae": vae.state_dict(),
                    "seg": seg.state_dict(),
                    "vae_optimizer": vae_opt.state_dict(),
                    "seg_optimizer": seg_opt.state_dict(),
                    "state": st,
                }, resume_path)
    except NonFiniteLossError as exc:
        raise _diverged(exc, ckpt_dir, "uda_vae_best.pt") from exc

    if st["frozen_digest"] is None:
        vae.load_state_dict(st["best_vae"])
        history["stage_a_val_reconstruction"] = st["best_lr"] if ep_a else None
        st["frozen_digest"] = parameter_digest(vae)
    if "stage_b_vae_frozen" not in history:
        history["stage_b_vae_frozen"] = parameter_digest(vae) == st["frozen_digest"]
    save_pair("last", ep_a + ep_b + ep_c - 1, {})
    if st["best_dsc"] >= 0:
        vae.load_state_dict(st["best_pair"][0])
        seg.load_state_dict(st["best_pair"][1])
    vae.eval()
    seg.eval()
    history["best_val_dsc"] = st["best_dsc"]
    return vae, seg, history


# ---------------------------------------------------------------------------
# evaluation


def report_time() -> float:
    """Wall clock, or ``SOURCE_DATE_EPOCH`` when set so repeated runs write identical files."""
    pinned = os.environ.get("SOURCE_DATE_EPOCH")
    return float(pinned) if pinned else time.time()


@dataclass
class EvalCell:
    method: str
    direction: str
    protocol: str
    iou: float
    dsc: float
    n_images: int
    seed: int
    timestamp: float = field(default_factory=report_time)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.method, self.direction, self.protocol)


@dataclass
class EvalReport:
    cells: list[EvalCell] = field(default_factory=list)

    def add(self, cell: EvalCell) -> EvalCell:
        if any(c.key == cell.key for c in self.cells):
            raise ValueError(f"duplicate report cell {cell.key}")
        if not (0 <= cell.iou <= 1 and 0 <= cell.dsc <= 1):
            raise ValueError(f"metric out of range in cell {cell.key}")
        if cell.dsc < cell.iou:
            raise ValueError(f"DSC < IoU in cell {cell.key}")
        self.cells.append(cell)
        return cell

    def get(self, method: str, direction: str, protocol: str) -> EvalCell:
        for c in self.cells:
            if c.key == (method, direction, protocol):
                return c
        raise KeyError((method, direction, protocol))

    def to_dict(self, timestamps: bool = True) -> dict:
        rows = [asdict(c) for c in self.cells]
        if not timestamps:
            for r in rows:
                r.pop("timestamp")
        return {"cells": rows}

    def canonical_json(self) -> str:
        """Report content without timestamps, for reproducibility comparisons."""
        return json.dumps(self.to_dict(timestamps=False), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        rep = cls()
        for row in d["cells"]:
            rep.add(EvalCell(**row))
        return rep

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["method", "direction", "protocol", "iou", "dsc", "n_images", "seed", "timestamp"]
        w = csv.DictWriter(buf, fieldnames=fields)
        w.writeheader()
        for c in self.cells:
            w.writerow(asdict(c))
        return buf.getvalue()

    def render_table(self) -> str:
        """Text table: one row per method, IoU/DSC columns per direction and protocol."""
        directions = list(dict.fromkeys(c.direction for c in self.cells))
        protocols = [p for p in ("mixed", "separated") if any(c.protocol == p for c in self.cells)]
        methods = [m for m in METHODS if any(c.method == m for c in self.cells)]
        cols = [(d, p) for d in directions for p in protocols]
        head1 = f"{'':16}" + "".join(f"{d:^{20 * len(protocols)}}" for d in directions)
        head2 = f"{'':16}" + "".join(f"{p:^20}" for _, p in cols)
        head3 = f"{'Method':16}" + "".join(f"{'IoU':>10}{'DSC':>10}" for _ in cols)
        lines = [head1, head2, head3, "-" * len(head3)]
        for m in methods:
            row = f"{m:16}"
            for d, p in cols:
                try:
                    c = self.get(m, d, p)
                    row += f"{c.iou:>10.3f}{c.dsc:>10.3f}"
                except KeyError:
                    row += f"{'-':>10}{'-':>10}"
            lines.append(row)
        return "\n".join(lines)

    def save(self, out_dir: str | Path, stem: str = "report") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / f"{stem}.json", "csv": out / f"{stem}.csv", "txt": out / f"{stem}.txt"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        paths["csv"].write_text(self.to_csv())
        paths["txt"].write_text(self.render_table() + "\n")
        return paths


@dataclass
class Models:
    baseline: UNet | None = None
    vae: VAE | None = None
    seg: UNet | None = None


@dataclass
class Predictions:
    masks: torch.Tensor
    truth: torch.Tensor
    clones: torch.Tensor | None = None
    trace: object | None = None


def predict(
    method: str,
    models: Models,
    x: torch.Tensor,
    truth: torch.Tensor | None,
    t: float = 0.5,
    search_cfg: LatentSearchConfig | None = None,
    ssim_cfg: SsimConfig | None = None,
    batch_size: int = 64,
) -> Predictions:
    if method == "baseline-unet":
        masks = threshold(predict_probs(models.baseline, x, batch_size), t)
        return Predictions(masks, truth)
    if method == "uda":
        models.vae.eval()
        models.seg.eval()
        masks, trace = infer_target_mask(x, models.vae, models.seg, search_cfg, ssim_cfg, t, chunk_size=batch_size)
        return Predictions(masks, truth, trace.best_reconstruction, trace)
    if method == "oracle":
        return Predictions(truth.to(torch.uint8), truth)
    raise ValueError(f"unknown method {method!r}")


def evaluate(
    method: str,
    direction: str,
    protocol: str,
    models: Models,
    dataset: DomainDataset,
    cfg: RunConfig,
    search_cfg: LatentSearchConfig | None = None,
    ssim_cfg: SsimConfig | None = None,
    report: EvalReport | None = None,
    seed: int = 0,
) -> tuple[EvalCell, Predictions]:
    """Score one (method, direction, protocol) cell; appends it to ``report`` if given.

    ``method="oracle"`` feeds the ground truth through as the prediction and
    exists to check the harness itself.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    x, y = _tensors(dataset)
    preds = predict(method, models, x, y, cfg.threshold, search_cfg, ssim_cfg, cfg.eval_batch_size)
    cell = EvalCell(
        method=method,
        direction=direction,
        protocol=protocol,
        iou=float(iou_per_image(preds.masks, y).mean()),
        dsc=float(dsc_per_image(preds.masks, y).mean()),
        n_images=len(dataset),
        seed=seed,
    )
    if report is not None:
        report.add(cell)
    return cell, preds


def write_manifest(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"platform": platform_info(), **payload}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
