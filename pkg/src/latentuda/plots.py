"""Static figures: loss curves, latent-search convergence and mask overlays."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

PANEL_TITLES = ("input", "ground truth", "baseline", "uda", "vae clone")


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(history: dict, path: str | Path, title: str = "") -> Path:
    """One line per numeric per-epoch quantity; stage boundaries marked when present."""
    epochs = history["epochs"]
    keys = sorted({k for e in epochs for k, v in e.items() if isinstance(v, float) and k != "epoch"})
    fig, ax = plt.subplots(figsize=(7, 4))
    for k in keys:
        pts = [(e["epoch"], e[k]) for e in epochs if k in e]
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker=".", label=k)
    stages = [e.get("stage") for e in epochs]
    for i in range(1, len(stages)):
        if stages[i] != stages[i - 1]:
            ax.axvline(epochs[i]["epoch"] - 0.5, color="grey", linestyle=":")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_xlabel("epoch")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_convergence(losses: list[list[list[float]]], path: str | Path, max_lines: int = 50) -> Path:
    """Running minimum of 1 - SSIM per image and run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = 0
    for r, run in enumerate(losses):
        for seq in run:
            if not seq or drawn >= max_lines:
                continue
            ax.plot(np.minimum.accumulate(seq), color=f"C{r % 10}", alpha=0.5, linewidth=1)
            drawn += 1
    ax.set_xlabel("iteration")
    ax.set_ylabel("best 1 - SSIM so far")
    fig.tight_layout()
    return _save(fig, path)


def _to_rgb(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim == 3 and a.shape[0] in (1, 3):
        a = a.transpose(1, 2, 0)
    if a.ndim == 2:
        a = a[..., None]
    if a.shape[-1] == 1:
        a = np.repeat(a, 3, axis=-1)
    return (np.clip(a, 0, 1) * 255).round().astype(np.uint8)


def overlay_panels(image, truth, baseline_mask, uda_mask, clone, path: str | Path, scale: int = 2) -> Path:
    """Five side-by-side panels: input, ground truth, baseline mask, UDA mask, VAE clone."""
    panels = [_to_rgb(image), _to_rgb(truth), _to_rgb(baseline_mask), _to_rgb(uda_mask), _to_rgb(clone)]
    h, w = panels[0].shape[:2]
    pad, top = 4, 12
    canvas = Image.new("RGB", (5 * w * scale + 6 * pad, h * scale + top + pad), "white")
    draw = ImageDraw.Draw(canvas)
    for i, (p, name) in enumerate(zip(panels, PANEL_TITLES)):
        x0 = pad + i * (w * scale + pad)
        canvas.paste(Image.fromarray(p).resize((w * scale, h * scale), Image.NEAREST), (x0, top))
        draw.text((x0, 0), name, fill="black")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)
    return path


def save_mask_png(mask, path: str | Path) -> Path:
    m = np.asarray(mask).squeeze()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((m > 0).astype(np.uint8) * 255).save(path)
    return path
