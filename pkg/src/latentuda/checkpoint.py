"""Versioned checkpoint archives for the VAE and the segmentation network."""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Any

import torch

from .segnet import SegConfig, UNet
from .vae import VAE, VaeConfig

FORMAT_TAG = "latentuda-checkpoint"
FORMAT_VERSION = 1
COMPONENTS = {"vae": (VAE, VaeConfig), "seg": (UNet, SegConfig)}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(
    path: str | Path,
    component: str,
    model: torch.nn.Module,
    *,
    optimizer: torch.optim.Optimizer | None = None,
    epoch: int = 0,
    seed: int | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    if component not in COMPONENTS:
        raise CheckpointError(f"unknown component {component!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": FORMAT_TAG,
            "version": FORMAT_VERSION,
            "component": component,
            "config": asdict(model.cfg),
            "state_dict": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "epoch": epoch,
            "seed": seed,
            "extra": extra or {},
        },
        path,
    )
    return path


def read_checkpoint(path: str | Path, component: str | None = None) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises several unrelated types for bad archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path} is not a {FORMAT_TAG} archive")
    if blob.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}, expected {FORMAT_VERSION}")
    if component is not None and blob["component"] != component:
        raise CheckpointError(f"{path} holds a {blob['component']!r} model, expected {component!r}")
    return blob


def load_model(path: str | Path, component: str) -> tuple[torch.nn.Module, dict[str, Any]]:
    """Rebuild a model from its archive; returned in evaluation mode."""
    blob = read_checkpoint(path, component)
    model_cls, cfg_cls = COMPONENTS[component]
    model = model_cls(cfg_cls(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
