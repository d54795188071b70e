"""Desk-scale synthetic-shift benchmark and the toy latent-search check.

Both write a manifest holding everything needed to repeat them; rerunning
from the manifest must reproduce the canonical result byte for byte on the
same platform.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ExperimentConfig, from_dict, to_dict
from .data import DomainDataset, build_mixed_test, generate_synthetic_shift, split_dataset
from .inference import LatentSearchConfig, infer_target_mask, latent_search
from .losses import SsimConfig, dsc_per_image, iou_per_image
from .segnet import threshold
from .training import EvalCell, EvalReport, _tensors, predict_probs, train_baseline, train_uda, write_manifest

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# toy latent search


class ToyDecoder(nn.Module):
    """Decodes a 1-d code to a flat image whose every pixel equals the code."""

    def __init__(self, image_size: tuple[int, int] = (16, 16), channels: int = 3):
        super().__init__()
        self.image_size = tuple(image_size)
        self.channels = channels
        self.cfg = type("ToyCfg", (), {"latent_dim": 1})()

    def decode(self, z: torch.Tensor, edges: torch.Tensor | None = None) -> torch.Tensor:
        h, w = self.image_size
        return z[:, :1, None, None].expand(z.shape[0], self.channels, h, w)


@dataclass
class ToyCheck:
    search: LatentSearchConfig = field(default_factory=lambda: LatentSearchConfig(max_iterations=200, init_policy="zero"))
    target_values: tuple[float, ...] = (0.6,)
    image_size: tuple[int, int] = (16, 16)


def _monotone(trace) -> bool:
    return all(
        bool(np.all(np.diff(trace.running_minimum(r, i)) <= 0))
        for r in range(len(trace.losses))
        for i in range(len(trace.losses[r]))
    )


def run_toy_check(check: ToyCheck, ssim_cfg: SsimConfig | None = None) -> dict:
    """Search for constant targets with :class:`ToyDecoder`; returns the trace plus summary."""
    h, w = check.image_size
    x = torch.tensor(check.target_values, dtype=torch.float32)[:, None, None, None].expand(-1, 3, h, w).contiguous()
    trace = latent_search(x, ToyDecoder(check.image_size), check.search, ssim_cfg)
    monotone = _monotone(trace)
    return {
        "trace": trace.to_dict(),
        "best_loss": trace.best_loss.tolist(),
        "best_z": trace.best_z[:, 0].tolist(),
        "max_iterations_used": max(max(r) for r in trace.iterations_used),
        "running_min_monotone": monotone,
    }


def toy_manifest(check: ToyCheck, ssim_cfg: SsimConfig, result: dict, path: str | Path) -> Path:
    return write_manifest(path, {
        "kind": "toy-latent-search",
        "check": _plain(check),
        "ssim": asdict(ssim_cfg),
        "seeds": {"search": check.search.seed},
        "result": result,
    })


def rerun_toy(manifest_path: str | Path) -> dict:
    m = json.loads(Path(manifest_path).read_text())
    return run_toy_check(from_dict(ToyCheck, m["check"]), from_dict(SsimConfig, m["ssim"]))


# ---------------------------------------------------------------------------
# synthetic-shift benchmark


@dataclass
class BenchmarkData:
    train: DomainDataset
    validation: DomainDataset
    source: DomainDataset
    target: DomainDataset
    mixed: DomainDataset


def benchmark_data(cfg: ExperimentConfig) -> BenchmarkData:
    source, target = generate_synthetic_shift(cfg.synth)
    train, val = split_dataset(source, cfg.data.split)
    mixed = build_mixed_test(target, source, cfg.data.split)
    return BenchmarkData(train, val, source, target, mixed)


@dataclass
class BenchmarkResult:
    config: dict
    report: EvalReport
    source_validation: dict[str, dict[str, float]]
    histories: dict[str, dict]
    timings: dict[str, float]

    def canonical(self) -> dict:
        """Everything that must reproduce exactly; wall-clock values excluded."""
        return {
            "config": self.config,
            "report": self.report.to_dict(timestamps=False),
            "source_validation": self.source_validation,
            "histories": self.histories,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.canonical(), sort_keys=True)

    def improvement(self, protocol: str = "separated") -> float:
        d = direction_name(self.config)
        return self.report.get("uda", d, protocol).iou - self.report.get("baseline-unet", d, protocol).iou


def direction_name(config: dict | ExperimentConfig) -> str:
    c = to_dict(config) if isinstance(config, ExperimentConfig) else config
    return f"{c['synth']['source_name']}->{c['synth']['target_name']}"


def _cell(method, direction, protocol, masks, truth, seed) -> EvalCell:
    return EvalCell(
        method=method,
        direction=direction,
        protocol=protocol,
        iou=float(iou_per_image(masks, truth).mean()),
        dsc=float(dsc_per_image(masks, truth).mean()),
        n_images=int(truth.shape[0]),
        seed=seed,
    )


def run_benchmark(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> BenchmarkResult:
    """Train baseline and UDA models on the synthetic source, score both on the target.

    UDA predictions come from one latent search over the union of target,
    merged-source and source-validation images. Each image's search is
    independent; sharing the batch only affects floating-point reduction order.
    """
    torch.use_deterministic_algorithms(True)
    run = cfg.run
    seed = run.init_seed
    timings: dict[str, float] = {}
    out = Path(out_dir) if out_dir else None

    t0 = time.perf_counter()
    data = benchmark_data(cfg)
    timings["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    baseline, base_hist = train_baseline(data.train, data.validation, run, cfg.seg,
                                         out / "checkpoints" if out else None)
    timings["train_baseline"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    vae, seg, uda_hist = train_uda(data.train, data.validation, run, cfg.vae, cfg.seg,
                                   out / "checkpoints" if out else None)
    timings["train_uda"] = time.perf_counter() - t0

    # the mixed set is the target followed by merged source images
    xt, yt = _tensors(data.target)
    xm, ym = _tensors(data.mixed)
    n_t = xt.shape[0]
    if not torch.equal(xm[:n_t], xt):
        raise RuntimeError("mixed test set does not start with the target set")
    xv, yv = _tensors(data.validation)
    x_all = torch.cat([xm, xv])

    t0 = time.perf_counter()
    base_masks = threshold(predict_probs(baseline, x_all, run.eval_batch_size), run.threshold)
    timings["predict_baseline"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    uda_masks, trace = infer_target_mask(x_all, vae, seg, cfg.search, cfg.ssim, run.threshold,
                                         chunk_size=run.eval_batch_size)
    timings["predict_uda"] = time.perf_counter() - t0

    direction = direction_name(cfg)
    n_m = xm.shape[0]
    report = EvalReport()
    for method, masks in (("baseline-unet", base_masks), ("uda", uda_masks)):
        report.add(_cell(method, direction, "separated", masks[:n_t], yt, seed))
        report.add(_cell(method, direction, "mixed", masks[:n_m], ym, seed))
    source_val = {}
    for method, masks in (("baseline-unet", base_masks), ("uda", uda_masks)):
        c = _cell(method, "source-validation", "separated", masks[n_m:], yv, seed)
        source_val[method] = {"iou": c.iou, "dsc": c.dsc, "n_images": c.n_images}

    result = BenchmarkResult(
        config=to_dict(cfg),
        report=report,
        source_validation=source_val,
        histories={
            "baseline": base_hist,
            "uda": uda_hist,
            "search": {
                "best_loss": trace.best_loss.tolist(),
                "iterations_used": trace.iterations_used,
                "running_min_monotone": _monotone(trace),
            },
        },
        timings=timings,
    )
    if out:
        report.save(out, "report")
        benchmark_manifest(result, out / "manifest.json")
    log.info("benchmark seed %d: %s", seed, json.dumps({c.method + "/" + c.protocol: round(c.iou, 4) for c in report.cells}))
    return result


def benchmark_manifest(result: BenchmarkResult, path: str | Path) -> Path:
    return write_manifest(path, {
        "kind": "synthetic-benchmark",
        **result.canonical(),
        "seeds": {k: v for k, v in result.config["run"].items() if k.endswith("_seed")},
        "timings": result.timings,
    })


def rerun_benchmark(manifest_path: str | Path, out_dir: str | Path | None = None) -> BenchmarkResult:
    m = json.loads(Path(manifest_path).read_text())
    return run_benchmark(from_dict(ExperimentConfig, m["config"]), out_dir)


def _plain(obj) -> dict:
    return json.loads(json.dumps(asdict(obj)))
