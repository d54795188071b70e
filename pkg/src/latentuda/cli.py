"""``latentuda`` command line: synth, train, eval, infer.

Everything a run does comes from the YAML config plus a few overrides
(``--seed``, ``--out``, ``--mode``, ``--protocol``). Each output directory is
guarded by a lock file so concurrent invocations cannot share one.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import ExitStack
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout
from PIL import Image

from .checkpoint import CheckpointError, load_model
from .config import ConfigError, ExperimentConfig, load_config, to_dict
from .data import DatasetError, build_mixed_test, load_dataset, split_dataset, write_synthetic
from .inference import LatentSearchConfig, LatentSearchError, infer_target_mask
from .plots import overlay_panels, plot_convergence, plot_loss_curves, save_mask_png
from .segnet import parameter_digest
from .training import (
    EvalReport,
    Models,
    TrainingDiverged,
    evaluate,
    train_baseline,
    train_uda,
    write_manifest,
)

log = logging.getLogger("latentuda")

DEVICE_ENV = "LATENTUDA_DEVICE"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
REQUIRED_CHECKPOINTS = {
    "baseline-unet": ["baseline_best.pt"],
    "uda": ["uda_vae_best.pt", "uda_seg_best.pt"],
}


class CliError(RuntimeError):
    pass


def resolve_device() -> torch.device:
    name = os.environ.get(DEVICE_ENV, "").strip() or "cpu"
    try:
        dev = torch.device(name)
        torch.zeros(1, device=dev)
    except (RuntimeError, AssertionError) as exc:
        raise CliError(f"{DEVICE_ENV}={name!r} is not a usable device: {exc}") from exc
    return dev


def _apply_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None:
        return cfg
    cfg.run.data_seed = cfg.run.init_seed = cfg.run.noise_seed = seed
    cfg.synth.seed = cfg.search.seed = cfg.data.split.seed = seed
    return cfg


def _dirs(cfg: ExperimentConfig, out: str | None) -> tuple[Path, Path]:
    if out:
        base = Path(out)
        return base / "checkpoints", base / "reports"
    return Path(cfg.run.checkpoint_dir), Path(cfg.run.report_dir)


def _lock(stack: ExitStack, directory: Path) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {directory}: {exc.strerror or exc}") from exc
    if not os.access(directory, os.W_OK):
        raise CliError(f"output directory {directory} is not writable")
    lock = FileLock(str(directory / ".latentuda.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise CliError(f"{directory} is in use by another latentuda process") from exc
    stack.callback(lock.release)


def _manifest_payload(cfg: ExperimentConfig, kind: str, **extra) -> dict:
    return {
        "kind": kind,
        "config": to_dict(cfg),
        "seeds": {**cfg.run.seeds, "synth": cfg.synth.seed, "search": cfg.search.seed, "split": cfg.data.split.seed},
        **extra,
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    out = Path(args.out) if args.out else Path(cfg.data.root)
    with ExitStack() as stack:
        _lock(stack, out)
        source, target = write_synthetic(cfg.synth, out)
    print(f"wrote {len(source)} {source.name} and {len(target)} {target.name} images to {out}")
    return 0


def _source_splits(cfg: ExperimentConfig):
    source = load_dataset(cfg.data.root, cfg.data.source, cfg.data.image_size, role="source")
    train, val = split_dataset(source, cfg.data.split)
    return source, train, val


def cmd_train(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    device = resolve_device()
    ckpt_dir, report_dir = _dirs(cfg, args.out)
    # fail on bad data before touching any output
    source, train, val = _source_splits(cfg)
    with ExitStack() as stack:
        _lock(stack, ckpt_dir)
        _lock(stack, report_dir)
        if args.mode == "baseline":
            seg, history = train_baseline(train, val, cfg.run, cfg.seg, ckpt_dir, resume=args.resume, device=device)
            checkpoints = {"seg": str(ckpt_dir / "baseline_best.pt")}
            digests = {"seg": parameter_digest(seg)}
        else:
            vae, seg, history = train_uda(train, val, cfg.run, cfg.vae, cfg.seg, ckpt_dir, resume=args.resume,
                                          device=device)
            checkpoints = {"vae": str(ckpt_dir / "uda_vae_best.pt"), "seg": str(ckpt_dir / "uda_seg_best.pt")}
            digests = {"vae": parameter_digest(vae), "seg": parameter_digest(seg)}
        plot = plot_loss_curves(history, report_dir / f"loss_{args.mode}.png", title=f"{args.mode} training")
        manifest = write_manifest(report_dir / f"train_{args.mode}_manifest.json", _manifest_payload(
            cfg, f"train-{args.mode}",
            dataset={"source": source.name, "n_train": len(train), "n_validation": len(val)},
            history=history,
            checkpoints=checkpoints,
            digests=digests,
        ))
    print(f"best validation DSC {history['best_val_dsc']:.4f}; manifest {manifest}; plot {plot}")
    return 0


def _load_models(ckpt_dir: Path, device: torch.device) -> Models:
    missing = [name for names in REQUIRED_CHECKPOINTS.values() for name in names if not (ckpt_dir / name).is_file()]
    if missing:
        raise CliError(f"missing checkpoints in {ckpt_dir}: {', '.join(missing)}")
    baseline, _ = load_model(ckpt_dir / "baseline_best.pt", "seg")
    vae, _ = load_model(ckpt_dir / "uda_vae_best.pt", "vae")
    seg, _ = load_model(ckpt_dir / "uda_seg_best.pt", "seg")
    return Models(baseline.to(device), vae.to(device), seg.to(device))


def _safe(name: str) -> str:
    return name.replace("/", "__").replace("->", "_to_")


def cmd_eval(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    device = resolve_device()
    ckpt_dir, report_dir = _dirs(cfg, args.out)
    models = _load_models(ckpt_dir, device)
    source = load_dataset(cfg.data.root, cfg.data.source, cfg.data.image_size, role="source")
    targets = [load_dataset(cfg.data.root, t, cfg.data.image_size, role="target") for t in cfg.data.targets]
    for t in targets:
        if not t.has_masks:
            raise CliError(f"target domain {t.name!r} has images without masks; evaluation needs them")
    out = report_dir / f"eval_{args.protocol}"
    report = EvalReport()
    n_overlays = 0
    with ExitStack() as stack:
        _lock(stack, out)
        for target in targets:
            direction = f"{source.name}->{target.name}"
            ds = build_mixed_test(target, source, cfg.data.split) if args.protocol == "mixed" else target
            _, base = evaluate("baseline-unet", direction, args.protocol, models, ds, cfg.run, report=report,
                               seed=cfg.run.init_seed)
            _, uda = evaluate("uda", direction, args.protocol, models, ds, cfg.run, cfg.search, cfg.ssim,
                              report=report, seed=cfg.run.init_seed)
            uda.trace.save_json(out / f"trace_{_safe(direction)}.json")
            plot_convergence(uda.trace.losses, out / f"convergence_{_safe(direction)}.png")
            clones = uda.clones.cpu().numpy()
            for i, item in enumerate(ds.items):
                overlay_panels(item.image, item.mask, base.masks[i].numpy(), uda.masks[i].numpy(), clones[i],
                               out / "overlays" / _safe(direction) / f"{_safe(item.id)}.png")
                n_overlays += 1
        paths = report.save(out, "report")
        write_manifest(out / "manifest.json", _manifest_payload(
            cfg, f"eval-{args.protocol}",
            report=report.to_dict(),
            checkpoints={name: str(ckpt_dir / name) for names in REQUIRED_CHECKPOINTS.values() for name in names},
            n_overlays=n_overlays,
        ))
    print(report.render_table())
    print(f"report {paths['json']}; {n_overlays} overlays under {out / 'overlays'}")
    return 0


def _read_inputs(path: Path, size: tuple[int, int]) -> tuple[list[str], torch.Tensor]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    elif path.is_file():
        files = [path]
    else:
        raise CliError(f"input not found: {path}")
    if not files:
        raise CliError(f"no images in {path}")
    arrays = []
    for f in files:
        try:
            with Image.open(f) as im:
                im = im.convert("RGB")
        except OSError as exc:
            raise CliError(f"cannot read image {f}: {exc}") from exc
        if (im.height, im.width) != tuple(size):
            raise CliError(f"image size mismatch: {f} is {im.height}x{im.width}, checkpoint expects {size[0]}x{size[1]}")
        arrays.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    return [f.stem for f in files], torch.from_numpy(np.stack(arrays))


def cmd_infer(args) -> int:
    device = resolve_device()
    search = LatentSearchConfig()
    ssim_cfg = None
    t = 0.5
    cfg = None
    if args.config:
        cfg = load_config(args.config)
        search, ssim_cfg, t = cfg.search, cfg.ssim, cfg.run.threshold
    if args.seed is not None:
        search.seed = args.seed
    vae, _ = load_model(args.vae, "vae")
    seg, _ = load_model(args.seg, "seg")
    if vae.cfg.input_size != seg.cfg.input_size:
        raise CliError(f"checkpoint sizes differ: vae {vae.cfg.input_size}, seg {seg.cfg.input_size}")
    stems, x = _read_inputs(Path(args.input), vae.cfg.input_size)
    out = Path(args.out)
    with ExitStack() as stack:
        _lock(stack, out)
        masks, trace = infer_target_mask(x, vae.to(device), seg.to(device), search, ssim_cfg, t)
        for stem, m in zip(stems, masks.numpy()):
            save_mask_png(m, out / "masks" / f"{stem}.png")
        trace.save_json(out / "trace.json")
        plot_convergence(trace.losses, out / "convergence.png")
        write_manifest(out / "manifest.json", {
            "kind": "infer",
            "inputs": stems,
            "checkpoints": {"vae": str(args.vae), "seg": str(args.seg)},
            "search": to_dict(search),
            "config": to_dict(cfg) if cfg else None,
            "best_loss": trace.best_loss.tolist(),
        })
    print(f"wrote {len(stems)} masks to {out / 'masks'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentuda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic two-domain dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="dataset directory (default: data.root)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the baseline U-Net or the UDA pair")
    s.add_argument("--config", required=True)
    s.add_argument("--mode", choices=("baseline", "uda"), required=True)
    s.add_argument("--out", help="run directory holding checkpoints/ and reports/")
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", action="store_true", help="continue from the saved per-epoch state")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score both methods on every target domain")
    s.add_argument("--config", required=True)
    s.add_argument("--protocol", choices=("separated", "mixed"), required=True)
    s.add_argument("--out", help="run directory holding checkpoints/ and reports/")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="latent search + segmentation for one image or a directory")
    s.add_argument("--vae", required=True, help="VAE checkpoint")
    s.add_argument("--seg", required=True, help="segmentation checkpoint")
    s.add_argument("--input", required=True, help="image file or directory")
    s.add_argument("--config", help="config supplying search/ssim settings and the threshold")
    s.add_argument("--out", default="runs/infer")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_infer)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, CliError, LatentSearchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
