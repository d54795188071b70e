"""Domain-tagged image/mask datasets: disk loading, splits, and a synthetic shift benchmark.

On-disk layout for one domain::

    <root>/<domain>/images/*.png
    <root>/<domain>/masks/*.png      # optional, 0 = background, 255 = foreground

Masks pair with images by filename stem.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
ROLES = ("source", "target")


class DatasetError(RuntimeError):
    """Bad dataset layout or unreadable file."""


@dataclass(frozen=True)
class Item:
    id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray | None  # (1, H, W) uint8 in {0, 1}


@dataclass(frozen=True)
class DomainDataset:
    name: str
    role: str
    items: tuple[Item, ...]
    image_size: tuple[int, int]

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        for it in self.items:
            if tuple(it.image.shape[-2:]) != tuple(self.image_size):
                raise ValueError(f"item {it.id}: image size {it.image.shape[-2:]} != {self.image_size}")
            if it.mask is not None and it.mask.shape[-2:] != it.image.shape[-2:]:
                raise ValueError(f"item {it.id}: mask and image sizes differ")
            it.image.flags.writeable = False
            if it.mask is not None:
                it.mask.flags.writeable = False

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    @property
    def has_masks(self) -> bool:
        return bool(self.items) and all(it.mask is not None for it in self.items)

    def images(self) -> np.ndarray:
        """All images stacked as ``(N, 3, H, W)`` float32."""
        return np.stack([it.image for it in self.items])

    def masks(self) -> np.ndarray:
        """All masks stacked as ``(N, 1, H, W)`` uint8; every item must carry one."""
        missing = [it.id for it in self.items if it.mask is None]
        if missing:
            raise DatasetError(f"dataset {self.name!r}: {len(missing)} items lack masks (first: {missing[0]})")
        return np.stack([it.mask for it in self.items])

    def subset(self, indices, name: str | None = None) -> "DomainDataset":
        return DomainDataset(name or self.name, self.role, tuple(self.items[i] for i in indices), self.image_size)


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    mix_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not 0 <= self.mix_fraction < 1:
            raise ValueError(f"mix_fraction must lie in [0, 1), got {self.mix_fraction}")


def _list_images(folder: Path) -> dict[str, Path]:
    files = sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    out: dict[str, Path] = {}
    for p in files:
        if p.stem in out:
            raise DatasetError(f"duplicate file stem {p.stem!r} in {folder}")
        out[p.stem] = p
    return out


def _open(path: Path, mode: str) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert(mode)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot read image file {path}: {exc}") from exc


def preprocess_image(im: Image.Image, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``size`` (h, w) and scale to ``[0, 1]`` as ``(3, H, W)``."""
    h, w = size
    if im.size != (w, h):
        im = im.resize((w, h), Image.BILINEAR)
    return (np.asarray(im, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def preprocess_mask(im: Image.Image, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize and binarize at 0.5 as ``(1, H, W)`` uint8."""
    h, w = size
    if im.size != (w, h):
        im = im.resize((w, h), Image.NEAREST)
    arr = np.asarray(im, dtype=np.float32) / 255.0
    return (arr >= 0.5).astype(np.uint8)[None]


def load_dataset(
    root_path: str | Path,
    domain_name: str,
    target_size: tuple[int, int] = (128, 128),
    role: str = "source",
) -> DomainDataset:
    """Load ``<root_path>/<domain_name>/{images,masks}`` into memory."""
    domain_dir = Path(root_path) / domain_name
    img_dir, mask_dir = domain_dir / "images", domain_dir / "masks"
    if not img_dir.is_dir():
        raise DatasetError(f"missing images/ directory: {img_dir}")
    images = _list_images(img_dir)
    masks = _list_images(mask_dir) if mask_dir.is_dir() else {}
    orphans = sorted(set(masks) - set(images))
    if orphans:
        raise DatasetError(f"mask without matching image in {mask_dir}: {orphans[0]}")
    size = tuple(int(s) for s in target_size)
    items = []
    for stem, path in images.items():
        img = preprocess_image(_open(path, "RGB"), size)
        mask = preprocess_mask(_open(masks[stem], "L"), size) if stem in masks else None
        items.append(Item(stem, img, mask))
    return DomainDataset(domain_name, role, tuple(items), size)


def save_dataset(ds: DomainDataset, root_path: str | Path) -> Path:
    """Write ``ds`` in the on-disk layout; returns the domain directory."""
    domain_dir = Path(root_path) / ds.name
    (domain_dir / "images").mkdir(parents=True, exist_ok=True)
    if any(it.mask is not None for it in ds.items):
        (domain_dir / "masks").mkdir(parents=True, exist_ok=True)
    for it in ds.items:
        rgb = np.round(it.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(domain_dir / "images" / f"{it.id}.png")
        if it.mask is not None:
            Image.fromarray(it.mask[0] * 255, "L").save(domain_dir / "masks" / f"{it.id}.png")
    return domain_dir


def split_dataset(ds: DomainDataset, spec: SplitSpec) -> tuple[DomainDataset, DomainDataset]:
    """Seeded shuffle then prefix split; both halves keep the original item order."""
    n = len(ds)
    if n < 2:
        raise DatasetError(f"cannot split dataset {ds.name!r} of size {n}")
    n_train = math.floor(spec.train_fraction * n)
    if n_train == 0 or n_train == n:
        raise DatasetError(f"train_fraction {spec.train_fraction} leaves an empty split for n={n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    train_idx, val_idx = sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())
    return ds.subset(train_idx), ds.subset(val_idx)


def build_mixed_test(target: DomainDataset, source: DomainDataset, spec: SplitSpec) -> DomainDataset:
    """Target set plus a seeded sample of ``floor(mix_fraction * |source|)`` source items.

    Merged ids are prefixed with the source name to stay unique.
    """
    if tuple(target.image_size) != tuple(source.image_size):
        raise DatasetError(f"image sizes differ: {target.image_size} vs {source.image_size}")
    k = math.floor(spec.mix_fraction * len(source))
    if k == 0:
        return target
    picked = sorted(np.random.default_rng(spec.seed).choice(len(source), size=k, replace=False).tolist())
    merged = tuple(Item(f"{source.name}/{source.items[i].id}", source.items[i].image, source.items[i].mask) for i in picked)
    return DomainDataset(f"{target.name}+{source.name}", target.role, target.items + merged, target.image_size)


# ---------------------------------------------------------------------------
# synthetic two-domain benchmark


def hue_rotation_matrix(degrees: float) -> list[list[float]]:
    """RGB rotation about the grey axis; preserves R + G + B."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    a = (1 - c) / 3
    b = math.sqrt(1 / 3) * s
    return [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]]


@dataclass
class ShapeFamily:
    blob_count: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (0.12, 0.28)  # fraction of the shorter side
    boundary_noise: float = 0.25  # relative radial perturbation amplitude
    foreground_color: tuple[float, float, float] = (0.80, 0.38, 0.30)
    background_color: tuple[float, float, float] = (0.92, 0.66, 0.60)
    shading: float = 0.15  # amplitude of smooth illumination shared by both domains

    def __post_init__(self) -> None:
        self.blob_count = tuple(self.blob_count)
        self.radius = tuple(self.radius)
        self.foreground_color = tuple(self.foreground_color)
        self.background_color = tuple(self.background_color)
        if not 1 <= self.blob_count[0] <= self.blob_count[1]:
            raise ValueError(f"bad blob_count range {self.blob_count}")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ValueError(f"bad radius range {self.radius}")


@dataclass
class DomainStyle:
    color_matrix: list[list[float]] = field(default_factory=lambda: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    texture_amplitude: float = 0.03
    texture_frequency: float = 6.0  # cycles across the image
    noise_std: float = 0.01

    def __post_init__(self) -> None:
        self.offset = tuple(self.offset)
        m = np.asarray(self.color_matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"color_matrix must be 3x3, got shape {m.shape}")
        self.color_matrix = m.tolist()
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


@dataclass
class SyntheticShiftConfig:
    n_images: int = 200
    image_size: tuple[int, int] = (64, 64)
    shape_family: ShapeFamily = field(default_factory=ShapeFamily)
    source_style: DomainStyle = field(default_factory=DomainStyle)
    target_style: DomainStyle = field(default_factory=DomainStyle)
    source_name: str = "WLI"
    target_name: str = "NBI"
    seed: int = 0
    # None renders the same scenes in both domains; an integer draws that many
    # target scenes disjoint from the source ones
    n_target: int | None = None

    def __post_init__(self) -> None:
        self.image_size = tuple(self.image_size)
        if self.n_images < 1:
            raise ValueError(f"n_images must be >= 1, got {self.n_images}")
        if self.n_target is not None and self.n_target < 1:
            raise ValueError(f"n_target must be >= 1 or null, got {self.n_target}")


def _blob_mask(rng: np.random.Generator, shape: ShapeFamily, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    short = min(h, w)
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(shape.blob_count[0], shape.blob_count[1] + 1))):
        r0 = rng.uniform(*shape.radius) * short
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        theta = np.arctan2(yy - cy, xx - cx)
        radius = np.full_like(theta, r0)
        for k in (2, 3, 4):
            amp = rng.uniform(0, shape.boundary_noise) / k
            radius = radius * (1 + amp * np.cos(k * theta + rng.uniform(0, 2 * np.pi)))
        mask |= np.hypot(yy - cy, xx - cx) <= radius
    return mask


def _smooth_field(rng: np.random.Generator, h: int, w: int, frequency: float, n_waves: int = 4) -> np.ndarray:
    """Sum of random plane waves in roughly ``[-1, 1]``."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w))
    for _ in range(n_waves):
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        f = frequency * rng.uniform(0.75, 1.25)
        out += np.cos(2 * np.pi * f * (np.cos(angle) * xx / w + np.sin(angle) * yy / h) + phase)
    return out / n_waves


def _render(base: np.ndarray, style: DomainStyle, texture_seed: np.ndarray, noise: np.ndarray) -> np.ndarray:
    h, w = base.shape[1:]
    tex_rng = np.random.default_rng(texture_seed)
    texture = _smooth_field(tex_rng, h, w, style.texture_frequency)
    m = np.asarray(style.color_matrix)
    img = np.einsum("ij,jhw->ihw", m, base) + np.asarray(style.offset)[:, None, None]
    img = np.clip(img, 0, 1) ** style.gamma
    img = img + style.texture_amplitude * texture[None] + style.noise_std * noise
    if not np.isfinite(img).all():
        raise ValueError("style parameters produced non-finite pixels")
    return np.clip(img, 0, 1).astype(np.float32)


def generate_synthetic_shift(cfg: SyntheticShiftConfig) -> tuple[DomainDataset, DomainDataset]:
    """Render each scene once per domain style.

    Scene ``i`` fixes the mask, the base tissue shading and the random
    streams; only the style parameters differ between its two renderings, so
    equal styles give byte-identical domains. With ``n_target`` set, the
    target domain uses scenes ``n_images .. n_images + n_target - 1``.
    """
    if cfg.n_images < 1:
        raise ValueError("n_images must be >= 1")
    h, w = cfg.image_size
    sf = cfg.shape_family
    fg = np.asarray(sf.foreground_color)[:, None, None]
    bg = np.asarray(sf.background_color)[:, None, None]

    def scene(i: int, style: DomainStyle) -> Item:
        rng = np.random.default_rng([cfg.seed, i])
        mask = _blob_mask(rng, sf, h, w)
        shading = 1 + sf.shading * _smooth_field(rng, h, w, frequency=1.0, n_waves=2)
        base = np.where(mask[None], fg, bg) * shading[None]
        noise = rng.standard_normal((3, h, w))
        tex_seed = np.array([cfg.seed, i, 1])
        return Item(f"{i:05d}", _render(base, style, tex_seed, noise), mask.astype(np.uint8)[None])

    tgt_range = range(cfg.n_images) if cfg.n_target is None else range(cfg.n_images, cfg.n_images + cfg.n_target)
    src_items = tuple(scene(i, cfg.source_style) for i in range(cfg.n_images))
    tgt_items = tuple(scene(i, cfg.target_style) for i in tgt_range)
    source = DomainDataset(cfg.source_name, "source", src_items, (h, w))
    target = DomainDataset(cfg.target_name, "target", tgt_items, (h, w))
    return source, target


def write_synthetic(cfg: SyntheticShiftConfig, out_dir: str | Path) -> tuple[DomainDataset, DomainDataset]:
    """Generate and write both domains plus ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    source, target = generate_synthetic_shift(cfg)
    save_dataset(source, out)
    save_dataset(target, out)
    manifest = {
        "kind": "synthetic-shift",
        "config": asdict(cfg),
        "seed": cfg.seed,
        "counts": {source.name: len(source), target.name: len(target)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return source, target
