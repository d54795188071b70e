"""U-Net segmentation network with a swappable encoder backbone."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

BACKBONES = ("desk", "effnet-b4")

# (expand ratio, out channels, repeats, stride, kernel) per stage, EfficientNet-B4 widths/depths
_EFFNET_B4_STAGES = [
    (1, 24, 2, 1, 3),
    (6, 32, 4, 2, 3),
    (6, 56, 4, 2, 5),
    (6, 112, 6, 2, 3),
    (6, 160, 6, 1, 5),
    (6, 272, 8, 2, 5),
    (6, 448, 2, 1, 3),
]
_EFFNET_B4_STEM = 48


@dataclass
class SegConfig:
    backbone: str = "desk"
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    # stage index of the backbone whose output is the perceptual embedding;
    # None picks the preset default (desk: deepest stage, effnet-b4: 6)
    feature_tap_index: int | None = None
    desk_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])

    def __post_init__(self) -> None:
        self.input_size = tuple(self.input_size)
        self.desk_widths = list(self.desk_widths)
        if self.backbone not in BACKBONES:
            raise ValueError(f"seg.backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.feature_tap_index is None:
            self.feature_tap_index = len(self.desk_widths) - 1 if self.backbone == "desk" else 6
        n = self.n_backbone_stages
        if not 0 <= self.feature_tap_index < n:
            raise ValueError(f"seg.feature_tap_index {self.feature_tap_index} invalid for {n} backbone stages")
        factor = 2 ** self.n_downsamplings
        if any(s % factor for s in self.input_size):
            raise ValueError(f"seg.input_size {self.input_size} not divisible by {factor}")

    @property
    def n_backbone_stages(self) -> int:
        return len(self.desk_widths) if self.backbone == "desk" else 1 + len(_EFFNET_B4_STAGES)

    @property
    def n_downsamplings(self) -> int:
        if self.backbone == "desk":
            return len(self.desk_widths) - 1
        return 1 + sum(1 for s in _EFFNET_B4_STAGES if s[3] == 2)


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class DeskBackbone(nn.Module):
    """Plain conv encoder; stage 0 is full resolution, each later stage halves it."""

    def __init__(self, in_channels: int, widths: list[int]):
        super().__init__()
        stages, cin = [], in_channels
        for i, c in enumerate(widths):
            block = _conv_block(cin, c)
            stages.append(block if i == 0 else nn.Sequential(nn.MaxPool2d(2), block))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.channels = list(widths)
        self.strides = [2**i for i in range(len(widths))]


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduced: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, reduced, 1)
        self.expand = nn.Conv2d(reduced, channels, 1)

    def forward(self, x):
        s = F.adaptive_avg_pool2d(x, 1)
        return x * torch.sigmoid(self.expand(F.silu(self.reduce(s))))


class MBConv(nn.Module):
    def __init__(self, cin: int, cout: int, expand: int, stride: int, kernel: int):
        super().__init__()
        mid = cin * expand
        layers: list[nn.Module] = []
        if expand != 1:
            layers += [nn.Conv2d(cin, mid, 1, bias=False), nn.BatchNorm2d(mid), nn.SiLU()]
        layers += [
            nn.Conv2d(mid, mid, kernel, stride=stride, padding=kernel // 2, groups=mid, bias=False),
            nn.BatchNorm2d(mid),
            nn.SiLU(),
            SqueezeExcite(mid, max(1, cin // 4)),
            nn.Conv2d(mid, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        ]
        self.body = nn.Sequential(*layers)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        out = self.body(x)
        return out + x if self.residual else out


class EfficientBackbone(nn.Module):
    """EfficientNet-B4-shaped encoder trained from scratch (no pretrained weights)."""

    def __init__(self, in_channels: int):
        super().__init__()
        stem = nn.Sequential(
            nn.Conv2d(in_channels, _EFFNET_B4_STEM, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(_EFFNET_B4_STEM),
            nn.SiLU(),
        )
        stages: list[nn.Module] = [stem]
        channels, strides = [_EFFNET_B4_STEM], [2]
        cin, stride_total = _EFFNET_B4_STEM, 2
        for expand, cout, repeats, stride, kernel in _EFFNET_B4_STAGES:
            blocks = [MBConv(cin if r == 0 else cout, cout, expand, stride if r == 0 else 1, kernel) for r in range(repeats)]
            stages.append(nn.Sequential(*blocks))
            stride_total *= stride
            channels.append(cout)
            strides.append(stride_total)
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.channels = channels
        self.strides = strides


class UNet(nn.Module):
    """Encoder-decoder with skip connections at every resolution of the backbone.

    The decoder walks back up the distinct strides of the backbone; at each
    level the deepest backbone feature with that stride is concatenated.
    """

    def __init__(self, cfg: SegConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or SegConfig()
        if cfg.backbone == "desk":
            self.backbone = DeskBackbone(cfg.in_channels, cfg.desk_widths)
        else:
            self.backbone = EfficientBackbone(cfg.in_channels)
        chans, strides = self.backbone.channels, self.backbone.strides

        # last stage index at each stride, deepest first
        last_at: dict[int, int] = {}
        for i, s in enumerate(strides):
            last_at[s] = i
        self._skips = [last_at[s] for s in sorted(last_at, reverse=True)]
        ups, decs = [], []
        cur = chans[self._skips[0]]
        for idx in self._skips[1:]:
            target = chans[idx]
            ups.append(nn.ConvTranspose2d(cur, target, 2, stride=2))
            decs.append(_conv_block(2 * target, target))
            cur = target
        self.ups = nn.ModuleList(ups)
        self.decs = nn.ModuleList(decs)
        # backbones whose finest stride is > 1 need a final upsampling to input size
        self._final_scale = strides[self._skips[-1]]
        self.head = nn.Conv2d(cur, 1, 1)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or tuple(x.shape[-2:]) != self.cfg.input_size or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"UNet expects (B, {self.cfg.in_channels}, {self.cfg.input_size[0]}, "
                f"{self.cfg.input_size[1]}), got {tuple(x.shape)}"
            )

    def _encode(self, x: torch.Tensor, upto: int | None = None) -> list[torch.Tensor]:
        feats = []
        for i, stage in enumerate(self.backbone.stages):
            x = stage(x)
            feats.append(x)
            if upto is not None and i == upto:
                break
        return feats

    def forward_with_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """One pass returning ``(probabilities, tapped feature)``."""
        self._check_input(x)
        feats = self._encode(x)
        h = feats[self._skips[0]]
        for up, dec, idx in zip(self.ups, self.decs, self._skips[1:]):
            h = dec(torch.cat([up(h), feats[idx]], dim=1))
        if self._final_scale > 1:
            h = F.interpolate(h, scale_factor=self._final_scale, mode="bilinear", align_corners=False)
        return torch.sigmoid(self.head(h)), feats[self.cfg.feature_tap_index]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(x)[0]

    def segment(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)

    def feature_embedding(self, x: torch.Tensor) -> torch.Tensor:
        """Activations at the configured tap, computed in evaluation mode.

        Gradients flow to ``x``; the module's train/eval flag is restored on
        return.
        """
        self._check_input(x)
        was_training = self.training
        self.eval()
        try:
            return self._encode(x, upto=self.cfg.feature_tap_index)[-1]
        finally:
            self.train(was_training)


def threshold(p: torch.Tensor, t: float = 0.5) -> torch.Tensor:
    """Binary ``uint8`` mask, 1 where ``p >= t``."""
    if not 0 < t < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return (p >= t).to(torch.uint8)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers, for frozen-model checks."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

