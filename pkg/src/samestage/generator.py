"""ResNet encoder/decoder generator with numbered feature taps.

Layers are kept in one flat ``nn.Sequential`` so that tap ``h_l`` is simply
the output of layer ``l`` (``h_0`` is the input image).  With the default
configuration the numbering is::

    0 pad  1 conv7  2 IN  3 ReLU             -> h_3   C x H x W
    4 conv 5 IN  6 ReLU  7 down              -> h_7   2C x H/2
    8 conv 9 IN 10 ReLU 11 down              -> h_11  4C x H/4
    12..15 ResnetBlock (encoder)             -> h_15  bottleneck
    16..20 ResnetBlock (decoder)
    21 up 22 conv 23 IN 24 ReLU              -> h_24  2C x H/2
    25 up 26 conv 27 IN 28 ReLU              -> h_28  C x H
    29 pad 30 conv7 31 tanh                  -> h_31  image

Encoder tap ``l`` pairs with decoder tap ``last - l`` (``last`` = 31 by default).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError


@dataclass
class GeneratorConfig:
    input_channels: int = 3
    base_width: int = 64
    n_downsamples: int = 2
    n_resblocks_encoder: int = 4
    n_resblocks_decoder: int = 5
    image_size: int | None = None

    def __post_init__(self):
        if self.base_width < 1 or self.input_channels < 1:
            raise ConfigurationError("generator widths must be positive")
        if self.n_downsamples < 0 or self.n_resblocks_encoder < 0 or self.n_resblocks_decoder < 0:
            raise ConfigurationError("generator stage counts must be non-negative")


@dataclass
class StageFeatureMap:
    tap_index: int
    tensor: torch.Tensor

    @property
    def spatial_size(self) -> tuple[int, int]:
        return tuple(self.tensor.shape[-2:])

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]


class Downsample(nn.Module):
    """Anti-aliased stride-2 downsampling with a fixed 3x3 binomial filter."""

    def __init__(self, channels: int):
        super().__init__()
        a = torch.tensor([1.0, 2.0, 1.0])
        filt = a[:, None] * a[None, :]
        filt = filt / filt.sum()
        self.register_buffer("filt", filt[None, None].repeat(channels, 1, 1, 1), persistent=False)
        self.channels = channels

    def forward(self, x):
        x = F.pad(x, (1, 1, 1, 1), mode="reflect")
        return F.conv2d(x, self.filt, stride=2, groups=self.channels)


class Upsample(nn.Module):
    def forward(self, x):
        return F.interpolate(x, scale_factor=2, mode="nearest")


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv_block = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(dim),
            nn.ReLU(True),
            nn.Conv2d(dim, dim, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.conv_block(x)


def _conv_in_relu(cin, cout, kernel=3):
    pad = kernel // 2
    return [
        nn.Conv2d(cin, cout, kernel, padding=pad, padding_mode="reflect"),
        nn.InstanceNorm2d(cout),
        nn.ReLU(True),
    ]


class ResnetGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        c = cfg.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(cfg.input_channels, c, 7),
            nn.InstanceNorm2d(c),
            nn.ReLU(True),
        ]
        width = c
        for _ in range(cfg.n_downsamples):
            layers += _conv_in_relu(width, width * 2)
            layers.append(Downsample(width * 2))
            width *= 2
        self.bottleneck_channels = width
        layers += [ResnetBlock(width) for _ in range(cfg.n_resblocks_encoder)]
        self.split = len(layers)  # first decoder layer index
        layers += [ResnetBlock(width) for _ in range(cfg.n_resblocks_decoder)]
        for _ in range(cfg.n_downsamples):
            layers.append(Upsample())
            layers += _conv_in_relu(width, width // 2)
            width //= 2
        layers += [
            nn.ReflectionPad2d(3),
            nn.Conv2d(width, cfg.input_channels, 7),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)
        self.last_tap = len(layers) - 1

    # -- tap bookkeeping -------------------------------------------------
    @property
    def encoder_taps(self) -> range:
        return range(0, self.split)

    @property
    def decoder_taps(self) -> range:
        return range(self.split, self.last_tap + 1)

    def partner(self, tap: int) -> int:
        """Same-stage partner of ``tap`` under the symmetric numbering."""
        return self.last_tap - tap

    def tap_shape(self, tap: int, image_size: int) -> tuple[int, int, int]:
        """(channels, height, width) of tap ``tap`` for a square input, without running the net."""
        x = torch.zeros(1, self.config.input_channels, image_size, image_size)
        with torch.no_grad():
            feats = self._run(x, 0, self.last_tap + 1, {tap})[1]
        return tuple(feats[tap].shape[1:])

    def _check_taps(self, taps, valid: range, side: str):
        bad = [t for t in taps if t not in valid]
        if bad:
            raise ConfigurationError(
                f"unknown {side} tap(s) {bad}; valid {side} taps are {valid.start}..{valid.stop - 1}"
            )

    def _run(self, x, start, stop, taps):
        feats = {}
        if start == 0 and 0 in taps:
            feats[0] = x
        for i in range(start, stop):
            x = self.model[i](x)
            if i in taps and i > 0:
                feats[i] = x
        return x, feats

    # -- public API -------------------------------------------------------
    def encode(self, x: torch.Tensor, taps=()):
        """Run the encoder; returns ``(bottleneck, {tap: StageFeatureMap})``."""
        taps = set(taps)
        self._check_taps(taps, self.encoder_taps, "encoder")
        if x.dim() != 4 or x.shape[1] != self.config.input_channels:
            raise DimensionError(
                f"expected input of shape (N, {self.config.input_channels}, H, W), got {tuple(x.shape)}"
            )
        h, feats = self._run(x, 0, self.split, taps)
        return (
            StageFeatureMap(self.split - 1, h),
            {t: StageFeatureMap(t, f) for t, f in feats.items()},
        )

    def decode(self, bottleneck, taps=()):
        """Run the decoder from the bottleneck; returns ``(image, {tap: StageFeatureMap})``."""
        taps = set(taps)
        self._check_taps(taps, self.decoder_taps, "decoder")
        h = bottleneck.tensor if isinstance(bottleneck, StageFeatureMap) else bottleneck
        if h.dim() != 4 or h.shape[1] != self.bottleneck_channels:
            raise DimensionError(
                f"bottleneck must have shape (N, {self.bottleneck_channels}, h, w), got {tuple(h.shape)}"
            )
        if self.config.image_size is not None:
            side = self.config.image_size // 2 ** self.config.n_downsamples
            if tuple(h.shape[-2:]) != (side, side):
                raise DimensionError(f"bottleneck spatial size expected {(side, side)}, got {tuple(h.shape[-2:])}")
        out, feats = self._run(h, self.split, self.last_tap + 1, taps)
        return out, {t: StageFeatureMap(t, f) for t, f in feats.items()}

    def forward(self, x, taps=()):
        """Translate ``x``; if ``taps`` is non-empty also return ``{tap: tensor}`` for all of them."""
        if not taps:
            return self.model(x)
        taps = set(taps)
        self._check_taps(taps, range(0, self.last_tap + 1), "generator")
        out, feats = self._run(x, 0, self.last_tap + 1, taps)
        return out, feats

    def translate(self, x: torch.Tensor) -> torch.Tensor:
        bottleneck, _ = self.encode(x)
        return self.decode(bottleneck)[0]
