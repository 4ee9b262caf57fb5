"""70x70 PatchGAN discriminator (anti-aliased variant)."""
from __future__ import annotations

from torch import nn

from .errors import DimensionError
from .generator import Downsample


def score_grid_size(n: int) -> int:
    """Side of the score grid for an ``n`` pixel input (0 when the input is too small)."""
    for _ in range(3):
        n -= 1  # k4 s1 p1 conv
        if n < 2:
            return 0
        n = (n - 1) // 2 + 1
    return max(n - 2, 0)


class PatchDiscriminator(nn.Module):
    """Each output cell scores one receptive-field patch; no output activation (LSGAN)."""

    def __init__(self, input_channels: int = 3, base_width: int = 64):
        super().__init__()
        c = base_width
        self.model = nn.Sequential(
            nn.Conv2d(input_channels, c, 4, padding=1),
            nn.LeakyReLU(0.2, True),
            Downsample(c),
            nn.Conv2d(c, 2 * c, 4, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.LeakyReLU(0.2, True),
            Downsample(2 * c),
            nn.Conv2d(2 * c, 4 * c, 4, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.LeakyReLU(0.2, True),
            Downsample(4 * c),
            nn.Conv2d(4 * c, 4 * c, 4, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(4 * c, 1, 4, padding=1),
        )

    def forward(self, image):
        h, w = image.shape[-2:]
        if image.dim() != 4 or score_grid_size(h) < 1 or score_grid_size(w) < 1:
            raise DimensionError(f"input {tuple(image.shape)} is too small to produce a score grid")
        return self.model(image)

    score_map = forward
