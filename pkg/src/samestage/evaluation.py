"""FID, feature extractors, sampling-frequency maps, weight densities, edge metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigurationError, DataError, DimensionError, NumericalDegeneracyError

EIG_CLAMP = 1e-8


@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    n: int

    @classmethod
    def from_features(cls, features) -> "FeatureStats":
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise DimensionError(f"need an (n >= 2, d) feature matrix, got shape {feats.shape}")
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1]),
                   feats.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """``Tr((A B)^{1/2})`` for PSD ``A, B`` via the symmetric form ``A^{1/2} B A^{1/2}``."""
    sa = _psd_sqrt(a)
    m = sa @ b @ sa
    w = np.linalg.eigvalsh((m + m.T) / 2)
    floor = -EIG_CLAMP * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.size and w.min() < floor:
        raise NumericalDegeneracyError(
            f"matrix square root failed: eigenvalue {w.min():.3e} below tolerance {floor:.3e}"
        )
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def fid(a: FeatureStats, b: FeatureStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"feature dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) \
        - 2.0 * trace_sqrt_product(a.covariance, b.covariance)
    return max(float(value), 0.0)


# -- feature extractors ------------------------------------------------------------

class RandomEmbedder(nn.Module):
    """Fixed-seed random conv net; a deterministic offline stand-in for Inception features.

    Features are the spatial means of each stage (64 dims with the defaults).
    """

    def __init__(self, seed: int = 0, width: int = 16, input_size: int = 64):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.input_size = input_size
        self.convs = nn.ModuleList()
        cin = 3
        for cout in (width, 2 * width, 2 * width):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.copy_(torch.randn(cout, generator=g) * 0.1)
            self.convs.append(conv)
            cin = cout
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bicubic", align_corners=False)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x.mean(dim=(2, 3)))
        return torch.cat(feats, dim=1)


class ResizingExtractor(nn.Module):
    """Wraps an external network: bicubic resize to 299x299, then pooled features."""

    def __init__(self, net: nn.Module, size: int = 299):
        super().__init__()
        self.net = net.eval()
        self.size = size

    def forward(self, x):
        x = F.interpolate(x, size=(self.size, self.size), mode="bicubic", align_corners=False)
        out = self.net(x)
        if isinstance(out, (tuple, list)):
            out = out[0]
        return out.flatten(1)


def make_extractor(spec: str = "builtin") -> nn.Module:
    """``builtin`` | ``inception:PATH`` (torchvision inception_v3 state dict) | ``torchscript:PATH``."""
    if spec in ("builtin", "random"):
        return RandomEmbedder()
    kind, _, path = spec.partition(":")
    if kind not in ("inception", "torchscript") or not path:
        raise ConfigurationError(f"unknown extractor {spec!r}; use builtin, inception:PATH or torchscript:PATH")
    p = Path(path)
    if not p.is_file():
        raise DataError(
            f"extractor weights not found at {p}; expected "
            + ("a torchvision inception_v3 state dict (.pth)" if kind == "inception" else "a TorchScript module (.pt)")
        )
    if kind == "torchscript":
        return ResizingExtractor(torch.jit.load(str(p), map_location="cpu"))
    from torchvision.models import inception_v3

    net = inception_v3(weights=None, aux_logits=True, init_weights=False)
    state = torch.load(p, map_location="cpu")
    net.load_state_dict(state)
    net.fc = nn.Identity()
    return ResizingExtractor(net)


@torch.no_grad()
def extract_features(images, extractor: nn.Module, batch_size: int = 32) -> np.ndarray:
    """One feature row per image; ``images`` is an ``(N, 3, H, W)`` tensor in [-1, 1]."""
    rows = []
    for i in range(0, images.shape[0], batch_size):
        rows.append(extractor(images[i:i + batch_size].float()).double().cpu().numpy())
    if not rows:
        return np.zeros((0, 0))
    return np.concatenate(rows, axis=0)


def fid_between(images_a, images_b, extractor: nn.Module | None = None) -> float:
    extractor = extractor or RandomEmbedder()
    fa = FeatureStats.from_features(extract_features(images_a, extractor))
    fb = FeatureStats.from_features(extract_features(images_b, extractor))
    return fid(fa, fb)


# -- content preservation -------------------------------------------------------------

_SOBEL = torch.tensor([[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]])


def edge_map(images: torch.Tensor) -> torch.Tensor:
    """Sobel gradient magnitude of the luminance of ``(N, 3, H, W)`` images in [-1, 1]."""
    lum = (0.299 * images[:, 0] + 0.587 * images[:, 1] + 0.114 * images[:, 2]).unsqueeze(1)
    lum = F.pad(lum, (1, 1, 1, 1), mode="replicate")
    k = torch.stack([_SOBEL, _SOBEL.t()]).unsqueeze(1).to(images)
    g = F.conv2d(lum, k)
    return g.pow(2).sum(dim=1).sqrt() / 8.0


def edge_l1(a: torch.Tensor, b: torch.Tensor) -> float:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return float((edge_map(a) - edge_map(b)).abs().mean())


# -- sampling frequency ------------------------------------------------------------------

def read_history(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"sampling history not found: {path}")
    with path.open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def sampling_frequency_map(history, grid, tap: int | None = None) -> np.ndarray:
    """Count how often each grid position was sampled; normalized so the max is 1."""
    h, w = grid
    counts = np.zeros(h * w, dtype=np.float64)
    used = 0
    for rec in history:
        if tap is not None and rec.get("tap") != tap:
            continue
        if tuple(rec.get("grid", grid)) != (h, w):
            continue
        np.add.at(counts, np.asarray(rec["indices"], dtype=np.int64), 1.0)
        used += 1
    if used == 0:
        raise DataError("empty sampling history for the requested grid/tap")
    return (counts / counts.max()).reshape(h, w)


def save_heatmap(freq: np.ndarray, path, scale: int = 4) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray((freq * 255).round().astype(np.uint8), mode="L")
    img.resize((freq.shape[1] * scale, freq.shape[0] * scale), Image.NEAREST).save(path)
    return path


# -- weight density -----------------------------------------------------------------------

def component_weights(params: dict, component: str) -> np.ndarray:
    """Flatten all parameters whose name starts with ``component`` (e.g. ``heads.projections``)."""
    comp, _, sub = component.partition(".")
    if comp not in params:
        raise ConfigurationError(f"unknown component {comp!r}; available: {sorted(params)}")
    tensors = [t for name, t in params[comp].items() if not sub or name.startswith(sub)]
    tensors = [t for t in tensors if t.numel()]
    if not tensors:
        raise ConfigurationError(f"component {component!r} has no parameters")
    return torch.cat([t.detach().flatten().double().cpu() for t in tensors]).numpy()


def weight_density(checkpoint, component: str, out_prefix=None, bins: int = 100) -> dict:
    """Histogram density of one component's weights; writes ``<prefix>.csv``/``.png`` if asked."""
    if not isinstance(checkpoint, dict):
        checkpoint = torch.load(checkpoint, map_location="cpu", weights_only=False)
    w = component_weights(checkpoint["params"], component)
    lo, hi = float(w.min()), float(w.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    density, edges = np.histogram(w, bins=bins, range=(lo, hi), density=True)
    centers = (edges[:-1] + edges[1:]) / 2
    result = {"centers": centers, "density": density, "mean": float(w.mean()), "std": float(w.std()), "n": int(w.size)}
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(out_prefix.with_suffix(".csv"), np.column_stack([centers, density]),
                   delimiter=",", header="weight,density", comments="")
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(centers, density)
        ax.set_xlabel("weight")
        ax.set_ylabel("density")
        ax.set_title(component)
        fig.tight_layout()
        fig.savefig(out_prefix.with_suffix(".png"))
        plt.close(fig)
    return result
