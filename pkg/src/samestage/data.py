"""Unpaired image folders and the synthetic hue-shift toy domains.

Folder layout follows the usual unpaired convention::

    root/trainA  root/trainB  root/testA  root/testB

An epoch walks domain A once (in a seed+epoch keyed permutation); domain B is
visited cyclically through its own permutation, so the domains stay unpaired.
"""
from __future__ import annotations

import colorsys
import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError

from .errors import DataError

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise DataError(f"image directory not found: {folder}")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise DataError(f"no images found in {folder}")
    return files


def load_image(path, image_size: int | None = None) -> torch.Tensor:
    """Read an image as a ``(3, H, W)`` float tensor in [-1, 1], bicubic-resized if asked."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if image_size is not None and im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BICUBIC)
            arr = np.asarray(im, dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` tensor in [-1, 1] -> ``(H, W, 3)`` uint8 array."""
    arr = ((image.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round()
    return arr.permute(1, 2, 0).numpy().astype(np.uint8)


def save_image(image: torch.Tensor, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)


class ImageFolder:
    def __init__(self, folder, image_size: int | None = None, cache: bool = True):
        self.folder = Path(folder)
        self.files = list_images(folder)
        self.image_size = image_size
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.files)

    def __getitem__(self, i) -> torch.Tensor:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        img = load_image(self.files[i], self.image_size)
        if self._cache is not None:
            self._cache[i] = img
        return img

    def stack(self, n: int | None = None) -> torch.Tensor:
        n = len(self) if n is None else min(n, len(self))
        return torch.stack([self[i] for i in range(n)])


@dataclass
class UnpairedDataset:
    domain_a_dir: str
    domain_b_dir: str
    image_size: int = 256
    shuffle_seed: int = 0
    batch_size: int = 1
    flip: bool = False
    cache: bool = True

    def __post_init__(self):
        self.a = ImageFolder(self.domain_a_dir, self.image_size, self.cache)
        self.b = ImageFolder(self.domain_b_dir, self.image_size, self.cache)

    @classmethod
    def from_root(cls, root, split: str = "train", **kwargs):
        root = Path(root)
        if not root.is_dir():
            raise DataError(f"dataset root not found: {root}")
        return cls(str(root / f"{split}A"), str(root / f"{split}B"), **kwargs)

    def __len__(self):
        return len(self.a) // self.batch_size

    def _generator(self, epoch: int, stream: int) -> torch.Generator:
        return torch.Generator().manual_seed((self.shuffle_seed * 1_000_003 + epoch) * 4 + stream)

    def _maybe_flip(self, img, g):
        if self.flip and bool(torch.rand((), generator=g) < 0.5):
            return img.flip(-1)
        return img

    def batches(self, epoch: int, start: int = 0):
        """Yield ``(x, y)`` batches of epoch ``epoch``, skipping the first ``start`` batches."""
        order_a = torch.randperm(len(self.a), generator=self._generator(epoch, 0)).tolist()
        order_b = torch.randperm(len(self.b), generator=self._generator(epoch, 1)).tolist()
        flip_g = self._generator(epoch, 2)
        bs = self.batch_size
        for step in range(len(self)):
            xs, ys = [], []
            for j in range(step * bs, (step + 1) * bs):
                xs.append(self._maybe_flip(self.a[order_a[j]], flip_g))
                ys.append(self._maybe_flip(self.b[order_b[j % len(self.b)]], flip_g))
            if step >= start:
                yield torch.stack(xs), torch.stack(ys)


def load_unpaired(spec: UnpairedDataset, epoch: int = 0):
    """Independent per-domain iterators over one epoch: A once, B cyclically (endless)."""
    order_a = torch.randperm(len(spec.a), generator=spec._generator(epoch, 0)).tolist()
    order_b = torch.randperm(len(spec.b), generator=spec._generator(epoch, 1)).tolist()

    def iter_a():
        for i in order_a:
            yield spec.a[i].unsqueeze(0)

    def iter_b():
        i = 0
        while True:
            yield spec.b[order_b[i % len(order_b)]].unsqueeze(0)
            i += 1

    return iter_a(), iter_b()


# -- toy domains -----------------------------------------------------------------

@dataclass
class ToyDomainSpec:
    shape_set: list = field(default_factory=lambda: ["circle", "square", "triangle"])
    hue_start: float = 0.0  # degrees
    hue_width: float = 60.0
    hue_rotation: float = 120.0
    size: int = 64
    n_images: int = 200
    n_test: int = 0
    max_shapes: int = 3
    background: float = 0.2  # grey level, hue-free
    seed: int = 0


def _draw_toy(rng: random.Random, spec: ToyDomainSpec, hue_offset: float) -> Image.Image:
    s = spec.size
    bg = int(round(spec.background * 255))
    im = Image.new("RGB", (s, s), (bg, bg, bg))
    draw = ImageDraw.Draw(im)
    for _ in range(rng.randint(1, spec.max_shapes)):
        kind = rng.choice(spec.shape_set)
        r = rng.uniform(0.12, 0.25) * s
        cx, cy = rng.uniform(r, s - r), rng.uniform(r, s - r)
        hue = (spec.hue_start + rng.uniform(0, spec.hue_width) + hue_offset) % 360.0
        rgb = colorsys.hsv_to_rgb(hue / 360.0, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0))
        color = tuple(int(round(c * 255)) for c in rgb)
        if kind == "circle":
            draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
        elif kind == "square":
            draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=color)
        elif kind == "triangle":
            pts = [(cx + r * math.cos(a), cy + r * math.sin(a))
                   for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
            draw.polygon(pts, fill=color)
        else:
            raise DataError(f"unknown toy shape {kind!r}")
    return im


def synth_toy(spec: ToyDomainSpec, out_dir) -> Path:
    """Write trainA/trainB (and testA/testB when ``n_test``) PNGs plus ``manifest.json``.

    Domain B uses an independent draw of the same scene distribution with every shape's
    hue rotated by ``spec.hue_rotation`` degrees.
    """
    out = Path(out_dir)
    splits = [("train", spec.n_images)] + ([("test", spec.n_test)] if spec.n_test else [])
    try:
        for split_i, (split, n) in enumerate(splits):
            for dom_i, (dom, offset) in enumerate((("A", 0.0), ("B", spec.hue_rotation))):
                folder = out / f"{split}{dom}"
                folder.mkdir(parents=True, exist_ok=True)
                rng = random.Random(spec.seed * 100 + split_i * 10 + dom_i)
                for i in range(n):
                    _draw_toy(rng, spec, offset).save(folder / f"{i:05d}.png")
        (out / "manifest.json").write_text(json.dumps({"generator": "toy-hue-shift", "spec": asdict(spec)}, indent=2))
    except OSError as exc:
        raise DataError(f"failed writing toy dataset under {out}: {exc}") from exc
    return out


def rotate_hue(image: torch.Tensor, degrees: float) -> torch.Tensor:
    """Hue-rotate a ``(3, H, W)`` image in [-1, 1] (the exact toy A->B map, up to quantization)."""
    hsv = np.array(Image.fromarray(to_uint8(image)).convert("HSV"), dtype=np.int32)
    hsv[..., 0] = (hsv[..., 0] + int(round(degrees / 360.0 * 256))) % 256
    rgb = Image.fromarray(hsv.astype(np.uint8), mode="HSV").convert("RGB")
    return torch.from_numpy(np.asarray(rgb, dtype=np.float32)).permute(2, 0, 1) / 127.5 - 1.0


def mean_hue(images: torch.Tensor, min_saturation: float = 0.5) -> float:
    """Circular mean hue (degrees) over saturated pixels of an ``(N, 3, H, W)`` batch."""
    angles = []
    for img in images:
        hsv = np.array(Image.fromarray(to_uint8(img)).convert("HSV"), dtype=np.float64) / 255.0
        mask = hsv[..., 1] >= min_saturation
        angles.append(hsv[..., 0][mask] * 2 * np.pi)
    a = np.concatenate(angles)
    if a.size == 0:
        raise DataError("no saturated pixels to measure hue on")
    return float(np.degrees(np.arctan2(np.sin(a).mean(), np.cos(a).mean())) % 360.0)
