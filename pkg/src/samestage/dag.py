"""Discriminator-guided patch position sampling and patch gathering.

Sampling on an ``H x W`` grid:

1. draw ``k*K`` candidate positions uniformly without replacement;
2. sort the candidates by discriminator score (ascending = most fake first);
3. keep the first ``floor(beta*K)`` as importance picks;
4. fill the remaining slots uniformly at random (excluding the picks when ``dedupe``).

With ``k=1, beta=0`` this is plain uniform sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError

ASCENDING = "ascending"
DESCENDING = "descending"


@dataclass
class DagConfig:
    n_patches: int = 256
    oversampling_ratio: int = 4
    importance_ratio: float = 0.5
    dedupe: bool = True
    order: str = ASCENDING

    def __post_init__(self):
        if self.n_patches < 1:
            raise ConfigurationError("n_patches must be >= 1")
        if self.oversampling_ratio < 1:
            raise ConfigurationError("oversampling_ratio k must be >= 1")
        if not 0.0 <= self.importance_ratio <= 1.0:
            raise ConfigurationError("importance_ratio beta must lie in [0, 1]")
        if self.order not in (ASCENDING, DESCENDING):
            raise ConfigurationError(f"order must be {ASCENDING!r} or {DESCENDING!r}")

    @property
    def importance_count(self) -> int:
        # small epsilon so that e.g. 0.3 * 10 floors to 3, not 2
        return int(math.floor(self.importance_ratio * self.n_patches + 1e-9))

    @property
    def uses_scores(self) -> bool:
        return self.importance_count > 0


@dataclass
class PatchIndexSet:
    indices: torch.Tensor  # (K,) flat positions, importance picks first
    importance_count: int
    grid: tuple
    source_tap: int | None = None
    candidates: torch.Tensor | None = None  # oversampled positions, for auditing

    def __len__(self):
        return self.indices.numel()

    @property
    def importance_indices(self) -> torch.Tensor:
        return self.indices[: self.importance_count]


def upsample_scores(scores: torch.Tensor, target) -> torch.Tensor:
    """Bilinearly resize a (detached) score grid to ``target = (H, W)``; returns an ``(H, W)`` map.

    ``scores`` may be ``(h, w)``, ``(1, h, w)`` or ``(1, 1, h, w)``.
    """
    s = scores.detach()
    while s.dim() < 4:
        s = s.unsqueeze(0)
    if s.shape[0] != 1 or s.shape[1] != 1:
        raise DimensionError(f"expected a single score grid, got shape {tuple(scores.shape)}")
    target = tuple(int(t) for t in target)
    if tuple(s.shape[-2:]) == target:
        return s[0, 0].clone()
    return F.interpolate(s, size=target, mode="bilinear", align_corners=False)[0, 0]


def sample(dense_scores, cfg: DagConfig, generator: torch.Generator | None = None,
           grid=None, source_tap=None) -> PatchIndexSet:
    """Pick ``cfg.n_patches`` flat positions on the grid of ``dense_scores``.

    ``dense_scores`` may be ``None`` when no importance picks are requested; pass ``grid``
    then.
    """
    if dense_scores is not None:
        grid = tuple(dense_scores.shape[-2:])
    if grid is None:
        raise ConfigurationError("sample needs either dense scores or a grid size")
    h, w = grid
    hw = h * w
    K = cfg.n_patches
    n_imp = cfg.importance_count
    if K > hw or (n_imp > 0 and cfg.oversampling_ratio * K > hw):
        raise ConfigurationError(
            f"cannot draw k*K = {cfg.oversampling_ratio}*{K} candidates from a {h}x{w} grid"
        )
    candidates = None
    if n_imp > 0:
        if dense_scores is None:
            raise ConfigurationError("importance sampling (beta > 0) needs a score map")
        candidates = torch.randperm(hw, generator=generator)[: cfg.oversampling_ratio * K]
        cand_scores = dense_scores.reshape(-1)[candidates]
        order = torch.sort(cand_scores, descending=cfg.order == DESCENDING, stable=True).indices
        picked = candidates[order[:n_imp]]
    else:
        picked = torch.empty(0, dtype=torch.long)
    n_cover = K - n_imp
    if n_cover:
        perm = torch.randperm(hw, generator=generator)
        if cfg.dedupe and n_imp:
            taken = torch.zeros(hw, dtype=torch.bool)
            taken[picked] = True
            perm = perm[~taken[perm]]
        cover = perm[:n_cover]
        indices = torch.cat([picked, cover])
    else:
        indices = picked
    return PatchIndexSet(indices, n_imp, (h, w), source_tap, candidates)


def gather_patches(feature, idx: PatchIndexSet) -> torch.Tensor:
    """Channel vectors of a single ``(C, H, W)`` map at ``idx`` positions -> ``(K, C)``."""
    t = feature.tensor if hasattr(feature, "tensor") else feature
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise DimensionError("gather_patches takes one feature map; index the batch first")
        t = t[0]
    if tuple(t.shape[-2:]) != tuple(idx.grid):
        raise DimensionError(f"index set built for grid {idx.grid}, feature map is {tuple(t.shape[-2:])}")
    hw = t.shape[-1] * t.shape[-2]
    if idx.indices.numel() and (int(idx.indices.min()) < 0 or int(idx.indices.max()) >= hw):
        raise IndexError(f"patch index out of range for a grid of {hw} positions")
    return t.flatten(1)[:, idx.indices].t()
