"""Objective terms: patch similarity with stop-gradient, LSGAN, identity, weighted total."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ConfigurationError, ContractViolation, DimensionError
from .heads import DECODER, ENCODER, ContentHeads, LatentSet, normalize

UNIT_TOL = 1e-4


@dataclass
class LossWeights:
    lambda_nce: float = 2.0
    lambda_idt: float = 10.0

    def __post_init__(self):
        if self.lambda_nce < 0 or self.lambda_idt < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass
class StagePairSelection:
    pairs: list = field(default_factory=lambda: [(7, 24), (13, 18)])
    asymmetric: bool = False
    last_tap: int = 31

    def __post_init__(self):
        self.pairs = [tuple(int(t) for t in p) for p in self.pairs]
        if not self.pairs:
            raise ConfigurationError("at least one stage pair is required")
        for enc, dec in self.pairs:
            if not self.asymmetric and dec != self.last_tap - enc:
                raise ConfigurationError(
                    f"pair (h_{enc}, h_{dec}) is not same-stage (expected h_{self.last_tap - enc}); "
                    "set stages.asymmetric to allow it"
                )


@dataclass
class PatchPair:
    """Patches gathered at identical positions from an encoder tap (k) and a decoder tap (q)."""

    pair: tuple
    enc: torch.Tensor  # (S, C)
    dec: torch.Tensor  # (S, C)
    enc_positions: torch.Tensor
    dec_positions: torch.Tensor


def similarity_loss(p, z, normalize_inputs: bool = False):
    """Per-row ``||p - z||^2`` between unit vectors (``2 - 2 cos``); scalar for 1-D input."""
    if p.shape != z.shape:
        raise DimensionError(f"shape mismatch {tuple(p.shape)} vs {tuple(z.shape)}")
    if normalize_inputs:
        p = p / p.norm(dim=-1, keepdim=True)
        z = z / z.norm(dim=-1, keepdim=True)
    else:
        with torch.no_grad():
            for name, v in (("p", p), ("z", z)):
                if v.numel() and float((v.norm(dim=-1) - 1).abs().max()) > UNIT_TOL:
                    raise ContractViolation(f"{name} is not unit-norm within {UNIT_TOL}")
    return ((p - z) ** 2).sum(dim=-1)


def pair_loss(heads: ContentHeads, k: torch.Tensor, q: torch.Tensor, stop_gradient: bool = True):
    """Mean similarity over the patches of one pair.

    Returns ``(loss, decoder_latents)`` where ``decoder_latents`` are the normalized decoder
    projections (used by the collapse monitor).
    """
    z = heads.project(k, ENCODER)
    if stop_gradient:
        z = LatentSet(z.vectors.detach(), ENCODER)
    z_dec = heads.project(q, DECODER)
    p = heads.predict(z_dec)
    per_patch = similarity_loss(normalize(p).vectors, normalize(z).vectors)
    with torch.no_grad():
        monitor = normalize(LatentSet(z_dec.vectors.detach(), DECODER)).vectors
    return per_patch.mean(), monitor


def multistage_loss(heads: ContentHeads, patch_pairs, stop_gradient: bool = True):
    """Sum over stage pairs of the per-pair mean patch similarity.

    Returns ``(total, {pair: value}, [decoder latents per pair])``.
    """
    total = None
    per_pair = {}
    monitors = []
    for pp in patch_pairs:
        if pp.enc.shape[0] != pp.dec.shape[0] or not torch.equal(pp.enc_positions, pp.dec_positions):
            raise ContractViolation(f"pair {pp.pair}: encoder and decoder patches come from different positions")
        value, monitor = pair_loss(heads, pp.enc, pp.dec, stop_gradient)
        per_pair[pp.pair] = value
        monitors.append(monitor)
        total = value if total is None else total + value
    if total is None:
        raise ConfigurationError("multistage loss needs at least one pair")
    return total, per_pair, monitors


def gan_loss_d(real_scores, fake_scores):
    return ((real_scores - 1) ** 2).mean() + (fake_scores ** 2).mean()


def gan_loss_g(fake_scores):
    return ((fake_scores - 1) ** 2).mean()


def identity_loss(g_of_y, y):
    if g_of_y.shape != y.shape:
        raise DimensionError(f"identity loss shape mismatch {tuple(g_of_y.shape)} vs {tuple(y.shape)}")
    return (g_of_y - y).abs().mean()


def total_loss(gan, multistage, identity, weights: LossWeights | None = None, identity_active: bool = True):
    weights = weights or LossWeights()
    idt_weight = weights.lambda_idt if identity_active else 0.0
    return gan + weights.lambda_nce * multistage + idt_weight * identity
