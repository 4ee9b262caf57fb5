"""Projection / prediction MLPs and the optional pre-projection alignment."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigurationError, NumericalDegeneracyError, UsageError

ENCODER = "encoder"
DECODER = "decoder"


@dataclass
class HeadConfig:
    latent_dim: int = 256
    layers: int = 2
    layer_norm: bool = True

    def __post_init__(self):
        if self.layers < 1 or self.latent_dim < 1:
            raise ConfigurationError("head needs at least one layer and a positive latent_dim")


@dataclass
class LatentSet:
    vectors: torch.Tensor  # (n, latent_dim)
    branch: str
    normalized: bool = False

    def __len__(self):
        return self.vectors.shape[0]


def _mlp(in_dim, cfg: HeadConfig, norm_last: bool):
    mods: list[nn.Module] = []
    dim = in_dim
    for i in range(cfg.layers):
        last = i == cfg.layers - 1
        mods.append(nn.Linear(dim, cfg.latent_dim))
        if cfg.layer_norm and (norm_last or not last):
            mods.append(nn.LayerNorm(cfg.latent_dim))
        if not last:
            mods.append(nn.ReLU(True))
        dim = cfg.latent_dim
    return nn.Sequential(*mods)


def width_key(channels: int) -> str:
    return f"c{channels}"


def pair_key(pair) -> str:
    return f"h{pair[0]}_h{pair[1]}"


class ContentHeads(nn.Module):
    """Holds one projection per channel width, a single predictor, and per-pair aligners.

    ``pairs`` maps ``(encoder_tap, decoder_tap)`` to ``(encoder_channels, decoder_channels)``.
    Aligners exist only for pairs in ``aligned_pairs`` and map encoder channels onto the
    decoder's width; when the widths already agree they start as the identity.
    """

    def __init__(self, pairs: dict, config: HeadConfig | None = None, aligned_pairs=()):
        super().__init__()
        self.config = cfg = config or HeadConfig()
        self.pair_channels = dict(pairs)
        widths = set()
        for pair, (c_enc, c_dec) in self.pair_channels.items():
            if c_enc != c_dec and pair not in aligned_pairs:
                raise ConfigurationError(
                    f"pair {pair} has channel widths {c_enc} vs {c_dec}; enable alignment for asymmetric pairs"
                )
            widths.add(c_dec)
        self.projections = nn.ModuleDict({width_key(c): _mlp(c, cfg, norm_last=True) for c in sorted(widths)})
        self.predictor = _mlp(cfg.latent_dim, cfg, norm_last=False)
        self.aligners = nn.ModuleDict()
        for pair in aligned_pairs:
            c_enc, c_dec = self.pair_channels[pair]
            lin = nn.Linear(c_enc, c_dec)
            if c_enc == c_dec:
                with torch.no_grad():
                    lin.weight.copy_(torch.eye(c_dec))
                    lin.bias.zero_()
            self.aligners[pair_key(pair)] = lin

    def projection_for(self, channels: int) -> nn.Module:
        key = width_key(channels)
        if key not in self.projections:
            raise ConfigurationError(
                f"no projection for channel width {channels}; available: {sorted(self.projections)}"
            )
        return self.projections[key]

    def project(self, patches: torch.Tensor, branch: str = DECODER) -> LatentSet:
        if branch not in (ENCODER, DECODER):
            raise UsageError(f"branch must be {ENCODER!r} or {DECODER!r}")
        proj = self.projection_for(patches.shape[-1])
        return LatentSet(proj(patches), branch)

    def predict(self, latents: LatentSet) -> LatentSet:
        if latents.branch != DECODER:
            raise UsageError("the predictor applies to decoder-branch latents only")
        if latents.normalized:
            raise UsageError("predict expects unnormalized latents")
        return LatentSet(self.predictor(latents.vectors), DECODER)

    def pre_project_align(self, pair, enc_map: torch.Tensor, dec_map: torch.Tensor):
        """Resize the encoder map to the decoder's grid and map its channels to the decoder width.

        Returns ``(aligned_encoder_map, decoder_map)``, both ``(N, C_dec, H_dec, W_dec)``.
        """
        key = pair_key(pair)
        if key not in self.aligners:
            raise ConfigurationError(f"pair {pair} has no aligner")
        if enc_map.shape[0] != dec_map.shape[0]:
            raise ConfigurationError("encoder and decoder maps have different batch sizes")
        if enc_map.shape[-2:] != dec_map.shape[-2:]:
            enc_map = F.interpolate(enc_map, size=dec_map.shape[-2:], mode="bilinear", align_corners=False)
        lin = self.aligners[key]
        if enc_map.shape[1] != lin.in_features:
            raise ConfigurationError(f"aligner for {pair} expects {lin.in_features} channels, got {enc_map.shape[1]}")
        aligned = torch.einsum("nchw,dc->ndhw", enc_map, lin.weight) + lin.bias[None, :, None, None]
        return aligned, dec_map


def normalize(latents: LatentSet, eps: float = 1e-12) -> LatentSet:
    v = latents.vectors
    norms = v.norm(dim=-1, keepdim=True)
    if v.shape[0] and bool((norms < eps).any()):
        raise NumericalDegeneracyError(
            f"{int((norms < eps).sum())} latent row(s) have norm below {eps}; cannot project to the unit sphere"
        )
    return LatentSet(v / norms, latents.branch, normalized=True)
