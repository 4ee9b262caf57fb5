import pytest
import torch
from torch import nn

from samestage.errors import ConfigurationError, NumericalDegeneracyError, UsageError
from samestage.heads import DECODER, ENCODER, ContentHeads, HeadConfig, LatentSet, normalize

PAIRS = {(7, 24): (128, 128), (13, 18): (256, 256)}


@pytest.fixture
def heads():
    return ContentHeads(PAIRS)


def test_one_projection_per_width_shared_across_branches(heads):
    assert sorted(heads.projections) == ["c128", "c256"]
    patches = torch.randn(5, 128)
    enc = heads.project(patches, ENCODER)
    dec = heads.project(patches, DECODER)
    assert torch.equal(enc.vectors, dec.vectors)
    assert heads.projection_for(128) is heads.projections["c128"]


def test_projection_architecture(heads):
    proj = heads.projections["c128"]
    kinds = [type(m) for m in proj]
    assert kinds == [nn.Linear, nn.LayerNorm, nn.ReLU, nn.Linear, nn.LayerNorm]
    pred = [type(m) for m in heads.predictor]
    assert pred == [nn.Linear, nn.LayerNorm, nn.ReLU, nn.Linear]  # no norm after the last layer


@pytest.mark.parametrize("channels", [128, 256])
def test_latent_dim_is_256(heads, channels):
    assert heads.project(torch.randn(3, channels)).vectors.shape == (3, 256)


def test_empty_and_duplicate_rows(heads):
    assert len(heads.project(torch.zeros(0, 128))) == 0
    assert len(heads.predict(heads.project(torch.zeros(0, 128)))) == 0
    row = torch.randn(1, 128)
    out = heads.project(torch.cat([row, row])).vectors
    assert torch.equal(out[0], out[1])


def test_width_mismatch(heads):
    with pytest.raises(ConfigurationError):
        heads.project(torch.randn(2, 64))


def test_asymmetric_pair_needs_alignment():
    with pytest.raises(ConfigurationError):
        ContentHeads({(3, 24): (64, 128)})


def test_predict_branch_discipline(heads):
    with pytest.raises(UsageError):
        heads.predict(heads.project(torch.randn(2, 128), ENCODER))
    with pytest.raises(UsageError):
        heads.predict(normalize(heads.project(torch.randn(2, 128), DECODER)))


def test_identity_initialized_predictor_is_identity():
    h = ContentHeads(PAIRS, HeadConfig(latent_dim=8, layer_norm=False))
    with torch.no_grad():
        for m in h.predictor:
            if isinstance(m, nn.Linear):
                m.weight.copy_(torch.eye(8))
                m.bias.zero_()
    x = torch.rand(4, 8)  # non-negative so the hidden ReLU is transparent
    out = h.predict(LatentSet(x, DECODER)).vectors
    assert torch.equal(out, x)


def test_predictor_gets_gradient_only_from_decoder_branch(heads):
    k = torch.randn(6, 128, requires_grad=True)
    q = torch.randn(6, 128, requires_grad=True)
    z = heads.project(k, ENCODER).vectors.detach()
    p = heads.predict(heads.project(q, DECODER)).vectors
    ((normalize(LatentSet(p, DECODER)).vectors - normalize(LatentSet(z, ENCODER)).vectors) ** 2).sum().backward()
    assert all(prm.grad is not None for prm in heads.predictor.parameters())
    assert k.grad is None
    assert q.grad is not None and q.grad.abs().sum() > 0


def test_normalize_examples():
    v = torch.zeros(1, 256)
    v[0, :2] = torch.tensor([3.0, 4.0])
    out = normalize(LatentSet(v, DECODER))
    assert out.normalized
    assert torch.allclose(out.vectors[0, :2], torch.tensor([0.6, 0.8]))
    assert torch.count_nonzero(out.vectors[0, 2:]) == 0


def test_normalize_idempotent_and_unit():
    torch.manual_seed(0)
    once = normalize(LatentSet(torch.randn(100, 256, dtype=torch.float64), DECODER))
    twice = normalize(LatentSet(once.vectors, DECODER))
    assert torch.allclose(once.vectors.norm(dim=1), torch.ones(100, dtype=torch.float64), atol=1e-6)
    assert (twice.vectors - once.vectors).abs().max() < 1e-7


def test_normalize_rejects_zero_rows():
    with pytest.raises(NumericalDegeneracyError):
        normalize(LatentSet(torch.zeros(2, 4), DECODER))


def test_pre_project_align_resizes_and_maps_channels():
    h = ContentHeads({(3, 24): (64, 128)}, aligned_pairs=[(3, 24)])
    enc = torch.randn(1, 64, 256, 256)
    dec = torch.randn(1, 128, 128, 128)
    a, d = h.pre_project_align((3, 24), enc, dec)
    assert a.shape == d.shape == (1, 128, 128, 128)
    assert d is dec


def test_pre_project_align_identity_for_symmetric_pairs():
    h = ContentHeads({(7, 24): (16, 16)}, aligned_pairs=[(7, 24)])
    enc = torch.randn(2, 16, 8, 8)
    a, _ = h.pre_project_align((7, 24), enc, torch.randn(2, 16, 8, 8))
    assert torch.allclose(a, enc, atol=1e-6)
