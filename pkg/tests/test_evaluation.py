import hashlib

import mpmath
import numpy as np
import pytest
import torch

from samestage.dag import DagConfig, sample
from samestage.errors import ConfigurationError, DataError, DimensionError, NumericalDegeneracyError
from samestage.evaluation import (
    FeatureStats, RandomEmbedder, edge_l1, edge_map, extract_features, fid, make_extractor,
    sampling_frequency_map, save_heatmap, trace_sqrt_product, weight_density,
)


def stats(mean, cov, n=10):
    return FeatureStats(np.asarray(mean, float), np.asarray(cov, float), n)


def random_spd(d, rng):
    m = rng.normal(size=(d, d))
    return m @ m.T + 0.1 * np.eye(d)


def oracle_fid(m1, c1, m2, c2, dps=50):
    """Extended-precision FID: square root of C1 C2 by mpmath's dense solver."""
    with mpmath.workdps(dps):
        a, b = mpmath.matrix(c1.tolist()), mpmath.matrix(c2.tolist())
        root = mpmath.sqrtm(a * b)
        tr = sum(root[i, i] for i in range(a.rows))
        diff = mpmath.matrix((m1 - m2).tolist())
        val = sum(x * x for x in diff) + sum(a[i, i] + b[i, i] for i in range(a.rows)) - 2 * tr
        return float(mpmath.re(val))


def test_fid_same_stats_is_zero():
    rng = np.random.default_rng(0)
    c = random_spd(6, rng)
    s = stats(rng.normal(size=6), c)
    assert abs(fid(s, s)) < 1e-6


def test_fid_unit_mean_shift():
    e = np.zeros(5)
    e[2] = 1.0
    assert abs(fid(stats(np.zeros(5), np.eye(5)), stats(e, np.eye(5))) - 1.0) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_fid_matches_extended_precision_oracle(seed):
    rng = np.random.default_rng(seed)
    d = 6
    m1, m2 = rng.normal(size=d), rng.normal(size=d)
    c1, c2 = random_spd(d, rng), random_spd(d, rng)
    ours = fid(stats(m1, c1), stats(m2, c2))
    ref = oracle_fid(m1, c1, m2, c2)
    assert abs(ours - ref) / abs(ref) < 1e-6
    assert abs(fid(stats(m2, c2), stats(m1, c1)) - ours) < 1e-8


def test_trace_sqrt_commuting_case():
    a, b = np.diag([1.0, 4.0, 9.0]), np.diag([4.0, 1.0, 1.0])
    assert abs(trace_sqrt_product(a, b) - (2 + 2 + 3)) < 1e-12


def test_singular_covariances_are_clamped_not_rejected():
    a = np.diag([1.0, 0.0, 0.0])
    assert fid(stats(np.zeros(3), a), stats(np.zeros(3), a)) == pytest.approx(0.0, abs=1e-9)


def test_fid_errors():
    with pytest.raises(DimensionError):
        fid(stats(np.zeros(2), np.eye(2)), stats(np.zeros(3), np.eye(3)))
    with pytest.raises(NumericalDegeneracyError):
        trace_sqrt_product(np.eye(2), np.diag([1.0, -1.0]))
    with pytest.raises(DimensionError):
        FeatureStats.from_features(np.zeros((1, 4)))


def test_fid_halves_decrease_with_n():
    rng = np.random.default_rng(0)
    d = 8
    vals = {}
    for n in (64, 256):
        feats = rng.normal(size=(2 * n, d))
        vals[n] = fid(FeatureStats.from_features(feats[:n]), FeatureStats.from_features(feats[n:]))
    assert vals[256] < vals[64] < 1.0


def test_embedder_rows_and_stability():
    imgs = torch.rand(5, 3, 32, 32) * 2 - 1
    imgs[3] = imgs[1]
    f1 = extract_features(imgs, RandomEmbedder(seed=0))
    f2 = extract_features(imgs, make_extractor("builtin"))
    assert f1.shape[0] == 5
    assert np.array_equal(f1[1], f1[3])
    assert hashlib.sha256(f1.tobytes()).hexdigest() == hashlib.sha256(f2.tobytes()).hexdigest()


def test_extractor_errors(tmp_path):
    with pytest.raises(DataError, match="weights"):
        make_extractor(f"inception:{tmp_path / 'pt_inception.pth'}")
    with pytest.raises(DataError):
        make_extractor(f"torchscript:{tmp_path / 'missing.pt'}")
    with pytest.raises(ConfigurationError):
        make_extractor("nonsense")


@pytest.mark.filterwarnings("ignore::DeprecationWarning")
def test_torchscript_extractor(tmp_path):
    net = torch.jit.script(torch.nn.Sequential(torch.nn.AdaptiveAvgPool2d(1), torch.nn.Flatten(), torch.nn.Linear(3, 2)))
    path = tmp_path / "net.pt"
    net.save(str(path))
    feats = extract_features(torch.zeros(3, 3, 4, 4), make_extractor(f"torchscript:{path}"))
    assert feats.shape == (3, 2)


def test_edge_metrics():
    flat = torch.zeros(1, 3, 16, 16)
    assert float(edge_map(flat).abs().max()) == 0.0
    step = flat.clone()
    step[..., 8:] = 1.0
    e = edge_map(step)
    assert float(e[..., 7:9].min()) > 0 and float(e[..., :, :6].max()) == 0.0
    assert edge_l1(step, step) == 0.0
    assert edge_l1(step, flat) > 0
    # a pure colour permutation with equal luminance weights leaves no edge difference
    assert edge_l1(step, step * 1.0) == 0.0


def test_sampling_map_single_entry(tmp_path):
    freq = sampling_frequency_map([{"tap": 7, "grid": [4, 4], "indices": [0]}], (4, 4), 7)
    assert freq[0, 0] == 1.0 and freq.sum() == 1.0
    path = save_heatmap(freq, tmp_path / "h.png")
    assert path.is_file()
    with pytest.raises(DataError):
        sampling_frequency_map([], (4, 4))


def test_sampling_map_uniform_is_flat():
    g = torch.Generator().manual_seed(0)
    cfg = DagConfig(n_patches=16, oversampling_ratio=1, importance_ratio=0.0)
    hist = [{"tap": 7, "grid": [8, 8], "indices": sample(None, cfg, g, grid=(8, 8)).indices.tolist()}
            for _ in range(2000)]
    freq = sampling_frequency_map(hist, (8, 8), 7)
    assert freq.min() > 0.7  # ~500 hits per cell, +-5 sigma


def test_sampling_map_concentrates_on_fake_region():
    g = torch.Generator().manual_seed(0)
    scores = torch.ones(8, 8)
    scores[:4, :4] = -1.0  # low score = confidently fake
    cfg = DagConfig(n_patches=16, oversampling_ratio=4, importance_ratio=0.5)
    hist = [{"tap": 7, "grid": [8, 8], "indices": sample(scores, cfg, g).indices.tolist()} for _ in range(500)]
    freq = sampling_frequency_map(hist, (8, 8), 7)
    assert freq[:4, :4].mean() > 2 * freq[4:, 4:].mean()


def _ckpt(**params):
    return {"params": {"generator": params, "heads": {}}}


def test_weight_density_zero_spike_and_normal(tmp_path):
    res = weight_density(_ckpt(w=torch.zeros(100)), "generator", bins=11)
    assert res["density"].argmax() == 5 and res["std"] == 0.0
    torch.manual_seed(0)
    res = weight_density(_ckpt(w=torch.randn(200_000)), "generator", tmp_path / "wd", bins=60)
    assert abs(res["std"] - 1.0) < 0.05
    peak = res["centers"][res["density"].argmax()]
    assert abs(peak) < 0.3 and res["density"][0] < 0.05 * res["density"].max()
    assert (tmp_path / "wd.csv").is_file() and (tmp_path / "wd.png").is_file()


def test_weight_density_errors():
    with pytest.raises(ConfigurationError):
        weight_density(_ckpt(w=torch.zeros(3)), "critic")
    with pytest.raises(ConfigurationError):
        weight_density(_ckpt(w=torch.zeros(3)), "heads")
