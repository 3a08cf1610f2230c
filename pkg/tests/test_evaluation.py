import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from vcae.config import ModelConfig
from vcae.evaluation import (HIST_BINS, FeatureCache, FeatureExtractor, MissingArtifactError,
                             classifier_features, emit_plots, fid_score, frechet_distance, image_grid,
                             latent_stats, moments, plot_histograms, raw_pixels, train_classifier,
                             traversals)
from vcae.models import AutoencoderPair, build_pair


def _random_moments(rng, d):
    a = rng.standard_normal((d, d))
    return rng.standard_normal(d), a @ a.T


def test_identical_moments_zero():
    mu, cov = _random_moments(np.random.default_rng(0), 4)
    assert frechet_distance(mu, cov, mu, cov) == pytest.approx(0.0, abs=1e-9)


def test_closed_forms_1d():
    assert frechet_distance([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0)
    assert frechet_distance([0.0], [[1.0]], [0.0], [[4.0]]) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(d=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_symmetry_and_rotation_invariance(d, seed):
    rng = np.random.default_rng(seed)
    m1, c1 = _random_moments(rng, d)
    m2, c2 = _random_moments(rng, d)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    a = frechet_distance(m1, c1, m2, c2)
    assert a >= 0
    assert frechet_distance(m2, c2, m1, c1) == pytest.approx(a, rel=1e-7, abs=1e-8)
    rot = frechet_distance(q @ m1, q @ c1 @ q.T, q @ m2, q @ c2 @ q.T)
    assert rot == pytest.approx(a, rel=1e-7, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(d=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_diagonal_closed_form(d, seed):
    rng = np.random.default_rng(seed)
    s1, s2 = rng.uniform(0.1, 3, d), rng.uniform(0.1, 3, d)
    m1, m2 = rng.standard_normal(d), rng.standard_normal(d)
    expected = np.sum((m1 - m2) ** 2) + np.sum((s1 - s2) ** 2)
    assert frechet_distance(m1, np.diag(s1 ** 2), m2, np.diag(s2 ** 2)) == pytest.approx(expected, rel=1e-9)


def test_rejects_asymmetric():
    with pytest.raises(ValueError):
        frechet_distance([0, 0], [[1, 0.5], [0, 1]], [0, 0], np.eye(2))


def test_fid_same_batch_zero_and_permutation_invariant():
    x = torch.rand(300, 6, generator=torch.Generator().manual_seed(0))
    ext = raw_pixels((6,))
    assert fid_score(x, x, ext) < 1e-6
    y = torch.rand(300, 6, generator=torch.Generator().manual_seed(1)) * 1.5
    perm = torch.randperm(300, generator=torch.Generator().manual_seed(2))
    assert fid_score(x, y, ext) == pytest.approx(fid_score(x[perm], y, ext), rel=1e-9)


def test_extractor_contract():
    with pytest.raises(ValueError):
        FeatureExtractor(lambda x: x, 1)
    assert raw_pixels((1, 2, 2)).provenance == "raw_pixels"
    with pytest.raises(ValueError):
        moments(np.zeros((1, 3)))


def test_feature_cache(tmp_path):
    calls = []

    def fn(x):
        calls.append(1)
        return x * 2

    ext = FeatureExtractor(fn, 3, "double")
    cache = FeatureCache(tmp_path)
    x = torch.arange(6.0).reshape(2, 3)
    a = cache.get("toy", ext, "test", x)
    b = cache.get("toy", ext, "test", x)
    assert np.array_equal(a, b) and len(calls) == 1
    assert cache.path("toy", "double", "test").name == "toy__double__test.npz"


@pytest.mark.slow
def test_classifier_fid_separates_noise(mnist_root):
    from vcae.data import load_mnist

    tr = load_mnist(mnist_root, "train").subset(10_000, 0)
    te = load_mnist(mnist_root, "test").subset(4000, 0)
    net = train_classifier(tr.data, tr.labels, epochs=2, seed=0)
    ext = classifier_features(net)
    assert ext.dim == 64 and ext.provenance == "trained_classifier"
    baseline = fid_score(te.data[:2000], te.data[2000:], ext)
    noise = torch.rand(2000, 1, 28, 28, generator=torch.Generator().manual_seed(0))
    assert fid_score(te.data[:2000], noise, ext) >= 10 * baseline


class _Identity(torch.nn.Module):
    def forward(self, x):
        return x


def _identity_pair(d=2):
    return AutoencoderPair(_Identity(), _Identity(), d, (d,), 1, "identity")


def test_latent_stats_identity(tmp_path):
    x = torch.randn(20_000, 2, generator=torch.Generator().manual_seed(0))
    stats = latent_stats(_identity_pair(), x, tmp_path)
    assert stats["total_variance"] == pytest.approx(2.0, abs=0.05)
    assert (tmp_path / "latent_scatter.png").exists()
    assert latent_stats(_identity_pair(), x) == {k: v for k, v in stats.items() if k != "scatter"}


def test_latent_stats_constant():
    pair = _identity_pair()
    stats = latent_stats(pair, torch.ones(50, 2))
    assert stats["total_variance"] == 0.0


def test_histograms_default_bins(tmp_path, monkeypatch):
    import matplotlib.axes

    seen = []
    orig = matplotlib.axes.Axes.hist
    monkeypatch.setattr(matplotlib.axes.Axes, "hist",
                        lambda self, x, bins=None, **kw: seen.append(bins) or orig(self, x, bins=bins, **kw))
    plot_histograms(np.random.default_rng(0).standard_normal((100, 3)), tmp_path / "h.png")
    assert seen == [HIST_BINS] * 3 and HIST_BINS == 80


def test_traversal_grid_layout(tmp_path):
    pair = build_pair(ModelConfig(z_dim=6, architecture="factor32_desk"))
    z = torch.randn(40, 6)
    imgs = traversals(pair, z, steps=10)
    assert imgs.shape == (60, 3, 32, 32)
    grid = image_grid(imgs, 10)
    assert grid.shape == (6 * 32, 10 * 32, 3)
    paths = emit_plots(tmp_path, z, None, pair, torch.rand(4, 3, 32, 32), imgs[:20])
    names = {p.name for p in paths}
    assert {"latent_hist.png", "traversals.png", "samples.png", "reconstructions.png"} <= names
    assert Image.open(tmp_path / "traversals.png").size == (320, 192)


def test_traversal_rows_vary_one_dim():
    pair = _identity_pair(3)
    z = torch.randn(30, 3, generator=torch.Generator().manual_seed(0))
    out = traversals(pair, z, steps=5)
    mean = z.mean(0)
    for d in range(3):
        rows = out[d * 5:(d + 1) * 5]
        others = [i for i in range(3) if i != d]
        assert torch.allclose(rows[:, others], mean[others].expand(5, 2))
        assert rows[:, d].unique().numel() == 5


def test_missing_artifacts(tmp_path):
    with pytest.raises(MissingArtifactError, match="latents"):
        emit_plots(tmp_path / "p", np.zeros((0, 2)))
    assert not (tmp_path / "p").exists()
    with pytest.raises(MissingArtifactError):
        plot_histograms(None, tmp_path / "h.png")
    assert not (tmp_path / "h.png").exists()
