import gzip
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from vcae.config import ConfigError
from vcae.data import (MOG_MEANS, DataError, FactorDataset, balanced_subset_indices, data_root,
                       generate_factor_dataset, generate_mog, load_image_folder, load_mnist,
                       mog_dataset, preprocess_celeba, project_highdim, read_idx, reduced_mnist)


def test_mog_one_per_component():
    _, labels = generate_mog(4, seed=0)
    assert sorted(labels.tolist()) == [0, 1, 2, 3]


def test_mog_component_means():
    pts, labels = generate_mog(100_000, seed=1)
    for k, mean in enumerate(MOG_MEANS):
        assert np.abs(pts[labels == k].mean(0) - mean).max() < 0.02


def test_mog_deterministic_and_small_n():
    a, la = generate_mog(50, seed=3)
    b, lb = generate_mog(50, seed=3)
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    with pytest.raises(ConfigError):
        generate_mog(3, seed=0)


def test_projection_identity_and_shape():
    pts, _ = generate_mog(20, seed=0)
    assert np.array_equal(project_highdim(pts, 2, seed=0, identity=True), pts)
    assert project_highdim(pts, 100, seed=0).shape == (20, 100)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), dim=st.integers(2, 120))
def test_projection_is_isometric(seed, dim):
    pts = np.random.default_rng(seed).standard_normal((30, 2))
    y = project_highdim(pts, dim, seed)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(y[:, None] - y[None], axis=-1)
    off = ~np.eye(30, dtype=bool)
    assert np.abs(d1[off] / d0[off] - 1).max() < 1e-10


def test_mog_dataset_splits():
    tr, te = mog_dataset(100, 40, seed=0)
    assert tr.item_shape == (100,) and len(te) == 40
    assert not set(tr.indices) & set(te.indices)
    assert torch.isfinite(tr.data).all()


def test_iteration_order_is_seeded():
    tr, _ = mog_dataset(50, 4, seed=0)
    a = torch.cat(list(tr.iterate(7, seed=5)))
    b = torch.cat(list(tr.iterate(7, seed=5)))
    assert torch.equal(a, b)
    assert sorted(a[:, 0].tolist()) == sorted(tr.data[:, 0].tolist())


def test_data_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("VCAE_DATA_ROOT", str(tmp_path))
    assert data_root() == tmp_path
    assert data_root("x") == data_root("x")


# -------------------------------------------------------------- IDX parsing

def _write_idx(path, arr, gz=False):
    header = struct.pack(">HBB", 0, 8, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    raw = header + arr.astype(np.uint8).tobytes()
    if gz:
        raw = gzip.compress(raw)
    path.write_bytes(raw)


@pytest.mark.parametrize("gz", [False, True])
def test_read_idx_roundtrip(tmp_path, gz):
    arr = np.random.default_rng(0).integers(0, 256, (5, 4, 3)).astype(np.uint8)
    p = tmp_path / ("a.gz" if gz else "a")
    _write_idx(p, arr, gz)
    assert np.array_equal(read_idx(p), arr)


def test_read_idx_corrupt(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"\x00\x00\x09\x03" + b"\x00" * 12)
    with pytest.raises(DataError, match="bad"):
        read_idx(p)
    p.write_bytes(struct.pack(">HBBI", 0, 8, 1, 10) + b"\x01\x02")
    with pytest.raises(DataError, match="payload"):
        read_idx(p)


def test_missing_mnist_names_path(tmp_path):
    with pytest.raises(DataError, match=str(tmp_path)):
        load_mnist(tmp_path, "train")


def test_synthetic_mnist_layout(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (30, 28, 28))
    labels = np.arange(30) % 10
    _write_idx(tmp_path / "train-images-idx3-ubyte.gz", imgs, gz=True)
    _write_idx(tmp_path / "train-labels-idx1-ubyte.gz", labels, gz=True)
    ds = load_mnist(tmp_path, "train")
    assert ds.data.shape == (30, 1, 28, 28)
    assert 0.0 <= ds.data.min() and ds.data.max() <= 1.0
    assert torch.equal(ds.labels, torch.from_numpy(labels))


def test_balanced_subset():
    labels = np.repeat(np.arange(10), 100)
    idx = balanced_subset_indices(labels, 60, seed=0)
    assert len(idx) == 600 and np.bincount(labels[idx]).tolist() == [60] * 10
    assert np.array_equal(idx, balanced_subset_indices(labels, 60, seed=0))
    with pytest.raises(DataError):
        balanced_subset_indices(labels, 101, seed=0)


def test_real_mnist(mnist_root):
    assert len(load_mnist(mnist_root, "train")) == 60000
    assert len(load_mnist(mnist_root, "test")) == 10000
    r = reduced_mnist(mnist_root, seed=0)
    assert len(r) == 600 and np.bincount(r.labels.numpy()).tolist() == [60] * 10
    assert np.array_equal(r.indices, reduced_mnist(mnist_root, seed=0).indices)


# ---------------------------------------------------------- factor datasets

def test_small_factor_grid_distinct():
    ds = generate_factor_dataset({"object_hue": 2, "scale": 3})
    assert len(ds) == 6 and ds.images.shape == (6, 32, 32, 3)
    flat = ds.images.reshape(6, -1)
    assert len({row.tobytes() for row in flat}) == 6


def test_default_grid_size():
    assert len(generate_factor_dataset()) == 4800


def test_factor_grid_errors():
    with pytest.raises(ConfigError):
        generate_factor_dataset({"object_hue": 5})
    with pytest.raises(ConfigError):
        generate_factor_dataset({"object_hue": 1, "scale": 3})
    with pytest.raises(ConfigError):
        generate_factor_dataset({"object_hue": 100, "floor_hue": 100, "scale": 101})


@pytest.fixture(scope="module")
def factors():
    return generate_factor_dataset({"object_hue": 4, "floor_hue": 3, "wall_hue": 2, "scale": 3,
                                    "position": 3, "shape": 2})


def test_single_factor_change_changes_image(factors):
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = factors.sample_factors(1, rng)[0]
        k = rng.integers(factors.num_factors)
        w = v.copy()
        w[k] = (w[k] + 1 + rng.integers(factors.factor_sizes[k] - 1)) % factors.factor_sizes[k]
        a, b = factors.images[factors.index_of(v)], factors.images[factors.index_of(w)]
        assert not np.array_equal(a, b)


def test_index_map_is_bijection(factors):
    idx = np.arange(len(factors))
    assert np.array_equal(factors.index_of(factors.factors_of(idx)), idx)
    assert len({tuple(r) for r in factors.factors}) == len(factors)


def test_get_images_handles_unsorted_and_repeats(factors):
    idx = np.array([5, 1, 5, 0])
    x = factors.get_images(idx)
    assert x.shape == (4, 3, 32, 32)
    assert torch.equal(x[0], x[2])
    ref = torch.from_numpy(factors.images[1].astype(np.float32) / 255).permute(2, 0, 1)
    assert torch.equal(x[1], ref)


def test_factor_archive_roundtrip(tmp_path, factors):
    p = tmp_path / "f.npz"
    factors.save(p)
    back = FactorDataset.load(p)
    assert np.array_equal(back.images, factors.images)
    assert back.factor_names == factors.factor_names and back.factor_sizes == factors.factor_sizes
    with np.load(p) as d:
        assert set(d.files) == {"images", "factors", "factor_sizes", "factor_names"}


def test_factor_archive_rejects_wrong_order(tmp_path):
    ds = generate_factor_dataset({"object_hue": 2, "scale": 2})
    p = tmp_path / "f.npz"
    np.savez(p, images=ds.images, factors=ds.factors[::-1], factor_sizes=np.array(ds.factor_sizes),
             factor_names=np.array(ds.factor_names))
    with pytest.raises(DataError):
        FactorDataset.load(p)


def test_generation_deterministic():
    a = generate_factor_dataset({"object_hue": 3, "position": 3})
    b = generate_factor_dataset({"object_hue": 3, "position": 3})
    assert np.array_equal(a.images, b.images)


# ------------------------------------------------------------------ CelebA

def test_preprocess_celeba(tmp_path):
    src, dst = tmp_path / "src", tmp_path / "dst"
    (src / "sub").mkdir(parents=True)
    Image.new("RGB", (178, 218), (200, 30, 90)).save(src / "sub" / "a.jpg", quality=100)
    rng = np.random.default_rng(0)
    Image.fromarray(rng.integers(0, 256, (218, 178, 3), dtype=np.uint8)).save(src / "b.png")
    Image.new("RGB", (100, 100)).save(src / "small.png")
    ds = preprocess_celeba(src, dst)
    assert ds.data.shape == (2, 3, 64, 64) and ds.meta["skipped"] == 1
    assert (dst / "sub" / "a.png").exists() and not (dst / "small.png").exists()
    const = np.asarray(Image.open(dst / "sub" / "a.png"), dtype=np.int64).reshape(-1, 3)
    assert (const.max(0) - const.min(0)).max() <= 1
    first = (dst / "b.png").read_bytes()
    preprocess_celeba(src, dst, load=False)
    assert (dst / "b.png").read_bytes() == first
    assert load_image_folder(dst).data.shape == (2, 3, 64, 64)
