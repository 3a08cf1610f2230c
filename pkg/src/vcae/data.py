"""Dataset generation and ingestion."""

from __future__ import annotations

import colorsys
import gzip
import hashlib
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ConfigError

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "VCAE_DATA_ROOT"


class DataError(RuntimeError):
    pass


def data_root(root: str | Path | None = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


@dataclass
class DatasetHandle:
    name: str
    split: str
    data: torch.Tensor
    labels: torch.Tensor | None = None
    indices: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.data) == 0:
            raise DataError(f"{self.name}/{self.split}: empty dataset")

    @property
    def item_shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape[1:])

    @property
    def size(self) -> int:
        return len(self.data)

    def __len__(self):
        return len(self.data)

    def iterate(self, batch_size: int, seed: int):
        """Shuffled minibatches in an order fixed by ``seed``."""
        order = np.random.default_rng(seed).permutation(len(self.data))
        for i in range(0, len(order), batch_size):
            yield self.data[torch.from_numpy(order[i:i + batch_size])]

    def subset(self, n: int, seed: int) -> "DatasetHandle":
        if n >= len(self.data):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self.data), n, replace=False))
        t = torch.from_numpy(idx)
        labels = self.labels[t] if self.labels is not None else None
        base = self.indices[idx] if self.indices is not None else idx
        return DatasetHandle(self.name, self.split, self.data[t], labels, base, dict(self.meta))


# --------------------------------------------------------------------------
# mixture of Gaussians toy

MOG_MEANS = np.array([[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]])
MOG_STD = 0.35


def generate_mog(n: int, seed: int, means: np.ndarray = MOG_MEANS, std: float = MOG_STD):
    """``n`` points from an equal-weight 2D Gaussian mixture, with component labels.

    Component counts are balanced (label i % K, then shuffled).
    """
    k = len(means)
    if n < k:
        raise ConfigError(f"need at least {k} points, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % k)
    points = means[labels] + std * rng.standard_normal((n, means.shape[1]))
    return points, labels


def embedding_matrix(dim: int, seed: int, source_dim: int = 2) -> np.ndarray:
    """Random ``dim x source_dim`` matrix with orthonormal columns."""
    g = np.random.default_rng(seed).standard_normal((dim, source_dim))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def project_highdim(points: np.ndarray, dim: int, seed: int, identity: bool = False) -> np.ndarray:
    """Isometric linear embedding of ``points`` into ``dim`` dimensions."""
    if dim < points.shape[1]:
        raise ConfigError(f"target dimension {dim} below source dimension {points.shape[1]}")
    if identity:
        if dim != points.shape[1]:
            raise ConfigError("identity embedding requires equal dimensions")
        return points.copy()
    return points @ embedding_matrix(dim, seed, points.shape[1]).T


def mog_dataset(n_train: int, n_test: int, dim: int = 100, seed: int = 0,
                embed_seed: int = 1234) -> tuple[DatasetHandle, DatasetHandle]:
    """Train/test MoG splits embedded in ``dim`` dimensions (same embedding for both)."""
    pts, lab = generate_mog(n_train + n_test, seed)
    x = torch.from_numpy(project_highdim(pts, dim, embed_seed)).float()
    idx = np.arange(n_train + n_test)
    tr = DatasetHandle("mog", "train", x[:n_train], torch.from_numpy(lab[:n_train]), idx[:n_train])
    te = DatasetHandle("mog", "test", x[n_train:], torch.from_numpy(lab[n_train:]), idx[n_train:])
    return tr, te


# --------------------------------------------------------------------------
# MNIST

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
# sha256 of the uncompressed IDX files
MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


def _find(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / f"{stem}.gz", root / "mnist" / stem, root / "mnist" / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise DataError(f"missing MNIST file {stem}[.gz] under {root}")


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except OSError as exc:
            raise DataError(f"corrupt gzip file {path}: {exc}") from exc
    return raw


def read_idx(path: str | Path) -> np.ndarray:
    """Parse an IDX file (gzip-transparent). Only unsigned-byte payloads are supported."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08 or ndim not in (1, 3):
        raise DataError(f"{path}: bad IDX magic {raw[:4].hex()}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    if len(payload) != math.prod(dims):
        raise DataError(f"{path}: payload size {len(payload)} does not match dims {dims}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_mnist(root: str | Path | None = None, split: str = "train") -> DatasetHandle:
    if split not in MNIST_FILES:
        raise ValueError(f"unknown split {split!r}")
    root = data_root(root)
    img_stem, lab_stem = MNIST_FILES[split]
    images = read_idx(_find(root, img_stem))
    labels = read_idx(_find(root, lab_stem))
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise DataError(f"inconsistent MNIST {split} files under {root}")
    x = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    return DatasetHandle("mnist", split, x, torch.from_numpy(labels.astype(np.int64)),
                         np.arange(len(x)))


def balanced_subset_indices(labels: np.ndarray, per_class: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    picks = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < per_class:
            raise DataError(f"class {c} has only {len(members)} items")
        picks.append(rng.choice(members, per_class, replace=False))
    return np.sort(np.concatenate(picks))


def reduced_mnist(root: str | Path | None = None, seed: int = 0, per_class: int = 60) -> DatasetHandle:
    """Class-balanced subset of the MNIST training split (600 items by default)."""
    full = load_mnist(root, "train")
    idx = balanced_subset_indices(full.labels.numpy(), per_class, seed)
    t = torch.from_numpy(idx)
    return DatasetHandle("reduced_mnist", "train", full.data[t], full.labels[t], idx)


def verify_mnist(root: str | Path | None = None) -> dict[str, bool]:
    """Check user-supplied MNIST files against the known checksums."""
    root = data_root(root)
    out = {}
    for stems in MNIST_FILES.values():
        for stem in stems:
            digest = hashlib.sha256(_read_bytes(_find(root, stem))).hexdigest()
            out[stem] = digest == MNIST_SHA256[stem]
    return out


# --------------------------------------------------------------------------
# factor datasets

MAX_COMBINATIONS = 10 ** 6
DEFAULT_FACTORS = {"object_hue": 10, "floor_hue": 10, "scale": 6, "position": 8}
KNOWN_FACTORS = ("object_hue", "floor_hue", "wall_hue", "scale", "position", "shape")


@dataclass
class FactorDataset:
    """Images with a complete grid of generative factors.

    Items are stored in row-major factor order: the last factor varies fastest,
    so ``index = sum(value_k * stride_k)``.
    """
    images: np.ndarray  # (N, H, W, C) uint8, or any array-like supporting sorted fancy indexing
    factor_names: list[str]
    factor_sizes: list[int]

    def __post_init__(self):
        if len(self.factor_sizes) < 2:
            raise ConfigError("a factor dataset needs at least 2 factors")
        if len(self.images) != math.prod(self.factor_sizes):
            raise DataError(f"{len(self.images)} images for a grid of {math.prod(self.factor_sizes)}")
        self.strides = np.array([math.prod(self.factor_sizes[i + 1:])
                                 for i in range(len(self.factor_sizes))], dtype=np.int64)

    @property
    def num_factors(self) -> int:
        return len(self.factor_sizes)

    def __len__(self):
        return len(self.images)

    def index_of(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.int64) @ self.strides

    def factors_of(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.int64)
        return (index[..., None] // self.strides) % np.array(self.factor_sizes)

    @property
    def factors(self) -> np.ndarray:
        return self.factors_of(np.arange(len(self)))

    def sample_factors(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return np.stack([rng.integers(0, s, n) for s in self.factor_sizes], axis=1)

    def get_images(self, indices) -> torch.Tensor:
        """Float tensor (n, C, H, W) in [0, 1] for the given item indices."""
        indices = np.asarray(indices)
        order = np.argsort(indices, kind="stable")
        uniq, inverse = np.unique(indices[order], return_inverse=True)
        block = np.asarray(self.images[uniq])[inverse]
        out = np.empty_like(block)
        out[order] = block
        x = torch.from_numpy(out.astype(np.float32) / 255.0)
        return x.permute(0, 3, 1, 2).contiguous()

    def as_tensor(self) -> torch.Tensor:
        return self.get_images(np.arange(len(self)))

    def save(self, path: str | Path):
        """Array archive: images (uint8 NHWC), factors (int64 NxK), factor_sizes, factor_names."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path, images=np.asarray(self.images), factors=self.factors,
                            factor_sizes=np.array(self.factor_sizes, dtype=np.int64),
                            factor_names=np.array(self.factor_names))

    @classmethod
    def load(cls, path: str | Path) -> "FactorDataset":
        try:
            with np.load(path, allow_pickle=False) as d:
                ds = cls(d["images"], [str(s) for s in d["factor_names"]],
                         [int(s) for s in d["factor_sizes"]])
                stored = d["factors"]
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read factor archive {path}: {exc}") from exc
        if not np.array_equal(stored, ds.factors):
            raise DataError(f"{path}: factor array is not in row-major grid order")
        return ds


def _hue_rgb(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h, s, v)) * 255.0


def _render(values: dict[str, int], sizes: dict[str, int], size: int) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.float64)
    half = size // 2
    wall = (_hue_rgb(values["wall_hue"] / sizes["wall_hue"], 0.5, 0.7)
            if "wall_hue" in values else np.array([150.0, 150.0, 150.0]))
    floor = (_hue_rgb(values["floor_hue"] / sizes["floor_hue"], 0.6, 0.8)
             if "floor_hue" in values else np.array([90.0, 90.0, 90.0]))
    img[:half] = wall
    img[half:] = floor
    obj = (_hue_rgb(values["object_hue"] / sizes["object_hue"], 1.0, 1.0)
           if "object_hue" in values else np.array([255.0, 255.0, 255.0]))
    n_scale = sizes.get("scale", 1)
    radius = size * (0.1 + 0.16 * values.get("scale", 0) / max(1, n_scale - 1))
    n_pos = sizes.get("position", 1)
    cx = size * (0.25 + 0.5 * values.get("position", 0) / max(1, n_pos - 1))
    cy = half
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    shape = values.get("shape", 0)
    if shape == 0:
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    elif shape == 1:
        inside = (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
    else:
        inside = (np.abs(xx - cx) + np.abs(yy - cy)) <= radius * 1.3
    img[inside] = obj
    return np.round(img).astype(np.uint8)


def generate_factor_dataset(spec: dict[str, int] | None = None, seed: int = 0,
                            image_size: int = 32) -> FactorDataset:
    """Render one image per factor combination (complete grid).

    ``spec`` maps factor names (from ``KNOWN_FACTORS``) to value counts.
    Rendering is deterministic; ``seed`` is accepted for interface symmetry
    with the other generators and does not change the output.
    """
    spec = dict(DEFAULT_FACTORS if spec is None else spec)
    if len(spec) < 2 or any(v < 2 for v in spec.values()):
        raise ConfigError("need at least 2 factors with at least 2 values each")
    unknown = set(spec) - set(KNOWN_FACTORS)
    if unknown:
        raise ConfigError(f"unknown factors {sorted(unknown)}")
    if spec.get("shape", 0) > 3:
        raise ConfigError("at most 3 shapes are supported")
    total = math.prod(spec.values())
    if total > MAX_COMBINATIONS:
        raise ConfigError(f"factor grid has {total} combinations (> {MAX_COMBINATIONS})")
    names = list(spec)
    sizes = [spec[n] for n in names]
    grid = np.indices(sizes).reshape(len(sizes), -1).T
    images = np.stack([_render(dict(zip(names, row)), spec, image_size) for row in grid])
    return FactorDataset(images, names, sizes)


SHAPES3D_FACTORS = (["floor_hue", "wall_hue", "object_hue", "scale", "shape", "orientation"],
                    [10, 10, 10, 8, 4, 15])


def load_3dshapes(path: str | Path) -> FactorDataset:
    """Open the 3D-Shapes HDF5 file lazily (images stay on disk)."""
    try:
        import h5py
    except ImportError as exc:  # optional dependency
        raise DataError("reading 3D-Shapes needs h5py (pip install artifact[shapes3d])") from exc
    try:
        f = h5py.File(path, "r")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    names, sizes = SHAPES3D_FACTORS
    return FactorDataset(f["images"], list(names), list(sizes))


# --------------------------------------------------------------------------
# CelebA


def preprocess_celeba(src_dir: str | Path, dst_dir: str | Path, crop: int = 140,
                      size: int = 64, load: bool = True) -> DatasetHandle | None:
    """Centre-crop to ``crop`` pixels, bilinear-resize to ``size``, write PNGs.

    Undersized images are skipped and counted in ``meta["skipped"]``.
    """
    from PIL import Image

    src, dst = Path(src_dir), Path(dst_dir)
    files = sorted(p for p in src.rglob("*") if p.suffix.lower() in (".jpg", ".jpeg", ".png"))
    written, skipped = [], 0
    for p in files:
        with Image.open(p) as im:
            im = im.convert("RGB")
            w, h = im.size
            if w < crop or h < crop:
                skipped += 1
                continue
            left, top = (w - crop) // 2, (h - crop) // 2
            out = im.crop((left, top, left + crop, top + crop)).resize((size, size), Image.BILINEAR)
        target = dst / p.relative_to(src).with_suffix(".png")
        target.parent.mkdir(parents=True, exist_ok=True)
        out.save(target, format="PNG")
        written.append(target)
    if skipped:
        log.warning("skipped %d undersized images", skipped)
    if not load:
        return None
    if not written:
        raise DataError(f"no usable images under {src}")
    return load_image_folder(dst, files=written, meta={"skipped": skipped})


def load_image_folder(root: str | Path, files: Sequence[Path] | None = None,
                      meta: dict | None = None) -> DatasetHandle:
    from PIL import Image

    files = sorted(Path(root).rglob("*.png")) if files is None else list(files)
    if not files:
        raise DataError(f"no PNG files under {root}")
    arrs = []
    for p in files:
        with Image.open(p) as im:
            arrs.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
    x = torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()
    return DatasetHandle(Path(root).name, "train", x, None, np.arange(len(x)), dict(meta or {}))
