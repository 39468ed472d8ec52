"""Dataset loading (IDX, CIFAR-10 binary), synthetic data and splits.

All images are float32 arrays laid out (N, C, H, W) with values in [0, 1].
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataError(ValueError):
    """A dataset file is malformed or inconsistent."""

    def __init__(self, kind: str, msg: str):
        self.kind = kind
        super().__init__(f"{kind}: {msg}")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("size_mismatch",
                            f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise DataError("bad_shape", f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("bad_label", f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def _read(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(blob: bytes, magic: int, what: str) -> np.ndarray:
    if len(blob) < 4:
        raise DataError("truncated_payload", f"{what}: file shorter than the magic number")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise DataError("bad_magic", f"{what}: expected 0x{magic:08x}, got 0x{got:08x}")
    ndim = got & 0xFF
    hdr = 4 + 4 * ndim
    if len(blob) < hdr:
        raise DataError("truncated_payload", f"{what}: header cut short")
    dims = struct.unpack(">" + "I" * ndim, blob[4:hdr])
    need = int(np.prod(dims))
    if len(blob) - hdr < need:
        raise DataError("truncated_payload",
                        f"{what}: expected {need} payload bytes, found {len(blob) - hdr}")
    if len(blob) - hdr > need:
        raise DataError("trailing_bytes", f"{what}: {len(blob) - hdr - need} unexpected bytes")
    return np.frombuffer(blob, dtype=np.uint8, offset=hdr).reshape(dims)


def load_mnist_idx(image_path, label_path, num_classes: int = 10) -> Dataset:
    images = _parse_idx(_read(image_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read(label_path), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataError("size_mismatch",
                        f"{images.shape[0]} images vs {labels.shape[0]} labels")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(dataset: Dataset, image_path, label_path) -> None:
    """Write single-channel images back to IDX (pixels rounded to bytes)."""
    x = dataset.images
    if x.shape[1] != 1:
        raise DataError("bad_shape", "IDX images must be single channel")
    raw = np.round(x[:, 0] * 255.0).astype(np.uint8)
    n, h, w = raw.shape
    Path(image_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + raw.tobytes())
    Path(label_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n)
                                 + dataset.labels.astype(np.uint8).tobytes())


def load_cifar10_bin(paths, num_classes: int = 10) -> Dataset:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    xs, ys = [], []
    for p in paths:
        blob = _read(p)
        if len(blob) % CIFAR_RECORD:
            raise DataError("truncated_payload",
                            f"{p}: length {len(blob)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    x = np.concatenate(xs).astype(np.float32) / np.float32(255.0)
    return Dataset(x, np.concatenate(ys), num_classes)


def synthetic_dataset(seed: int, n: int, h: int = 16, w: int = 16, k: int = 4,
                      channels: int = 1, noise: float = 0.08) -> Dataset:
    """Balanced K-class blob images.

    Each class owns a prototype made of three Gaussian blobs at random
    centres; samples jitter the blob intensities and add pixel noise, then
    clip to [0, 1].
    """
    if k < 2:
        raise ValueError("need at least two classes")
    if n < k:
        raise ValueError(f"need n >= k, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    protos = []
    for _ in range(k):
        img = np.zeros((h, w))
        for _ in range(3):
            cy, cx = rng.uniform(2, h - 2), rng.uniform(2, w - 2)
            s = rng.uniform(1.2, 2.2)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        protos.append(img / img.max())
    protos = np.stack(protos)

    labels = np.arange(n) % k
    rng.shuffle(labels)
    scale = rng.uniform(0.7, 1.0, size=(n, 1, 1))
    x = protos[labels] * scale + rng.normal(0, noise, size=(n, h, w))
    x = np.clip(x, 0.0, 1.0)[:, None]
    if channels > 1:
        tint = rng.uniform(0.6, 1.0, size=(n, channels, 1, 1))
        x = np.clip(x * tint, 0.0, 1.0)
    return Dataset(x.astype(np.float32), labels.astype(np.int64), k)


def half_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded disjoint index halves; odd ``n`` puts the extra item first."""
    if n < 2:
        raise ValueError("split_half needs at least two items")
    perm = np.random.default_rng(seed).permutation(n)
    cut = (n + 1) // 2
    return perm[:cut], perm[cut:]


def split_half(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    a, b = half_indices(len(dataset), seed)
    return dataset.subset(a), dataset.subset(b)


def stratified_split(dataset: Dataset, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    per = n_test // dataset.num_classes
    test_idx = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        test_idx.extend(rng.choice(idx, size=min(per, len(idx)), replace=False))
    test_idx = np.sort(np.asarray(test_idx))
    mask = np.ones(len(dataset), bool)
    mask[test_idx] = False
    train_idx = np.flatnonzero(mask)
    return dataset.subset(rng.permutation(train_idx)), dataset.subset(rng.permutation(test_idx))


def bundled_mnist_subset(cache_dir=None) -> tuple[Path, Path]:
    """Materialize the 5000-image MNIST sample shipped with mlxtend as IDX files.

    Returns ``(images_path, labels_path)``; files are written once into
    ``cache_dir`` (default ``~/.cache/pvadv``).
    """
    cache = Path(cache_dir or os.environ.get("PVADV_CACHE", Path.home() / ".cache" / "pvadv"))
    img_p = cache / "mnist5k-images-idx3-ubyte"
    lab_p = cache / "mnist5k-labels-idx1-ubyte"
    if img_p.exists() and lab_p.exists():
        return img_p, lab_p
    try:
        from importlib.resources import files
        src = files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
        with src.open("rb") as fh:
            table = np.loadtxt(gzip.open(fh), delimiter=",", dtype=np.float64)
    except (ModuleNotFoundError, FileNotFoundError) as exc:
        raise DataError("missing_data", "bundled MNIST sample needs the 'mlxtend' package "
                        "(pip install mlxtend) or real IDX files") from exc
    pixels = table[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, 784].astype(np.uint8)
    cache.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    tmp_i, tmp_l = img_p.with_suffix(".tmp"), lab_p.with_suffix(".tmp")
    tmp_i.write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, 28, 28) + pixels.tobytes())
    tmp_l.write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())
    tmp_i.replace(img_p)
    tmp_l.replace(lab_p)
    return img_p, lab_p


def load_dataset(kind: str, data_dir=None, seed: int = 0, n: int | None = None) -> Dataset:
    """Named dataset lookup used by the CLI.

    ``mnist`` reads ``t10k``/``train`` IDX files from ``data_dir``;
    ``mnist-sample`` uses :func:`bundled_mnist_subset`; ``cifar10`` reads
    ``data_batch_*.bin``/``test_batch.bin``; ``synthetic`` builds 16x16 blobs.
    """
    if kind == "synthetic":
        return synthetic_dataset(seed, n or 400, 16, 16, 4)
    if kind == "mnist-sample":
        ds = load_mnist_idx(*bundled_mnist_subset(data_dir))
    elif kind == "mnist":
        if data_dir is None:
            raise DataError("missing_data", "mnist needs --data-dir with IDX files")
        d = Path(data_dir)
        pairs = [("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                 ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")]
        parts = []
        for im, lb in pairs:
            for suffix in ("", ".gz"):
                if (d / (im + suffix)).exists():
                    parts.append(load_mnist_idx(d / (im + suffix), d / (lb + suffix)))
                    break
        if not parts:
            raise DataError("missing_data", f"no IDX files in {d}")
        ds = Dataset(np.concatenate([p.images for p in parts]),
                     np.concatenate([p.labels for p in parts]), 10)
    elif kind == "cifar10":
        if data_dir is None:
            raise DataError("missing_data", "cifar10 needs --data-dir with .bin batches")
        files_ = sorted(Path(data_dir).glob("*_batch*.bin"))
        if not files_:
            raise DataError("missing_data", f"no CIFAR-10 batches in {data_dir}")
        ds = load_cifar10_bin(files_)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if n is not None and n < len(ds):
        ds = ds.subset(np.random.default_rng(seed).permutation(len(ds))[:n])
    return ds
