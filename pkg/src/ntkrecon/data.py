"""Dataset ingestion, task construction, normalisation and image grids."""
from __future__ import annotations

import gzip
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import LabeledDataset, encode_labels

DATA_ENV = "NTKRECON_DATA"

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
CIFAR_VEHICLES = frozenset({0, 1, 8, 9})

TASK_KINDS = {
    # kind: (source, binary?)
    "mnist_odd_even": ("mnist", True),
    "mnist_10": ("mnist", False),
    "cifar_animal_vehicle": ("cifar10", True),
    "cifar_10": ("cifar10", False),
    "digits_odd_even": ("digits", True),
    "digits_10": ("digits", False),
}


class DataFormatError(ValueError):
    pass


class DataUnavailable(FileNotFoundError):
    pass


@dataclass
class RawDataset:
    images: np.ndarray      # (N, d) uint8 (or small ints for the digits set)
    class_ids: np.ndarray
    split: str
    checksum: str
    source: str = ""
    pixel_max: float = 255.0

    def __post_init__(self):
        if len(self.images) != len(self.class_ids):
            raise DataFormatError("image and label counts differ")

    def __len__(self):
        return len(self.images)


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _sha(*blobs) -> str:
    h = hashlib.sha256()
    for b in blobs:
        h.update(b)
    return h.hexdigest()


def parse_idx(buf: bytes, expect_magic: int, name="idx") -> np.ndarray:
    """Parse an IDX array of unsigned bytes (big-endian header)."""
    if len(buf) < 8:
        raise DataFormatError(f"{name}: truncated header ({len(buf)} bytes)")
    magic = int.from_bytes(buf[0:4], "big")
    if magic != expect_magic:
        raise DataFormatError(f"{name}: bad magic 0x{magic:08x} at offset 0, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{name}: truncated header ({len(buf)} bytes)")
    dims = [int.from_bytes(buf[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    size = int(np.prod(dims))
    if len(buf) - header < size:
        raise DataFormatError(f"{name}: truncated body, need {size} bytes after offset {header}, "
                              f"found {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist(images_path, labels_path, split="train") -> RawDataset:
    ib, lb = _read_bytes(images_path), _read_bytes(labels_path)
    images = parse_idx(ib, 0x00000803, str(images_path))
    labels = parse_idx(lb, 0x00000801, str(labels_path))
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise DataFormatError("MNIST labels outside 0..9")
    return RawDataset(images.reshape(len(images), -1), labels.astype(np.int64), split,
                      _sha(ib, lb), "mnist")


def load_cifar10(paths, split="train") -> RawDataset:
    """Concatenate CIFAR-10 binary batches: 1 label byte + 3072 channel-major pixels per record."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels, blobs = [], [], []
    for p in paths:
        buf = _read_bytes(p)
        if len(buf) % 3073:
            raise DataFormatError(f"{p}: size {len(buf)} is not a multiple of 3073")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, 3073)
        if rec.size and rec[:, 0].max() > 9:
            raise DataFormatError(f"{p}: label outside 0..9")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:])
        blobs.append(buf)
    return RawDataset(np.concatenate(images), np.concatenate(labels), split, _sha(*blobs), "cifar10")


def load_digits_raw(split="train") -> RawDataset:
    """The 8x8 scikit-learn digits (pixels 0..16), split 1300 train / rest test.

    A small stand-in used when MNIST is not available locally.
    """
    from sklearn.datasets import load_digits
    b = load_digits()
    images = b.images.reshape(len(b.images), -1).astype(np.uint8)
    sl = slice(0, 1300) if split == "train" else slice(1300, None)
    imgs, ids = images[sl], b.target[sl].astype(np.int64)
    return RawDataset(imgs, ids, split, _sha(imgs.tobytes(), ids.tobytes()), "digits", 16.0)


def _find(root: Path, *names):
    for n in names:
        for cand in (root / n, root / (n + ".gz")):
            if cand.exists():
                return cand
    raise DataUnavailable(f"none of {names} found under {root}")


def load_source(source: str, split="train", data_dir=None) -> RawDataset:
    """Locate and load a dataset from ``data_dir`` (or $NTKRECON_DATA).

    Expected layout: MNIST IDX files (optionally gzipped) in ``<dir>/mnist`` or
    ``<dir>``; CIFAR-10 binary batches in ``<dir>/cifar-10-batches-bin``.
    """
    if source == "digits":
        return load_digits_raw(split)
    root = data_dir or os.environ.get(DATA_ENV)
    if not root:
        raise DataUnavailable(f"set {DATA_ENV} or pass a data directory to load {source}")
    root = Path(root)
    if source == "mnist":
        base = root / "mnist" if (root / "mnist").is_dir() else root
        pre = "train" if split == "train" else "t10k"
        return load_mnist(_find(base, f"{pre}-images-idx3-ubyte", f"{pre}-images.idx3-ubyte"),
                          _find(base, f"{pre}-labels-idx1-ubyte", f"{pre}-labels.idx1-ubyte"), split)
    if source == "cifar10":
        base = root / "cifar-10-batches-bin"
        if not base.is_dir():
            base = root
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        return load_cifar10([_find(base, n) for n in names], split)
    raise ValueError(f"unknown source {source!r}")


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    kind: str = "mnist_odd_even"
    n_per_class: int | None = 10
    seed: int = 0
    normalization: str = "global_mean"
    unit_sphere: bool = False

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.n_per_class is not None and self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.normalization not in ("global_mean", "unit_range"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def source(self):
        return TASK_KINDS[self.kind][0]

    @property
    def binary(self):
        return TASK_KINDS[self.kind][1]

    @property
    def num_classes(self):
        return 1 if self.binary else 10


def binary_side(source: str, class_ids) -> np.ndarray:
    """1 for the positive side: odd digits, or vehicles for CIFAR-10."""
    ids = np.asarray(class_ids)
    if source == "cifar10":
        return np.isin(ids, list(CIFAR_VEHICLES)).astype(np.int64)
    return (ids % 2 == 1).astype(np.int64)


def normalization_for(raw: RawDataset, spec: TaskSpec) -> dict:
    scale = float(raw.pixel_max)
    mean = float(raw.images.mean() / scale) if spec.normalization == "global_mean" else 0.0
    return {"scale": scale, "mean": mean, "unit_sphere": bool(spec.unit_sphere)}


def normalize(pixels, norm: dict) -> np.ndarray:
    X = np.asarray(pixels, dtype=np.float64) / norm["scale"] - norm["mean"]
    if norm.get("unit_sphere"):
        n = np.linalg.norm(X, axis=1, keepdims=True)
        if np.any(n == 0):
            raise ValueError("cannot project a zero image onto the unit sphere")
        X = X / n
    return X


def denormalize(X, norm: dict) -> np.ndarray:
    """Back to pixel units, clamped to the valid range (unit-sphere scaling is not undone)."""
    return np.clip((np.asarray(X, dtype=np.float64) + norm["mean"]) * norm["scale"], 0.0, norm["scale"])


def make_task(raw: RawDataset, spec: TaskSpec, normalization: dict | None = None) -> LabeledDataset:
    """Seeded class-balanced subset with labels and normalised pixels.

    Binary tasks balance the two sides; ``n_per_class=None`` keeps every
    example (for test sets).  Pass the training set's ``normalization`` when
    building the matching test set.
    """
    src = raw.source or spec.source
    ids = binary_side(src, raw.class_ids) if spec.binary else np.asarray(raw.class_ids)
    groups = (0, 1) if spec.binary else tuple(range(10))
    if spec.n_per_class is None:
        idx = np.arange(len(raw))
    else:
        rng = np.random.default_rng(spec.seed)
        picks = []
        for g in groups:
            members = np.flatnonzero(ids == g)
            if len(members) < spec.n_per_class:
                raise ValueError(f"class {g} has {len(members)} examples, need {spec.n_per_class}")
            picks.append(rng.choice(members, spec.n_per_class, replace=False))
        idx = np.sort(np.concatenate(picks))
    norm = normalization if normalization is not None else normalization_for(raw, spec)
    norm = dict(norm, unit_sphere=bool(spec.unit_sphere))
    X = normalize(raw.images[idx], norm)
    Y = encode_labels("binary" if spec.binary else "multiclass", ids[idx])
    return LabeledDataset(X, Y, ids[idx], norm)


def load_task(spec: TaskSpec, data_dir=None, with_test=False):
    """(train, test) datasets for a task; test is None unless requested."""
    raw = load_source(spec.source, "train", data_dir)
    train = make_task(raw, spec)
    if not with_test:
        return train, None
    test_raw = load_source(spec.source, "test", data_dir)
    test = make_task(test_raw, TaskSpec(spec.kind, None, spec.seed, spec.normalization, spec.unit_sphere),
                     train.normalization)
    return train, test


# ---------------------------------------------------------------------------
# image grids

def _tile_shape(d: int):
    s = int(round(np.sqrt(d)))
    if s * s == d:
        return s, 1
    s = int(round(np.sqrt(d / 3)))
    if 3 * s * s == d:
        return s, 3
    raise ValueError(f"cannot lay out images of dimension {d}")


def _layout(n, layout):
    if layout is None:
        cols = int(np.ceil(np.sqrt(n)))
        return int(np.ceil(n / cols)), cols
    rows, cols = layout
    if rows * cols < n:
        raise ValueError(f"layout {layout} too small for {n} images")
    return rows, cols


def export_grid(images, path, normalization: dict, layout=None, pad: int = 0):
    """Write images as a lossless PNG grid after inverting the normalisation."""
    from PIL import Image
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    n, d = images.shape
    s, ch = _tile_shape(d)
    rows, cols = _layout(n, layout)
    px = denormalize(images, normalization) * (255.0 / normalization["scale"])
    px = np.rint(px).astype(np.uint8)
    tiles = px.reshape(n, ch, s, s).transpose(0, 2, 3, 1)  # channel-major to HWC
    canvas = np.zeros((rows * (s + pad), cols * (s + pad), ch), np.uint8)
    for k in range(n):
        r, c = divmod(k, cols)
        canvas[r * (s + pad):r * (s + pad) + s, c * (s + pad):c * (s + pad) + s] = tiles[k]
    Image.fromarray(canvas[..., 0] if ch == 1 else canvas).save(path, format="PNG")
    return Path(path)


def import_grid(path, n: int, d: int, normalization: dict, layout=None, pad: int = 0) -> np.ndarray:
    """Inverse of :func:`export_grid`, returning normalised rows."""
    from PIL import Image
    s, ch = _tile_shape(d)
    rows, cols = _layout(n, layout)
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[..., None]
    out = np.empty((n, d))
    for k in range(n):
        r, c = divmod(k, cols)
        tile = arr[r * (s + pad):r * (s + pad) + s, c * (s + pad):c * (s + pad) + s].astype(np.float64)
        out[k] = tile.transpose(2, 0, 1).reshape(-1)
    return out / 255.0 - normalization["mean"]
