"""MNIST (IDX) and CIFAR-10 (binary batch) readers, writers and deterministic splits."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class DimensionMismatchError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class LabeledSet:
    images: np.ndarray  # (count, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (count,) int64
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DimensionMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def take(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.images[idx], self.labels[idx], dict(self.provenance, indices=len(idx)))


def _digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _parse_idx(raw: bytes, magic: int, path) -> tuple[list[int], bytes]:
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: IDX header truncated ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: IDX header truncated ({len(raw)} bytes)")
    dims = list(struct.unpack(f">{ndim}I", raw[4:header]))
    payload = raw[header:]
    need = int(np.prod(dims))
    if len(payload) < need:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, header promises {need}")
    if len(payload) > need:
        raise DimensionMismatchError(f"{path}: {len(payload) - need} bytes beyond the declared dimensions")
    return dims, payload


def load_mnist_idx(images_path, labels_path) -> LabeledSet:
    """Read an IDX image/label pair; pixels are scaled by 1/255."""
    raw_i = Path(images_path).read_bytes()
    raw_l = Path(labels_path).read_bytes()
    dims_i, pix = _parse_idx(raw_i, IDX_IMAGES_MAGIC, images_path)
    dims_l, lab = _parse_idx(raw_l, IDX_LABELS_MAGIC, labels_path)
    if dims_i[0] != dims_l[0]:
        raise DimensionMismatchError(f"{dims_i[0]} images vs {dims_l[0]} labels")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(dims_i[0], 1, dims_i[1], dims_i[2])
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return LabeledSet(
        images.astype(np.float64) / 255.0,
        labels,
        {"images_sha256": _digest(raw_i), "labels_sha256": _digest(raw_l)},
    )


def write_mnist_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (count, H, W) and labels (count,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_cifar10_bin(batch_paths) -> LabeledSet:
    """Read CIFAR-10 binary batches (label byte + 3072 planar RGB bytes per record)."""
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    images, labels, digests = [], [], []
    for path in batch_paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise DatasetFormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
        digests.append(_digest(raw))
    imgs = np.concatenate(images) if images else np.zeros((0, 3, 32, 32), np.uint8)
    labs = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    return LabeledSet(imgs.astype(np.float64) / 255.0, labs, {"batch_sha256": digests})


def write_cifar10_bin(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3 * 32 * 32)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.concatenate([labels, images], axis=1).tobytes())


def stratified_take(labels: np.ndarray, pool: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``size`` indices from ``pool`` with classes as balanced as possible.

    Within each class the pool order (already shuffled) is kept; remainders go to
    the lowest class ids first.
    """
    if size > len(pool):
        raise ValueError(f"requested subset of {size} from only {len(pool)} examples")
    classes = np.unique(labels[pool])
    by_class = {c: pool[labels[pool] == c] for c in classes}
    quota = {c: 0 for c in classes}
    remaining = size
    open_classes = list(classes)
    while remaining and open_classes:
        share = max(remaining // len(open_classes), 1)
        for c in list(open_classes):
            if not remaining:
                break
            add = min(share, len(by_class[c]) - quota[c], remaining)
            quota[c] += add
            remaining -= add
            if quota[c] == len(by_class[c]):
                open_classes.remove(c)
    chosen = np.concatenate([by_class[c][: quota[c]] for c in classes])
    return rng.permutation(chosen)


def split_and_subset(data: LabeledSet, train_size: int = 5000, val_size: int = 1000,
                     test_size: int = 1000, seed: int = 0, test_data: LabeledSet | None = None):
    """Deterministic, class-stratified, disjoint train/validation/test subsets.

    With ``test_data`` the test subset is drawn from it and train/val from
    ``data``; otherwise all three come from ``data``. Returns the three sets and
    the index lists used.
    """
    rng = make_rng(seed)
    labels = data.labels
    order = rng.permutation(len(data))
    if test_data is None:
        test_idx = stratified_take(labels, order, test_size, rng)
        order = order[~np.isin(order, test_idx)]
        test = data.take(test_idx)
    else:
        test_idx = stratified_take(test_data.labels, rng.permutation(len(test_data)), test_size, rng)
        test = test_data.take(test_idx)
    val_idx = stratified_take(labels, order, val_size, rng)
    order = order[~np.isin(order, val_idx)]
    train_idx = stratified_take(labels, order, train_size, rng)
    indices = {"train": train_idx, "val": val_idx, "test": test_idx}
    return data.take(train_idx), data.take(val_idx), test, indices


def find_mnist(root) -> tuple[Path, Path, Path, Path] | None:
    """Locate the four standard MNIST IDX files under ``root`` (plain names)."""
    root = Path(root)
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    paths = tuple(root / n for n in names)
    return paths if all(p.exists() for p in paths) else None


def load_digits_as_idx(directory) -> tuple[Path, Path]:
    """Write scikit-learn's bundled 8x8 digits, upsampled to 28x28, as an IDX pair.

    This is a local stand-in for environments without MNIST; it is not MNIST.
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    img = d.images / 16.0
    big = np.kron(img, np.ones((3, 3)))  # 24x24
    big = np.pad(big, ((0, 0), (2, 2), (2, 2)))
    pix = np.rint(big * 255).astype(np.uint8)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ip, lp = directory / "digits-images-idx3-ubyte", directory / "digits-labels-idx1-ubyte"
    write_mnist_idx(ip, lp, pix, d.target)
    return ip, lp
